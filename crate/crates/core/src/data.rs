//! Procedural identity images and the binary dataset format.
//!
//! Every identity is a 16-number seed vector. A fixed affine map turns it
//! into the parameters of four oriented gratings and three Gaussian blobs,
//! which are evaluated analytically on a 32×32 grid. Jitter perturbs the
//! sampling grid, brightness and noise; [`degrade`] produces the
//! unconstrained domain.
//!
//! Records carry a domain tag for auditing. Training code reads labeled
//! files through [`LabeledSet`] and unlabeled files through [`UnlabeledSet`],
//! which keeps images only.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const SEED_DIM: usize = 16;
const GRATINGS: usize = 4;
const BLOBS: usize = 3;
const PARAMS: usize = GRATINGS * 4 + BLOBS * 4;
const MAP_SEED: u64 = 0x7E57_1DE4;

pub const MAGIC: &[u8; 4] = b"TSAD";
pub const VERSION: u32 = 1;

pub const MAX_SHIFT: f64 = 2.0;
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_BRIGHTNESS: f64 = 0.1;
pub const JITTER_NOISE: f64 = 0.02;
pub const UR_ATTENUATION: f64 = 0.8;
pub const UC_SEVERITY: (f64, f64) = (0.2, 0.8);
pub const UR_SEVERITY: (f64, f64) = (0.95, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Sc,
    UcRecognizable,
    UcUnrecognizable,
}

impl DomainTag {
    pub fn code(self) -> u8 {
        match self {
            DomainTag::Sc => 0,
            DomainTag::UcRecognizable => 1,
            DomainTag::UcUnrecognizable => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DomainTag::Sc),
            1 => Some(DomainTag::UcRecognizable),
            2 => Some(DomainTag::UcUnrecognizable),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Sc => "sc",
            DomainTag::UcRecognizable => "uc_recognizable",
            DomainTag::UcUnrecognizable => "uc_unrecognizable",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: i64,
    pub seed_vector: [f64; SEED_DIM],
}

impl IdentitySpec {
    /// Seed vector drawn uniformly from `[-1, 1]` on a stream keyed by `id`.
    pub fn generate(global_seed: u64, id: i64) -> Self {
        let mut rng = stream_rng(global_seed, Stream::Identity, id as u64);
        let mut seed_vector = [0.0; SEED_DIM];
        for v in &mut seed_vector {
            *v = rng.random_range(-1.0..=1.0);
        }
        Self { id, seed_vector }
    }
}

/// Specs for `ids`, rejecting any repeated seed vector.
pub fn identity_specs(global_seed: u64, ids: impl IntoIterator<Item = i64>) -> Result<Vec<IdentitySpec>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in ids {
        let spec = IdentitySpec::generate(global_seed, id);
        let key: Vec<u64> = spec.seed_vector.iter().map(|v| v.to_bits()).collect();
        if !seen.insert(key) {
            return Err(Error::Invalid(format!("identity {id} repeats an earlier seed vector")));
        }
        out.push(spec);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
enum Stream {
    Identity = 1,
    Labeled = 2,
    Unlabeled = 3,
    UnlabeledLayout = 4,
    Eval = 5,
}

fn stream_rng(global_seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}

/// Fixed `[PARAMS, SEED_DIM]` matrix with unit-norm rows.
fn param_map() -> Vec<[f64; SEED_DIM]> {
    let mut rng = ChaCha8Rng::seed_from_u64(MAP_SEED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..PARAMS)
        .map(|_| {
            let mut row = [0.0; SEED_DIM];
            for v in &mut row {
                *v = normal.sample(&mut rng);
            }
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
            row
        })
        .collect()
}

/// Rendering parameters in `[-1, 1]`: `√3·M·s`, clipped. The scale gives
/// each parameter unit variance for uniform seed vectors.
fn unit_params(spec: &IdentitySpec) -> [f64; PARAMS] {
    let mut out = [0.0; PARAMS];
    for (o, row) in out.iter_mut().zip(param_map()) {
        let dot: f64 = row.iter().zip(&spec.seed_vector).map(|(a, b)| a * b).sum();
        *o = (3f64.sqrt() * dot).clamp(-1.0, 1.0);
    }
    out
}

struct Grating {
    dir: (f64, f64),
    freq: f64,
    phase: f64,
    amp: f64,
}

struct Blob {
    cx: f64,
    cy: f64,
    width: f64,
    amp: f64,
}

fn pattern(spec: &IdentitySpec) -> (Vec<Grating>, Vec<Blob>) {
    let u = unit_params(spec);
    let gratings = (0..GRATINGS)
        .map(|g| {
            let p = &u[g * 4..g * 4 + 4];
            let theta = PI * p[0];
            Grating {
                dir: (theta.cos(), theta.sin()),
                freq: 0.09 + 0.05 * p[1],
                phase: PI * p[2],
                amp: 0.08 + 0.04 * p[3],
            }
        })
        .collect();
    let blobs = (0..BLOBS)
        .map(|b| {
            let p = &u[GRATINGS * 4 + b * 4..GRATINGS * 4 + b * 4 + 4];
            Blob {
                cx: 9.0 * p[0],
                cy: 9.0 * p[1],
                width: 5.0 + 2.0 * p[2],
                amp: 0.22 * p[3],
            }
        })
        .collect();
    (gratings, blobs)
}

/// Geometric and photometric jitter of one render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub shift: (f64, f64),
    pub rotation: f64,
    pub brightness: f64,
    pub noise: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        shift: (0.0, 0.0),
        rotation: 0.0,
        brightness: 0.0,
        noise: 0.0,
    };

    pub fn draw(rng: &mut impl Rng) -> Self {
        Self {
            shift: (
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            ),
            rotation: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians(),
            brightness: rng.random_range(-MAX_BRIGHTNESS..=MAX_BRIGHTNESS),
            noise: JITTER_NOISE,
        }
    }
}

/// Float render in `[0, 1]`, row-major 32×32.
pub fn render_float(spec: &IdentitySpec, jitter: &Jitter, rng: &mut impl Rng) -> Vec<f64> {
    let (gratings, blobs) = pattern(spec);
    let centre = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    let (sin_r, cos_r) = jitter.rotation.sin_cos();
    let noise = (jitter.noise > 0.0).then(|| Normal::new(0.0, jitter.noise).expect("positive std"));
    let mut out = Vec::with_capacity(IMAGE_PIXELS);
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            // inverse-map the pixel into pattern coordinates
            let dx = px as f64 - centre - jitter.shift.0;
            let dy = py as f64 - centre - jitter.shift.1;
            let x = cos_r * dx + sin_r * dy;
            let y = -sin_r * dx + cos_r * dy;
            let mut v = 0.0;
            for g in &gratings {
                v += g.amp * (2.0 * PI * g.freq * (x * g.dir.0 + y * g.dir.1) + g.phase).sin();
            }
            for b in &blobs {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                v += b.amp * (-d2 / (2.0 * b.width * b.width)).exp();
            }
            let mut v = (0.5 + v) * (1.0 + jitter.brightness);
            if let Some(n) = &noise {
                v += n.sample(rng);
            }
            out.push(v);
        }
    }
    out
}

pub fn quantize(img: &[f64]) -> Vec<u8> {
    img.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(img: &[u8]) -> Vec<f64> {
    img.iter().map(|&v| v as f64 / 255.0).collect()
}

/// Renders one 8-bit image; `jitter_seed = None` gives the canonical,
/// noise-free pattern.
pub fn render_identity(spec: &IdentitySpec, jitter_seed: Option<u64>) -> Vec<u8> {
    match jitter_seed {
        None => quantize(&render_float(spec, &Jitter::NONE, &mut ChaCha8Rng::seed_from_u64(0))),
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = Jitter::draw(&mut rng);
            quantize(&render_float(spec, &j, &mut rng))
        }
    }
}

fn gaussian_blur(img: &[f64], sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let n = IMAGE_SIZE as isize;
    let at = |i: isize| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * img[y * IMAGE_SIZE + at(x as isize + k as isize - radius)];
            }
            tmp[y * IMAGE_SIZE + x] = acc;
        }
    }
    let mut out = vec![0.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * tmp[at(y as isize + k as isize - radius) * IMAGE_SIZE + x];
            }
            out[y * IMAGE_SIZE + x] = acc;
        }
    }
    out
}

/// 4×4 box downsample followed by bilinear upsampling back to 32×32.
fn down_up(img: &[f64]) -> Vec<f64> {
    const F: usize = 4;
    let s = IMAGE_SIZE / F;
    let mut small = vec![0.0; s * s];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            small[(y / F) * s + x / F] += img[y * IMAGE_SIZE + x] / (F * F) as f64;
        }
    }
    let coord = |p: usize| {
        let c = ((p as f64 + 0.5) / F as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = vec![0.0; IMAGE_PIXELS];
    for y in 0..IMAGE_SIZE {
        let (y0, y1, fy) = coord(y);
        for x in 0..IMAGE_SIZE {
            let (x0, x1, fx) = coord(x);
            let top = small[y0 * s + x0] * (1.0 - fx) + small[y0 * s + x1] * fx;
            let bottom = small[y1 * s + x0] * (1.0 - fx) + small[y1 * s + x1] * fx;
            out[y * IMAGE_SIZE + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Unconstrained-domain degradation of a float image: blur, optional 4×
/// resample, signal attenuation toward mid-gray, additive noise and contrast
/// reduction. Severity 0 returns the input untouched.
pub fn degrade(img: &[f64], severity: f64, attenuation: f64, rng: &mut impl Rng) -> Vec<f64> {
    let severity = severity.clamp(0.0, 1.0);
    if severity == 0.0 && attenuation == 0.0 {
        return img.to_vec();
    }
    let mut out = if severity > 0.0 {
        gaussian_blur(img, 0.5 + 2.5 * severity)
    } else {
        img.to_vec()
    };
    if severity > 0.5 {
        out = down_up(&out);
    }
    if attenuation > 0.0 {
        out.iter_mut().for_each(|v| *v = 0.5 + (1.0 - attenuation) * (*v - 0.5));
    }
    if severity > 0.0 {
        let noise = Normal::new(0.0, 0.05 * severity).expect("positive std");
        out.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    let contrast = 1.0 - 0.5 * severity;
    out.iter_mut().for_each(|v| *v = 0.5 + contrast * (*v - 0.5));
    out
}

/// [`degrade`] on an 8-bit image without attenuation.
pub fn degrade_uc(img: &[u8], severity: f64, rng: &mut impl Rng) -> Vec<u8> {
    quantize(&degrade(&dequantize(img), severity, 0.0, rng))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub image: Vec<u8>,
    pub label: i32,
    pub tag: DomainTag,
}

/// In-memory dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: u32,
    pub height: u32,
    pub width: u32,
    pub records: Vec<SampleRecord>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>) -> Self {
        Self {
            channels: 1,
            height: IMAGE_SIZE as u32,
            width: IMAGE_SIZE as u32,
            records,
        }
    }

    pub fn pixels_per_image(&self) -> usize {
        (self.channels * self.height * self.width) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.pixels_per_image();
        let mut out = Vec::with_capacity(28 + self.records.len() * (5 + n));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for d in [self.channels, self.height, self.width] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.label.to_le_bytes());
            out.push(r.tag.code());
            out.extend_from_slice(&r.image);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 28 {
            return Err(format_err(path, format!("file is {} bytes, shorter than the header", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(format_err(
                path,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&bytes[..4]), "TSAD"),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(format_err(path, format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let (channels, height, width) = (u32_at(16), u32_at(20), u32_at(24));
        let n = (channels * height * width) as usize;
        let expected = 28 + count * (5 + n);
        if bytes.len() != expected {
            return Err(format_err(
                path,
                format!("{count} records of {n} pixels need {expected} bytes, file has {}", bytes.len()),
            ));
        }
        let mut records = Vec::with_capacity(count);
        let mut o = 28;
        for i in 0..count {
            let label = i32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
            let tag = DomainTag::from_code(bytes[o + 4])
                .ok_or_else(|| format_err(path, format!("record {i} has unknown domain tag {}", bytes[o + 4])))?;
            records.push(SampleRecord {
                image: bytes[o + 5..o + 5 + n].to_vec(),
                label,
                tag,
            });
            o += 5 + n;
        }
        Ok(Self {
            channels,
            height,
            width,
            records,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn count(&self, tag: DomainTag) -> usize {
        self.records.iter().filter(|r| r.tag == tag).count()
    }

    fn check_image_shape(&self, path: &Path) -> Result<()> {
        if (self.channels, self.height, self.width) != (1, IMAGE_SIZE as u32, IMAGE_SIZE as u32) {
            return Err(format_err(
                path,
                format!(
                    "images are {}x{}x{}, expected 1x{IMAGE_SIZE}x{IMAGE_SIZE}",
                    self.channels, self.height, self.width
                ),
            ));
        }
        Ok(())
    }
}

/// Labeled training images with class indices `0..num_classes`.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    images: Vec<Vec<u8>>,
    labels: Vec<i64>,
    num_classes: usize,
}

impl LabeledSet {
    pub fn read(path: &Path) -> Result<Self> {
        let ds = Dataset::read(path)?;
        ds.check_image_shape(path)?;
        Self::from_dataset(ds, path)
    }

    pub fn from_dataset(ds: Dataset, path: &Path) -> Result<Self> {
        if ds.records.is_empty() {
            return Err(format_err(path, "labeled file holds no records"));
        }
        let mut images = Vec::with_capacity(ds.records.len());
        let mut labels = Vec::with_capacity(ds.records.len());
        for (i, r) in ds.records.into_iter().enumerate() {
            if r.label < 0 || r.tag != DomainTag::Sc {
                return Err(format_err(
                    path,
                    format!("record {i} is not a labeled sc sample (label {}, tag {})", r.label, r.tag.as_str()),
                ));
            }
            images.push(r.image);
            labels.push(r.label as i64);
        }
        let num_classes = *labels.iter().max().expect("non-empty") as usize + 1;
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<i64>)> {
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        Ok((images_to_tensor(&imgs)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Unlabeled images; labels and domain tags are dropped when reading.
#[derive(Clone, Debug)]
pub struct UnlabeledSet {
    images: Vec<Vec<u8>>,
}

impl UnlabeledSet {
    pub fn read(path: &Path) -> Result<Self> {
        let ds = Dataset::read(path)?;
        ds.check_image_shape(path)?;
        if ds.records.is_empty() {
            return Err(format_err(path, "unlabeled file holds no records"));
        }
        Ok(Self {
            images: ds.records.into_iter().map(|r| r.image).collect(),
        })
    }

    pub fn from_images(images: Vec<Vec<u8>>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let imgs: Vec<&[u8]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        images_to_tensor(&imgs)
    }
}

/// Stacks 8-bit 32×32 images into `[B, 1, 32, 32]` scaled to `[-1, 1]`.
pub fn images_to_tensor<T: Scalar>(images: &[&[u8]]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_PIXELS);
    for img in images {
        if img.len() != IMAGE_PIXELS {
            return Err(Error::Invalid(format!("image has {} pixels, expected {IMAGE_PIXELS}", img.len())));
        }
        data.extend(img.iter().map(|&v| T::from_f64(v as f64 / 127.5 - 1.0)));
    }
    Ok(Tensor::new(vec![images.len(), 1, IMAGE_SIZE, IMAGE_SIZE], data)?)
}

/// Sizes and seed of a generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_identities: usize,
    pub imgs_per_id: usize,
    pub unlabeled_identities: usize,
    pub unlabeled_size: usize,
    pub ur_fraction: f64,
    pub eval_identities: usize,
    pub eval_probes_per_id: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_identities: 50,
            imgs_per_id: 100,
            unlabeled_identities: 50,
            unlabeled_size: 1000,
            ur_fraction: 0.2,
            eval_identities: 50,
            eval_probes_per_id: 4,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.imgs_per_id == 0 {
            return Err(Error::Invalid("labeled split needs at least one identity and image".into()));
        }
        if self.unlabeled_identities == 0 || self.unlabeled_size == 0 {
            return Err(Error::Invalid("unlabeled split needs at least one identity and image".into()));
        }
        if self.eval_identities == 0 || self.eval_probes_per_id == 0 {
            return Err(Error::Invalid("eval split needs at least one identity and probe".into()));
        }
        if !(0.0..=1.0).contains(&self.ur_fraction) {
            return Err(Error::Invalid(format!("ur_fraction {} outside [0, 1]", self.ur_fraction)));
        }
        Ok(())
    }

    pub fn ur_count(&self) -> usize {
        (self.ur_fraction * self.unlabeled_size as f64).round() as usize
    }

    /// Identity ids of the three splits, disjoint by construction.
    pub fn identity_ranges(&self) -> [std::ops::Range<i64>; 3] {
        let a = self.num_identities as i64;
        let b = a + self.unlabeled_identities as i64;
        let c = b + self.eval_identities as i64;
        [0..a, a..b, b..c]
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_identities = {}\nimgs_per_id = {}\nunlabeled_identities = {}\nunlabeled_size = {}\n\
             ur_fraction = {}\neval_identities = {}\neval_probes_per_id = {}\nseed = {}\n",
            self.num_identities,
            self.imgs_per_id,
            self.unlabeled_identities,
            self.unlabeled_size,
            self.ur_fraction,
            self.eval_identities,
            self.eval_probes_per_id,
            self.seed
        )
    }
}

/// Semi-constrained renders, `imgs_per_id` per identity, labeled by identity
/// index.
pub fn generate_labeled(cfg: &DataConfig) -> Result<Dataset> {
    let specs = identity_specs(cfg.seed, cfg.identity_ranges()[0].clone())?;
    let n = cfg.num_identities * cfg.imgs_per_id;
    let records = (0..n)
        .map(|i| {
            let id = i / cfg.imgs_per_id;
            let mut rng = stream_rng(cfg.seed, Stream::Labeled, i as u64);
            let j = Jitter::draw(&mut rng);
            SampleRecord {
                image: quantize(&render_float(&specs[id], &j, &mut rng)),
                label: id as i32,
                tag: DomainTag::Sc,
            }
        })
        .collect();
    Ok(Dataset::new(records))
}

/// Degraded renders of the unlabeled identities; exactly
/// [`DataConfig::ur_count`] records are made unrecognizable.
pub fn generate_unlabeled(cfg: &DataConfig) -> Result<Dataset> {
    let specs = identity_specs(cfg.seed, cfg.identity_ranges()[1].clone())?;
    let n = cfg.unlabeled_size;
    let mut order: Vec<usize> = (0..n).collect();
    let mut layout = stream_rng(cfg.seed, Stream::UnlabeledLayout, 0);
    for i in (1..n).rev() {
        order.swap(i, layout.random_range(0..=i));
    }
    let mut is_ur = vec![false; n];
    for &i in &order[..cfg.ur_count()] {
        is_ur[i] = true;
    }
    let records = (0..n)
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, Stream::Unlabeled, i as u64);
            let spec = &specs[rng.random_range(0..specs.len())];
            let j = Jitter::draw(&mut rng);
            let clean = render_float(spec, &j, &mut rng);
            let (image, tag) = if is_ur[i] {
                let s = rng.random_range(UR_SEVERITY.0..=UR_SEVERITY.1);
                (degrade(&clean, s, UR_ATTENUATION, &mut rng), DomainTag::UcUnrecognizable)
            } else {
                let s = rng.random_range(UC_SEVERITY.0..=UC_SEVERITY.1);
                (degrade(&clean, s, 0.0, &mut rng), DomainTag::UcRecognizable)
            };
            SampleRecord {
                image: quantize(&image),
                label: -1,
                tag,
            }
        })
        .collect();
    Ok(Dataset::new(records))
}

/// Evaluation identities: per identity one semi-constrained gallery image
/// (tag `sc`) followed by `eval_probes_per_id` degraded probes.
pub fn generate_eval(cfg: &DataConfig) -> Result<Dataset> {
    let specs = identity_specs(cfg.seed, cfg.identity_ranges()[2].clone())?;
    let per = 1 + cfg.eval_probes_per_id;
    let records = (0..specs.len() * per)
        .map(|i| {
            let (id, k) = (i / per, i % per);
            let mut rng = stream_rng(cfg.seed, Stream::Eval, i as u64);
            let j = Jitter::draw(&mut rng);
            let clean = render_float(&specs[id], &j, &mut rng);
            let (image, tag) = if k == 0 {
                (clean, DomainTag::Sc)
            } else {
                let s = rng.random_range(UC_SEVERITY.0..=UC_SEVERITY.1);
                (degrade(&clean, s, 0.0, &mut rng), DomainTag::UcRecognizable)
            };
            SampleRecord {
                image: quantize(&image),
                label: id as i32,
                tag,
            }
        })
        .collect();
    Ok(Dataset::new(records))
}

/// Paths of the three files written by [`generate_dataset`].
#[derive(Clone, Debug)]
pub struct DatasetPaths {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub eval: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            labeled: dir.join("labeled.tsad"),
            unlabeled: dir.join("unlabeled.tsad"),
            eval: dir.join("eval.tsad"),
        }
    }
}

/// Writes the labeled, unlabeled and eval files plus a `.txt` sidecar next
/// to each recording the generation config.
pub fn generate_dataset(cfg: &DataConfig, dir: &Path) -> Result<DatasetPaths> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::in_dir(dir);
    for (path, ds, split) in [
        (&paths.labeled, generate_labeled(cfg)?, "labeled"),
        (&paths.unlabeled, generate_unlabeled(cfg)?, "unlabeled"),
        (&paths.eval, generate_eval(cfg)?, "eval"),
    ] {
        ds.write(path)?;
        let sidecar = path.with_extension("txt");
        let mut f = fs::File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        write!(f, "split = {split}\nrecords = {}\n{}", ds.records.len(), cfg.to_text())
            .map_err(|e| Error::io(&sidecar, e))?;
    }
    Ok(paths)
}
