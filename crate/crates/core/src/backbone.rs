//! Bias-free convolutional encoder `E = E2 ∘ E1` and the prototype head.
//!
//! Every conv layer is 3x3 with padding 1 followed by ReLU. The first
//! `split` layers form `E1`; the rest, a global mean pool, a bias-free
//! projection and ℓ2 normalization form `E2`. Nothing couples samples within
//! a batch, and the whole encoder is positively homogeneous.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const KERNEL: usize = 3;
const PAD: usize = 1;
pub const EPS_NORM: f64 = 1e-8;
/// Allowed deviation from unit norm for inputs to [`logits`].
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("{stage} expects input shape [B, {expected:?}], got {got:?}")]
    InputShape {
        stage: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-finite activation after E2 layer {layer}")]
    NonFinite { layer: usize },
    #[error("{what} row {row} has norm {norm}, expected 1")]
    NormViolation { what: &'static str, row: usize, norm: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Number of conv layers in `E1`.
    pub split: usize,
    pub embed_dim: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            input_size: 32,
            input_channels: 1,
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            split: 2,
            embed_dim: 64,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Arch(m));
        if self.channels.is_empty() {
            return fail("at least one conv layer is required".into());
        }
        if self.channels.len() != self.strides.len() {
            return fail(format!(
                "{} channel entries but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.split == 0 || self.split > self.channels.len() {
            return fail(format!("split {} outside 1..={}", self.split, self.channels.len()));
        }
        if self.embed_dim < 2 {
            return fail("embed_dim must be at least 2".into());
        }
        if self.input_size == 0 || self.input_channels == 0 {
            return fail("input size and channels must be positive".into());
        }
        if self.channels.iter().chain(&self.strides).any(|&v| v == 0) {
            return fail("channels and strides must be positive".into());
        }
        Ok(())
    }

    fn spatial_after(&self, layers: usize) -> usize {
        self.strides[..layers]
            .iter()
            .fold(self.input_size, |s, &st| (s + 2 * PAD - KERNEL) / st + 1)
    }

    /// `[c, h, w]` of the style space between `E1` and `E2`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = self.spatial_after(self.split);
        [self.channels[self.split - 1], s, s]
    }

    fn conv_in(&self, i: usize) -> usize {
        if i == 0 {
            self.input_channels
        } else {
            self.channels[i - 1]
        }
    }
}

/// Graph handles of the encoder weights.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub convs: Vec<Var>,
    pub proj: Var,
}

/// Pre- and post-normalization outputs of `E2`.
#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub raw: Var,
    pub z: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    arch: ArchSpec,
    convs: Vec<Tensor<T>>,
    proj: Tensor<T>,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl<T: Scalar> Backbone<T> {
    /// He-normal initialization from a fixed seed.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = (0..arch.channels.len())
            .map(|i| {
                let cin = arch.conv_in(i);
                let fan_in = (cin * KERNEL * KERNEL) as f64;
                normal_tensor(&mut rng, vec![arch.channels[i], cin, KERNEL, KERNEL], (2.0 / fan_in).sqrt())
            })
            .collect();
        let last = *arch.channels.last().unwrap();
        let proj = normal_tensor(&mut rng, vec![arch.embed_dim, last], (2.0 / last as f64).sqrt());
        Ok(Self { arch, convs, proj })
    }

    pub fn from_parts(arch: ArchSpec, convs: Vec<Tensor<T>>, proj: Tensor<T>) -> Result<Self, ModelError> {
        arch.validate()?;
        let fresh = Self::new(arch.clone(), 0)?;
        for (i, (a, b)) in fresh.convs.iter().zip(&convs).enumerate() {
            if a.shape() != b.shape() {
                return Err(ModelError::Arch(format!(
                    "conv {i} weight shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if convs.len() != fresh.convs.len() || proj.shape() != fresh.proj.shape() {
            return Err(ModelError::Arch("parameter count or projection shape mismatch".into()));
        }
        Ok(Self { arch, convs, proj })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Moves the E1/E2 boundary without touching the weights.
    pub fn with_split(mut self, split: usize) -> Result<Self, ModelError> {
        self.arch.split = split;
        self.arch.validate()?;
        Ok(self)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("backbone.conv{i}"), w))
            .collect();
        out.push(("backbone.proj".into(), &self.proj));
        out
    }

    /// Hash of every weight bit; changes whenever any parameter changes.
    pub fn digest(&self) -> String {
        let named = self.named_params();
        crate::tensor::digest(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.convs.iter_mut().collect();
        out.push(&mut self.proj);
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BackboneVars {
        BackboneVars {
            convs: self.convs.iter().map(|w| g.leaf(w.clone(), trainable)).collect(),
            proj: g.leaf(self.proj.clone(), trainable),
        }
    }

    /// `h = E1(x)` for `x: [B, c_in, S, S]`.
    pub fn forward_e1(&self, g: &mut Graph<T>, vars: &BackboneVars, x: Var) -> Result<Var, ModelError> {
        let expected = vec![self.arch.input_channels, self.arch.input_size, self.arch.input_size];
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(ModelError::InputShape {
                stage: "E1",
                expected,
                got: shape.to_vec(),
            });
        }
        let mut h = x;
        for i in 0..self.arch.split {
            let c = g.conv2d(h, vars.convs[i], self.arch.strides[i], PAD)?;
            h = g.relu(c);
        }
        Ok(h)
    }

    /// `z = E2(h)`, returning both the raw projection and its ℓ2-normalized
    /// rows.
    pub fn forward_e2(&self, g: &mut Graph<T>, vars: &BackboneVars, h: Var) -> Result<Embedding, ModelError> {
        let expected = self.arch.feature_shape().to_vec();
        let shape = g.shape(h);
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(ModelError::InputShape {
                stage: "E2",
                expected,
                got: shape.to_vec(),
            });
        }
        let check = |g: &Graph<T>, v: Var, layer: usize| {
            if g.value(v).all_finite() {
                Ok(())
            } else {
                Err(ModelError::NonFinite { layer })
            }
        };
        check(g, h, 0)?;
        let mut a = h;
        let mut layer = 0;
        for i in self.arch.split..self.arch.channels.len() {
            let c = g.conv2d(a, vars.convs[i], self.arch.strides[i], PAD)?;
            a = g.relu(c);
            layer += 1;
            check(g, a, layer)?;
        }
        let pooled = g.mean(a, &[2, 3])?;
        let raw = g.linear(pooled, vars.proj)?;
        check(g, raw, layer + 1)?;
        let z = g.l2_normalize(raw, T::from_f64(EPS_NORM))?;
        Ok(Embedding { raw, z })
    }

    pub fn forward_full(&self, g: &mut Graph<T>, vars: &BackboneVars, x: Var) -> Result<Embedding, ModelError> {
        let h = self.forward_e1(g, vars, x)?;
        self.forward_e2(g, vars, h)
    }

    /// Gradient-free `E1` on a batch of images.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = self.forward_e1(&mut g, &vars, xv)?;
        Ok(g.value(h).clone())
    }

    /// Gradient-free `E2`, returning `(raw, normalized)` embeddings.
    pub fn embed_features(&self, h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let e = self.forward_e2(&mut g, &vars, hv)?;
        Ok((g.value(e.raw).clone(), g.value(e.z).clone()))
    }

    /// Gradient-free full forward, returning `(raw, normalized)` embeddings.
    pub fn embed(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let e = self.forward_full(&mut g, &vars, xv)?;
        Ok((g.value(e.raw).clone(), g.value(e.z).clone()))
    }
}

/// Unit-norm class prototypes `W: [num_classes, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeHead<T> {
    weight: Tensor<T>,
}

impl<T: Scalar> PrototypeHead<T> {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = Self {
            weight: normal_tensor(&mut rng, vec![num_classes, dim], 1.0),
        };
        head.renormalize();
        head
    }

    pub fn from_weight(weight: Tensor<T>) -> Result<Self, ModelError> {
        if weight.rank() != 2 {
            return Err(ModelError::Arch(format!("prototype shape {:?} is not rank 2", weight.shape())));
        }
        Ok(Self { weight })
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Rescales every prototype to unit norm; zero rows are left as is.
    pub fn renormalize(&mut self) {
        let d = self.weight.shape()[1];
        for row in self.weight.data_mut().chunks_mut(d) {
            let n = row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v = *v / n);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Var {
        g.leaf(self.weight.clone(), trainable)
    }
}

pub(crate) fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &'static str) -> Result<(), ModelError> {
    let d = t.shape()[1];
    for (row, r) in t.data().chunks(d).enumerate() {
        let norm = r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(ModelError::NormViolation { what, row, norm });
        }
    }
    Ok(())
}

/// Cosine logits `z W^T` for unit-norm embeddings and prototypes.
pub fn logits<T: Scalar>(g: &mut Graph<T>, z: Var, head: Var) -> Result<Var, ModelError> {
    for (v, what) in [(z, "embedding"), (head, "prototype")] {
        if g.shape(v).len() != 2 {
            return Err(ModelError::InputShape {
                stage: "logits",
                expected: vec![],
                got: g.shape(v).to_vec(),
            });
        }
        check_unit_rows(g.value(v), what)?;
    }
    Ok(g.linear(z, head)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rng, uniform};

    fn model() -> Backbone<f64> {
        Backbone::new(ArchSpec::default(), 11).unwrap()
    }

    #[test]
    fn default_shapes() {
        let m = model();
        let mut r = rng(1);
        let x = uniform(&mut r, &[8, 1, 32, 32], -1.0, 1.0);
        let h = m.features(&x).unwrap();
        assert_eq!(h.shape(), &[8, 32, 16, 16]);
        let (raw, z) = m.embed_features(&h).unwrap();
        assert_eq!(raw.shape(), &[8, 64]);
        assert_eq!(z.shape(), &[8, 64]);
        for row in z.data().chunks(64) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_image_is_deterministic() {
        let m = model();
        let x = Tensor::zeros(vec![2, 1, 32, 32]);
        let a = m.features(&x).unwrap();
        let b = m.features(&x).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let m = model();
        let x = Tensor::zeros(vec![1, 1, 28, 28]);
        assert!(matches!(m.features(&x), Err(ModelError::InputShape { stage: "E1", .. })));
        let h = Tensor::zeros(vec![1, 16, 16, 16]);
        assert!(matches!(m.embed_features(&h), Err(ModelError::InputShape { stage: "E2", .. })));
    }

    #[test]
    fn split_consistency_for_every_split() {
        let mut r = rng(2);
        let x = uniform(&mut r, &[3, 1, 32, 32], -1.0, 1.0);
        let full = model().embed(&x).unwrap().1;
        for split in 1..=3 {
            let m = model().with_split(split).unwrap();
            let h = m.features(&x).unwrap();
            assert_eq!(h.shape()[1..], m.arch().feature_shape());
            let z = m.embed_features(&h).unwrap().1;
            for (a, b) in z.data().iter().zip(full.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(model().with_split(0).is_err());
        assert!(model().with_split(4).is_err());
    }

    #[test]
    fn e2_is_positively_homogeneous() {
        let m = model();
        let mut r = rng(3);
        let x = uniform(&mut r, &[2, 1, 32, 32], -1.0, 1.0);
        let h = m.features(&x).unwrap();
        let doubled = Tensor::new(h.shape().to_vec(), h.data().iter().map(|v| 2.0 * v).collect()).unwrap();
        let (raw1, z1) = m.embed_features(&h).unwrap();
        let (raw2, z2) = m.embed_features(&doubled).unwrap();
        for (a, b) in raw1.data().iter().zip(raw2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in z1.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = model();
        let mut r = rng(4);
        let x = uniform(&mut r, &[8, 1, 32, 32], -1.0, 1.0);
        let z8 = m.embed(&x).unwrap().1;
        for i in [0, 5] {
            let xi = x.select_rows(&[i]).unwrap();
            let z1 = m.embed(&xi).unwrap().1;
            for (a, b) in z1.data().iter().zip(z8.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let perm = [7, 2, 5, 0, 1, 6, 3, 4];
        let zp = m.embed(&x.select_rows(&perm).unwrap()).unwrap().1;
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in zp.row(k).iter().zip(z8.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_features_are_reported() {
        let m = model();
        let mut h = Tensor::<f64>::zeros(vec![1, 32, 16, 16]);
        h.data_mut()[3] = f64::NAN;
        assert!(matches!(m.embed_features(&h), Err(ModelError::NonFinite { layer: 0 })));
    }

    #[test]
    fn logits_are_cosines() {
        let mut r = rng(5);
        let head = PrototypeHead::<f64>::new(5, 4, 9);
        let zt = uniform(&mut r, &[3, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let zr = g.constant(zt);
        let z = g.l2_normalize(zr, 1e-8).unwrap();
        let w = head.bind(&mut g, false);
        let l = logits(&mut g, z, w).unwrap();
        let zv = g.value(z).clone();
        for i in 0..3 {
            for j in 0..5 {
                let dot: f64 = zv.row(i).iter().zip(head.weight().row(j)).map(|(a, b)| a * b).sum();
                let got = g.value(l).data()[i * 5 + j];
                assert!((got - dot).abs() < 1e-14);
                assert!(got.abs() <= 1.0 + 1e-6);
            }
        }
        // z equal to a prototype, and z orthogonal to it
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let z = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap());
        let l = logits(&mut g, z, w).unwrap();
        assert_eq!(g.value(l).data(), &[1.0, 0.0]);
        let bad = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, 1.0]).unwrap());
        assert!(matches!(logits(&mut g, bad, w), Err(ModelError::NormViolation { row: 0, .. })));
    }

    #[test]
    fn prototypes_are_unit_rows() {
        let head = PrototypeHead::<f64>::new(7, 5, 1);
        for r in 0..7 {
            let n: f64 = head.weight().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }
}
