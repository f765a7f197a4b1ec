//! Verification and identification metrics, and the style-swap probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{check_unit_rows, Backbone};
use crate::config::{EntropyInput, EvalSettings};
use crate::data::{images_to_tensor, Dataset, DomainTag, UnlabeledSet};
use crate::error::{Error, Result};
use crate::recognizability::{entropy_upper_bound, rank_lowest};
use crate::style::{adain, stats_of, StyleStats};
use crate::tensor::{Graph, Scalar, Tensor};

/// Images per forward pass during embedding extraction.
pub const EMBED_BATCH: usize = 128;

/// True-accept rate at the smallest observed score (genuine or impostor, or
/// `+∞`) whose false-accept rate is at most `far`. Scores at or above the
/// threshold are accepted.
pub fn tar_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Invalid("tar_at_far needs genuine and impostor scores".into()));
    }
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::Invalid(format!("far {far} outside (0, 1]")));
    }
    if genuine.iter().chain(impostor).any(|s| s.is_nan()) {
        return Err(Error::Invalid("scores contain NaN".into()));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let n = imp.len() as f64;
    let admissible = |t: f64| (imp.len() - imp.partition_point(|&s| s < t)) as f64 / n <= far;
    Ok(genuine.iter().filter(|&&s| admissible(s)).count() as f64 / genuine.len() as f64)
}

/// Row-wise dot products `a b^T` of two `[n, d]` and `[m, d]` tensors.
pub fn cosine_matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::Invalid(format!(
            "cosine needs [n, d] and [m, d], got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let d = a.shape()[1];
    Ok(a.data()
        .chunks(d)
        .map(|p| {
            b.data()
                .chunks(d)
                .map(|g| p.iter().zip(g).map(|(x, y)| x.as_f64() * y.as_f64()).sum())
                .collect()
        })
        .collect())
}

/// 0-based position of the first gallery entry of `id` in the probe's
/// ranking, highest similarity first and ties to the lower gallery index.
fn true_rank(scores: &[f64], gallery_ids: &[i64], id: i64) -> Option<usize> {
    let target = gallery_ids
        .iter()
        .enumerate()
        .filter(|&(_, &g)| g == id)
        .map(|(j, _)| j)
        .min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))?;
    let st = scores[target];
    Some(
        scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > st || (s == st && j < target))
            .count(),
    )
}

/// Per-probe 0-based rank of the true identity.
pub fn probe_ranks<T: Scalar>(
    gallery: &Tensor<T>,
    gallery_ids: &[i64],
    probes: &Tensor<T>,
    probe_ids: &[i64],
) -> Result<Vec<usize>> {
    check_unit_rows(gallery, "gallery embedding")?;
    check_unit_rows(probes, "probe embedding")?;
    if gallery.shape()[0] != gallery_ids.len() || probes.shape()[0] != probe_ids.len() {
        return Err(Error::Invalid("embedding and id counts differ".into()));
    }
    let sims = cosine_matrix(probes, gallery)?;
    sims.iter()
        .zip(probe_ids)
        .enumerate()
        .map(|(probe, (row, &id))| true_rank(row, gallery_ids, id).ok_or(Error::MissingIdentity { probe, id }))
        .collect()
}

/// Fraction of probes whose identity is among the `k` most similar gallery
/// entries.
pub fn rank_k<T: Scalar>(
    gallery: &Tensor<T>,
    gallery_ids: &[i64],
    probes: &Tensor<T>,
    probe_ids: &[i64],
    k: usize,
) -> Result<f64> {
    let ranks = probe_ranks(gallery, gallery_ids, probes, probe_ids)?;
    Ok(accuracy_at(&ranks, k))
}

fn accuracy_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64
}

/// Unit embeddings of 8-bit images, in order.
pub fn embed_images<T: Scalar>(backbone: &Backbone<T>, images: &[&[u8]]) -> Result<Tensor<T>> {
    let mut parts = Vec::new();
    for chunk in images.chunks(EMBED_BATCH) {
        let x = images_to_tensor::<T>(chunk)?;
        parts.push(backbone.embed(&x)?.1);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

/// Unit embeddings after replacing each image's feature statistics with the
/// matching row of `styles`.
pub fn embed_restyled<T: Scalar>(backbone: &Backbone<T>, images: &[&[u8]], styles: &StyleStats<T>) -> Result<Tensor<T>> {
    if styles.batch() != images.len() {
        return Err(Error::Invalid(format!(
            "{} styles for {} images",
            styles.batch(),
            images.len()
        )));
    }
    let mut parts = Vec::new();
    for (c, chunk) in images.chunks(EMBED_BATCH).enumerate() {
        let rows: Vec<usize> = (c * EMBED_BATCH..c * EMBED_BATCH + chunk.len()).collect();
        let target = styles.select_rows(&rows)?;
        let h = backbone.features(&images_to_tensor::<T>(chunk)?)?;
        let mut g = Graph::new();
        let hv = g.constant(h);
        let tv = target.bind(&mut g, false);
        let swapped = adain(&mut g, hv, tv)?;
        let h_swapped = g.value(swapped).clone();
        parts.push(backbone.embed_features(&h_swapped)?.1);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs)?)
}

/// Feature statistics of each image.
pub fn image_styles<T: Scalar>(backbone: &Backbone<T>, images: &[&[u8]]) -> Result<StyleStats<T>> {
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for chunk in images.chunks(EMBED_BATCH) {
        let s = stats_of(&backbone.features(&images_to_tensor::<T>(chunk)?)?)?;
        mu.push(s.mu);
        sigma.push(s.sigma);
    }
    let cat = |v: &[Tensor<T>]| Tensor::concat_rows(&v.iter().collect::<Vec<_>>());
    StyleStats::new(cat(&mu)?, cat(&sigma)?)
}

/// Gallery (`sc`) and probe (`uc_*`) images of an eval file.
pub struct EvalSplit<'a> {
    pub gallery: Vec<&'a [u8]>,
    pub gallery_ids: Vec<i64>,
    pub probes: Vec<&'a [u8]>,
    pub probe_ids: Vec<i64>,
}

impl<'a> EvalSplit<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Result<Self> {
        let mut s = Self {
            gallery: Vec::new(),
            gallery_ids: Vec::new(),
            probes: Vec::new(),
            probe_ids: Vec::new(),
        };
        for r in &ds.records {
            if r.label < 0 {
                return Err(Error::Invalid("eval records must carry identity labels".into()));
            }
            if r.tag == DomainTag::Sc {
                s.gallery.push(&r.image);
                s.gallery_ids.push(r.label as i64);
            } else {
                s.probes.push(&r.image);
                s.probe_ids.push(r.label as i64);
            }
        }
        if s.gallery.is_empty() || s.probes.is_empty() {
            return Err(Error::Invalid("eval set needs gallery and probe images".into()));
        }
        Ok(s)
    }

    pub fn all_images(&self) -> Vec<&'a [u8]> {
        self.gallery.iter().chain(&self.probes).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankAccuracy {
    pub k: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gallery: usize,
    pub probes: usize,
    pub identification: Vec<RankAccuracy>,
    pub verification: Vec<TarAtFar>,
}

impl EvalReport {
    /// Rank-1 accuracy, computed whenever 1 is among the requested ranks.
    pub fn rank1(&self) -> Option<f64> {
        self.identification.iter().find(|r| r.k == 1).map(|r| r.accuracy)
    }
}

/// Metrics from gallery and probe embeddings: rank-k identification and
/// TAR@FAR over all probe–gallery pairs.
pub fn score(
    gallery: &Tensor<impl Scalar>,
    gallery_ids: &[i64],
    probes: &Tensor<impl Scalar>,
    probe_ids: &[i64],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let gallery = gallery.cast::<f64>();
    let probes = probes.cast::<f64>();
    let ranks = probe_ranks(&gallery, gallery_ids, &probes, probe_ids)?;
    let sims = cosine_matrix(&probes, &gallery)?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (row, &pid) in sims.iter().zip(probe_ids) {
        for (&s, &gid) in row.iter().zip(gallery_ids) {
            if gid == pid {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let verification = if impostor.is_empty() {
        Vec::new()
    } else {
        settings
            .far_targets
            .iter()
            .map(|&far| Ok(TarAtFar {
                far,
                tar: tar_at_far(&genuine, &impostor, far)?,
            }))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport {
        gallery: gallery_ids.len(),
        probes: probe_ids.len(),
        identification: settings
            .ranks
            .iter()
            .map(|&k| RankAccuracy {
                k,
                accuracy: accuracy_at(&ranks, k),
            })
            .collect(),
        verification,
    })
}

pub fn evaluate<T: Scalar>(backbone: &Backbone<T>, eval: &Dataset, settings: &EvalSettings) -> Result<EvalReport> {
    let split = EvalSplit::from_dataset(eval)?;
    let gallery = embed_images(backbone, &split.gallery)?;
    let probes = embed_images(backbone, &split.probes)?;
    score(&gallery, &split.gallery_ids, &probes, &split.probe_ids, settings)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub original: EvalReport,
    pub swapped: EvalReport,
    /// Original minus swapped rank-1 accuracy.
    pub delta_rank1: f64,
    /// Unlabeled image index assigned to each eval image, gallery first.
    pub style_sources: Vec<usize>,
}

/// Scores the eval set twice: as is, and with every image's feature
/// statistics replaced by those of a seeded random unlabeled image.
pub fn style_swap_eval<T: Scalar>(
    backbone: &Backbone<T>,
    eval: &Dataset,
    unlabeled: &UnlabeledSet,
    settings: &EvalSettings,
) -> Result<SwapReport> {
    if unlabeled.is_empty() {
        return Err(Error::Invalid("style swap needs unlabeled images".into()));
    }
    let split = EvalSplit::from_dataset(eval)?;
    let all = split.all_images();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.swap_seed);
    let sources: Vec<usize> = (0..all.len()).map(|_| rng.random_range(0..unlabeled.len())).collect();
    let mut styles_mu = Vec::new();
    let mut styles_sigma = Vec::new();
    for chunk in sources.chunks(EMBED_BATCH) {
        let s = stats_of(&backbone.features(&unlabeled.batch::<T>(chunk)?)?)?;
        styles_mu.push(s.mu);
        styles_sigma.push(s.sigma);
    }
    let cat = |v: &[Tensor<T>]| Tensor::concat_rows(&v.iter().collect::<Vec<_>>());
    let styles = StyleStats::new(cat(&styles_mu)?, cat(&styles_sigma)?)?;
    swap_report(backbone, &split, &styles, sources, settings)
}

/// [`style_swap_eval`] with explicit per-image styles, gallery rows first.
pub fn swap_report<T: Scalar>(
    backbone: &Backbone<T>,
    split: &EvalSplit<'_>,
    styles: &StyleStats<T>,
    style_sources: Vec<usize>,
    settings: &EvalSettings,
) -> Result<SwapReport> {
    let all = split.all_images();
    let original = embed_images(backbone, &all)?;
    let swapped = embed_restyled(backbone, &all, styles)?;
    let ng = split.gallery.len();
    let rows = |t: &Tensor<T>, r: std::ops::Range<usize>| t.select_rows(&r.collect::<Vec<_>>());
    let report = |t: &Tensor<T>| -> Result<EvalReport> {
        score(
            &rows(t, 0..ng)?,
            &split.gallery_ids,
            &rows(t, ng..all.len())?,
            &split.probe_ids,
            settings,
        )
    };
    let original = report(&original)?;
    let swapped = report(&swapped)?;
    let r1 = |r: &EvalReport| {
        r.rank1()
            .ok_or_else(|| Error::Invalid("style swap needs rank 1 among eval.ranks".into()))
    };
    Ok(SwapReport {
        delta_rank1: r1(&original)? - r1(&swapped)?,
        original,
        swapped,
        style_sources,
    })
}

/// Precision and recall of a selection against planted positives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionQuality {
    pub selected: usize,
    pub planted: usize,
    pub hits: usize,
    pub precision: f64,
    pub recall: f64,
}

pub fn detection_quality(selected: &[usize], planted: &[bool]) -> DetectionQuality {
    let hits = selected.iter().filter(|&&i| planted[i]).count();
    let positives = planted.iter().filter(|&&p| p).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    DetectionQuality {
        selected: selected.len(),
        planted: positives,
        hits,
        precision: ratio(hits, selected.len()),
        recall: ratio(hits, positives),
    }
}

/// Entropy score of every image's embedding, on the raw or normalized
/// projection.
pub fn embedding_entropies<T: Scalar>(backbone: &Backbone<T>, images: &[&[u8]], input: EntropyInput) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_BATCH) {
        let (raw, z) = backbone.embed(&images_to_tensor::<T>(chunk)?)?;
        out.extend(entropy_upper_bound(match input {
            EntropyInput::Raw => &raw,
            EntropyInput::Normalized => &z,
        })?);
    }
    Ok(out)
}

/// Population variance of the 8-bit intensities.
pub fn pixel_energy(image: &[u8]) -> f64 {
    let n = image.len() as f64;
    let mean = image.iter().map(|&v| v as f64).sum::<f64>() / n;
    image.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n
}

/// Indices of the `k` lowest scores, ties to the lower index.
pub fn lowest_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    rank_lowest(scores, k)
}
