//! Unrecognizable-instance detection and the recognizability penalty.
//!
//! Embeddings whose components barely vary carry little identity
//! information. The lowest-entropy samples of each unlabeled batch feed an
//! exponential moving average `phi` of the unrecognizable cluster centre, and
//! [`recognizability_loss`] penalizes embeddings that drift toward it.

use std::f64::consts::PI;

use crate::backbone::{check_unit_rows, EPS_NORM};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Variance floor applied before the logarithm.
pub const EPS_VAR: f64 = 1e-12;
/// Offset in the penalty denominator; caps the per-sample penalty at 100.
pub const EPS_REC: f64 = 0.01;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

/// `½·ln(2π·v²) + ½` where `v²` is the population variance of each row.
pub fn entropy_upper_bound<T: Scalar>(z: &Tensor<T>) -> Result<Vec<f64>> {
    if z.rank() != 2 || z.shape()[1] < 2 {
        return Err(Error::Invalid(format!(
            "entropy needs a [B, d] batch with d >= 2, got {:?}",
            z.shape()
        )));
    }
    let d = z.shape()[1];
    Ok(z.data()
        .chunks(d)
        .map(|row| {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.as_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            entropy_of_variance(var)
        })
        .collect())
}

pub fn entropy_of_variance(var: f64) -> f64 {
    0.5 * (2.0 * PI * var.max(EPS_VAR)).ln() + 0.5
}

/// Indices of the `top_k` lowest-entropy rows, ascending by entropy with ties
/// going to the lower index.
pub fn select_ur<T: Scalar>(z: &Tensor<T>, top_k: usize) -> Result<Vec<usize>> {
    let h = entropy_upper_bound(z)?;
    rank_lowest(&h, top_k)
}

pub(crate) fn rank_lowest(scores: &[f64], top_k: usize) -> Result<Vec<usize>> {
    if top_k == 0 || top_k > scores.len() {
        return Err(Error::TopK {
            top_k,
            batch: scores.len(),
        });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx.truncate(top_k);
    Ok(idx)
}

/// Running centre of the unrecognizable cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct UrState<T> {
    phi: Vec<T>,
    initialized: bool,
    momentum: f64,
    skipped_updates: u64,
}

impl<T: Scalar> UrState<T> {
    pub fn new(dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Invalid(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            phi: vec![T::zero(); dim],
            initialized: false,
            momentum,
            skipped_updates: 0,
        })
    }

    /// Restores a saved state; `phi` is renormalized when initialized.
    pub fn restore(phi: Vec<T>, initialized: bool, momentum: f64, skipped_updates: u64) -> Result<Self> {
        let mut s = Self::new(phi.len(), momentum)?;
        s.skipped_updates = skipped_updates;
        if initialized {
            let p: Vec<f64> = phi.iter().map(|v| v.as_f64()).collect();
            let n = norm(&p);
            if n < EPS_NORM {
                return Err(Error::Invalid("restored phi has zero norm".into()));
            }
            s.phi = p.iter().map(|v| T::from_f64(v / n)).collect();
            s.initialized = true;
        }
        Ok(s)
    }

    pub fn phi(&self) -> &[T] {
        &self.phi
    }

    pub fn initialized(&self) -> bool {
        self.initialized
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    /// Folds the mean of `z_topk` (unit rows) into `phi`. Returns false when
    /// the mean is too short to normalize and the update was skipped.
    pub fn update(&mut self, z_topk: &Tensor<T>) -> Result<bool> {
        if z_topk.rank() != 2 || z_topk.shape()[1] != self.phi.len() {
            return Err(Error::Invalid(format!(
                "update expects [k, {}] rows, got {:?}",
                self.phi.len(),
                z_topk.shape()
            )));
        }
        check_unit_rows(z_topk, "ur sample")?;
        let (k, d) = (z_topk.shape()[0], z_topk.shape()[1]);
        let mut mean = vec![0.0; d];
        for row in z_topk.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= k as f64);
        if norm(&mean) < EPS_NORM {
            self.skipped_updates += 1;
            return Ok(false);
        }
        let next: Vec<f64> = if self.initialized {
            let a = self.momentum;
            self.phi
                .iter()
                .zip(&mean)
                .map(|(p, m)| a * p.as_f64() + (1.0 - a) * m)
                .collect()
        } else {
            mean
        };
        let n = norm(&next);
        if n < EPS_NORM {
            self.skipped_updates += 1;
            return Ok(false);
        }
        self.phi = next.iter().map(|v| T::from_f64(v / n)).collect();
        self.initialized = true;
        Ok(true)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> Result<Var> {
        if !self.initialized {
            return Err(Error::UrUninitialized);
        }
        let d = self.phi.len();
        Ok(g.constant(Tensor::new(vec![1, d], self.phi.clone())?))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over the batch of `1 / (EPS_REC + 1 − ⟨phi, z'_i⟩)`; `phi` is held
/// constant.
pub fn recognizability_loss<T: Scalar>(g: &mut Graph<T>, z_prime: Var, state: &UrState<T>) -> Result<Var> {
    let phi = state.bind(g)?;
    penalty(g, z_prime, phi)
}

/// [`recognizability_loss`] against a `phi` already on the graph as `[1, d]`.
pub fn penalty<T: Scalar>(g: &mut Graph<T>, z_prime: Var, phi: Var) -> Result<Var> {
    check_unit_rows(g.value(z_prime), "embedding")?;
    let cos = g.linear(z_prime, phi)?;
    let gap = g.neg(cos);
    let gap = g.add_scalar(gap, T::from_f64(1.0 + EPS_REC));
    let inv = g.recip(gap)?;
    Ok(g.mean_all(inv)?)
}
