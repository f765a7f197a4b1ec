//! Inner maximization over the style mixing coefficients.
//!
//! Starting from the labeled style (`λ = 1`), a few projected ascent steps
//! move each sample's statistics toward the unlabeled batch along the
//! direction that most increases the recognition loss, while the
//! recognizability penalty keeps the result away from the unrecognizable
//! cluster. The model is only read.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{logits, Backbone, PrototypeHead};
use crate::error::{Error, Result};
use crate::margin::{margin_loss, MarginSpec};
use crate::recognizability::{recognizability_loss, UrState};
use crate::style::{stylize, MixCoefficients, StyleStats};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    Targeted,
    NonTargeted,
    Off,
}

impl AdversaryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AdversaryMode::Targeted => "targeted",
            AdversaryMode::NonTargeted => "non_targeted",
            AdversaryMode::Off => "off",
        }
    }
}

impl fmt::Display for AdversaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdversaryMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "targeted" => Ok(AdversaryMode::Targeted),
            "non_targeted" => Ok(AdversaryMode::NonTargeted),
            "off" => Ok(AdversaryMode::Off),
            other => Err(format!(
                "unknown adversary mode `{other}` (expected targeted, non_targeted or off)"
            )),
        }
    }
}

/// How a step turns the gradient into an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentRule {
    /// `λ += step · sign(∂L/∂λ)`
    Sign,
    /// `λ += step · ∂L_sum/∂λ`, where `L_sum` is the batch-summed objective,
    /// so a sample's step does not shrink with the batch size.
    Raw,
}

impl AscentRule {
    pub fn as_str(self) -> &'static str {
        match self {
            AscentRule::Sign => "sign",
            AscentRule::Raw => "raw",
        }
    }
}

impl fmt::Display for AscentRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AscentRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sign" => Ok(AscentRule::Sign),
            "raw" => Ok(AscentRule::Raw),
            other => Err(format!("unknown ascent rule `{other}` (expected sign or raw)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub beta: f64,
    pub mode: AdversaryMode,
    pub rule: AscentRule,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            pgd_steps: 3,
            pgd_step_size: 0.1,
            beta: 1.0,
            mode: AdversaryMode::Targeted,
            rule: AscentRule::Sign,
        }
    }
}

impl AdversaryConfig {
    /// `pgd_steps = 0` is accepted as a debug setting that keeps `λ = 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.pgd_step_size > 0.0) || !self.pgd_step_size.is_finite() {
            return Err(Error::Invalid(format!(
                "adversary step must be positive, got {}",
                self.pgd_step_size
            )));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    /// Total movement a sample's coefficients may accumulate.
    pub fn budget(&self) -> f64 {
        self.pgd_steps as f64 * self.pgd_step_size
    }
}

/// `L_fr(z') − β·L_r(z')`. With `beta == 0` this is exactly `L_fr` and `ur`
/// is not consulted.
pub fn adversary_objective<T: Scalar>(
    g: &mut Graph<T>,
    z_prime: Var,
    labels: &[i64],
    head: Var,
    ur: &UrState<T>,
    spec: &MarginSpec,
    beta: f64,
) -> Result<Var> {
    let cos = logits(g, z_prime, head)?;
    let fr = margin_loss(g, cos, labels, spec)?;
    if beta == 0.0 {
        return Ok(fr);
    }
    let rec = recognizability_loss(g, z_prime, ur)?;
    let rec = g.mul_scalar(rec, T::from_f64(-beta));
    Ok(g.add(fr, rec)?)
}

/// Everything the inner loop reads but never writes.
pub struct AscentInputs<'a, T> {
    /// `E1` features of the labeled batch.
    pub h: &'a Tensor<T>,
    /// Statistics of `h`.
    pub labeled: &'a StyleStats<T>,
    /// Statistics of the unlabeled batch's features, row-aligned with `h`.
    pub unlabeled: &'a StyleStats<T>,
    pub labels: &'a [i64],
    pub backbone: &'a Backbone<T>,
    pub head: &'a PrototypeHead<T>,
    pub ur: &'a UrState<T>,
    pub spec: &'a MarginSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentOutcome<T> {
    pub lam: MixCoefficients<T>,
    /// Objective at each iterate before its step.
    pub objective: Vec<f64>,
    /// Set when a step met a non-finite gradient; `lam` is the last finite
    /// iterate.
    pub aborted: Option<String>,
    /// `beta` actually applied; zero while `ur` is uninitialized.
    pub beta: f64,
}

/// Objective value and gradient w.r.t. both coefficient vectors at `lam`.
pub fn objective_and_grad<T: Scalar>(
    inputs: &AscentInputs<'_, T>,
    lam: &MixCoefficients<T>,
    beta: f64,
) -> Result<(f64, Vec<T>, Vec<T>)> {
    let mut g = Graph::new();
    let vars = inputs.backbone.bind(&mut g, false);
    let head = inputs.head.bind(&mut g, false);
    let h = g.constant(inputs.h.clone());
    let labeled = inputs.labeled.bind(&mut g, false);
    let unlabeled = inputs.unlabeled.bind(&mut g, false);
    let mix = lam.bind(&mut g, true);
    let styled = stylize(&mut g, h, labeled, unlabeled, mix)?;
    let emb = inputs.backbone.forward_e2(&mut g, &vars, styled)?;
    let loss = adversary_objective(&mut g, emb.z, inputs.labels, head, inputs.ur, inputs.spec, beta)?;
    let value = g.value(loss).data()[0].as_f64();
    g.backward(loss)?;
    let n = lam.len();
    let grad = |v: Var| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![T::zero(); n]);
    Ok((value, grad(mix.lam1), grad(mix.lam2)))
}

fn step<T: Scalar>(lam: &mut [T], grad: &[T], cfg: &AdversaryConfig, batch: usize) {
    let size = cfg.pgd_step_size;
    for (l, &gr) in lam.iter_mut().zip(grad) {
        let gr = gr.as_f64();
        let delta = match cfg.rule {
            AscentRule::Sign => {
                if gr > 0.0 {
                    size
                } else if gr < 0.0 {
                    -size
                } else {
                    0.0
                }
            }
            AscentRule::Raw => size * gr * batch as f64,
        };
        *l = T::from_f64((l.as_f64() + delta).clamp(0.0, 1.0));
    }
}

/// Projected ascent on the mixing coefficients from `λ = 1`.
pub fn pgd_ascend<T: Scalar>(inputs: &AscentInputs<'_, T>, cfg: &AdversaryConfig) -> Result<AscentOutcome<T>> {
    cfg.validate()?;
    let batch = inputs.labels.len();
    let beta = if inputs.ur.initialized() { cfg.beta } else { 0.0 };
    let mut lam = MixCoefficients::filled(batch, T::one());
    let mut objective = Vec::with_capacity(cfg.pgd_steps);
    let mut aborted = None;
    for t in 0..cfg.pgd_steps {
        let (value, g1, g2) = objective_and_grad(inputs, &lam, beta)?;
        if !value.is_finite() || !g1.iter().chain(&g2).all(|v| v.is_finite()) {
            aborted = Some(format!("non-finite objective or gradient at ascent step {t}"));
            break;
        }
        objective.push(value);
        step(&mut lam.lam1, &g1, cfg, batch);
        step(&mut lam.lam2, &g2, cfg, batch);
    }
    Ok(AscentOutcome {
        lam,
        objective,
        aborted,
        beta,
    })
}

/// Random directions for [`perturb_with_directions`]: per step, one ±1 per
/// sample and channel for σ and another for μ.
pub fn draw_directions(rng: &mut impl Rng, steps: usize, count: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut sign = || if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    (0..steps)
        .map(|_| {
            let s: Vec<f64> = (0..count).map(|_| sign()).collect();
            let m: Vec<f64> = (0..count).map(|_| sign()).collect();
            (s, m)
        })
        .collect()
}

/// Moves each statistic by `step · σ` per direction entry (σ measured before
/// perturbation) and floors σ at zero.
pub fn perturb_with_directions<T: Scalar>(
    labeled: &StyleStats<T>,
    step_size: f64,
    directions: &[(Vec<f64>, Vec<f64>)],
) -> Result<StyleStats<T>> {
    let n = labeled.sigma.numel();
    let sigma0 = labeled.sigma.to_f64_vec();
    let mut sigma = sigma0.clone();
    let mut mu = labeled.mu.to_f64_vec();
    for (ds, dm) in directions {
        if ds.len() != n || dm.len() != n {
            return Err(Error::Invalid(format!("direction length {} for {n} statistics", ds.len())));
        }
        for i in 0..n {
            sigma[i] += step_size * sigma0[i] * ds[i];
            mu[i] += step_size * sigma0[i] * dm[i];
        }
    }
    let shape = labeled.sigma.shape().to_vec();
    StyleStats::new(
        Tensor::from_f64(shape.clone(), &mu)?,
        Tensor::from_f64(shape, &sigma.iter().map(|s| s.max(0.0)).collect::<Vec<_>>())?,
    )
}

/// Style perturbation with the same step count and size as the targeted
/// search but random directions, no unlabeled data and no penalty.
pub fn non_targeted_perturb<T: Scalar>(
    labeled: &StyleStats<T>,
    cfg: &AdversaryConfig,
    rng: &mut impl Rng,
) -> Result<StyleStats<T>> {
    let dirs = draw_directions(rng, cfg.pgd_steps, labeled.sigma.numel());
    perturb_with_directions(labeled, cfg.pgd_step_size, &dirs)
}
