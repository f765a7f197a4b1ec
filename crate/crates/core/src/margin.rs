//! Angular-margin classification losses over cosine logits.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Cosines are clamped to `±(1 − COS_CLAMP)` before `acos`.
pub const COS_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    ArcFace,
    CosFace,
    Softmax,
}

impl MarginKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MarginKind::ArcFace => "arcface",
            MarginKind::CosFace => "cosface",
            MarginKind::Softmax => "softmax",
        }
    }
}

impl fmt::Display for MarginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MarginKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "arcface" => Ok(MarginKind::ArcFace),
            "cosface" => Ok(MarginKind::CosFace),
            "softmax" => Ok(MarginKind::Softmax),
            other => Err(format!("unknown loss kind `{other}` (expected arcface, cosface or softmax)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginSpec {
    pub kind: MarginKind,
    pub margin: f64,
    pub scale: f64,
}

impl MarginSpec {
    pub fn arcface() -> Self {
        Self {
            kind: MarginKind::ArcFace,
            margin: 0.5,
            scale: 64.0,
        }
    }

    pub fn cosface() -> Self {
        Self {
            kind: MarginKind::CosFace,
            margin: 0.35,
            scale: 64.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Invalid(format!("loss scale must be positive, got {}", self.scale)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Invalid(format!("loss margin must be non-negative, got {}", self.margin)));
        }
        match self.kind {
            MarginKind::ArcFace if self.margin >= FRAC_PI_2 => {
                Err(Error::Invalid(format!("arcface margin {} must be below pi/2", self.margin)))
            }
            MarginKind::CosFace if self.margin >= 1.0 => {
                Err(Error::Invalid(format!("cosface margin {} must be below 1", self.margin)))
            }
            _ => Ok(()),
        }
    }

    /// Target-class cosine after the margin, and its derivative.
    fn target(&self, cos: f64) -> (f64, f64) {
        let m = self.margin;
        match self.kind {
            MarginKind::Softmax => (cos, 1.0),
            MarginKind::CosFace => (cos - m, 1.0),
            MarginKind::ArcFace => {
                let lim = 1.0 - COS_CLAMP;
                let c = cos.clamp(-lim, lim);
                let theta = c.acos();
                if theta + m >= PI {
                    return (cos - m * m.sin(), 1.0);
                }
                let value = (theta + m).cos();
                let slope = if cos.abs() > lim {
                    0.0
                } else {
                    (theta + m).sin() / theta.sin()
                };
                (value, slope)
            }
        }
    }
}

impl Default for MarginSpec {
    fn default() -> Self {
        Self::arcface()
    }
}

/// Checks every label against `0..classes`.
pub fn check_labels(labels: &[i64], classes: usize) -> Result<()> {
    match labels.iter().position(|&l| l < 0 || l as usize >= classes) {
        Some(index) => Err(Error::InvalidLabel {
            index,
            label: labels[index],
            classes,
        }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `scale`·cosines with the margin applied to the
/// labeled class.
pub fn margin_loss<T: Scalar>(g: &mut Graph<T>, cosines: Var, labels: &[i64], spec: &MarginSpec) -> Result<Var> {
    spec.validate()?;
    let shape = g.shape(cosines).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Invalid(format!(
            "margin loss expects [{}, C] cosines, got {shape:?}",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    check_labels(labels, c)?;
    let s = spec.scale;
    let cos = g.value(cosines).to_f64_vec();
    let mut loss = 0.0;
    // d loss / d cos, already divided by the batch size
    let mut grad = vec![0.0; b * c];
    let mut logits = vec![0.0; c];
    for i in 0..b {
        let row = &cos[i * c..(i + 1) * c];
        let y = labels[i] as usize;
        let (target, slope) = spec.target(row[y]);
        for j in 0..c {
            logits[j] = s * if j == y { target } else { row[j] };
        }
        loss += cross_entropy(&logits, y);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..c {
            let p = (logits[j] - max).exp() / sum;
            let dl = if j == y { p - 1.0 } else { p };
            let dc = if j == y { s * slope } else { s };
            grad[i * c + j] = dl * dc / b as f64;
        }
    }
    let value = Tensor::scalar(T::from_f64(loss / b as f64));
    let grad: Vec<T> = grad.into_iter().map(T::from_f64).collect();
    Ok(g.custom(
        &[cosines],
        value,
        Box::new(move |_, _, up: &[T]| vec![Some(grad.iter().map(|&v| v * up[0]).collect())]),
    ))
}

/// `ln Σ_j exp(l_j − l_y)`, kept accurate when the target dominates.
fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let ly = logits[y];
    let worst = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &l)| l - ly)
        .fold(f64::NEG_INFINITY, f64::max);
    if worst <= 0.0 {
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .map(|(_, &l)| (l - ly).exp())
            .sum();
        rest.ln_1p()
    } else {
        let sum: f64 = logits.iter().map(|&l| (l - ly - worst).exp()).sum();
        worst + sum.ln()
    }
}
