//! Instance style statistics, AdaIN replacement and convex style mixing.
//!
//! A feature map `h: [B, c, h, w]` carries one `(μ, σ)` pair per sample and
//! channel: the spatial mean and the spatial population standard deviation.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Floor applied to the source σ when standardizing in [`adain_from`].
pub const EPS_STYLE: f64 = 1e-5;

/// Style statistics recorded on a graph; both are `[B, c]`.
#[derive(Clone, Copy, Debug)]
pub struct StyleVars {
    pub mu: Var,
    pub sigma: Var,
}

/// Style statistics as plain values; both are `[B, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleStats<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Scalar> StyleStats<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        if mu.shape() != sigma.shape() || mu.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "style_stats",
                lhs: mu.shape().to_vec(),
                rhs: sigma.shape().to_vec(),
                axes: vec![0, 1],
            }
            .into());
        }
        if let Some(i) = sigma.data().iter().position(|&s| !(s >= T::zero())) {
            return Err(Error::Invalid(format!("sigma[{i}] is negative or NaN")));
        }
        Ok(Self { mu, sigma })
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> StyleVars {
        StyleVars {
            mu: g.leaf(self.mu.clone(), requires_grad),
            sigma: g.leaf(self.sigma.clone(), requires_grad),
        }
    }

    pub fn from_graph(g: &Graph<T>, vars: StyleVars) -> Self {
        Self {
            mu: g.value(vars.mu).clone(),
            sigma: g.value(vars.sigma).clone(),
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            mu: self.mu.select_rows(idx)?,
            sigma: self.sigma.select_rows(idx)?,
        })
    }
}

/// Per-sample interpolation weights: `lam1` for σ, `lam2` for μ.
#[derive(Clone, Debug, PartialEq)]
pub struct MixCoefficients<T> {
    pub lam1: Vec<T>,
    pub lam2: Vec<T>,
}

impl<T: Scalar> MixCoefficients<T> {
    pub fn filled(batch: usize, value: T) -> Self {
        Self {
            lam1: vec![value; batch],
            lam2: vec![value; batch],
        }
    }

    pub fn len(&self) -> usize {
        self.lam1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lam1.is_empty()
    }

    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> MixVars {
        let n = self.lam1.len();
        MixVars {
            lam1: g.leaf(Tensor::new(vec![n], self.lam1.clone()).expect("non-empty"), requires_grad),
            lam2: g.leaf(Tensor::new(vec![n], self.lam2.clone()).expect("non-empty"), requires_grad),
        }
    }

    pub fn mean(&self) -> (f64, f64) {
        let m = |v: &[T]| v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len().max(1) as f64;
        (m(&self.lam1), m(&self.lam2))
    }
}

/// Mixing coefficients on a graph, each `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct MixVars {
    pub lam1: Var,
    pub lam2: Var,
}

fn check_feature_map<T: Scalar>(g: &Graph<T>, h: Var) -> Result<(usize, usize)> {
    let s = g.shape(h);
    if s.len() != 4 {
        return Err(Error::Invalid(format!("style ops expect a [B, c, h, w] map, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// Spatial mean and population standard deviation per sample and channel.
pub fn extract_stats<T: Scalar>(g: &mut Graph<T>, h: Var) -> Result<StyleVars> {
    check_feature_map(g, h)?;
    let mu = g.mean(h, &[2, 3])?;
    let var = g.var(h, &[2, 3])?;
    let sigma = g.sqrt(var);
    Ok(StyleVars { mu, sigma })
}

/// Gradient-free [`extract_stats`].
pub fn stats_of<T: Scalar>(h: &Tensor<T>) -> Result<StyleStats<T>> {
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let s = extract_stats(&mut g, hv)?;
    Ok(StyleStats::from_graph(&g, s))
}

fn as_map<T: Scalar>(g: &mut Graph<T>, v: Var, b: usize, c: usize) -> Result<Var> {
    if g.shape(v) != [b, c] {
        return Err(TensorError::ShapeMismatch {
            op: "adain",
            lhs: vec![b, c],
            rhs: g.shape(v).to_vec(),
            axes: vec![0, 1],
        }
        .into());
    }
    Ok(g.reshape(v, &[b, c, 1, 1])?)
}

/// Replaces the style of `h` by `target`, standardizing with `source`
/// (normally the statistics of `h` itself):
/// `h' = σ_t · (h − μ_s) / max(σ_s, EPS_STYLE) + μ_t`.
pub fn adain_from<T: Scalar>(g: &mut Graph<T>, h: Var, source: StyleVars, target: StyleVars) -> Result<Var> {
    let (b, c) = check_feature_map(g, h)?;
    let mu_s = as_map(g, source.mu, b, c)?;
    let sigma_s = as_map(g, source.sigma, b, c)?;
    let mu_t = as_map(g, target.mu, b, c)?;
    let sigma_t = as_map(g, target.sigma, b, c)?;
    let centered = g.sub(h, mu_s)?;
    let denom = g.clamp(sigma_s, T::from_f64(EPS_STYLE), T::infinity());
    let normalized = g.div(centered, denom)?;
    let scaled = g.mul(normalized, sigma_t)?;
    Ok(g.add(scaled, mu_t)?)
}

/// AdaIN with `h`'s own statistics as the source.
pub fn adain<T: Scalar>(g: &mut Graph<T>, h: Var, target: StyleVars) -> Result<Var> {
    let source = extract_stats(g, h)?;
    adain_from(g, h, source, target)
}

fn check_lambda<T: Scalar>(g: &Graph<T>, v: Var, batch: usize) -> Result<()> {
    if g.shape(v) != [batch] {
        return Err(TensorError::ShapeMismatch {
            op: "mix_styles",
            lhs: vec![batch],
            rhs: g.shape(v).to_vec(),
            axes: vec![0],
        }
        .into());
    }
    if let Some((index, &value)) = g
        .value(v)
        .data()
        .iter()
        .enumerate()
        .find(|(_, &x)| !(x >= T::zero() && x <= T::one()))
    {
        return Err(Error::LambdaRange {
            index,
            value: value.as_f64(),
        });
    }
    Ok(())
}

fn convex<T: Scalar>(g: &mut Graph<T>, lam: Var, a: Var, b: Var) -> Result<Var> {
    let n = g.shape(lam)[0];
    let lam = g.reshape(lam, &[n, 1])?;
    let neg = g.neg(lam);
    let rest = g.add_scalar(neg, T::one());
    let left = g.mul(a, lam)?;
    let right = g.mul(b, rest)?;
    Ok(g.add(left, right)?)
}

/// `σ' = λ1·σ + (1−λ1)·σ̂`, `μ' = λ2·μ + (1−λ2)·μ̂` with per-sample λ.
pub fn mix_styles<T: Scalar>(
    g: &mut Graph<T>,
    labeled: StyleVars,
    unlabeled: StyleVars,
    lam: MixVars,
) -> Result<StyleVars> {
    let shape = g.shape(labeled.mu).to_vec();
    for v in [labeled.sigma, unlabeled.mu, unlabeled.sigma] {
        if g.shape(v) != shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "mix_styles",
                lhs: shape.clone(),
                rhs: g.shape(v).to_vec(),
                axes: vec![0, 1],
            }
            .into());
        }
    }
    check_lambda(g, lam.lam1, shape[0])?;
    check_lambda(g, lam.lam2, shape[0])?;
    let sigma = convex(g, lam.lam1, labeled.sigma, unlabeled.sigma)?;
    let mu = convex(g, lam.lam2, labeled.mu, unlabeled.mu)?;
    Ok(StyleVars { mu, sigma })
}

/// `h' = σ'(h − μ)/σ + μ'` where `(μ, σ) = labeled` are `h`'s own statistics.
pub fn stylize<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    labeled: StyleVars,
    unlabeled: StyleVars,
    lam: MixVars,
) -> Result<Var> {
    let mixed = mix_styles(g, labeled, unlabeled, lam)?;
    adain_from(g, h, labeled, mixed)
}

/// Writes `tag, mu_0.., sigma_0..` rows, one per sample, for external
/// plotting.
pub fn export_stats<T: Scalar, W: Write>(mut out: W, rows: &[(&str, &StyleStats<T>)]) -> std::io::Result<()> {
    let Some((_, first)) = rows.first() else {
        return Ok(());
    };
    let c = first.channels();
    write!(out, "dataset_tag")?;
    for k in 0..c {
        write!(out, ",mu_{k}")?;
    }
    for k in 0..c {
        write!(out, ",sigma_{k}")?;
    }
    writeln!(out)?;
    for (tag, stats) in rows {
        if stats.channels() != c {
            return Err(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("tag {tag} has {} channels, expected {c}", stats.channels()),
            ));
        }
        for i in 0..stats.batch() {
            write!(out, "{tag}")?;
            for v in stats.mu.row(i).iter().chain(stats.sigma.row(i)) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::*;
    use proptest::prelude::*;

    fn map(b: usize, c: usize, hw: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![b, c, hw, hw], vals).unwrap()
    }

    #[test]
    fn constant_map_has_zero_sigma() {
        let s = stats_of(&Tensor::<f64>::full(vec![1, 1, 3, 3], 5.0)).unwrap();
        assert_eq!(s.mu.data(), &[5.0]);
        assert_eq!(s.sigma.data(), &[0.0]);
    }

    #[test]
    fn alternating_signs() {
        let s = stats_of(&map(1, 1, 2, &[1.0, -1.0, 1.0, -1.0])).unwrap();
        assert_eq!(s.mu.data(), &[0.0]);
        assert_eq!(s.sigma.data(), &[1.0]);
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let mut r = rng(1);
        let h = uniform(&mut r, &[1, 3, 4, 4], -2.0, 3.0);
        let s = stats_of(&h).unwrap();
        for k in 0..3 {
            let (m, sd) = two_pass_mean_std(&h.data()[k * 16..(k + 1) * 16]);
            assert!((s.mu.data()[k] - m).abs() < 1e-10);
            assert!((s.sigma.data()[k] - sd).abs() < 1e-10);
        }
    }

    #[test]
    fn adain_identity_and_closed_form() {
        let mut r = rng(2);
        let hv = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let h = g.constant(hv.clone());
        let own = extract_stats(&mut g, h).unwrap();
        let out = adain(&mut g, h, own).unwrap();
        for (a, b) in g.value(out).data().iter().zip(hv.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        let mut g = Graph::<f64>::new();
        let h = g.constant(Tensor::from_f64(vec![1, 1, 1, 2], &[1.0, -1.0]).unwrap());
        let t = StyleStats::new(
            Tensor::from_f64(vec![1, 1], &[3.0]).unwrap(),
            Tensor::from_f64(vec![1, 1], &[2.0]).unwrap(),
        )
        .unwrap()
        .bind(&mut g, false);
        let out = adain(&mut g, h, t).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 1.0]);
    }

    #[test]
    fn adain_transfers_target_statistics() {
        for trial in 0..20 {
            let mut r = rng(100 + trial);
            let hv = uniform(&mut r, &[2, 3, 5, 5], -2.0, 2.0);
            let t = StyleStats::new(
                uniform(&mut r, &[2, 3], -1.0, 1.0),
                uniform(&mut r, &[2, 3], 0.1, 2.0),
            )
            .unwrap();
            let mut g = Graph::new();
            let h = g.constant(hv);
            let tv = t.bind(&mut g, false);
            let out = adain(&mut g, h, tv).unwrap();
            let got = stats_of(g.value(out)).unwrap();
            for (a, b) in got.mu.data().iter().zip(t.mu.data()) {
                assert!((a - b).abs() < 1e-5);
            }
            for (a, b) in got.sigma.data().iter().zip(t.sigma.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    fn random_stats(r: &mut impl rand::Rng, b: usize, c: usize) -> StyleStats<f64> {
        StyleStats::new(uniform(r, &[b, c], -1.0, 1.0), uniform(r, &[b, c], 0.05, 2.0)).unwrap()
    }

    fn mix_values(l: &StyleStats<f64>, u: &StyleStats<f64>, lam: &MixCoefficients<f64>) -> Result<StyleStats<f64>> {
        let mut g = Graph::new();
        let lv = l.bind(&mut g, false);
        let uv = u.bind(&mut g, false);
        let mv = lam.bind(&mut g, false);
        let m = mix_styles(&mut g, lv, uv, mv)?;
        Ok(StyleStats::from_graph(&g, m))
    }

    #[test]
    fn mix_endpoints_and_oracle() {
        let mut r = rng(3);
        let l = random_stats(&mut r, 4, 5);
        let u = random_stats(&mut r, 4, 5);
        assert_eq!(mix_values(&l, &u, &MixCoefficients::filled(4, 1.0)).unwrap(), l);
        assert_eq!(mix_values(&l, &u, &MixCoefficients::filled(4, 0.0)).unwrap(), u);
        let m = mix_values(&l, &u, &MixCoefficients::filled(4, 0.37)).unwrap();
        for i in 0..20 {
            let s = 0.37 * l.sigma.data()[i] + 0.63 * u.sigma.data()[i];
            let mu = 0.37 * l.mu.data()[i] + 0.63 * u.mu.data()[i];
            assert!((m.sigma.data()[i] - s).abs() < 1e-15);
            assert!((m.mu.data()[i] - mu).abs() < 1e-15);
        }
    }

    #[test]
    fn mix_rejects_out_of_range_lambda() {
        let mut r = rng(4);
        let l = random_stats(&mut r, 2, 3);
        let u = random_stats(&mut r, 2, 3);
        let lam = MixCoefficients {
            lam1: vec![0.5, 1.2],
            lam2: vec![0.5, 0.5],
        };
        assert!(matches!(mix_values(&l, &u, &lam), Err(Error::LambdaRange { index: 1, .. })));
        let lam = MixCoefficients {
            lam1: vec![0.5, 0.5],
            lam2: vec![-0.1, 0.5],
        };
        assert!(matches!(mix_values(&l, &u, &lam), Err(Error::LambdaRange { index: 0, .. })));
    }

    fn stylize_values(hv: &Tensor<f64>, u: &StyleStats<f64>, lam: &MixCoefficients<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let h = g.constant(hv.clone());
        let l = extract_stats(&mut g, h).unwrap();
        let uv = u.bind(&mut g, false);
        let mv = lam.bind(&mut g, false);
        let out = stylize(&mut g, h, l, uv, mv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn stylize_endpoints() {
        let mut r = rng(5);
        let hv = uniform(&mut r, &[3, 4, 6, 6], -1.0, 2.0);
        let u = random_stats(&mut r, 3, 4);
        let same = stylize_values(&hv, &u, &MixCoefficients::filled(3, 1.0));
        for (a, b) in same.data().iter().zip(hv.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let swapped = stats_of(&stylize_values(&hv, &u, &MixCoefficients::filled(3, 0.0))).unwrap();
        for (a, b) in swapped.mu.data().iter().zip(u.mu.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in swapped.sigma.data().iter().zip(u.sigma.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn stylize_gradients_match_finite_differences() {
        for trial in 0..5 {
            let mut r = rng(200 + trial);
            let h = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
            let u = random_stats(&mut r, 2, 3);
            let lam1 = uniform(&mut r, &[2], 0.2, 0.8);
            let lam2 = uniform(&mut r, &[2], 0.2, 0.8);
            let w = uniform(&mut r, &[2, 3, 4, 4], -1.0, 1.0);
            let err = grad_check_subset(
                &[h, u.mu.clone(), u.sigma.clone(), lam1, lam2, w],
                &[true, true, true, true, true, false],
                |g, v| {
                    let l = extract_stats(g, v[0]).map_err(to_tensor)?;
                    let un = StyleVars { mu: v[1], sigma: v[2] };
                    let out = stylize(g, v[0], l, un, MixVars { lam1: v[3], lam2: v[4] }).map_err(to_tensor)?;
                    let p = g.mul(out, v[5])?;
                    g.sum(p, &[0, 1, 2, 3])
                },
            );
            assert!(err < 1e-5, "trial {trial}: {err}");
        }
    }

    #[test]
    fn sum_of_stylized_map_gradient_in_lambda1() {
        let mut r = rng(6);
        let h = uniform(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
        let u = random_stats(&mut r, 2, 2);
        let err = grad_check_subset(
            &[h, u.mu.clone(), u.sigma.clone(), Tensor::from_f64(vec![2], &[0.3, 0.6]).unwrap()],
            &[false, false, false, true],
            |g, v| {
                let l = extract_stats(g, v[0]).map_err(to_tensor)?;
                let lam2 = g.constant(Tensor::full(vec![2], 0.5));
                let out = stylize(g, v[0], l, StyleVars { mu: v[1], sigma: v[2] }, MixVars { lam1: v[3], lam2 })
                    .map_err(to_tensor)?;
                let sq = g.mul(out, out)?;
                g.sum(sq, &[0, 1, 2, 3])
            },
        );
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn degenerate_channels_keep_gradients_finite() {
        let mut g = Graph::<f64>::new();
        let h = g.param(Tensor::full(vec![1, 2, 3, 3], 0.0));
        let l = extract_stats(&mut g, h).unwrap();
        let u = StyleStats::new(Tensor::full(vec![1, 2], 1.0), Tensor::full(vec![1, 2], 2.0))
            .unwrap()
            .bind(&mut g, false);
        let lam = MixCoefficients::filled(1, 0.5).bind(&mut g, true);
        let out = stylize(&mut g, h, l, u, lam).unwrap();
        let s = g.sum(out, &[0, 1, 2, 3]).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(h).unwrap().iter().all(|v| v.is_finite()));
        assert!(g.grad(lam.lam2).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn export_writes_header_and_rows() {
        let s = StyleStats::<f64>::new(
            Tensor::from_f64(vec![2, 2], &[0.5, 1.0, -1.0, 2.0]).unwrap(),
            Tensor::from_f64(vec![2, 2], &[1.0, 0.25, 0.0, 3.0]).unwrap(),
        )
        .unwrap();
        let mut buf = Vec::new();
        export_stats(&mut buf, &[("sc", &s)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset_tag,mu_0,mu_1,sigma_0,sigma_1");
        assert_eq!(lines[1], "sc,0.5,1,1,0.25");
        assert_eq!(lines.len(), 3);
    }

    fn to_tensor(e: Error) -> TensorError {
        match e {
            Error::Tensor(t) => t,
            other => TensorError::Invalid {
                op: "test",
                msg: other.to_string(),
            },
        }
    }

    proptest! {
        #[test]
        fn mixed_stats_stay_between_endpoints(
            sig in proptest::collection::vec((0.0f64..3.0, 0.0f64..3.0, -2.0f64..2.0, -2.0f64..2.0), 1..6),
            l1 in 0.0f64..=1.0,
            l2 in 0.0f64..=1.0,
        ) {
            let c = sig.len();
            let l = StyleStats::new(
                Tensor::new(vec![1, c], sig.iter().map(|s| s.2).collect()).unwrap(),
                Tensor::new(vec![1, c], sig.iter().map(|s| s.0).collect()).unwrap(),
            ).unwrap();
            let u = StyleStats::new(
                Tensor::new(vec![1, c], sig.iter().map(|s| s.3).collect()).unwrap(),
                Tensor::new(vec![1, c], sig.iter().map(|s| s.1).collect()).unwrap(),
            ).unwrap();
            let m = mix_values(&l, &u, &MixCoefficients { lam1: vec![l1], lam2: vec![l2] }).unwrap();
            for k in 0..c {
                let (a, b) = (l.sigma.data()[k], u.sigma.data()[k]);
                let s = m.sigma.data()[k];
                prop_assert!(s >= a.min(b) - 1e-12 && s <= a.max(b) + 1e-12);
                prop_assert!(s >= 0.0);
                let (a, b) = (l.mu.data()[k], u.mu.data()[k]);
                let mu = m.mu.data()[k];
                prop_assert!(mu >= a.min(b) - 1e-12 && mu <= a.max(b) + 1e-12);
            }
        }

        #[test]
        fn stylized_map_carries_mixed_stats(seed in 0u64..1000, l1 in 0.0f64..=1.0, l2 in 0.0f64..=1.0) {
            let mut r = rng(seed);
            let hv = uniform(&mut r, &[2, 3, 5, 5], -1.0, 1.0);
            let u = random_stats(&mut r, 2, 3);
            let lam = MixCoefficients { lam1: vec![l1, l2], lam2: vec![l2, l1] };
            let l = stats_of(&hv).unwrap();
            let want = mix_values(&l, &u, &lam).unwrap();
            let got = stats_of(&stylize_values(&hv, &u, &lam)).unwrap();
            for (a, b) in got.mu.data().iter().zip(want.mu.data()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
            for (a, b) in got.sigma.data().iter().zip(want.sigma.data()) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }
    }
}
