//! Two-stage training loop: a frozen-model style search followed by an SGD
//! step on clean and stylized features.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{non_targeted_perturb, pgd_ascend, AdversaryMode, AscentInputs};
use crate::backbone::{logits, Backbone, ModelError, PrototypeHead};
use crate::checkpoint::Checkpoint;
use crate::config::{EntropyInput, TrainConfig};
use crate::data::{LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::margin::margin_loss;
use crate::recognizability::{recognizability_loss, select_ur, UrState};
use crate::style::{adain_from, extract_stats, stats_of, stylize, MixCoefficients, StyleStats, StyleVars};
use crate::tensor::{DType, Graph, Scalar, Tensor};

/// Environment variable that forces deterministic mode when set to `1`.
pub const DETERMINISTIC_ENV: &str = "TSA_DETERMINISTIC";

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Init = 1,
    LabeledOrder = 2,
    UnlabeledOrder = 3,
    Step = 4,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 56) ^ index);
    rng
}

pub fn deterministic(cfg: &TrainConfig) -> bool {
    cfg.deterministic || std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Everything training mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Iterations completed.
    pub t: u64,
    /// Epochs completed.
    pub epoch: usize,
    pub backbone: Backbone<T>,
    pub head: PrototypeHead<T>,
    /// Momentum buffers, backbone parameters first, then the prototypes.
    pub velocity: Vec<Tensor<T>>,
    pub ur: UrState<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let mut rng = stream_rng(cfg.seed, Stream::Init, 0);
        let backbone = Backbone::new(cfg.arch.clone(), rng.random())?;
        let head = PrototypeHead::new(num_classes, cfg.arch.embed_dim, rng.random());
        let mut velocity: Vec<Tensor<T>> = backbone
            .named_params()
            .iter()
            .map(|(_, p)| Tensor::zeros(p.shape().to_vec()))
            .collect();
        velocity.push(Tensor::zeros(head.weight().shape().to_vec()));
        Ok(Self {
            t: 0,
            epoch: 0,
            backbone,
            head,
            velocity,
            ur: UrState::new(cfg.arch.embed_dim, cfg.ema_alpha)?,
        })
    }

    /// Hash of the model and prototype weights.
    pub fn model_digest(&self) -> String {
        let mut named = self.backbone.named_params();
        named.push(("head.weight".into(), self.head.weight()));
        crate::tensor::digest(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    fn param_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.backbone.named_params().into_iter().map(|(n, _)| n).collect();
        names.push("head.weight".into());
        names
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint {
            config_text: cfg.to_text(),
            ..Default::default()
        };
        for (name, p) in self.backbone.named_params() {
            ck.push(name, p);
        }
        ck.push("head.weight", self.head.weight());
        for (name, v) in self.param_names().iter().zip(&self.velocity) {
            ck.push(format!("opt.velocity.{name}"), v);
        }
        let d = self.ur.phi().len();
        ck.push(
            "ur.phi",
            &Tensor::new(vec![d], self.ur.phi().to_vec()).expect("phi length matches"),
        );
        let counters = [
            self.t as f64,
            self.epoch as f64,
            if self.ur.initialized() { 1.0 } else { 0.0 },
            self.ur.skipped_updates() as f64,
        ];
        ck.push("state.counters", &Tensor::<f64>::from_f64(vec![4], &counters).expect("4 counters"));
        ck
    }

    /// Restores the state and the configuration it was trained with.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let cfg = TrainConfig::parse(&ck.config_text)?;
        if cfg.dtype != T::DTYPE {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} weights, requested {}",
                cfg.dtype,
                T::DTYPE
            )));
        }
        let layers = cfg.arch.channels.len();
        let convs = (0..layers)
            .map(|i| ck.tensor::<T>(&format!("backbone.conv{i}")))
            .collect::<Result<Vec<_>>>()?;
        let backbone = Backbone::from_parts(cfg.arch.clone(), convs, ck.tensor("backbone.proj")?)?;
        let head = PrototypeHead::from_weight(ck.tensor("head.weight")?)?;
        if head.weight().shape()[1] != cfg.arch.embed_dim {
            return Err(Error::Invalid(format!(
                "prototype width {} differs from embed_dim {}",
                head.weight().shape()[1],
                cfg.arch.embed_dim
            )));
        }
        let counters = ck.tensor::<f64>("state.counters")?;
        let c = counters.data();
        if c.len() != 4 {
            return Err(Error::Invalid(format!("state.counters has {} entries, expected 4", c.len())));
        }
        let phi = ck.tensor::<T>("ur.phi")?.into_data();
        let ur = UrState::restore(phi, c[2] != 0.0, cfg.ema_alpha, c[3] as u64)?;
        let mut state = Self {
            t: c[0] as u64,
            epoch: c[1] as usize,
            backbone,
            head,
            velocity: Vec::new(),
            ur,
        };
        let names = state.param_names();
        let mut velocity = Vec::with_capacity(names.len());
        for name in &names {
            velocity.push(ck.tensor::<T>(&format!("opt.velocity.{name}"))?);
        }
        state.velocity = velocity;
        Ok((state, cfg))
    }
}

/// Style assignment produced by stage 1.
#[derive(Clone, Debug, PartialEq)]
pub enum StyleTarget<T> {
    /// Interpolate each sample's statistics toward its paired unlabeled
    /// statistics.
    Mix {
        unlabeled: StyleStats<T>,
        lam: MixCoefficients<T>,
    },
    /// Add fixed offsets to each sample's own statistics; σ is floored at
    /// zero.
    Shift { mu: Tensor<T>, sigma: Tensor<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport<T> {
    pub target: Option<StyleTarget<T>>,
    pub lam_mean: Option<(f64, f64)>,
    pub phi_drift: Option<f64>,
    pub ascent_aborted: bool,
}

impl<T> Default for StageReport<T> {
    fn default() -> Self {
        Self {
            target: None,
            lam_mean: None,
            phi_drift: None,
            ascent_aborted: false,
        }
    }
}

/// Read-only view handed to stage 1.
pub struct StageInput<'a, T> {
    /// `E1(x)` of the labeled batch.
    pub h: &'a Tensor<T>,
    pub labels: &'a [i64],
    /// Unlabeled images paired row by row with the labeled batch.
    pub unlabeled: Option<&'a Tensor<T>>,
    pub backbone: &'a Backbone<T>,
    pub head: &'a PrototypeHead<T>,
}

/// Stage 1 of an iteration: decide how stage 2 restyles the batch.
pub trait StyleStage<T: Scalar> {
    fn needs_unlabeled(&self, cfg: &TrainConfig) -> bool;

    fn plan(
        &mut self,
        input: &StageInput<'_, T>,
        ur: &mut UrState<T>,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageReport<T>>;
}

/// Stage 1 driven by `cfg.adversary.mode`.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdversaryStage;

/// Stage 1 removed altogether: plain margin-loss training.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoStyleStage;

impl<T: Scalar> StyleStage<T> for NoStyleStage {
    fn needs_unlabeled(&self, _cfg: &TrainConfig) -> bool {
        false
    }

    fn plan(
        &mut self,
        _input: &StageInput<'_, T>,
        _ur: &mut UrState<T>,
        _cfg: &TrainConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<StageReport<T>> {
        Ok(StageReport::default())
    }
}

fn phi_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl<T: Scalar> StyleStage<T> for AdversaryStage {
    fn needs_unlabeled(&self, cfg: &TrainConfig) -> bool {
        cfg.uses_unlabeled()
    }

    fn plan(
        &mut self,
        input: &StageInput<'_, T>,
        ur: &mut UrState<T>,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<StageReport<T>> {
        match cfg.adversary.mode {
            AdversaryMode::Off => Ok(StageReport::default()),
            AdversaryMode::NonTargeted => {
                let labeled = stats_of(input.h)?;
                let moved = non_targeted_perturb(&labeled, &cfg.adversary, rng)?;
                let diff = |a: &Tensor<T>, b: &Tensor<T>| {
                    let d: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
                    Tensor::new(a.shape().to_vec(), d)
                };
                Ok(StageReport {
                    target: Some(StyleTarget::Shift {
                        mu: diff(&moved.mu, &labeled.mu)?,
                        sigma: diff(&moved.sigma, &labeled.sigma)?,
                    }),
                    ..Default::default()
                })
            }
            AdversaryMode::Targeted => {
                let x_hat = input
                    .unlabeled
                    .ok_or_else(|| Error::Invalid("targeted mode needs an unlabeled batch".into()))?;
                if x_hat.shape()[0] != input.labels.len() {
                    return Err(Error::Invalid(format!(
                        "unlabeled batch of {} for {} labeled samples",
                        x_hat.shape()[0],
                        input.labels.len()
                    )));
                }
                let h_hat = input.backbone.features(x_hat)?;
                let (raw_hat, z_hat) = input.backbone.embed_features(&h_hat)?;
                let scored = match cfg.entropy_input {
                    EntropyInput::Raw => &raw_hat,
                    EntropyInput::Normalized => &z_hat,
                };
                let picked = select_ur(scored, cfg.ur_top_k)?;
                let before = ur.initialized().then(|| ur.phi().to_vec());
                ur.update(&z_hat.select_rows(&picked)?)?;
                let phi_drift = before.map(|p| phi_distance(&p, ur.phi()));

                let batch = input.labels.len();
                let unlabeled = stats_of(&h_hat)?;
                if !ur.initialized() {
                    return Ok(StageReport {
                        target: Some(StyleTarget::Mix {
                            unlabeled,
                            lam: MixCoefficients::filled(batch, T::one()),
                        }),
                        lam_mean: Some((1.0, 1.0)),
                        phi_drift,
                        ascent_aborted: false,
                    });
                }
                let labeled = stats_of(input.h)?;
                let outcome = pgd_ascend(
                    &AscentInputs {
                        h: input.h,
                        labeled: &labeled,
                        unlabeled: &unlabeled,
                        labels: input.labels,
                        backbone: input.backbone,
                        head: input.head,
                        ur,
                        spec: &cfg.loss,
                    },
                    &cfg.adversary,
                )?;
                Ok(StageReport {
                    lam_mean: Some(outcome.lam.mean()),
                    target: Some(StyleTarget::Mix {
                        unlabeled,
                        lam: outcome.lam,
                    }),
                    phi_drift,
                    ascent_aborted: outcome.aborted.is_some(),
                })
            }
        }
    }
}

/// One metrics line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_train")]
    pub loss: f64,
    #[serde(rename = "L_fr_clean")]
    pub loss_clean: f64,
    #[serde(rename = "L_fr_styled", default, skip_serializing_if = "Option::is_none")]
    pub loss_styled: Option<f64>,
    #[serde(rename = "L_r", default, skip_serializing_if = "Option::is_none")]
    pub loss_rec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam1_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lam2_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_drift: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ascent_aborted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

/// One batch worth of inputs for [`train_step`].
pub struct StepBatch<'a, T> {
    pub x: &'a Tensor<T>,
    pub labels: &'a [i64],
    pub unlabeled: Option<&'a Tensor<T>>,
}

fn styled_features<T: Scalar>(
    g: &mut Graph<T>,
    h: crate::tensor::Var,
    target: &StyleTarget<T>,
) -> Result<crate::tensor::Var> {
    let own = extract_stats(g, h)?;
    match target {
        StyleTarget::Mix { unlabeled, lam } => {
            let u = unlabeled.bind(g, false);
            let m = lam.bind(g, false);
            stylize(g, h, own, u, m)
        }
        StyleTarget::Shift { mu, sigma } => {
            let dm = g.constant(mu.clone());
            let ds = g.constant(sigma.clone());
            let mu = g.add(own.mu, dm)?;
            let sigma = g.add(own.sigma, ds)?;
            let sigma = g.clamp(sigma, T::zero(), T::infinity());
            adain_from(g, h, own, StyleVars { mu, sigma })
        }
    }
}

fn sgd_update<T: Scalar>(param: &mut Tensor<T>, velocity: &mut Tensor<T>, grad: Option<&[T]>, lr: f64, cfg: &TrainConfig) {
    let (wd, mu) = (cfg.weight_decay, cfg.sgd_momentum);
    let n = param.numel();
    let p = param.data_mut();
    let v = velocity.data_mut();
    for i in 0..n {
        let gr = grad.map_or(0.0, |g| g[i].as_f64()) + wd * p[i].as_f64();
        let vi = mu * v[i].as_f64() + gr;
        v[i] = T::from_f64(vi);
        p[i] = T::from_f64(p[i].as_f64() - lr * vi);
    }
}

/// Runs one iteration: stage 1 through `stage`, then the parameter update.
pub fn train_step<T: Scalar, S: StyleStage<T>>(
    state: &mut TrainState<T>,
    stage: &mut S,
    batch: &StepBatch<'_, T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let t = state.t;
    let mut rng = stream_rng(cfg.seed, Stream::Step, t);

    let mut g = Graph::new();
    let vars = state.backbone.bind(&mut g, true);
    let head = state.head.bind(&mut g, true);
    let xv = g.constant(batch.x.clone());
    let h = state.backbone.forward_e1(&mut g, &vars, xv)?;

    let before = cfg.purity_check.then(|| state.model_digest());
    let report = {
        let input = StageInput {
            h: g.value(h),
            labels: batch.labels,
            unlabeled: batch.unlabeled,
            backbone: &state.backbone,
            head: &state.head,
        };
        stage.plan(&input, &mut state.ur, cfg, &mut rng)?
    };
    if let Some(before) = before {
        let after = state.model_digest();
        if before != after {
            return Err(Error::Invalid(format!(
                "style search modified model weights at iteration {t}: {before} -> {after}"
            )));
        }
    }

    let diverged = |e: ModelError| match e {
        ModelError::NonFinite { .. } => Error::NonFiniteLoss { t },
        other => other.into(),
    };
    let clean = state.backbone.forward_e2(&mut g, &vars, h).map_err(diverged)?;
    let cos = logits(&mut g, clean.z, head)?;
    let l_clean = margin_loss(&mut g, cos, batch.labels, &cfg.loss)?;
    let mut styled = None;
    let loss = match &report.target {
        None => l_clean,
        Some(target) => {
            let h_styled = styled_features(&mut g, h, target)?;
            let emb = state.backbone.forward_e2(&mut g, &vars, h_styled).map_err(diverged)?;
            let cos = logits(&mut g, emb.z, head)?;
            let l_styled = margin_loss(&mut g, cos, batch.labels, &cfg.loss)?;
            styled = Some((emb.z, l_styled));
            let w = cfg.styled_loss_weight;
            let a = g.mul_scalar(l_clean, T::from_f64(1.0 - w));
            let b = g.mul_scalar(l_styled, T::from_f64(w));
            g.add(a, b)?
        }
    };
    let loss_value = g.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss { t });
    }

    let loss_rec = match (&report.target, styled) {
        (Some(StyleTarget::Mix { .. }), Some((z, _))) if state.ur.initialized() => {
            let mut side = Graph::new();
            let zc = side.constant(g.value(z).clone());
            let r = recognizability_loss(&mut side, zc, &state.ur)?;
            Some(side.value(r).data()[0].as_f64())
        }
        _ => None,
    };
    let loss_clean = g.value(l_clean).data()[0].as_f64();
    let loss_styled = styled.map(|(_, l)| g.value(l).data()[0].as_f64());

    g.backward(loss)?;
    let mut grads: Vec<Option<Vec<T>>> = vars.convs.iter().map(|&v| g.grad(v).map(<[T]>::to_vec)).collect();
    grads.push(g.grad(vars.proj).map(<[T]>::to_vec));
    grads.push(g.grad(head).map(<[T]>::to_vec));
    drop(g);

    let mut params = state.backbone.params_mut();
    params.push(state.head.weight_mut());
    for ((p, v), gr) in params.into_iter().zip(state.velocity.iter_mut()).zip(&grads) {
        sgd_update(p, v, gr.as_deref(), lr, cfg);
    }
    state.head.renormalize();
    state.t += 1;

    Ok(StepMetrics {
        t,
        epoch: state.epoch,
        lr,
        loss: loss_value,
        loss_clean,
        loss_styled,
        loss_rec,
        lam1_mean: report.lam_mean.map(|m| m.0),
        lam2_mean: report.lam_mean.map(|m| m.1),
        phi_drift: report.phi_drift,
        ascent_aborted: report.ascent_aborted,
        wall_time: (!deterministic(cfg)).then(|| started.elapsed().as_secs_f64()),
    })
}

/// Labeled visiting order for one epoch.
pub fn labeled_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, Stream::LabeledOrder, epoch as u64));
    order
}

/// Endless unlabeled stream: reshuffled each time the set is exhausted.
pub struct UnlabeledCursor {
    len: usize,
    seed: u64,
    cycle: Option<(u64, Vec<usize>)>,
}

impl UnlabeledCursor {
    pub fn new(seed: u64, len: usize) -> Self {
        Self { len, seed, cycle: None }
    }

    /// Index drawn at global position `pos`.
    pub fn at(&mut self, pos: u64) -> usize {
        let cycle = pos / self.len as u64;
        if self.cycle.as_ref().map(|c| c.0) != Some(cycle) {
            let mut perm: Vec<usize> = (0..self.len).collect();
            perm.shuffle(&mut stream_rng(self.seed, Stream::UnlabeledOrder, cycle));
            self.cycle = Some((cycle, perm));
        }
        self.cycle.as_ref().expect("just filled").1[(pos % self.len as u64) as usize]
    }

    pub fn batch(&mut self, t: u64, size: usize) -> Vec<usize> {
        (0..size as u64).map(|i| self.at(t * size as u64 + i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitSummary {
    pub iterations: u64,
    pub metrics: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub final_loss: f64,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains from scratch, or from `resume`, writing a checkpoint after every
/// epoch and one metrics line per iteration into `out_dir`.
pub fn fit(
    labeled: &LabeledSet,
    unlabeled: Option<&UnlabeledSet>,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    match cfg.dtype {
        DType::F32 => fit_with::<f32, _>(labeled, unlabeled, cfg, out_dir, resume, &mut AdversaryStage),
        DType::F64 => fit_with::<f64, _>(labeled, unlabeled, cfg, out_dir, resume, &mut AdversaryStage),
    }
}

/// [`fit`] on dataset files.
pub fn fit_files(
    labeled: &Path,
    unlabeled: Option<&Path>,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitSummary> {
    let labeled = LabeledSet::read(labeled)?;
    let unlabeled = unlabeled.map(UnlabeledSet::read).transpose()?;
    fit(&labeled, unlabeled.as_ref(), cfg, out_dir, resume)
}

pub fn fit_with<T: Scalar, S: StyleStage<T>>(
    labeled: &LabeledSet,
    unlabeled: Option<&UnlabeledSet>,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stage: &mut S,
) -> Result<FitSummary> {
    cfg.validate()?;
    if cfg.dtype != T::DTYPE {
        return Err(Error::Invalid(format!("config dtype {} but training in {}", cfg.dtype, T::DTYPE)));
    }
    let per_epoch = labeled.len() / cfg.batch_size;
    if per_epoch == 0 {
        return Err(Error::Invalid(format!(
            "{} labeled samples cannot fill one batch of {}",
            labeled.len(),
            cfg.batch_size
        )));
    }
    let unlabeled = if stage.needs_unlabeled(cfg) {
        Some(unlabeled.ok_or_else(|| Error::Invalid("this adversary mode needs an unlabeled set".into()))?)
    } else {
        None
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = match resume {
        Some(path) => {
            let (state, saved) = TrainState::<T>::from_checkpoint(&Checkpoint::read(path)?)?;
            if saved.to_text() != cfg.to_text() {
                return Err(Error::Invalid(format!("{} was trained with a different config", path.display())));
            }
            state
        }
        None => TrainState::new(cfg, labeled.num_classes())?,
    };
    if state.head.num_classes() < labeled.num_classes() {
        return Err(Error::Invalid(format!(
            "model has {} prototypes but the labeled set has {} classes",
            state.head.num_classes(),
            labeled.num_classes()
        )));
    }

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = if resume.is_some() {
        OpenOptions::new().append(true).create(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut cursor = unlabeled.map(|u| UnlabeledCursor::new(cfg.seed, u.len()));
    let mut checkpoints = Vec::new();
    let mut final_loss = f64::NAN;

    while state.epoch < cfg.epochs {
        let lr = cfg.lr_at_epoch(state.epoch);
        let order = labeled_order(cfg.seed, state.epoch, labeled.len());
        for idx in order.chunks_exact(cfg.batch_size) {
            let (x, labels) = labeled.batch::<T>(idx)?;
            let x_hat = match (unlabeled, cursor.as_mut()) {
                (Some(u), Some(c)) => Some(u.batch::<T>(&c.batch(state.t, cfg.batch_size))?),
                _ => None,
            };
            let m = train_step(
                &mut state,
                stage,
                &StepBatch {
                    x: &x,
                    labels: &labels,
                    unlabeled: x_hat.as_ref(),
                },
                cfg,
                lr,
            )?;
            final_loss = m.loss;
            let line = serde_json::to_string(&m).map_err(|e| Error::Invalid(e.to_string()))?;
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        state.epoch += 1;
        metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        let path = checkpoint_path(out_dir, state.epoch);
        state.to_checkpoint(cfg).write(&path)?;
        checkpoints.push(path);
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(FitSummary {
        iterations: state.t,
        metrics: metrics_path,
        final_checkpoint: checkpoint_path(out_dir, state.epoch),
        checkpoints,
        final_loss,
    })
}

/// Parses a metrics file written by [`fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}
