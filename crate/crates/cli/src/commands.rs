use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use tsa_core::adversary::AdversaryMode;
use tsa_core::checkpoint::Checkpoint;
use tsa_core::config::TrainConfig;
use tsa_core::data::{generate_dataset, DataConfig, Dataset, DatasetPaths, DomainTag, UnlabeledSet};
use tsa_core::eval::{
    detection_quality, embedding_entropies, evaluate, image_styles, lowest_k, pixel_energy, style_swap_eval,
    DetectionQuality, EvalReport, SwapReport,
};
use tsa_core::style::export_stats;
use tsa_core::tensor::DType;
use tsa_core::trainer::{fit_files, TrainState};

use crate::manifest::{blob_hash, RunManifest, CONFIG_FILE};

/// Bad user input: maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Where the config comes from, in override order.
#[derive(Clone, Debug, Default)]
pub struct ConfigSource {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub deterministic: bool,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let base = TrainConfig::preset(self.preset.as_deref().unwrap_or("desk")).map_err(|e| usage(e.to_string()))?;
        let mut cfg = match &self.file {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                TrainConfig::parse_onto(base, &text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => base,
        };
        for (i, kv) in self.sets.iter().enumerate() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got `{kv}`")))?;
            cfg.set(i + 1, k.trim(), v.trim()).map_err(|e| usage(format!("--set: {e}")))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

/// Dataset files, defaulting to the layout written by `gen-data`.
#[derive(Clone, Debug)]
pub struct DataSource {
    pub dir: PathBuf,
    pub labeled: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

impl DataSource {
    pub fn paths(&self) -> DatasetPaths {
        let d = DatasetPaths::in_dir(&self.dir);
        DatasetPaths {
            labeled: self.labeled.clone().unwrap_or(d.labeled),
            unlabeled: self.unlabeled.clone().unwrap_or(d.unlabeled),
            eval: self.eval.clone().unwrap_or(d.eval),
        }
    }
}

pub fn gen_data(cfg: &DataConfig, out: &Path) -> Result<DatasetPaths> {
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let paths = generate_dataset(cfg, out)?;
    for p in [&paths.labeled, &paths.unlabeled, &paths.eval] {
        println!("{}  {}", blob_hash(&fs::read(p)?), p.display());
    }
    Ok(paths)
}

/// Picks `runs/<config hash>-s<seed>`, suffixed until unused.
pub fn default_run_dir(runs: &Path, cfg: &TrainConfig) -> PathBuf {
    let stem = format!("{}-s{}", &blob_hash(cfg.to_text().as_bytes())[..8], cfg.seed);
    let mut dir = runs.join(&stem);
    let mut n = 1;
    while dir.exists() {
        dir = runs.join(format!("{stem}-{n}"));
        n += 1;
    }
    dir
}

fn run_id(dir: &Path) -> String {
    dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn dataset_roles<'a>(cfg: &TrainConfig, paths: &'a DatasetPaths) -> Vec<(&'static str, &'a Path)> {
    let mut v = vec![("labeled", paths.labeled.as_path())];
    if cfg.uses_unlabeled() {
        v.push(("unlabeled", paths.unlabeled.as_path()));
    }
    v
}

/// Trains into `dir` and writes its manifest.
pub fn train(cfg: &TrainConfig, data: &DatasetPaths, dir: &Path, resume: Option<&Path>) -> Result<RunManifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = cfg.to_text();
    fs::write(dir.join(CONFIG_FILE), &text)?;
    let unlabeled = cfg.uses_unlabeled().then_some(data.unlabeled.as_path());
    let summary = fit_files(&data.labeled, unlabeled, cfg, dir, resume)?;
    println!(
        "trained {} iterations, final loss {:.6}, checkpoint {}",
        summary.iterations,
        summary.final_loss,
        summary.final_checkpoint.display()
    );
    let m = RunManifest::collect(dir, &run_id(dir), &text, &dataset_roles(cfg, data))?;
    m.write(dir)?;
    Ok(m)
}

pub enum Model {
    F32(TrainState<f32>),
    F64(TrainState<f64>),
}

pub fn load_model(path: &Path) -> Result<(Model, TrainConfig)> {
    let ck = Checkpoint::read(path)?;
    let cfg = TrainConfig::parse(&ck.config_text)?;
    Ok(match cfg.dtype {
        DType::F32 => (Model::F32(TrainState::from_checkpoint(&ck)?.0), cfg),
        DType::F64 => (Model::F64(TrainState::from_checkpoint(&ck)?.0), cfg),
    })
}

macro_rules! with_backbone {
    ($model:expr, |$b:ident| $body:expr) => {
        match $model {
            Model::F32(s) => {
                let $b = &s.backbone;
                $body
            }
            Model::F64(s) => {
                let $b = &s.backbone;
                $body
            }
        }
    };
}

pub fn eval_checkpoint(ckpt: &Path, eval: &Path) -> Result<EvalReport> {
    let (model, cfg) = load_model(ckpt)?;
    let ds = Dataset::read(eval)?;
    Ok(with_backbone!(&model, |b| evaluate(b, &ds, &cfg.eval))?)
}

pub fn swap_checkpoint(ckpt: &Path, eval: &Path, unlabeled: &Path, swap_seed: Option<u64>) -> Result<SwapReport> {
    let (model, mut cfg) = load_model(ckpt)?;
    if let Some(s) = swap_seed {
        cfg.eval.swap_seed = s;
    }
    let ds = Dataset::read(eval)?;
    let u = UnlabeledSet::read(unlabeled)?;
    Ok(with_backbone!(&model, |b| style_swap_eval(b, &ds, &u, &cfg.eval))?)
}

pub fn report_table(r: &EvalReport) -> String {
    let mut s = format!("{:<16}{:>10}\n", "metric", "value");
    for a in &r.identification {
        let _ = writeln!(s, "{:<16}{:>10.4}", format!("rank-{}", a.k), a.accuracy);
    }
    for v in &r.verification {
        let _ = writeln!(s, "{:<16}{:>10.4}", format!("TAR@FAR={}", v.far), v.tar);
    }
    s
}

pub fn swap_table(r: &SwapReport) -> String {
    let mut s = format!("{:<16}{:>10}{:>10}\n", "metric", "original", "swapped");
    for (a, b) in r.original.identification.iter().zip(&r.swapped.identification) {
        let _ = writeln!(s, "{:<16}{:>10.4}{:>10.4}", format!("rank-{}", a.k), a.accuracy, b.accuracy);
    }
    for (a, b) in r.original.verification.iter().zip(&r.swapped.verification) {
        let _ = writeln!(s, "{:<16}{:>10.4}{:>10.4}", format!("TAR@FAR={}", a.far), a.tar, b.tar);
    }
    let _ = writeln!(s, "{:<16}{:>10.4}", "delta rank-1", r.delta_rank1);
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct UrAudit {
    pub records: usize,
    pub top_k: usize,
    /// Lowest-entropy selection from the checkpoint's embeddings.
    pub model: Option<DetectionQuality>,
    /// Lowest pixel-variance selection, independent of any model.
    pub pixel_energy: DetectionQuality,
}

pub fn ur_audit(unlabeled: &Path, ckpt: Option<&Path>, top_k: Option<usize>) -> Result<UrAudit> {
    let ds = Dataset::read(unlabeled)?;
    let planted: Vec<bool> = ds.records.iter().map(|r| r.tag == DomainTag::UcUnrecognizable).collect();
    let k = top_k.unwrap_or_else(|| planted.iter().filter(|&&p| p).count());
    if k == 0 || k > planted.len() {
        return Err(usage(format!("top-k {k} outside 1..={}", planted.len())));
    }
    let energies: Vec<f64> = ds.records.iter().map(|r| pixel_energy(&r.image)).collect();
    let pixel = detection_quality(&lowest_k(&energies, k)?, &planted);
    let model = match ckpt {
        Some(path) => {
            let (model, cfg) = load_model(path)?;
            let images: Vec<&[u8]> = ds.records.iter().map(|r| r.image.as_slice()).collect();
            let h = with_backbone!(&model, |b| embedding_entropies(b, &images, cfg.entropy_input))?;
            Some(detection_quality(&lowest_k(&h, k)?, &planted))
        }
        None => None,
    };
    Ok(UrAudit {
        records: planted.len(),
        top_k: k,
        model,
        pixel_energy: pixel,
    })
}

pub fn audit_table(a: &UrAudit) -> String {
    let mut s = format!("{:<14}{:>8}{:>11}{:>9}\n", "selector", "hits", "precision", "recall");
    let mut row = |name: &str, q: &DetectionQuality| {
        let _ = writeln!(s, "{name:<14}{:>8}{:>11.4}{:>9.4}", q.hits, q.precision, q.recall);
    };
    if let Some(q) = &a.model {
        row("entropy", q);
    }
    row("pixel_energy", &a.pixel_energy);
    s
}

/// One CSV row per image of every split, tagged `<split>/<domain>`.
pub fn export(ckpt: &Path, data: &DatasetPaths, out: &Path) -> Result<usize> {
    let (model, _) = load_model(ckpt)?;
    let mut groups: Vec<(String, Vec<&[u8]>)> = Vec::new();
    let sets = [
        ("labeled", Dataset::read(&data.labeled)?),
        ("unlabeled", Dataset::read(&data.unlabeled)?),
        ("eval", Dataset::read(&data.eval)?),
    ];
    for (split, ds) in &sets {
        for r in &ds.records {
            let tag = format!("{split}/{}", r.tag.as_str());
            match groups.last_mut() {
                Some((t, imgs)) if *t == tag => imgs.push(&r.image),
                _ => groups.push((tag, vec![&r.image])),
            }
        }
    }
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let rows: usize = groups.iter().map(|(_, v)| v.len()).sum();
    with_backbone!(&model, |b| {
        let stats = groups
            .iter()
            .map(|(_, imgs)| image_styles(b, imgs))
            .collect::<tsa_core::Result<Vec<_>>>()?;
        let refs: Vec<(&str, &_)> = groups.iter().map(|(t, _)| t.as_str()).zip(&stats).collect();
        export_stats(BufWriter::new(file), &refs).with_context(|| format!("writing {}", out.display()))?;
    });
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub run_dir: String,
    pub final_loss: f64,
    pub eval: EvalReport,
    pub delta_rank1: f64,
}

/// Trains and scores one config per label into `out/<label>`, then writes
/// `summary.json` and `summary.csv`.
pub fn ablate(runs: Vec<(String, TrainConfig)>, data: &DatasetPaths, out: &Path) -> Result<Vec<AblationRow>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for (label, cfg) in runs {
        let dir = out.join(&label);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        println!("== {label}");
        train(&cfg, data, &dir, None)?;
        let ckpt = tsa_core::trainer::checkpoint_path(&dir, cfg.epochs);
        let report = eval_checkpoint(&ckpt, &data.eval)?;
        let swap = swap_checkpoint(&ckpt, &data.eval, &data.unlabeled, None)?;
        write_json(&dir.join("eval.json"), &report)?;
        write_json(&dir.join("style_swap.json"), &swap)?;
        let text = cfg.to_text();
        let roles = [
            ("labeled", data.labeled.as_path()),
            ("unlabeled", data.unlabeled.as_path()),
            ("eval", data.eval.as_path()),
        ];
        RunManifest::collect(&dir, &label, &text, &roles)?.write(&dir)?;
        let final_loss = tsa_core::trainer::read_metrics(&dir.join(tsa_core::trainer::METRICS_FILE))?
            .last()
            .map_or(f64::NAN, |m| m.loss);
        rows.push(AblationRow {
            run_dir: dir.display().to_string(),
            label,
            final_loss,
            eval: report,
            delta_rank1: swap.delta_rank1,
        });
    }
    write_json(&out.join("summary.json"), &rows)?;
    fs::write(out.join("summary.csv"), summary_csv(&rows))?;
    Ok(rows)
}

fn summary_columns(rows: &[AblationRow]) -> Vec<String> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut cols = vec!["run".to_string(), "final_loss".to_string()];
    cols.extend(first.eval.identification.iter().map(|a| format!("rank{}", a.k)));
    cols.extend(first.eval.verification.iter().map(|v| format!("tar@far{}", v.far)));
    cols.push("swap_delta_rank1".into());
    cols
}

fn summary_values(r: &AblationRow) -> Vec<f64> {
    let mut v = vec![r.final_loss];
    v.extend(r.eval.identification.iter().map(|a| a.accuracy));
    v.extend(r.eval.verification.iter().map(|t| t.tar));
    v.push(r.delta_rank1);
    v
}

fn summary_csv(rows: &[AblationRow]) -> String {
    let mut s = summary_columns(rows).join(",") + "\n";
    for r in rows {
        let vals: Vec<String> = summary_values(r).iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{},{}", r.label, vals.join(","));
    }
    s
}

pub fn summary_table(rows: &[AblationRow]) -> String {
    let cols = summary_columns(rows);
    let mut s = String::new();
    for c in &cols {
        let _ = write!(s, "{c:>18}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{:>18}", r.label);
        for v in summary_values(r) {
            let _ = write!(s, "{v:>18.4}");
        }
        s.push('\n');
    }
    s
}

pub fn beta_runs(base: &TrainConfig, grid: &[f64]) -> Result<Vec<(String, TrainConfig)>> {
    if base.adversary.mode != AdversaryMode::Targeted {
        return Err(usage("ablate-beta needs adversary.mode = targeted"));
    }
    let mut seen = std::collections::BTreeSet::new();
    grid.iter()
        .map(|&beta| {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(usage(format!("beta {beta} must be a non-negative number")));
            }
            let label = format!("beta_{beta}");
            if !seen.insert(label.clone()) {
                return Err(usage(format!("beta {beta} repeated in grid")));
            }
            let mut cfg = base.clone();
            cfg.adversary.beta = beta;
            Ok((label, cfg))
        })
        .collect()
}

pub fn mode_runs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    [AdversaryMode::Off, AdversaryMode::NonTargeted, AdversaryMode::Targeted]
        .into_iter()
        .map(|mode| {
            let mut cfg = base.clone();
            cfg.adversary.mode = mode;
            (format!("mode_{}", mode.as_str()), cfg)
        })
        .collect()
}

pub fn write_report(path: &Path, value: &impl Serialize) -> Result<()> {
    write_json(path, value)
}
