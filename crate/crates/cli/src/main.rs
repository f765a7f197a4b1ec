use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tsa_cli::commands::{self, ConfigSource, DataSource, UsageError};
use tsa_core::data::DataConfig;

#[derive(Parser)]
#[command(name = "tsa", version, about = "Targeted style adversary training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Base preset applied before the config file: desk, paper or bench.
    #[arg(long)]
    preset: Option<String>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` assignment, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, wall-time-free metrics. Also set by TSA_DETERMINISTIC=1.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArgs {
    fn source(&self) -> ConfigSource {
        ConfigSource {
            preset: self.preset.clone(),
            file: self.config.clone(),
            sets: self.sets.clone(),
            seed: self.seed,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by gen-data.
    #[arg(long, default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    labeled: Option<PathBuf>,
    #[arg(long)]
    unlabeled: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        DataSource {
            dir: self.data.clone(),
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic labeled, unlabeled and eval sets.
    GenData {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        identities: usize,
        #[arg(long, default_value_t = 100)]
        imgs_per_id: usize,
        #[arg(long, default_value_t = 50)]
        unlabeled_identities: usize,
        #[arg(long, default_value_t = 1000)]
        unlabeled_size: usize,
        #[arg(long, default_value_t = 0.2)]
        ur_fraction: f64,
        #[arg(long, default_value_t = 50)]
        eval_identities: usize,
        #[arg(long, default_value_t = 4)]
        probes_per_id: usize,
    },
    /// Train one model into a run directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Run directory; defaults to a fresh directory under --runs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Continue from a checkpoint trained with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank-k identification and TAR@FAR of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// JSON report path; defaults to eval.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics before and after swapping eval styles for unlabeled ones.
    StyleSwapEval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        swap_seed: Option<u64>,
        /// JSON report path; defaults to style_swap.json next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precision and recall of unrecognizable-sample selection on a tagged set.
    UrAudit {
        #[command(flatten)]
        data: DataArgs,
        /// Score the entropy selection of this checkpoint too.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Selection size; defaults to the planted count.
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image feature statistics of every split as CSV.
    ExportStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "stats.csv")]
        out: PathBuf,
    },
    /// Train and evaluate over a grid of recognizability weights.
    AblateBeta {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,10")]
        grid: Vec<f64>,
        #[arg(long, default_value = "runs/ablate-beta")]
        out: PathBuf,
    },
    /// Train and evaluate with the adversary off, non-targeted and targeted.
    AblateMode {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "runs/ablate-mode")]
        out: PathBuf,
    },
}

fn sibling(checkpoint: &std::path::Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(std::path::Path::new(".")).join(name)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            seed,
            identities,
            imgs_per_id,
            unlabeled_identities,
            unlabeled_size,
            ur_fraction,
            eval_identities,
            probes_per_id,
        } => {
            let cfg = DataConfig {
                num_identities: identities,
                imgs_per_id,
                unlabeled_identities,
                unlabeled_size,
                ur_fraction,
                eval_identities,
                eval_probes_per_id: probes_per_id,
                seed,
            };
            commands::gen_data(&cfg, &out)?;
        }
        Command::Train {
            config,
            data,
            out,
            runs,
            resume,
        } => {
            let cfg = config.source().resolve()?;
            let dir = out.unwrap_or_else(|| commands::default_run_dir(&runs, &cfg));
            let m = commands::train(&cfg, &data.source().paths(), &dir, resume.as_deref())?;
            println!("run {} in {}", m.run_id, dir.display());
        }
        Command::Eval { checkpoint, data, out } => {
            let report = commands::eval_checkpoint(&checkpoint, &data.source().paths().eval)?;
            commands::write_report(&out.unwrap_or_else(|| sibling(&checkpoint, "eval.json")), &report)?;
            print!("{}", commands::report_table(&report));
        }
        Command::StyleSwapEval {
            checkpoint,
            data,
            swap_seed,
            out,
        } => {
            let p = data.source().paths();
            let report = commands::swap_checkpoint(&checkpoint, &p.eval, &p.unlabeled, swap_seed)?;
            commands::write_report(&out.unwrap_or_else(|| sibling(&checkpoint, "style_swap.json")), &report)?;
            print!("{}", commands::swap_table(&report));
        }
        Command::UrAudit {
            data,
            checkpoint,
            top_k,
            out,
        } => {
            let audit = commands::ur_audit(&data.source().paths().unlabeled, checkpoint.as_deref(), top_k)?;
            if let Some(out) = out {
                commands::write_report(&out, &audit)?;
            }
            println!("{} records, top-k {}", audit.records, audit.top_k);
            print!("{}", commands::audit_table(&audit));
        }
        Command::ExportStats { checkpoint, data, out } => {
            let rows = commands::export(&checkpoint, &data.source().paths(), &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Command::AblateBeta { config, data, grid, out } => {
            let cfg = config.source().resolve()?;
            let rows = commands::ablate(commands::beta_runs(&cfg, &grid)?, &data.source().paths(), &out)?;
            print!("{}", commands::summary_table(&rows));
        }
        Command::AblateMode { config, data, out } => {
            let cfg = config.source().resolve()?;
            let rows = commands::ablate(commands::mode_runs(&cfg), &data.source().paths(), &out)?;
            print!("{}", commands::summary_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    tsa_core::runtime::retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
