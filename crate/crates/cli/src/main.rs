use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use semu::metrics::UnlearnReport;
use semu::unlearn::{BaselineKind, Mode};
use semu_cli::config::{self, RunConfig};
use semu_cli::error::{CliError, CliResult};
use semu_cli::pipeline::{self as pl, RunOptions};
use semu_cli::compare;

#[derive(Parser)]
#[command(name = "semu", version, about = "Unlearning through gradient-subspace adapters")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set unlearn.lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory; falls back to the config's `output_dir`.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker threads for multi-seed runs.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    /// Unlearn seeds to run side by side, each under `<output>/seed-<n>`.
    #[arg(long, value_delimiter = ',', global = true)]
    seeds: Vec<u64>,
    /// Write per-epoch logs next to the outputs.
    #[arg(long, global = true)]
    log_metrics: bool,
    /// Store wall-clock seconds in the report (breaks byte-identical reruns).
    #[arg(long, global = true)]
    record_time: bool,
    /// Allow unlearning modes that read the remain set.
    #[arg(long, global = true)]
    remain_access: bool,
    /// Unlearning mode: forget_only, with_remain or with_subset.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Report of the retrain baseline, for deltas.
    #[arg(long, global = true)]
    retrain_report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a classifier.
    Train,
    /// Run SEMU on a trained classifier.
    Unlearn {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a baseline: retrain, ft, ga or rl.
    Baseline {
        kind: String,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint under the configured split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the forget-gradient spectra without changing the model.
    Spectrum {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Tabulate reports against a retrain anchor.
    Compare {
        reports: Vec<PathBuf>,
        #[arg(long)]
        anchor: Option<PathBuf>,
        /// Also write the comparison as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the conditional noise predictor on the Gaussian mixture.
    DiffusionTrain,
    /// Run SEMU on a trained noise predictor.
    DiffusionUnlearn {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn summary(r: &UnlearnReport) -> String {
    let mia = r.metrics.mia.map_or("-".to_string(), |m| format!("{m:.2}"));
    format!(
        "{} ({}): UA {:.2} RA {:.2} TA {:.2} MIA {} TParams {:.2}%",
        r.method, r.mode, r.metrics.ua, r.metrics.ra, r.metrics.ta, mia, r.metrics.tparams_pct
    )
}

fn output_dir(g: &Global, cfg: &RunConfig) -> CliResult<PathBuf> {
    g.output
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --output or set output_dir"))
}

/// Runs `f` once, or once per `--seeds` entry on a pool of `--jobs` threads.
fn per_seed<F>(g: &Global, cfg: &RunConfig, out: &Path, f: F) -> CliResult<()>
where
    F: Fn(&RunConfig, &Path) -> CliResult<UnlearnReport> + Sync,
{
    if g.seeds.is_empty() {
        println!("{}", summary(&f(cfg, out)?));
        return Ok(());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(g.jobs.max(1))
        .build()
        .map_err(|e| CliError::config(format!("--jobs: {e}")))?;
    let results: Vec<(u64, CliResult<UnlearnReport>)> = pool.install(|| {
        g.seeds
            .par_iter()
            .map(|&s| {
                let mut c = cfg.clone();
                c.seeds.unlearn_seed = s;
                (s, f(&c, &out.join(format!("seed-{s}"))))
            })
            .collect()
    });
    let mut first_err = None;
    for (s, r) in results {
        match r {
            Ok(rep) => println!("seed {s}: {}", summary(&rep)),
            Err(e) => {
                eprintln!("seed {s}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Command::Compare { reports, anchor, json } = &cli.command {
        let cmp = compare::compare(reports, anchor.as_deref())?;
        print!("{}", compare::render(&cmp));
        if let Some(path) = json {
            let text = serde_json::to_string_pretty(&cmp).map_err(|e| CliError::Io(e.to_string()))?;
            semu_cli::error::io_at(path, std::fs::write(path, text + "\n"))?;
        }
        return Ok(());
    }
    let cfg = config::load(g.config.as_deref(), &g.overrides)?;
    let out = output_dir(g, &cfg)?;
    let mode = g
        .mode
        .as_deref()
        .map(|m| m.parse::<Mode>().map_err(CliError::from))
        .transpose()?;
    let opts = RunOptions {
        log_metrics: g.log_metrics,
        record_time: g.record_time,
        remain_access: g.remain_access,
        mode,
        retrain_report: g.retrain_report.clone(),
    };
    let single = |name: &str| {
        if g.seeds.is_empty() {
            Ok(())
        } else {
            Err(CliError::config(format!("--seeds does not apply to {name}")))
        }
    };
    match &cli.command {
        Command::Train => {
            single("train")?;
            let t = pl::cmd_train(&cfg, &out, &opts)?;
            println!(
                "train accuracy {:.2}, test accuracy {:.2}; wrote {}",
                t.train_accuracy,
                t.test_accuracy,
                out.join(pl::CHECKPOINT).display()
            );
        }
        Command::Unlearn { checkpoint } => {
            per_seed(g, &cfg, &out, |c, o| pl::cmd_unlearn(c, checkpoint, o, &opts).map(|u| u.report))?;
        }
        Command::Baseline { kind, checkpoint } => {
            let kind: BaselineKind = kind.parse().map_err(CliError::from)?;
            per_seed(g, &cfg, &out, |c, o| pl::cmd_baseline(kind, c, checkpoint, o, &opts))?;
        }
        Command::Eval { checkpoint } => {
            single("eval")?;
            println!("{}", summary(&pl::cmd_eval(&cfg, checkpoint, &out, &opts)?));
        }
        Command::Spectrum { checkpoint } => {
            single("spectrum")?;
            let spectra = pl::cmd_spectrum(&cfg, checkpoint, &out)?;
            let ranks: Vec<usize> = spectra.iter().map(|s| s.rank).collect();
            println!("chosen ranks {ranks:?}; wrote {}", out.join(pl::SPECTRUM).display());
        }
        Command::DiffusionTrain => {
            single("diffusion-train")?;
            let t = pl::cmd_diffusion_train(&cfg, &out, &opts)?;
            let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ");
            println!(
                "oracle agreement per class: {}; in-distribution: {}",
                fmt(&t.eval.agreement),
                fmt(&t.eval.in_distribution)
            );
        }
        Command::DiffusionUnlearn { checkpoint } => {
            per_seed(g, &cfg, &out, |c, o| {
                pl::cmd_diffusion_unlearn(c, checkpoint, o, &opts).map(|u| u.report)
            })?;
        }
        Command::Compare { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
