//! `relumix`: generate data, train, propagate, evaluate and run the ablation.
//!
//! Errors print one line, `error[<kind>] <message>`, and exit with 2 (config), 3 (data) or
//! 4 (numerical). `RELUMIX_THREADS` caps the worker pool; unset means one thread.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use relumix_core::config::{config_help, parse_config, RunConfig};
use relumix_core::edm::GuidanceMode;
use relumix_core::error::{Error, Result};
use relumix_core::experiments::{compare_reports, run_ablation};
use relumix_core::metrics::{self, AngleStd, EvalOptions, MetricsReport, PristineStats};
use relumix_core::propagator::Propagator;
use relumix_core::scenegen::{generate_dataset, DatasetManifest, Split};
use relumix_core::trainer::{train, ClipStore};
use relumix_core::{io, Variant};

const DRIFT_NOTE: &str = "Clips longer than the model's frame count are relit in overlapping windows, each \
anchored on the previous window's last generated frame. Errors compound across windows, so colour and \
shading can drift on long clips.";

#[derive(Parser, Debug)]
#[command(
    name = "relumix",
    version,
    about = "Reference-guided video relighting on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GuidanceArg {
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AngleArg {
    Literal,
    Circular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    #[command(after_long_help = config_help())]
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one variant on the training split.
    #[command(after_long_help = config_help())]
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// fr, fr_ef, fr_gc or full.
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Relight a clip so it follows a reference frame.
    #[command(after_long_help = format!("{DRIFT_NOTE}\n\n{}", config_help()))]
    Propagate {
        /// Checkpoint path, with or without the .ckpt.json extension.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame directory or `dir/prefix*.png` pattern.
        #[arg(long)]
        input: PathBuf,
        /// Relit reference PNG for frame 0.
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the `edm` section; other sections are ignored.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        guidance: Option<GuidanceArg>,
        /// Write the reference verbatim as output frame 0.
        #[arg(long)]
        paste_reference: bool,
    },
    /// Score clips and write a JSON report.
    Eval {
        /// Clip directory, or a tree of clip directories.
        #[arg(long)]
        pred: PathBuf,
        /// Ground truth with the same clip ids; enables SSIM, PSNR and the perceptual proxy.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Pristine statistics from `fit-pristine`; enables the NSS score.
        #[arg(long)]
        pristine: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "literal")]
        angle_std: AngleArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit NSS pristine statistics on ground-truth frames of a dataset split.
    FitPristine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and compare all variants; writes result.json, tables and plots.
    #[command(after_long_help = config_help())]
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Paired Wilcoxon signed-rank test between two reports.
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "ssim")]
        metric: String,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn threads() -> Result<usize> {
    match std::env::var("RELUMIX_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(
                "RELUMIX_THREADS",
                format!("must be a positive integer, got `{v}`"),
            )),
        },
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string(value).map_err(|e| Error::data(None, e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build_global()
        .map_err(|e| Error::config("RELUMIX_THREADS", e.to_string()))?;
    match cli.command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let m = generate_dataset(&cfg.data, &out, workers)?;
            print_json(
                &serde_json::json!({"root": out, "scenes": m.scenes.len(), "split_counts": m.split_counts}),
            )
        }
        Command::Train {
            config,
            data,
            out,
            variant,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let manifest = DatasetManifest::load(&data)?;
            let store = ClipStore::load(&manifest, Split::Train)?;
            let outcome = train(&cfg.setup_for(variant), &store, &out)?;
            print_json(&serde_json::json!({
                "checkpoint": outcome.final_checkpoint,
                "log": outcome.log,
                "final_loss": outcome.losses.last(),
            }))
        }
        Command::Propagate {
            checkpoint,
            input,
            reference,
            out,
            config,
            seed,
            guidance,
            paste_reference,
        } => {
            let mut edm = load_config(config.as_deref(), None)?.edm;
            if let Some(g) = guidance {
                edm.guidance.mode = match g {
                    GuidanceArg::Linear => GuidanceMode::LinearPerFrame,
                    GuidanceArg::Constant => GuidanceMode::Constant,
                };
            }
            let mut prop = Propagator::from_checkpoint(io::load_checkpoint(&checkpoint)?, edm)?;
            prop.paste_reference = paste_reference;
            let clip = io::read_clip(&input)?;
            let r = io::read_png(&reference)?;
            let result = prop.propagate(&clip, &r, seed)?;
            io::write_clip(&result, &out)?;
            print_json(&serde_json::json!({"out": out, "frames": result.frames}))
        }
        Command::Eval {
            pred,
            gt,
            pristine,
            angle_std,
            out,
        } => {
            let clips = io::read_clips(&pred)?;
            let truth = gt.as_deref().map(io::read_clips).transpose()?;
            let stats: Option<PristineStats> =
                pristine.as_deref().map(io::read_json).transpose()?;
            let opts = EvalOptions {
                angle_std: match angle_std {
                    AngleArg::Literal => AngleStd::Literal,
                    AngleArg::Circular => AngleStd::Circular,
                },
            };
            let report = metrics::evaluate(&clips, truth.as_ref(), stats.as_ref(), &opts)?;
            io::write_json(&out, &report)?;
            let means: BTreeMap<&String, f64> = report.iter().map(|(k, v)| (k, v.mean)).collect();
            print_json(&means)
        }
        Command::FitPristine { data, split, out } => {
            let manifest = DatasetManifest::load(&data)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let mut features = Vec::new();
            for scene in manifest.scenes_in(split) {
                for &l in &scene.lightings {
                    for f in manifest.load_clip(scene.id, l)?.frames() {
                        features.push(metrics::brisque_features(&f)?);
                    }
                }
            }
            let stats = PristineStats::fit(&features)?;
            io::write_json(&out, &stats)?;
            print_json(&serde_json::json!({"out": out, "frames": stats.frames}))
        }
        Command::Ablate {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(config.as_deref(), seed)?;
            let result = run_ablation(&cfg, &data, &out)?;
            let summary: BTreeMap<String, BTreeMap<&String, f64>> = result
                .variants
                .iter()
                .map(|v| {
                    (
                        v.variant.label().to_string(),
                        v.metrics.iter().map(|(k, e)| (k, e.mean)).collect(),
                    )
                })
                .collect();
            print_json(&summary)
        }
        Command::Stats { a, b, metric } => {
            let ra: MetricsReport = io::read_json(&a)?;
            let rb: MetricsReport = io::read_json(&b)?;
            let r = compare_reports(&ra, &rb, &metric)?;
            print_json(&serde_json::json!({
                "metric": metric,
                "mean_a": ra[&metric].mean,
                "mean_b": rb[&metric].mean,
                "p": r.p,
                "w": r.w,
                "n": r.n,
                "exact": r.exact,
                "degenerate": r.degenerate,
            }))
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("error[usage] {}", one_line(&e.render().to_string()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}] {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
