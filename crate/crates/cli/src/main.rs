use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use stainqc::benchmark::BenchMethod;
use stainqc::config::{Paths, RunConfig};
use stainqc::features::Budget;
use stainqc::pipeline::{Dataset, EvalSet, FixationMethod, Pipeline, PredictMethod};
use stainqc::slide_io::Resolution;
use stainqc::taxonomy::StainClass;

/// Environment variable that relocates the cache tree.
const CACHE_ENV: &str = "STAINQC_CACHE_DIR";

#[derive(Parser, Debug)]
#[command(name = "stainqc", version, about = "Stain classification of whole-slide images")]
struct Cli {
    /// TOML run configuration. Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in settings used when no config file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Root for data, cache, bags, checkpoints and reports (overrides the config paths).
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Parallel workers for per-slide stages (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Full-scale sizes.
    Full,
    /// Small backbone and thumbnails that train on a laptop CPU.
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DatasetArg {
    Main,
    External,
    All,
}

impl DatasetArg {
    fn list(self) -> Vec<Dataset> {
        match self {
            DatasetArg::Main => vec![Dataset::Main],
            DatasetArg::External => vec![Dataset::External],
            DatasetArg::All => vec![Dataset::Main, Dataset::External],
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FixationArg {
    Thumbnail,
    Mil,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration as TOML.
    Config,
    /// Generate the synthetic main corpus and external H&E set.
    Synth {
        /// Slides per class.
        #[arg(long)]
        n: Option<usize>,
        /// Use only N classes: the two H&E classes, then special stains in taxonomy order.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Cache downscaled thumbnails.
    Thumbs {
        #[arg(long, value_enum, default_value_t = DatasetArg::All)]
        dataset: DatasetArg,
    },
    /// Segment tissue on the cached thumbnails.
    Segment {
        #[arg(long, value_enum, default_value_t = DatasetArg::All)]
        dataset: DatasetArg,
    },
    /// Tessellate tissue into patch grids.
    Patch {
        #[arg(long)]
        mpp: Option<f64>,
        #[arg(long, value_enum, default_value_t = DatasetArg::All)]
        dataset: DatasetArg,
    },
    /// Encode every tissue patch with the fine-tuned patch encoder.
    Features {
        #[arg(long)]
        mpp: Option<f64>,
        #[arg(long, value_enum, default_value_t = DatasetArg::All)]
        dataset: DatasetArg,
    },
    /// Fine-tune the backbone on patches.
    TrainPatch {
        #[arg(long)]
        mpp: Option<f64>,
    },
    /// Train the gated-attention MIL head on frozen features.
    TrainMil {
        /// `all` or a patch count.
        #[arg(long, default_value = "all")]
        budget: String,
        #[arg(long)]
        mpp: Option<f64>,
    },
    /// Fine-tune the thumbnail classifier from the patch-level checkpoint.
    TrainThumb {
        /// WIDTHxHEIGHT of the landscape input, e.g. 1792x896.
        #[arg(long)]
        resolution: Option<String>,
    },
    /// Train the binary FFPE vs frozen-section model on H&E slides.
    TrainFixation {
        #[arg(long, value_enum)]
        method: FixationArg,
    },
    /// Predict slides: the main holdout or the external set.
    Predict {
        /// thumbnail, mil, voting, fixation-thumbnail or fixation-mil.
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "all")]
        budget: String,
        #[arg(long, value_enum, default_value_t = DatasetArg::Main)]
        dataset: DatasetArg,
    },
    /// Score predictions and update the summary table.
    Evaluate {
        /// fine, coarse, external or fixation.
        #[arg(long, default_value = "fine")]
        set: String,
        /// Prediction file name (without extension); every available one when omitted.
        #[arg(long)]
        name: Option<String>,
    },
    /// MIL macro F1 across patch magnifications.
    AblateMagnification,
    /// Thumbnail macro F1 across input resolutions.
    AblateResolution,
    /// Five-fold MIL vs voting at k = all and the configured budget.
    AblateBudget,
    /// Grad-CAM, attention and vote maps for one slide.
    Maps {
        #[arg(long)]
        slide: String,
        #[arg(long, value_enum, default_value_t = DatasetArg::Main)]
        dataset: DatasetArg,
    },
    /// Time the inference pipelines on a synthetic benchmark slide.
    Bench {
        /// thumbnail, mil_k20 or mil_all; repeatable, all three when omitted.
        #[arg(long)]
        method: Vec<String>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Config => "config",
            Command::Synth { .. } => "synth",
            Command::Thumbs { .. } => "thumbs",
            Command::Segment { .. } => "segment",
            Command::Patch { .. } => "patch",
            Command::Features { .. } => "features",
            Command::TrainPatch { .. } => "train-patch",
            Command::TrainMil { .. } => "train-mil",
            Command::TrainThumb { .. } => "train-thumb",
            Command::TrainFixation { .. } => "train-fixation",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::AblateMagnification => "ablate-magnification",
            Command::AblateResolution => "ablate-resolution",
            Command::AblateBudget => "ablate-budget",
            Command::Maps { .. } => "maps",
            Command::Bench { .. } => "bench",
        }
    }
}

fn parse_resolution(s: &str) -> Result<Resolution> {
    let (w, h) = s.split_once(['x', 'X']).with_context(|| format!("resolution `{s}` is not WIDTHxHEIGHT"))?;
    Ok(Resolution::new(w.trim().parse()?, h.trim().parse()?))
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => match cli.preset {
            Preset::Full => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        },
    };
    if let Some(root) = &cli.root {
        cfg.paths = Paths::under(root);
    }
    if let Ok(dir) = std::env::var(CACHE_ENV) {
        cfg.paths.cache = dir.into();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match &cli.command {
        Command::Synth { n, classes } => {
            if let Some(n) = n {
                cfg.corpus.per_class = *n;
                cfg.corpus.external_per_class = *n;
            }
            if let Some(c) = classes {
                if *c == 0 || *c > StainClass::ALL.len() {
                    bail!("--classes must be between 1 and {}", StainClass::ALL.len());
                }
                // H&E first so small corpora still cover fixation and the external set.
                let he = [StainClass::HeFfpe, StainClass::HeFs];
                let order = he.iter().chain(StainClass::ALL.iter().filter(|k| !he.contains(k)));
                cfg.corpus.classes = order.take(*c).map(|k| k.id().to_string()).collect();
            }
        }
        Command::Bench { reps: Some(r), .. } => cfg.bench.repetitions = *r,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let p = Pipeline::new(cfg, cli.force)?;
    let snap = p.snapshot(cli.command.name())?;
    log::info!("resolved config written to {}", snap.display());
    let default_mpp = p.cfg.patch.mpp;
    match cli.command {
        Command::Config => unreachable!(),
        Command::Synth { .. } => {
            let (main, ext) = p.synth()?;
            p.splits()?;
            println!("main: {} slides, external: {} slides", main.len(), ext.len());
        }
        Command::Thumbs { dataset } => {
            for d in dataset.list() {
                println!("{}: {} thumbnails written", d.as_str(), p.thumbs(d)?);
            }
        }
        Command::Segment { dataset } => {
            for d in dataset.list() {
                println!("{}: {} masks written", d.as_str(), p.segment(d)?);
            }
        }
        Command::Patch { mpp, dataset } => {
            for d in dataset.list() {
                println!("{}: {} grids written", d.as_str(), p.patch(d, mpp.unwrap_or(default_mpp))?);
            }
        }
        Command::Features { mpp, dataset } => {
            for d in dataset.list() {
                println!("{}: {} bags written", d.as_str(), p.features(d, mpp.unwrap_or(default_mpp))?);
            }
        }
        Command::TrainPatch { mpp } => report_training(p.train_patch(mpp.unwrap_or(default_mpp))?),
        Command::TrainMil { budget, mpp } => report_training(p.train_mil(Budget::parse(&budget)?, mpp.unwrap_or(default_mpp))?),
        Command::TrainThumb { resolution } => {
            let res = match resolution {
                Some(r) => parse_resolution(&r)?,
                None => p.cfg.thumbnail.resolution,
            };
            report_training(p.train_thumb(res)?)
        }
        Command::TrainFixation { method } => {
            let m = match method {
                FixationArg::Thumbnail => FixationMethod::Thumbnail,
                FixationArg::Mil => FixationMethod::Mil,
            };
            report_training(p.train_fixation(m)?)
        }
        Command::Predict { method, budget, dataset } => {
            let m = PredictMethod::parse(&method, Budget::parse(&budget)?)?;
            for d in dataset.list() {
                println!("{}", p.predict(m, d)?.display());
            }
        }
        Command::Evaluate { set, name } => {
            let set = EvalSet::parse(&set)?;
            let d = if set == EvalSet::External { Dataset::External } else { Dataset::Main };
            let names = match name {
                Some(n) => vec![n],
                None => p.available_predictions(d)?,
            };
            if names.is_empty() {
                bail!("no predictions for the {} set; run `stainqc predict` first", d.as_str());
            }
            println!("{:<24} {:>8} {:>8} {:>8} {:>10} {:>6}", "method", "F1", "W-F1", "AUROC", "round std", "n");
            for n in names {
                let fixation = n.starts_with("fixation");
                if fixation != (set == EvalSet::Fixation) {
                    continue;
                }
                let out = p.evaluate(set, &n, d)?;
                let r = &out.report;
                let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
                println!(
                    "{:<24} {:>8.4} {:>8.4} {:>8} {:>10} {:>6}",
                    n,
                    r.macro_f1,
                    r.weighted_f1,
                    fmt(r.auroc),
                    fmt(out.round_stats().map(|s| s.1)),
                    r.n_slides
                );
            }
        }
        Command::AblateMagnification => {
            for r in p.ablate_magnification()? {
                println!("{} mpp: macro F1 {:.4}, coarse {:.4}", r.setting, r.macro_f1, r.coarse_macro_f1);
            }
        }
        Command::AblateResolution => {
            for r in p.ablate_resolution()? {
                println!("{}: macro F1 {:.4}, coarse {:.4}", r.setting, r.macro_f1, r.coarse_macro_f1);
            }
        }
        Command::AblateBudget => {
            let out = p.ablate_budget()?;
            for (m, (mean, std)) in &out.summary {
                println!("{m:<12} {mean:.4} ± {std:.4}");
            }
            println!(
                "MIL - voting: all {:+.4}, k {:+.4}; MIL all - k {:+.4}",
                out.mil_minus_voting_all.mean, out.mil_minus_voting_k.mean, out.mil_all_minus_k.mean
            );
        }
        Command::Maps { slide, dataset } => {
            let d = match dataset {
                DatasetArg::External => Dataset::External,
                _ => Dataset::Main,
            };
            println!("{}", p.maps(d, &slide)?.display());
        }
        Command::Bench { method, .. } => {
            let methods = if method.is_empty() {
                BenchMethod::ALL.to_vec()
            } else {
                method.iter().map(|m| BenchMethod::parse(m)).collect::<stainqc::Result<Vec<_>>>()?
            };
            for r in p.bench(&methods, p.cfg.bench.repetitions)? {
                println!(
                    "{:<10} {:>10.3} slides/s over {} reps ({} patches)",
                    r.method.as_str(),
                    r.mean_slides_per_second,
                    r.repetitions,
                    r.patches_encoded.map(|n| n.to_string()).unwrap_or_else(|| "no".into())
                );
            }
        }
    }
    Ok(())
}

fn report_training(out: Option<stainqc::training::LoopOutcome>) {
    match out {
        None => println!("checkpoint exists; use --force to retrain"),
        Some(o) => println!(
            "trained {} epochs, best epoch {} ({}){}",
            o.history.len(),
            o.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
            o.best_metric.map(|m| format!("val macro F1 {m:.4}")).unwrap_or_else(|| "no validation".into()),
            if o.stopped_early { ", stopped early" } else { "" }
        ),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
