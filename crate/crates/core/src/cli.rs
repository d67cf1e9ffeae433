//! Command-line surface: scene synthesis, patch sampling, the three training
//! modes, map prediction, evaluation, and the end-to-end benchmark.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::experiment::{run_bench, ExperimentConfig};
use crate::metrics;
use crate::patch::{extract_patches, load_patch_set, mask_labels, save_patch_set};
use crate::raster::{
    export_png, read_class_map, read_raster, write_class_map, write_raster, FOREST,
};
use crate::scene::{degrade_labels, generate_truth, render_sar};
use crate::seeds;
use crate::selftrain::{predict_map, refine_loop};
use crate::train::{train, write_history, TrainMode};
use crate::unet::{load_checkpoint, save_checkpoint};

#[derive(Parser)]
#[command(
    name = "forestmap",
    version,
    about = "Weakly supervised forest mapping on synthetic dual-polarization SAR"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration layering shared by all subcommands: defaults, then an
/// optional key=value file, then repeated --set overrides, then dedicated
/// flags. Later layers win.
#[derive(Args)]
struct ConfigArgs {
    /// Plain-text key=value configuration file.
    #[arg(long, global = false)]
    config: Option<PathBuf>,
    /// Single key=value override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Global seed; fans out to named substreams.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            config.apply(&text).context("parsing config file")?;
        }
        for pair in &self.sets {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set {pair:?}: expected KEY=VALUE"))?;
            config.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Incomplete,
    Inaccurate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Tiny,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: truth, SAR rendering, degraded labels.
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Square scene side; overrides scene.height and scene.width.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        forest_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample aligned input/label patches from a SAR raster and a class map.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        sar: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Fraction of labeled pixels to keep per patch (mask alone encodes
        /// sparsity); 1.0 keeps every pixel.
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model under one of the three supervision regimes.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Training patch set directory (dense/incomplete modes).
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Validation patch set directory (dense/incomplete modes).
        #[arg(long)]
        val: Option<PathBuf>,
        /// SAR raster (inaccurate mode).
        #[arg(long)]
        sar: Option<PathBuf>,
        /// Initial noisy labels (inaccurate mode).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        keep_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a full probability raster and class map with tiled inference.
    Predict {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        sar: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predicted class map against reference truth.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Method label recorded in evaluation.json.
        #[arg(long, default_value = "custom")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full three-way comparison on one synthetic scene.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum, default_value = "tiny")]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and execute; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            config,
            size,
            forest_fraction,
            out,
        } => {
            let mut config = config.resolve()?;
            if let Some(size) = size {
                config.scene_height = size;
                config.scene_width = size;
            }
            if let Some(f) = forest_fraction {
                config.forest_fraction = f;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), config.resolved())?;
            let spec = config.scene_spec();
            let truth = generate_truth(&spec)?;
            let sar = render_sar(&truth, &spec)?;
            let noisy = degrade_labels(&truth, &config.noise_spec())?;
            write_class_map(&truth, out.join("truth.wslr"))?;
            write_raster(&sar, out.join("sar.wslr"))?;
            write_class_map(&noisy, out.join("noisy_labels.wslr"))?;
            export_png(&truth, out.join("truth.png"))?;
            export_png(&noisy, out.join("noisy_labels.png"))?;
            println!(
                "synth: {}x{} scene, {} forest pixels -> {}",
                truth.height,
                truth.width,
                truth.values.iter().filter(|&&v| v == FOREST).count(),
                out.display()
            );
            Ok(())
        }
        Command::Sample {
            config,
            sar,
            labels,
            keep_fraction,
            out,
        } => {
            let config = config.resolve()?;
            let raster = read_raster(&sar).with_context(|| format!("reading SAR raster {}", sar.display()))?;
            let labels = read_class_map(&labels)?;
            let sample_seed = seeds::subseed(config.seed, "cli.sample");
            let mut set = extract_patches(
                &raster,
                &labels,
                config.patch_size,
                config.patch_count,
                sample_seed,
            )?;
            let keep = keep_fraction.unwrap_or(1.0);
            if keep < 1.0 {
                set = mask_labels(&set, keep, seeds::subseed(config.seed, "mask"))?;
            }
            save_patch_set(&set, &out, sample_seed)?;
            println!(
                "sample: {} patches of {}x{} -> {}",
                set.count,
                set.height,
                set.width,
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            mode,
            patches,
            val,
            sar,
            labels,
            keep_fraction,
            out,
        } => {
            let config = config.resolve()?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.txt"), config.resolved())?;
            match mode {
                Mode::Dense | Mode::Incomplete => {
                    let patches = patches.context("--patches is required for this mode")?;
                    let val = val.context("--val is required for this mode")?;
                    let (mut train_set, _) = load_patch_set(&patches)
                        .with_context(|| format!("loading patches {}", patches.display()))?;
                    let (val_set, _) = load_patch_set(&val)
                        .with_context(|| format!("loading patches {}", val.display()))?;
                    let train_mode = match mode {
                        Mode::Dense => TrainMode::Dense,
                        Mode::Incomplete => {
                            let keep = keep_fraction.unwrap_or(config.keep_fraction);
                            train_set = mask_labels(
                                &train_set,
                                keep,
                                seeds::subseed(config.seed, "mask"),
                            )?;
                            TrainMode::Sparse
                        }
                        Mode::Inaccurate => unreachable!(),
                    };
                    let outcome = train(
                        &config.net()?,
                        &config.train_config("train"),
                        &train_set,
                        &val_set,
                        train_mode,
                    )?;
                    save_checkpoint(&outcome.model, out.join("model.wslm"))?;
                    write_history(&outcome.history, out.join("history.jsonl"))?;
                    let last = outcome.history.last();
                    println!(
                        "train: {} epochs, best val F1 {}",
                        outcome.history.len(),
                        last.and_then(|r| r.val_f1)
                            .map_or("n/a".into(), |f| format!("{f:.4}"))
                    );
                }
                Mode::Inaccurate => {
                    let sar = sar.context("--sar is required for inaccurate mode")?;
                    let labels = labels.context("--labels is required for inaccurate mode")?;
                    let raster = read_raster(&sar)
                        .with_context(|| format!("reading SAR raster {}", sar.display()))?;
                    let initial = read_class_map(&labels)
                        .with_context(|| format!("reading labels {}", labels.display()))?;
                    let outcome =
                        refine_loop(&raster, &initial, &config.refine_config()?, None, Some(&out))?;
                    save_checkpoint(&outcome.model, out.join("model.wslm"))?;
                    write_class_map(&outcome.labels, out.join("refined_labels.wslr"))?;
                    export_png(&outcome.labels, out.join("refined_labels.png"))?;
                    println!(
                        "train: {} refinement rounds, converged: {}",
                        outcome.records.len(),
                        outcome.converged
                    );
                }
            }
            Ok(())
        }
        Command::Predict {
            config,
            model,
            sar,
            out,
        } => {
            let config = config.resolve()?;
            let model = load_checkpoint(&model)
                .with_context(|| format!("loading model {}", model.display()))?;
            let raster = read_raster(&sar)
                .with_context(|| format!("reading SAR raster {}", sar.display()))?;
            let (prob, classes) = predict_map(&model, &raster, config.tile, config.overlap)?;
            std::fs::create_dir_all(&out)?;
            write_raster(&prob, out.join("prob.wslr"))?;
            write_class_map(&classes, out.join("classes.wslr"))?;
            export_png(&classes, out.join("classes.png"))?;
            println!(
                "predict: {}x{} map, {} forest pixels -> {}",
                classes.height,
                classes.width,
                classes.values.iter().filter(|&&v| v == FOREST).count(),
                out.display()
            );
            Ok(())
        }
        Command::Eval {
            config,
            pred,
            truth,
            method,
            out,
        } => {
            let config = config.resolve()?;
            let pred = read_class_map(&pred)
                .with_context(|| format!("reading prediction {}", pred.display()))?;
            let truth = read_class_map(&truth)
                .with_context(|| format!("reading truth {}", truth.display()))?;
            let cm = metrics::confusion(&pred, &truth)?;
            let records = metrics::records_for(&method, &cm, config.seed, &config.hash());
            std::fs::create_dir_all(&out)?;
            metrics::write_evaluation(&records, out.join("evaluation.json"))?;
            let forest = cm.prf(FOREST);
            println!(
                "eval: forest P {} R {} F1 {}",
                fmt_opt(forest.precision),
                fmt_opt(forest.recall),
                fmt_opt(forest.f1)
            );
            Ok(())
        }
        Command::Bench {
            config,
            profile,
            out,
        } => {
            let mut config = config.resolve()?;
            match profile {
                Profile::Tiny => {}
                Profile::Full => {
                    config.net_name = "full".into();
                    config.patch_size = 64;
                    config.tile = 128;
                    config.overlap = 64;
                }
            }
            config.net()?;
            let summary = run_bench(&config, &out)?;
            println!(
                "bench: forest F1 dense {} incomplete {} inaccurate {} ({} rounds, converged: {})",
                fmt_opt(summary.dense_forest_f1),
                fmt_opt(summary.incomplete_forest_f1),
                fmt_opt(summary.inaccurate_forest_f1),
                summary.refine_rounds,
                summary.refine_converged
            );
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}
