//! Key=value experiment configuration and the end-to-end benchmark that
//! compares dense, incomplete, and inaccurate supervision on one synthetic
//! scene.

use std::fmt::Write as FmtWrite;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::metrics::{self, EvalRecord};
use crate::patch::{
    crop_class_map, crop_raster, extract_patches_in, mask_labels, split_scene, Extent, PatchError,
};
use crate::raster::{
    export_png, write_class_map, write_raster, ClassMap, RasterError, FOREST,
};
use crate::scene::{degrade_labels, generate_truth, render_sar, NoiseSpec, SceneError, SceneSpec};
use crate::seeds;
use crate::selftrain::{predict_map, refine_loop, RefineConfig, RefineError};
use crate::train::{train, TrainConfig, TrainError, TrainMode, TrainOutcome};
use crate::unet::{load_checkpoint, save_checkpoint, Model, ModelError, UnetConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("line {line}: expected key=value, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("unknown configuration key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {kind}")]
    BadValue {
        key: String,
        value: String,
        kind: &'static str,
    },
    #[error("unknown network name {0:?} (expected tiny or full)")]
    UnknownNet(String),
    #[error("training area too narrow: {got} columns for validation strip {strip} plus patches")]
    NarrowTrainingArea { got: usize, strip: usize },
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Flat experiment configuration. Every field has a key; parsing rejects
/// unknown keys, and the resolved form (all keys, sorted) is frozen into each
/// run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scene_height: usize,
    pub scene_width: usize,
    pub forest_fraction: f64,
    pub blob_scale: usize,
    pub looks: usize,
    pub forest_vv: f64,
    pub forest_vh: f64,
    pub nonforest_vv: f64,
    pub nonforest_vh: f64,
    pub coarse_factor: usize,
    pub flip_rate: f64,
    pub jitter_radius: usize,
    pub split_fraction: f64,
    pub val_strip: usize,
    pub patch_size: usize,
    pub patch_count: usize,
    pub val_count: usize,
    pub keep_fraction: f64,
    pub net_name: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub stop_threshold: f64,
    pub max_rounds: usize,
    pub tile: usize,
    pub overlap: usize,
    pub refine_patch_count: usize,
    pub refine_max_epochs: usize,
    pub fine_tune: bool,
}

impl Default for ExperimentConfig {
    /// The `tiny` benchmark profile.
    fn default() -> Self {
        Self {
            seed: 7,
            scene_height: 192,
            scene_width: 384,
            forest_fraction: 0.5,
            blob_scale: 8,
            looks: 10,
            forest_vv: -7.0,
            forest_vh: -12.0,
            nonforest_vv: -12.0,
            nonforest_vh: -18.0,
            coarse_factor: 8,
            flip_rate: 0.08,
            jitter_radius: 1,
            split_fraction: 0.75,
            val_strip: 64,
            patch_size: 32,
            patch_count: 500,
            val_count: 100,
            keep_fraction: 0.02,
            net_name: "tiny".into(),
            learning_rate: 0.002,
            batch_size: 16,
            weight_decay: 5e-4,
            max_epochs: 10,
            patience: 10,
            stop_threshold: 0.10,
            max_rounds: 8,
            tile: 64,
            overlap: 32,
            refine_patch_count: 400,
            refine_max_epochs: 20,
            fine_tune: false,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl ExperimentConfig {
            /// Apply one key=value override.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ExperimentError> {
                match key {
                    $($key => {
                        self.$field = parse_value!(key, value, $kind)?;
                        Ok(())
                    })+
                    _ => Err(ExperimentError::UnknownKey(key.to_string())),
                }
            }

            /// All keys in sorted order with their current values.
            pub fn resolved(&self) -> String {
                let mut pairs: Vec<(&str, String)> = vec![
                    $(($key, display_value!(self.$field, $kind)),)+
                ];
                pairs.sort_by_key(|(k, _)| *k);
                let mut out = String::new();
                for (k, v) in pairs {
                    let _ = writeln!(out, "{k} = {v}");
                }
                out
            }
        }
    };
}

macro_rules! parse_value {
    ($key:expr, $value:expr, u64) => {
        $value.parse::<u64>().map_err(|_| ExperimentError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            kind: "integer",
        })
    };
    ($key:expr, $value:expr, usize) => {
        $value
            .parse::<usize>()
            .map_err(|_| ExperimentError::BadValue {
                key: $key.to_string(),
                value: $value.to_string(),
                kind: "integer",
            })
    };
    ($key:expr, $value:expr, f64) => {
        $value.parse::<f64>().map_err(|_| ExperimentError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            kind: "real",
        })
    };
    ($key:expr, $value:expr, bool) => {
        $value.parse::<bool>().map_err(|_| ExperimentError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            kind: "bool",
        })
    };
    ($key:expr, $value:expr, string) => {
        Ok::<String, ExperimentError>($value.to_string())
    };
}

macro_rules! display_value {
    ($v:expr, string) => {
        $v.clone()
    };
    ($v:expr, $kind:ident) => {
        format!("{}", $v)
    };
}

config_keys! {
    "seed" => seed: u64,
    "scene.height" => scene_height: usize,
    "scene.width" => scene_width: usize,
    "scene.forest_fraction" => forest_fraction: f64,
    "scene.blob_scale" => blob_scale: usize,
    "scene.looks" => looks: usize,
    "scene.forest_vv" => forest_vv: f64,
    "scene.forest_vh" => forest_vh: f64,
    "scene.nonforest_vv" => nonforest_vv: f64,
    "scene.nonforest_vh" => nonforest_vh: f64,
    "noise.coarse_factor" => coarse_factor: usize,
    "noise.flip_rate" => flip_rate: f64,
    "noise.jitter_radius" => jitter_radius: usize,
    "split.fraction" => split_fraction: f64,
    "split.val_strip" => val_strip: usize,
    "patch.size" => patch_size: usize,
    "patch.count" => patch_count: usize,
    "patch.val_count" => val_count: usize,
    "patch.keep_fraction" => keep_fraction: f64,
    "net.name" => net_name: string,
    "train.learning_rate" => learning_rate: f64,
    "train.batch_size" => batch_size: usize,
    "train.weight_decay" => weight_decay: f64,
    "train.max_epochs" => max_epochs: usize,
    "train.patience" => patience: usize,
    "refine.stop_threshold" => stop_threshold: f64,
    "refine.max_rounds" => max_rounds: usize,
    "refine.tile" => tile: usize,
    "refine.overlap" => overlap: usize,
    "refine.patch_count" => refine_patch_count: usize,
    "refine.max_epochs" => refine_max_epochs: usize,
    "refine.fine_tune" => fine_tune: bool,
}

impl ExperimentConfig {
    /// Parse key=value lines; `#` starts a comment, blank lines are skipped.
    /// Later lines override earlier ones; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut config = Self::default();
        config.apply(text)?;
        Ok(config)
    }

    /// Apply key=value lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<(), ExperimentError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ExperimentError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Stable hex fingerprint of the resolved configuration.
    pub fn hash(&self) -> String {
        format!("{:016x}", seeds::digest(self.resolved().as_bytes()))
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: seeds::subseed(self.seed, "scene"),
            height: self.scene_height,
            width: self.scene_width,
            forest_fraction: self.forest_fraction,
            blob_scale: self.blob_scale,
            looks: self.looks,
            class_means_db: crate::scene::ClassMeansDb {
                forest: [self.forest_vv, self.forest_vh],
                non_forest: [self.nonforest_vv, self.nonforest_vh],
            },
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            coarse_factor: self.coarse_factor,
            flip_rate: self.flip_rate,
            jitter_radius: self.jitter_radius,
            seed: seeds::subseed(self.seed, "noise"),
        }
    }

    pub fn net(&self) -> Result<UnetConfig, ExperimentError> {
        UnetConfig::by_name(&self.net_name)
            .ok_or_else(|| ExperimentError::UnknownNet(self.net_name.clone()))
    }

    pub fn train_config(&self, stream: &str) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: seeds::subseed(self.seed, stream),
            ..TrainConfig::default()
        }
    }

    pub fn refine_config(&self) -> Result<RefineConfig, ExperimentError> {
        Ok(RefineConfig {
            stop_threshold: self.stop_threshold,
            max_rounds: self.max_rounds,
            tile: self.tile,
            overlap: self.overlap,
            patch_size: self.patch_size,
            patch_count: self.refine_patch_count,
            val_count: self.val_count,
            net: self.net()?,
            train: TrainConfig {
                max_epochs: self.refine_max_epochs,
                patience: self.refine_max_epochs,
                ..self.train_config("refine")
            },
            fine_tune: self.fine_tune,
            seed: seeds::subseed(self.seed, "refine"),
        })
    }
}

/// The three geographically disjoint regions of the benchmark scene.
#[derive(Debug, Clone, Copy)]
pub struct BenchRegions {
    pub train: Extent,
    pub val: Extent,
    pub test: Extent,
}

/// Vertical layout: training | validation strip | test.
pub fn bench_regions(config: &ExperimentConfig) -> Result<BenchRegions, ExperimentError> {
    let (train_all, test) = split_scene(
        config.scene_height,
        config.scene_width,
        config.split_fraction,
        config.patch_size,
    )?;
    let strip = config.val_strip.max(config.patch_size);
    if train_all.width() < strip + config.patch_size {
        return Err(ExperimentError::NarrowTrainingArea {
            got: train_all.width(),
            strip,
        });
    }
    let boundary = train_all.col1 - strip;
    Ok(BenchRegions {
        train: Extent {
            col1: boundary,
            ..train_all
        },
        val: Extent {
            col0: boundary,
            ..train_all
        },
        test,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSummary {
    pub seed: u64,
    pub config_hash: String,
    pub dense_forest_f1: Option<f64>,
    pub incomplete_forest_f1: Option<f64>,
    pub inaccurate_initial_forest_f1: Option<f64>,
    pub inaccurate_forest_f1: Option<f64>,
    pub refine_rounds: usize,
    pub refine_final_change_fraction: f64,
    pub refine_converged: bool,
}

fn eval_on_test(
    model: &Model,
    test_sar: &crate::raster::Raster,
    test_truth: &ClassMap,
    config: &ExperimentConfig,
) -> Result<(metrics::ConfusionMatrix, ClassMap), ExperimentError> {
    let (_, classes) = predict_map(model, test_sar, config.tile, config.overlap)?;
    let cm = metrics::confusion(&classes, test_truth)?;
    Ok((cm, classes))
}

/// Run the full three-way comparison and write all artifacts into `out_dir`:
/// scene rasters, per-method checkpoints and prediction maps, refinement
/// rounds, evaluation.json (6 records: 3 methods x 2 classes), a benchmark
/// summary, and the frozen resolved configuration.
pub fn run_bench(config: &ExperimentConfig, out_dir: &Path) -> Result<BenchSummary, ExperimentError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.resolved())?;
    let hash = config.hash();

    // scene
    let spec = config.scene_spec();
    let truth = generate_truth(&spec)?;
    let sar = render_sar(&truth, &spec)?;
    let noisy = degrade_labels(&truth, &config.noise_spec())?;
    write_class_map(&truth, out_dir.join("truth.wslr"))?;
    write_raster(&sar, out_dir.join("sar.wslr"))?;
    write_class_map(&noisy, out_dir.join("noisy_labels.wslr"))?;
    export_png(&truth, out_dir.join("truth.png"))?;
    export_png(&noisy, out_dir.join("noisy_labels.png"))?;

    let regions = bench_regions(config)?;
    let test_sar = crop_raster(&sar, regions.test)?;
    let test_truth = crop_class_map(&truth, regions.test)?;
    let net = config.net()?;

    let sample = |labels: &ClassMap, count: usize, region: Extent, stream: &str| {
        extract_patches_in(
            &sar,
            labels,
            region,
            config.patch_size,
            count,
            seeds::subseed(config.seed, stream),
        )
    };

    // shared clean patch sets
    let train_clean = sample(&truth, config.patch_count, regions.train, "sample.train")?;
    let val_clean = sample(&truth, config.val_count, regions.val, "sample.val")?;

    let mut records: Vec<EvalRecord> = Vec::new();
    let score = |method: &str,
                     model: &Model,
                     records: &mut Vec<EvalRecord>|
     -> Result<Option<f64>, ExperimentError> {
        let (cm, classes) = eval_on_test(model, &test_sar, &test_truth, config)?;
        export_png(&classes, out_dir.join(format!("pred_{method}.png")))?;
        write_class_map(&classes, out_dir.join(format!("pred_{method}.wslr")))?;
        records.extend(metrics::records_for(method, &cm, config.seed, &hash));
        Ok(cm.prf(FOREST).f1)
    };

    // dense baseline
    let dense: TrainOutcome = train(
        &net,
        &config.train_config("train.dense"),
        &train_clean,
        &val_clean,
        TrainMode::Dense,
    )?;
    crate::train::write_history(&dense.history, out_dir.join("history_dense.jsonl"))?;
    save_checkpoint(&dense.model, out_dir.join("model_dense.wslm"))?;
    let dense_f1 = score("dense", &dense.model, &mut records)?;

    // incomplete supervision: sparse mask on accurate labels
    let sparse_set = mask_labels(
        &train_clean,
        config.keep_fraction,
        seeds::subseed(config.seed, "mask"),
    )?;
    let incomplete = train(
        &net,
        &config.train_config("train.incomplete"),
        &sparse_set,
        &val_clean,
        TrainMode::Sparse,
    )?;
    crate::train::write_history(&incomplete.history, out_dir.join("history_incomplete.jsonl"))?;
    save_checkpoint(&incomplete.model, out_dir.join("model_incomplete.wslm"))?;
    let incomplete_f1 = score("incomplete", &incomplete.model, &mut records)?;

    // inaccurate supervision: the refinement loop over the training area; its
    // round-1 model (trained once on the initial noisy labels) doubles as the
    // unrefined baseline
    let refine_region = Extent {
        col0: regions.train.col0,
        col1: regions.val.col1,
        ..regions.train
    };
    let refine_sar = crop_raster(&sar, refine_region)?;
    let refine_labels = crop_class_map(&noisy, refine_region)?;
    let refine_truth = crop_class_map(&truth, refine_region)?;
    let outcome = refine_loop(
        &refine_sar,
        &refine_labels,
        &config.refine_config()?,
        Some(&refine_truth),
        Some(out_dir),
    )?;
    let initial = load_checkpoint(out_dir.join("checkpoint_r1.wslm"))?;
    let (initial_cm, _) = eval_on_test(&initial, &test_sar, &test_truth, config)?;
    let initial_f1 = initial_cm.prf(FOREST).f1;
    let inaccurate_f1 = score("inaccurate", &outcome.model, &mut records)?;

    metrics::write_evaluation(&records, out_dir.join("evaluation.json"))?;

    let summary = BenchSummary {
        seed: config.seed,
        config_hash: hash,
        dense_forest_f1: dense_f1,
        incomplete_forest_f1: incomplete_f1,
        inaccurate_initial_forest_f1: initial_f1,
        inaccurate_forest_f1: inaccurate_f1,
        refine_rounds: outcome.records.len(),
        refine_final_change_fraction: outcome
            .records
            .last()
            .map(|r| r.change_fraction)
            .unwrap_or(1.0),
        refine_converged: outcome.converged,
    };
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    std::fs::write(out_dir.join("bench_summary.json"), json)?;
    Ok(summary)
}
