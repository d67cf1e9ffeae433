//! Iterative pseudo-label refinement for inaccurate supervision: train on
//! noisy dense labels, predict a full map, adopt the prediction as the next
//! round's labels, and stop once the fraction of changed pixels falls below
//! the threshold.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::metrics;
use crate::patch::{extract_patches, PatchError};
use crate::raster::{ClassMap, Raster, RasterError, FOREST, NON_FOREST, UNLABELED};
use crate::seeds;
use crate::train::{train_with_init, TrainConfig, TrainError, TrainMode};
use crate::unet::{save_checkpoint, Model, ModelError, UnetConfig};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("stop threshold {0} outside (0, 1)")]
    BadStopThreshold(f64),
    #[error("max_rounds must be >= 1")]
    ZeroRounds,
    #[error("raster {h}x{w} is smaller than one {tile} tile")]
    RasterTooSmall { h: usize, w: usize, tile: usize },
    #[error("tile side {tile} is not divisible by 2^depth = {div}")]
    BadTile { tile: usize, div: usize },
    #[error("overlap {overlap} must be even and smaller than tile {tile}")]
    BadOverlap { overlap: usize, tile: usize },
    #[error("raster has {got} bands, model expects {expected}")]
    BandMismatch { expected: usize, got: usize },
    #[error("class maps differ in size: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("pseudo-labels must be dense; found an unlabeled pixel")]
    SparseLabels,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Stop when the change fraction falls below this (strictly less than).
    pub stop_threshold: f64,
    pub max_rounds: usize,
    /// Tile side for map prediction; divisible by 2^depth.
    pub tile: usize,
    /// Total overlap between adjacent tiles; stitching crops overlap/2.
    pub overlap: usize,
    pub patch_size: usize,
    pub patch_count: usize,
    /// Validation patches held aside per round for early stopping.
    pub val_count: usize,
    pub net: UnetConfig,
    pub train: TrainConfig,
    /// Continue from the previous round's parameters instead of
    /// re-initializing. Off by default: each round trains a fresh model.
    pub fine_tune: bool,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            stop_threshold: 0.10,
            max_rounds: 8,
            tile: 64,
            overlap: 32,
            patch_size: 32,
            patch_count: 500,
            val_count: 100,
            net: UnetConfig::tiny(),
            train: TrainConfig::default(),
            fine_tune: false,
            seed: 0,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<(), RefineError> {
        if !(self.stop_threshold > 0.0 && self.stop_threshold < 1.0) {
            return Err(RefineError::BadStopThreshold(self.stop_threshold));
        }
        if self.max_rounds == 0 {
            return Err(RefineError::ZeroRounds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub change_fraction: f64,
    pub forest_pixels: u64,
    pub non_forest_pixels: u64,
    pub checkpoint: Option<String>,
    /// Forest-class F1 against held-out truth, when truth is supplied.
    pub f1_vs_truth: Option<f64>,
}

#[derive(Debug)]
pub struct RefineOutcome {
    pub labels: ClassMap,
    pub model: Model,
    pub records: Vec<RoundRecord>,
    pub converged: bool,
}

/// Tile a raster, run inference per tile, and stitch a seamless probability
/// map by keeping each tile's central region (overlap/2 margin cropped,
/// except at raster borders). Returns the probability raster and its 0.5
/// threshold.
pub fn predict_map(
    model: &Model,
    raster: &Raster,
    tile: usize,
    overlap: usize,
) -> Result<(Raster, ClassMap), RefineError> {
    if raster.bands != model.config.input_channels {
        return Err(RefineError::BandMismatch {
            expected: model.config.input_channels,
            got: raster.bands,
        });
    }
    let div = 1 << model.config.depth;
    if tile == 0 || tile % div != 0 {
        return Err(RefineError::BadTile { tile, div });
    }
    if overlap % 2 != 0 || overlap >= tile {
        return Err(RefineError::BadOverlap { overlap, tile });
    }
    let (h, w) = (raster.height, raster.width);
    if h < tile || w < tile {
        return Err(RefineError::RasterTooSmall { h, w, tile });
    }

    let step = tile - overlap;
    let starts = |extent: usize| -> Vec<usize> {
        let mut v = vec![0];
        while v.last().unwrap() + tile < extent {
            v.push((v.last().unwrap() + step).min(extent - tile));
        }
        v
    };
    let row_starts = starts(h);
    let col_starts = starts(w);
    let corners: Vec<(usize, usize)> = row_starts
        .iter()
        .flat_map(|&r| col_starts.iter().map(move |&c| (r, c)))
        .collect();

    let c_in = raster.bands;
    let tiles: Vec<((usize, usize), Vec<f32>)> = corners
        .par_iter()
        .map(|&(r0, c0)| {
            let mut data = Vec::with_capacity(tile * tile * c_in);
            for r in r0..r0 + tile {
                for c in c0..c0 + tile {
                    for b in 0..c_in {
                        data.push(raster.get(b, r, c));
                    }
                }
            }
            let input = Tensor::new(vec![1, tile, tile, c_in], data);
            let out = model.forward(&input).map(|t| t.data)?;
            Ok(((r0, c0), out))
        })
        .collect::<Result<_, RefineError>>()?;

    let margin = overlap / 2;
    let mut prob = vec![0.0f32; h * w];
    for ((r0, c0), data) in &tiles {
        let rlo = if *r0 == 0 { 0 } else { margin };
        let rhi = if r0 + tile == h { tile } else { tile - margin };
        let clo = if *c0 == 0 { 0 } else { margin };
        let chi = if c0 + tile == w { tile } else { tile - margin };
        for tr in rlo..rhi {
            for tc in clo..chi {
                prob[(r0 + tr) * w + (c0 + tc)] = data[tr * tile + tc];
            }
        }
    }
    let classes: Vec<u8> = prob.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let prob_raster = Raster::new(1, h, w, prob, f32::NAN)?;
    Ok((prob_raster, ClassMap::new(h, w, classes)?))
}

/// Fraction of pixels whose class differs. Both maps must be dense.
pub fn change_fraction(prev: &ClassMap, next: &ClassMap) -> Result<f64, RefineError> {
    if prev.height != next.height || prev.width != next.width {
        return Err(RefineError::DimensionMismatch(
            prev.height,
            prev.width,
            next.height,
            next.width,
        ));
    }
    if prev.values.iter().chain(&next.values).any(|&v| v == UNLABELED) {
        return Err(RefineError::SparseLabels);
    }
    let changed = prev
        .values
        .iter()
        .zip(&next.values)
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / prev.values.len() as f64)
}

/// The refinement loop with an injectable round executor: round r receives
/// the current pseudo-labels and returns a trained model plus its predicted
/// map. Stops after the first round whose change fraction (prediction vs the
/// labels it trained on) is below the threshold; hard-stops at `max_rounds`
/// with `converged = false`.
pub fn refine_loop_with<F>(
    initial_labels: &ClassMap,
    config: &RefineConfig,
    mut round_fn: F,
) -> Result<RefineOutcome, RefineError>
where
    F: FnMut(usize, &ClassMap) -> Result<(Model, ClassMap), RefineError>,
{
    config.validate()?;
    if initial_labels.values.iter().any(|&v| v == UNLABELED) {
        return Err(RefineError::SparseLabels);
    }
    let mut labels = initial_labels.clone();
    let mut records = Vec::new();
    let mut last: Option<(Model, ClassMap)> = None;
    let mut converged = false;

    for round in 1..=config.max_rounds {
        let (model, pred) = round_fn(round, &labels)?;
        let cf = change_fraction(&labels, &pred)?;
        let forest = pred.values.iter().filter(|&&v| v == FOREST).count() as u64;
        let non_forest = pred.values.iter().filter(|&&v| v == NON_FOREST).count() as u64;
        records.push(RoundRecord {
            round,
            change_fraction: cf,
            forest_pixels: forest,
            non_forest_pixels: non_forest,
            checkpoint: None,
            f1_vs_truth: None,
        });
        labels = pred.clone();
        last = Some((model, pred));
        if cf < config.stop_threshold {
            converged = true;
            break;
        }
    }

    let (model, labels) = last.expect("max_rounds >= 1");
    Ok(RefineOutcome {
        labels,
        model,
        records,
        converged,
    })
}

/// Full refinement: per round, sample patches against the current
/// pseudo-labels, train (fresh model unless `fine_tune`), predict the map,
/// and iterate. When `out_dir` is given, writes pseudo_labels_r{N}.wslr,
/// checkpoint_r{N}.wslm and rounds.json; when `truth` is given, each record
/// carries the round's forest-class F1 against it.
pub fn refine_loop(
    raster: &Raster,
    initial_labels: &ClassMap,
    config: &RefineConfig,
    truth: Option<&ClassMap>,
    out_dir: Option<&Path>,
) -> Result<RefineOutcome, RefineError> {
    let mut prev_model: Option<Model> = None;
    let fine_tune = config.fine_tune;
    let mut outcome = refine_loop_with(initial_labels, config, |round, labels| {
        let rseed = seeds::subseed_indexed(config.seed, "refine.round", round as u64);
        let train_set = extract_patches(
            raster,
            labels,
            config.patch_size,
            config.patch_count,
            seeds::subseed(rseed, "refine.sample"),
        )?;
        let val_set = extract_patches(
            raster,
            labels,
            config.patch_size,
            config.val_count,
            seeds::subseed(rseed, "refine.val"),
        )?;
        let tcfg = TrainConfig {
            seed: seeds::subseed(rseed, "refine.train"),
            ..config.train.clone()
        };
        let init = if fine_tune { prev_model.take() } else { None };
        let out = train_with_init(&config.net, &tcfg, &train_set, &val_set, TrainMode::Dense, init)?;
        let (_, pred) = predict_map(&out.model, raster, config.tile, config.overlap)?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&out.model, dir.join(format!("checkpoint_r{round}.wslm")))?;
            crate::raster::write_class_map(&pred, dir.join(format!("pseudo_labels_r{round}.wslr")))?;
        }
        if fine_tune {
            prev_model = Some(out.model.clone());
        }
        Ok((out.model, pred))
    })?;

    if let Some(truth) = truth {
        // only the final map is held in memory; earlier rounds stay unscored
        // (their maps are on disk when out_dir is given)
        if let Some(last) = outcome.records.last_mut() {
            let cm = metrics::confusion(&outcome.labels, truth)?;
            last.f1_vs_truth = cm.prf(FOREST).f1;
        }
    }
    if let Some(dir) = out_dir {
        for rec in &mut outcome.records {
            rec.checkpoint = Some(format!("checkpoint_r{}.wslm", rec.round));
        }
        let mut json = serde_json::to_vec_pretty(&outcome.records)?;
        json.push(b'\n');
        std::fs::write(dir.join("rounds.json"), json)?;
    }
    Ok(outcome)
}
