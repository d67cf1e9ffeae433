//! Deterministic synthetic forest scenes: a smooth two-class ground truth, a
//! dual-polarization SAR rendering with multiplicative gamma speckle, and a
//! label degrader that mimics a coarse, noisy global reference product.
//!
//! All three operations are pure functions of (inputs, seed); the same spec
//! always yields bit-identical outputs.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::raster::{ClassMap, Raster, FOREST, NON_FOREST, UNLABELED};
use crate::seeds;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("forest_fraction must lie in (0,1), got {0}")]
    BadForestFraction(f64),
    #[error("blob_scale must be >= 1")]
    BadBlobScale,
    #[error("looks must be >= 1")]
    BadLooks,
    #[error("scene {height}x{width} too small for blob_scale {blob_scale} (needs >= {min} per side)")]
    TooSmall {
        height: usize,
        width: usize,
        blob_scale: usize,
        min: usize,
    },
    #[error("truth map contains unlabeled pixels; render_sar needs a dense map")]
    UnlabeledTruth,
    #[error("dimension mismatch between truth map and spec")]
    DimensionMismatch,
    #[error("flip_rate must lie in [0,1), got {0}")]
    BadFlipRate(f64),
    #[error("coarse_factor must be >= 1")]
    BadCoarseFactor,
}

/// Per-class, per-band mean backscatter in dB. Band 0 = VV, band 1 = VH.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMeansDb {
    pub forest: [f64; 2],
    pub non_forest: [f64; 2],
}

impl Default for ClassMeansDb {
    // Plausible C-band contrasts; configuration, not ground truth.
    fn default() -> Self {
        Self {
            forest: [-7.0, -12.0],
            non_forest: [-12.0, -18.0],
        }
    }
}

/// Parameters of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub forest_fraction: f64,
    /// Smoothing radius: the white-noise field is box-blurred this many times.
    pub blob_scale: usize,
    /// Speckle averaging factor; higher = less speckle. 10 approximates the
    /// residual speckle after a long median composite.
    pub looks: usize,
    pub class_means_db: ClassMeansDb,
}

impl SceneSpec {
    pub fn new(seed: u64, height: usize, width: usize, forest_fraction: f64) -> Self {
        Self {
            seed,
            height,
            width,
            forest_fraction,
            blob_scale: 8,
            looks: 10,
            class_means_db: ClassMeansDb::default(),
        }
    }

    fn validate(&self) -> Result<(), SceneError> {
        if !(self.forest_fraction > 0.0 && self.forest_fraction < 1.0) {
            return Err(SceneError::BadForestFraction(self.forest_fraction));
        }
        if self.blob_scale < 1 {
            return Err(SceneError::BadBlobScale);
        }
        if self.looks < 1 {
            return Err(SceneError::BadLooks);
        }
        let min = 2 * self.blob_scale + 1;
        if self.height < min || self.width < min {
            return Err(SceneError::TooSmall {
                height: self.height,
                width: self.width,
                blob_scale: self.blob_scale,
                min,
            });
        }
        Ok(())
    }
}

/// Degradation applied to a clean truth map to emulate a coarse, noisy
/// reference product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Block size for block-majority downsample / nearest upsample.
    pub coarse_factor: usize,
    /// Independent per-pixel label flip probability.
    pub flip_rate: f64,
    /// Max radius of random dilation/erosion of the forest class.
    pub jitter_radius: usize,
    pub seed: u64,
}

impl NoiseSpec {
    fn validate(&self) -> Result<(), SceneError> {
        if self.coarse_factor < 1 {
            return Err(SceneError::BadCoarseFactor);
        }
        if !(0.0..1.0).contains(&self.flip_rate) {
            return Err(SceneError::BadFlipRate(self.flip_rate));
        }
        Ok(())
    }
}

/// One pass of a 3x3 box blur with edge clamping.
fn box_blur(field: &[f64], height: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for r in 0..height {
        for c in 0..width {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && rr < height as i64 && cc >= 0 && cc < width as i64 {
                        sum += field[rr as usize * width + cc as usize];
                        n += 1.0;
                    }
                }
            }
            out[r * width + c] = sum / n;
        }
    }
    out
}

/// Smooth random field thresholded at the empirical (1 - forest_fraction)
/// quantile, so the output forest fraction tracks the target closely.
pub fn generate_truth(spec: &SceneSpec) -> Result<ClassMap, SceneError> {
    spec.validate()?;
    let mut rng = seeds::rng(spec.seed, "scene.truth");
    let n = spec.height * spec.width;
    let mut field: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    for _ in 0..spec.blob_scale {
        field = box_blur(&field, spec.height, spec.width);
    }
    // threshold at the empirical quantile
    let mut sorted = field.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((1.0 - spec.forest_fraction) * n as f64).floor() as usize;
    let threshold = sorted[k.min(n - 1)];
    let values = field
        .iter()
        .map(|&v| if v >= threshold { FOREST } else { NON_FOREST })
        .collect();
    Ok(ClassMap {
        height: spec.height,
        width: spec.width,
        values,
    })
}

/// Render a two-band (VV, VH) SAR image in dB: per pixel, linear power is
/// 10^(class_mean_db/10) times a mean-1 gamma speckle draw with shape =
/// `looks`, then converted back to dB.
pub fn render_sar(truth: &ClassMap, spec: &SceneSpec) -> Result<Raster, SceneError> {
    spec.validate()?;
    if truth.height != spec.height || truth.width != spec.width {
        return Err(SceneError::DimensionMismatch);
    }
    if truth.values.iter().any(|&v| v == UNLABELED) {
        return Err(SceneError::UnlabeledTruth);
    }
    let mut rng = seeds::rng(spec.seed, "scene.speckle");
    let looks = spec.looks as f64;
    let gamma = Gamma::new(looks, 1.0 / looks).expect("valid gamma");
    let n = spec.height * spec.width;
    let mut data = vec![0.0f32; 2 * n];
    // pixel-major draw order: both bands of a pixel use consecutive draws
    for (i, &class) in truth.values.iter().enumerate() {
        let means = if class == FOREST {
            spec.class_means_db.forest
        } else {
            spec.class_means_db.non_forest
        };
        for (band, &mean_db) in means.iter().enumerate() {
            let power = 10f64.powf(mean_db / 10.0) * gamma.sample(&mut rng);
            data[band * n + i] = (10.0 * power.log10()) as f32;
        }
    }
    Ok(Raster {
        bands: 2,
        height: spec.height,
        width: spec.width,
        data,
        nodata: f32::NAN,
    })
}

/// Block-majority downsample by `factor` then nearest-neighbor upsample.
/// Trailing partial blocks are handled by clamping block extents. Ties go to
/// non-forest so runs stay reproducible.
fn coarsen(map: &ClassMap, factor: usize) -> ClassMap {
    if factor <= 1 {
        return map.clone();
    }
    let mut out = map.clone();
    let mut br = 0;
    while br < map.height {
        let rend = (br + factor).min(map.height);
        let mut bc = 0;
        while bc < map.width {
            let cend = (bc + factor).min(map.width);
            let mut forest = 0usize;
            let mut total = 0usize;
            for r in br..rend {
                for c in bc..cend {
                    total += 1;
                    if map.get(r, c) == FOREST {
                        forest += 1;
                    }
                }
            }
            let code = if forest * 2 > total { FOREST } else { NON_FOREST };
            for r in br..rend {
                for c in bc..cend {
                    out.set(r, c, code);
                }
            }
            bc = cend;
        }
        br = rend;
    }
    out
}

/// Morphological dilation (grow=true) or erosion of the forest class with a
/// square structuring element of the given radius.
fn jitter_forest(map: &ClassMap, radius: usize, grow: bool) -> ClassMap {
    if radius == 0 {
        return map.clone();
    }
    let r = radius as i64;
    let mut out = map.clone();
    for row in 0..map.height {
        for col in 0..map.width {
            let mut hit = false;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    let rr = row as i64 + dr;
                    let cc = col as i64 + dc;
                    if rr >= 0 && rr < map.height as i64 && cc >= 0 && cc < map.width as i64 {
                        let v = map.get(rr as usize, cc as usize);
                        if (grow && v == FOREST) || (!grow && v == NON_FOREST) {
                            hit = true;
                            break 'scan;
                        }
                    }
                }
            }
            let code = if grow {
                if hit { FOREST } else { NON_FOREST }
            } else if hit {
                NON_FOREST
            } else {
                FOREST
            };
            out.set(row, col, code);
        }
    }
    out
}

/// Degrade a clean truth map into a coarse, noisy label map: block-majority
/// coarsening, then a random dilation/erosion of the forest class with radius
/// up to `jitter_radius`, then independent pixel flips. Output is dense.
pub fn degrade_labels(truth: &ClassMap, noise: &NoiseSpec) -> Result<ClassMap, SceneError> {
    noise.validate()?;
    let mut map = coarsen(truth, noise.coarse_factor);

    if noise.jitter_radius > 0 {
        let mut rng = seeds::rng(noise.seed, "noise.jitter");
        let radius = rng.gen_range(1..=noise.jitter_radius);
        let grow = rng.gen::<bool>();
        map = jitter_forest(&map, radius, grow);
    }

    if noise.flip_rate > 0.0 {
        let mut rng = seeds::rng(noise.seed, "noise.flip");
        for v in map.values.iter_mut() {
            if rng.gen::<f64>() < noise.flip_rate {
                *v = if *v == FOREST { NON_FOREST } else { FOREST };
            }
        }
    }
    Ok(map)
}
