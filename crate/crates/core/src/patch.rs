//! Patch extraction, sparse label masking, augmentation, and the
//! geographically disjoint train/validation split.
//!
//! A [`PatchSet`] holds aligned stacks: inputs N x H x W x 2 (dB), labels
//! N x H x W (codes 0/1) and a validity mask N x H x W where 1 means the pixel
//! contributes to the loss.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use thiserror::Error;

use crate::raster::{ClassMap, Raster, RasterError, UNLABELED};
use crate::seeds;

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("raster {h}x{w} is smaller than patch size {patch}")]
    RasterTooSmall { h: usize, w: usize, patch: usize },
    #[error("raster and labels dimensions differ")]
    DimensionMismatch,
    #[error("could not sample a window free of unlabeled/nodata pixels after {0} retries")]
    RetryExhausted(usize),
    #[error("keep_fraction must lie in (0,1], got {0}")]
    BadKeepFraction(f64),
    #[error("split fraction must lie in (0,1), got {0}")]
    BadSplitFraction(f64),
    #[error("split extent of width {got} cannot hold a {patch}-pixel patch")]
    ExtentTooNarrow { got: usize, patch: usize },
    #[error("patch sets have mismatched shapes")]
    ShapeMismatch,
    #[error("manifest field missing or malformed: {0}")]
    BadManifest(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Rectangular pixel region, half-open on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

impl Extent {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row0: 0,
            row1: height,
            col0: 0,
            col1: width,
        }
    }

    pub fn height(&self) -> usize {
        self.row1 - self.row0
    }

    pub fn width(&self) -> usize {
        self.col1 - self.col0
    }
}

/// Aligned input/label/mask stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// N x H x W x C, channel-interleaved.
    pub inputs: Vec<f32>,
    /// N x H x W class codes in {0,1}.
    pub labels: Vec<u8>,
    /// N x H x W; 1 = contributes to the loss.
    pub mask: Vec<u8>,
}

impl PatchSet {
    pub fn pixels_per_patch(&self) -> usize {
        self.height * self.width
    }

    fn check_shapes(&self) -> bool {
        let n = self.count * self.height * self.width;
        self.inputs.len() == n * self.channels && self.labels.len() == n && self.mask.len() == n
    }
}

/// Vertical split into train and validation extents. The boundary column is
/// floor(fraction * width) + 1 so a 512-wide scene at 0.8 yields train columns
/// [0, 409] and validation [410, 511]. Errors if either side is narrower than
/// one patch.
pub fn split_scene(
    height: usize,
    width: usize,
    fraction: f64,
    patch: usize,
) -> Result<(Extent, Extent), PatchError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PatchError::BadSplitFraction(fraction));
    }
    let boundary = (fraction * width as f64).floor() as usize + 1;
    let boundary = boundary.min(width);
    let train = Extent {
        row0: 0,
        row1: height,
        col0: 0,
        col1: boundary,
    };
    let val = Extent {
        row0: 0,
        row1: height,
        col0: boundary,
        col1: width,
    };
    for e in [&train, &val] {
        if e.width() < patch || e.height() < patch {
            return Err(PatchError::ExtentTooNarrow {
                got: e.width().min(e.height()),
                patch,
            });
        }
    }
    Ok((train, val))
}

/// Sample `count` patches at uniform-random top-left corners inside `extent`
/// (with replacement across positions). Windows containing unlabeled pixels or
/// nodata are resampled up to a retry cap. The mask starts all-one.
pub fn extract_patches_in(
    raster: &Raster,
    labels: &ClassMap,
    extent: Extent,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<PatchSet, PatchError> {
    if raster.height != labels.height || raster.width != labels.width {
        return Err(PatchError::DimensionMismatch);
    }
    if extent.height() < patch || extent.width() < patch {
        return Err(PatchError::RasterTooSmall {
            h: extent.height(),
            w: extent.width(),
            patch,
        });
    }
    let mut rng = seeds::rng(seed, "patch.corners");
    let max_row = extent.row1 - patch;
    let max_col = extent.col1 - patch;
    let retry_cap = 100 * count.max(1);
    let c = raster.bands;

    let mut inputs = Vec::with_capacity(count * patch * patch * c);
    let mut out_labels = Vec::with_capacity(count * patch * patch);
    let mut retries = 0usize;
    let mut sampled = 0usize;
    while sampled < count {
        let row = rng.gen_range(extent.row0..=max_row);
        let col = rng.gen_range(extent.col0..=max_col);
        let mut ok = true;
        'window: for r in row..row + patch {
            for cc in col..col + patch {
                if labels.get(r, cc) == UNLABELED {
                    ok = false;
                    break 'window;
                }
                for b in 0..c {
                    if raster.is_nodata(raster.get(b, r, cc)) {
                        ok = false;
                        break 'window;
                    }
                }
            }
        }
        if !ok {
            retries += 1;
            if retries > retry_cap {
                return Err(PatchError::RetryExhausted(retry_cap));
            }
            continue;
        }
        for r in row..row + patch {
            for cc in col..col + patch {
                for b in 0..c {
                    inputs.push(raster.get(b, r, cc));
                }
                out_labels.push(labels.get(r, cc));
            }
        }
        sampled += 1;
    }
    Ok(PatchSet {
        count,
        height: patch,
        width: patch,
        channels: c,
        inputs,
        labels: out_labels,
        mask: vec![1; count * patch * patch],
    })
}

/// [`extract_patches_in`] over the whole raster.
pub fn extract_patches(
    raster: &Raster,
    labels: &ClassMap,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<PatchSet, PatchError> {
    extract_patches_in(
        raster,
        labels,
        Extent::full(raster.height, raster.width),
        patch,
        count,
        seed,
    )
}

/// Keep exactly round(keep_fraction * H * W) mask pixels per patch, sampled
/// uniformly without replacement from an independent per-patch stream. Labels
/// are unchanged; the mask alone encodes sparsity.
pub fn mask_labels(patches: &PatchSet, keep_fraction: f64, seed: u64) -> Result<PatchSet, PatchError> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(PatchError::BadKeepFraction(keep_fraction));
    }
    let px = patches.pixels_per_patch();
    let keep = ((keep_fraction * px as f64).round() as usize).min(px);
    let mut out = patches.clone();
    if keep == px {
        out.mask.fill(1);
        return Ok(out);
    }
    out.mask.fill(0);
    for i in 0..patches.count {
        let mut rng = seeds::rng_indexed(seed, "patch.mask", i as u64);
        for idx in index_sample(&mut rng, px, keep) {
            out.mask[i * px + idx] = 1;
        }
    }
    Ok(out)
}

/// Per-sample augmentation parameters.
#[derive(Debug, Clone, Copy)]
struct AugParams {
    flip_vertical: bool,
    angle_rad: f64,
}

/// Augment each sample independently: vertical flip with probability 0.5, then
/// a rotation by an angle uniform in [-20, +20] degrees about the patch
/// center. Inputs are resampled bilinearly, labels and mask nearest-neighbor;
/// destination pixels mapped from outside the source get mask = 0.
pub fn augment(batch: &PatchSet, seed: u64) -> PatchSet {
    let mut out = batch.clone();
    for i in 0..batch.count {
        let mut rng = seeds::rng_indexed(seed, "patch.augment", i as u64);
        let params = AugParams {
            flip_vertical: rng.gen::<f64>() < 0.5,
            angle_rad: rng.gen_range(-20.0f64..=20.0).to_radians(),
        };
        augment_sample(batch, i, params, &mut out);
    }
    out
}

fn augment_sample(src: &PatchSet, i: usize, params: AugParams, out: &mut PatchSet) {
    let (h, w, c) = (src.height, src.width, src.channels);
    let px = h * w;
    let in_base = i * px * c;
    let lbl_base = i * px;

    // vertical flip first, as an index remap on the source rows
    let src_row = |r: usize| if params.flip_vertical { h - 1 - r } else { r };

    let ctr_r = (h as f64 - 1.0) / 2.0;
    let ctr_c = (w as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = params.angle_rad.sin_cos();

    for r in 0..h {
        for col in 0..w {
            // inverse map: rotate the destination pixel back into the source
            let dy = r as f64 - ctr_r;
            let dx = col as f64 - ctr_c;
            let sy = cos_t * dy - sin_t * dx + ctr_r;
            let sx = sin_t * dy + cos_t * dx + ctr_c;
            let dest = r * w + col;

            // out-of-source pixels are excluded from the loss via mask = 0;
            // inputs sample the edge-clamped source so they stay within the
            // data distribution (a constant fill would skew batch statistics)
            let inside =
                sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64;
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);

            // bilinear for inputs
            let r0 = sy.floor() as usize;
            let c0 = sx.floor() as usize;
            let r1 = (r0 + 1).min(h - 1);
            let c1 = (c0 + 1).min(w - 1);
            let fr = sy - r0 as f64;
            let fc = sx - c0 as f64;
            for ch in 0..c {
                let at = |rr: usize, cc: usize| {
                    src.inputs[in_base + (src_row(rr) * w + cc) * c + ch] as f64
                };
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bot = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                out.inputs[in_base + dest * c + ch] = (top * (1.0 - fr) + bot * fr) as f32;
            }

            // nearest for labels and mask
            let nr = src_row(sy.round() as usize);
            let nc = sx.round() as usize;
            out.labels[lbl_base + dest] = src.labels[lbl_base + nr * w + nc];
            out.mask[lbl_base + dest] = if inside {
                src.mask[lbl_base + nr * w + nc]
            } else {
                0
            };
        }
    }
}

/// Copy the extent of a raster into a standalone raster.
pub fn crop_raster(raster: &Raster, e: Extent) -> Result<Raster, PatchError> {
    if e.row1 > raster.height || e.col1 > raster.width {
        return Err(PatchError::DimensionMismatch);
    }
    let (h, w) = (e.height(), e.width());
    let mut data = Vec::with_capacity(raster.bands * h * w);
    for b in 0..raster.bands {
        for r in e.row0..e.row1 {
            for c in e.col0..e.col1 {
                data.push(raster.get(b, r, c));
            }
        }
    }
    Ok(Raster::new(raster.bands, h, w, data, raster.nodata)?)
}

/// Copy the extent of a class map into a standalone map.
pub fn crop_class_map(map: &ClassMap, e: Extent) -> Result<ClassMap, PatchError> {
    if e.row1 > map.height || e.col1 > map.width {
        return Err(PatchError::DimensionMismatch);
    }
    let mut values = Vec::with_capacity(e.height() * e.width());
    for r in e.row0..e.row1 {
        for c in e.col0..e.col1 {
            values.push(map.get(r, c));
        }
    }
    Ok(ClassMap::new(e.height(), e.width(), values)?)
}

/// Serialize a patch set as a directory of WSLR files with N folded into
/// bands, plus a plain-text manifest of shapes and seed.
pub fn save_patch_set<P: AsRef<std::path::Path>>(
    patches: &PatchSet,
    dir: P,
    seed: u64,
) -> Result<(), PatchError> {
    if !patches.check_shapes() {
        return Err(PatchError::ShapeMismatch);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let (n, h, w, c) = (patches.count, patches.height, patches.width, patches.channels);
    let px = h * w;

    // inputs: band (sample*channels + channel), planar per band
    let mut data = vec![0.0f32; n * c * px];
    for i in 0..n {
        for p in 0..px {
            for ch in 0..c {
                data[(i * c + ch) * px + p] = patches.inputs[(i * px + p) * c + ch];
            }
        }
    }
    let inputs = Raster::new(n * c, h, w, data, f32::NAN)?;
    crate::raster::write_raster(&inputs, dir.join("inputs.wslr"))?;

    let labels = Raster::new(n, h, w, patches.labels.iter().map(|&v| v as f32).collect(), f32::NAN)?;
    crate::raster::write_raster(&labels, dir.join("labels.wslr"))?;
    let mask = Raster::new(n, h, w, patches.mask.iter().map(|&v| v as f32).collect(), f32::NAN)?;
    crate::raster::write_raster(&mask, dir.join("mask.wslr"))?;

    let manifest = format!(
        "count={n}\nheight={h}\nwidth={w}\nchannels={c}\nseed={seed}\n"
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Inverse of [`save_patch_set`]. Returns the patch set and the recorded seed.
pub fn load_patch_set<P: AsRef<std::path::Path>>(dir: P) -> Result<(PatchSet, u64), PatchError> {
    let dir = dir.as_ref();
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let field = |name: &str| -> Result<u64, PatchError> {
        manifest
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{name}=")))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| PatchError::BadManifest(name.to_string()))
    };
    let (n, h, w, c) = (
        field("count")? as usize,
        field("height")? as usize,
        field("width")? as usize,
        field("channels")? as usize,
    );
    let seed = field("seed")?;

    let inputs_r = crate::raster::read_raster(dir.join("inputs.wslr"))?;
    let labels_r = crate::raster::read_raster(dir.join("labels.wslr"))?;
    let mask_r = crate::raster::read_raster(dir.join("mask.wslr"))?;
    if inputs_r.bands != n * c
        || (inputs_r.height, inputs_r.width) != (h, w)
        || labels_r.bands != n
        || mask_r.bands != n
    {
        return Err(PatchError::ShapeMismatch);
    }
    let px = h * w;
    let mut inputs = vec![0.0f32; n * px * c];
    for i in 0..n {
        for p in 0..px {
            for ch in 0..c {
                inputs[(i * px + p) * c + ch] = inputs_r.data[(i * c + ch) * px + p];
            }
        }
    }
    let patches = PatchSet {
        count: n,
        height: h,
        width: w,
        channels: c,
        inputs,
        labels: labels_r.data.iter().map(|&v| v as u8).collect(),
        mask: mask_r.data.iter().map(|&v| v as u8).collect(),
    };
    if !patches.check_shapes() {
        return Err(PatchError::ShapeMismatch);
    }
    Ok((patches, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::FOREST;
    use crate::scene::{generate_truth, render_sar, SceneSpec};

    fn scene_512() -> (Raster, ClassMap) {
        let spec = SceneSpec::new(21, 512, 512, 0.5);
        let truth = generate_truth(&spec).unwrap();
        let sar = render_sar(&truth, &spec).unwrap();
        (sar, truth)
    }

    #[test]
    fn extract_shapes_match_contract() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 100, 5).unwrap();
        assert_eq!(p.count, 100);
        assert_eq!((p.height, p.width, p.channels), (64, 64, 2));
        assert_eq!(p.inputs.len(), 100 * 64 * 64 * 2);
        assert_eq!(p.labels.len(), 100 * 64 * 64);
        assert!(p.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn extract_rejects_small_raster() {
        let (sar, truth) = scene_512();
        let small = Raster::new(2, 32, 32, sar.data[..2 * 32 * 32].to_vec(), f32::NAN).unwrap();
        let small_truth = ClassMap::new(32, 32, truth.values[..32 * 32].to_vec()).unwrap();
        assert!(matches!(
            extract_patches(&small, &small_truth, 64, 1, 0),
            Err(PatchError::RasterTooSmall { .. })
        ));
    }

    #[test]
    fn extract_is_deterministic() {
        let (sar, truth) = scene_512();
        let a = extract_patches(&sar, &truth, 64, 20, 5).unwrap();
        let b = extract_patches(&sar, &truth, 64, 20, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn extract_errors_when_all_windows_unlabeled() {
        let (sar, _) = scene_512();
        let all_unlabeled = ClassMap::filled(512, 512, UNLABELED);
        assert!(matches!(
            extract_patches(&sar, &all_unlabeled, 64, 1, 0),
            Err(PatchError::RetryExhausted(_))
        ));
    }

    #[test]
    fn mask_keeps_exact_count() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 10, 5).unwrap();
        let masked = mask_labels(&p, 0.02, 9).unwrap();
        let px = 64 * 64;
        for i in 0..10 {
            let kept = masked.mask[i * px..(i + 1) * px]
                .iter()
                .filter(|&&m| m == 1)
                .count();
            assert_eq!(kept, 82); // round(0.02 * 4096)
        }
        // labels untouched
        assert_eq!(masked.labels, p.labels);
    }

    #[test]
    fn mask_full_fraction_is_identity() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 3, 5).unwrap();
        let masked = mask_labels(&p, 1.0, 9).unwrap();
        assert_eq!(masked, p);
    }

    #[test]
    fn mask_streams_differ_per_patch() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 2, 5).unwrap();
        let masked = mask_labels(&p, 0.02, 9).unwrap();
        let px = 64 * 64;
        let set0: Vec<usize> = (0..px).filter(|&j| masked.mask[j] == 1).collect();
        let set1: Vec<usize> = (0..px).filter(|&j| masked.mask[px + j] == 1).collect();
        assert_ne!(set0, set1);
    }

    #[test]
    fn mask_rejects_zero_fraction() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 1, 5).unwrap();
        assert!(mask_labels(&p, 0.0, 0).is_err());
    }

    #[test]
    fn augment_identity_params_round_trip() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 2, 5).unwrap();
        // angle 0, flip applied twice = original
        let mut once = p.clone();
        augment_sample(
            &p,
            0,
            AugParams {
                flip_vertical: true,
                angle_rad: 0.0,
            },
            &mut once,
        );
        let mut twice = once.clone();
        augment_sample(
            &once,
            0,
            AugParams {
                flip_vertical: true,
                angle_rad: 0.0,
            },
            &mut twice,
        );
        assert_eq!(twice, p);
    }

    #[test]
    fn augment_preserves_constant_class_regions() {
        // half-plane label scene: rotated labels must keep the class of every
        // valid pixel that stays well inside its half
        let mut p = PatchSet {
            count: 1,
            height: 32,
            width: 32,
            channels: 2,
            inputs: vec![0.0; 32 * 32 * 2],
            labels: vec![0; 32 * 32],
            mask: vec![1; 32 * 32],
        };
        for r in 0..32 {
            for c in 0..32 {
                if r < 16 {
                    p.labels[r * 32 + c] = FOREST;
                }
            }
        }
        let mut out = p.clone();
        let angle = 10.0f64.to_radians();
        augment_sample(
            &p,
            0,
            AugParams {
                flip_vertical: false,
                angle_rad: angle,
            },
            &mut out,
        );
        // rows far from the boundary cannot cross it under a 10-degree turn
        for r in 0..32 {
            for c in 0..32 {
                if out.mask[r * 32 + c] == 0 {
                    continue;
                }
                if r < 8 {
                    assert_eq!(out.labels[r * 32 + c], FOREST, "pixel ({r},{c})");
                }
                if r >= 24 {
                    assert_eq!(out.labels[r * 32 + c], 0, "pixel ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn augment_never_invents_classes_or_resizes() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 8, 5).unwrap();
        let a = augment(&p, 31);
        assert_eq!((a.count, a.height, a.width), (p.count, p.height, p.width));
        assert!(a.labels.iter().all(|&v| v == 0 || v == 1));
        assert!(a.mask.iter().all(|&v| v == 0 || v == 1));
        // determinism
        assert_eq!(augment(&p, 31), a);
    }

    #[test]
    fn augment_masks_out_of_bounds_only_against_original_mask() {
        // starting from mask all-one, any mask=1 output pixel maps from inside
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 64, 4, 5).unwrap();
        let a = augment(&p, 77);
        let px = 64 * 64;
        for i in 0..4 {
            let kept = a.mask[i * px..(i + 1) * px].iter().filter(|&&m| m == 1).count();
            assert!(kept > 0);
            assert!(kept <= px);
        }
    }

    #[test]
    fn split_matches_floor_arithmetic() {
        let (train, val) = split_scene(512, 512, 0.8, 64).unwrap();
        assert_eq!((train.col0, train.col1), (0, 410)); // columns [0, 409]
        assert_eq!((val.col0, val.col1), (410, 512)); // columns [410, 511]
    }

    #[test]
    fn split_rejects_extent_smaller_than_patch() {
        assert!(matches!(
            split_scene(128, 128, 0.99, 64),
            Err(PatchError::ExtentTooNarrow { .. })
        ));
    }

    #[test]
    fn sampled_corners_stay_inside_extent() {
        let (sar, truth) = scene_512();
        let (train, val) = split_scene(512, 512, 0.8, 64).unwrap();
        let p = extract_patches_in(&sar, &truth, train, 64, 50, 3).unwrap();
        assert_eq!(p.count, 50);
        // verify by construction: reconstruct each patch from the raster and
        // check it exists wholly left of the validation extent. Corner columns
        // can be at most col1 - patch.
        assert!(train.col1 - 64 < val.col0);
    }

    #[test]
    fn patch_set_round_trip() {
        let (sar, truth) = scene_512();
        let p = extract_patches(&sar, &truth, 32, 6, 5).unwrap();
        let masked = mask_labels(&p, 0.02, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_patch_set(&masked, dir.path().join("set"), 123).unwrap();
        let (back, seed) = load_patch_set(dir.path().join("set")).unwrap();
        assert_eq!(back, masked);
        assert_eq!(seed, 123);
    }
}
