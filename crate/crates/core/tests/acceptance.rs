//! Acceptance gate. Each test covers one release criterion and prints a
//! single pass/fail line; run with
//!
//!   cargo test --test acceptance -- --nocapture
//!
//! The two benchmark-based criteria share one cached run (plus one replay for
//! the determinism check), so the whole gate costs two benchmark executions.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use forestmap::autodiff::{
    finite_diff_check, finite_diff_check_f32, finite_diff_debug_f32, finite_diff_debug_o4,
    AutodiffError, Graph, GraphFn, Scalar, Tensor, TensorId,
};
use forestmap::experiment::{run_bench, BenchSummary, ExperimentConfig};
use forestmap::metrics::f1_from_pr;
use forestmap::patch::{mask_labels, PatchSet};
use forestmap::raster::{read_raster, write_raster, ClassMap, Raster};
use forestmap::selftrain::{refine_loop_with, RefineConfig};
use forestmap::unet::{build, load_checkpoint, save_checkpoint, Binding, Model, UnetConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

// --- criterion: published precision/recall/F1 triples are self-consistent ---

#[test]
fn metric_oracle_consistency() {
    // six reported (precision, recall, printed F1) rows; recomputed F1 must
    // match the printed value within +/-0.0015
    let rows = [
        (0.90, 0.973, 0.935),
        (0.97, 0.899, 0.933),
        (0.902, 0.983, 0.94),
        (0.982, 0.892, 0.934),
        (0.94, 0.979, 0.958),
        (0.978, 0.891, 0.934),
    ];
    let mut worst = (0usize, 0.0f64);
    for (i, &(p, r, printed)) in rows.iter().enumerate() {
        let diff = (f1_from_pr(p, r) - printed).abs();
        if diff > worst.1 {
            worst = (i, diff);
        }
    }
    report(
        "metric-oracle-consistency",
        worst.1 <= 0.0015,
        &format!("worst row {} off by {:.6}, tolerance 0.0015", worst.0 + 1, worst.1),
    );
}

// --- criterion: finite-difference gradient verification ---

/// Per-layer builders. Inputs are sampled away from relu kinks and pool ties.
enum LayerOp {
    Conv,
    ConvTranspose,
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool,
    Concat,
    Dropout,
    MaskedBce,
}

impl GraphFn for LayerOp {
    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ids: &[TensorId],
    ) -> Result<TensorId, AutodiffError> {
        let out = match self {
            LayerOp::Conv => {
                let c = g.conv2d(ids[0], ids[1], ids[2])?;
                g.sigmoid(c)
            }
            LayerOp::ConvTranspose => {
                let c = g.conv2d_transpose(ids[0], ids[1])?;
                g.sigmoid(c)
            }
            LayerOp::BatchNorm => {
                let mean = vec![T::zero(); 2];
                let var = vec![T::one(); 2];
                let b = g.batch_norm(ids[0], ids[1], ids[2], &mean, &var, true, T::from_f64(1e-5))?;
                g.sigmoid(b)
            }
            LayerOp::Relu => g.relu(ids[0]),
            LayerOp::Sigmoid => g.sigmoid(ids[0]),
            LayerOp::MaxPool => g.max_pool2(ids[0])?,
            LayerOp::Concat => g.concat_channels(ids[0], ids[1])?,
            LayerOp::Dropout => g.dropout(ids[0], 0.5, true, 99)?,
            LayerOp::MaskedBce => {
                let n = g.value(ids[0]).len();
                let labels: Vec<T> =
                    (0..n).map(|i| T::from_f64((i % 2) as f64)).collect();
                let mask = vec![T::one(); n];
                return g.masked_bce(ids[0], &labels, &mask);
            }
        };
        Ok(g.sum(out))
    }
}

fn layer_inputs(op: &LayerOp) -> Vec<Tensor<f64>> {
    // distinct magnitudes bounded away from zero: no relu kinks or pool ties
    // within the finite-difference step
    let fill = |shape: Vec<usize>, scale: f64, offset: f64| {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * (offset + scale * ((i * 37 % 101) as f64 + 1.0) / 101.0)
            })
            .collect();
        Tensor::new(shape, data)
    };
    match op {
        LayerOp::Conv => vec![
            fill(vec![1, 5, 5, 2], 0.8, 0.1),
            fill(vec![3, 3, 2, 3], 0.5, 0.05),
            fill(vec![3], 0.1, 0.01),
        ],
        LayerOp::ConvTranspose => vec![
            fill(vec![1, 3, 3, 2], 0.8, 0.1),
            fill(vec![2, 2, 2, 3], 0.5, 0.05),
        ],
        LayerOp::BatchNorm => vec![
            fill(vec![2, 3, 3, 2], 0.8, 0.1),
            fill(vec![2], 0.4, 0.5),
            fill(vec![2], 0.2, 0.05),
        ],
        LayerOp::Relu | LayerOp::Sigmoid | LayerOp::Dropout => {
            vec![fill(vec![1, 4, 4, 2], 0.9, 0.15)]
        }
        LayerOp::MaxPool => vec![fill(vec![1, 4, 4, 2], 0.9, 0.15)],
        LayerOp::Concat => vec![
            fill(vec![1, 3, 3, 2], 0.8, 0.1),
            fill(vec![1, 3, 3, 1], 0.6, 0.2),
        ],
        LayerOp::MaskedBce => {
            let shape = vec![1, 4, 4, 1];
            let data = (0..16).map(|i| 0.15 + 0.045 * i as f64).collect();
            vec![Tensor::new(shape, data)]
        }
    }
}

/// Masked loss over a full forward pass of a small model; the leaves are the
/// model parameters.
struct ModelLoss {
    model: Model,
    input: Tensor<f32>,
    labels: Vec<f64>,
    mask: Vec<f64>,
}

impl GraphFn for ModelLoss {
    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &[TensorId],
    ) -> Result<TensorId, AutodiffError> {
        let binding = Binding {
            param_ids: self
                .model
                .params
                .iter()
                .zip(inputs)
                .map(|((n, _), &id)| (n.clone(), id))
                .collect(),
        };
        let x = g.leaf(self.input.cast::<T>());
        let (out, _) = self
            .model
            .forward_graph(g, &binding, x, true, 77)
            .map_err(|_| AutodiffError::ShapeMismatch {
                op: "unet",
                detail: "forward failed".into(),
            })?;
        let labels: Vec<T> = self.labels.iter().map(|&v| T::from_f64(v)).collect();
        let mask: Vec<T> = self.mask.iter().map(|&v| T::from_f64(v)).collect();
        g.masked_bce(out, &labels, &mask)
    }
}

fn model_loss() -> (ModelLoss, Vec<Tensor<f32>>) {
    let config = UnetConfig {
        depth: 2,
        base_filters: 4,
        width_multipliers: vec![1, 2],
        bottleneck_multiplier: 4,
        ..UnetConfig::tiny()
    };
    let model = build(&config, 3).unwrap();
    let tensors: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 8 * 8;
    let loss = ModelLoss {
        model,
        input: Tensor::new(
            vec![1, 8, 8, 2],
            (0..2 * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        ),
        labels: (0..n).map(|i| f64::from(i % 2 == 0)).collect(),
        mask: vec![1.0; n],
    };
    (loss, tensors)
}

#[test]
fn gradient_verification() {
    let started = Instant::now();
    let ops = [
        ("conv2d", LayerOp::Conv),
        ("conv2d_transpose", LayerOp::ConvTranspose),
        ("batch_norm", LayerOp::BatchNorm),
        ("relu", LayerOp::Relu),
        ("sigmoid", LayerOp::Sigmoid),
        ("max_pool2", LayerOp::MaxPool),
        ("concat_channels", LayerOp::Concat),
        ("dropout", LayerOp::Dropout),
        ("masked_bce", LayerOp::MaskedBce),
    ];
    let mut pass = true;
    let mut worst64 = (0.0f64, "");
    let mut worst32 = (0.0f64, "");
    for (name, op) in &ops {
        let inputs = layer_inputs(op);
        let err64 = finite_diff_check(
            |g: &mut Graph<f64>, ids: &[TensorId]| op.apply(g, ids),
            &inputs,
            1e-5,
        )
        .unwrap();
        let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        let err32 = finite_diff_check_f32(op, &inputs32, 1e-6).unwrap();
        if err64 > worst64.0 {
            worst64 = (err64, name);
        }
        if err32 > worst32.0 {
            worst32 = (err32, name);
        }
        pass &= err64 < 1e-6 && err32 < 1e-3;
    }

    // end-to-end: depth 2, width 4, 8x8 input. Conv biases feeding a
    // training-mode batch norm have true zero gradients (the mean subtraction
    // cancels any shift), so they are held to an absolute bound and every
    // other tensor to the relative one.
    let (loss, tensors32) = model_loss();
    let rows32 = finite_diff_debug_f32(&loss, &tensors32, 1e-6).unwrap();
    let tensors64: Vec<Tensor<f64>> = tensors32.iter().map(|t| t.cast()).collect();
    // the 1e-6 relative bound outruns plain central differences, so the
    // 64-bit side uses the fourth-order stencil with a wider step
    // floor 1e-5: gradients here range up to ~1e-1, so anything below the
    // floor on both sides is a structural zero (dropout-killed path or a
    // batch-norm-shadowed bias) exercised against the floor instead
    let rows64 = finite_diff_debug_o4(&loss, &tensors64, 1e-4, 1e-5).unwrap();
    let mut e2e32 = 0.0f64;
    let mut e2e64 = 0.0f64;
    for (rows, tol_abs, worst) in [
        (&rows32, 1e-6, &mut e2e32),
        (&rows64, 1e-9, &mut e2e64),
    ] {
        for &(i, _, a, n, rel) in rows.iter() {
            let name = &loss.model.params[i].0;
            if name != "head.bias" && name.ends_with(".bias") {
                pass &= a.abs() < tol_abs && n.abs() < tol_abs;
            } else {
                *worst = worst.max(rel);
            }
        }
    }
    pass &= e2e32 < 1e-3 && e2e64 < 1e-6;

    report(
        "gradient-verification",
        pass,
        &format!(
            "per-layer worst 64-bit {:.2e} ({}), 32-bit {:.2e} ({}); end-to-end 64-bit {:.2e}, 32-bit {:.2e}; {:.1}s",
            worst64.0, worst64.1, worst32.0, worst32.1, e2e64, e2e32,
            started.elapsed().as_secs_f64()
        ),
    );
}

// --- criterion: masked-loss exactness ---

#[test]
fn masked_loss_exactness() {
    // loss at p=0.5, y=1, mask=1 equals ln 2 within 1 ulp of f32
    let mut g = Graph::<f32>::new();
    let p = g.leaf(Tensor::new(vec![1, 1, 1, 1], vec![0.5f32]));
    let loss = g.masked_bce(p, &[1.0], &[1.0]).unwrap();
    let got = g.value(loss).data[0];
    let want = std::f32::consts::LN_2;
    let ulps = (got.to_bits() as i64 - want.to_bits() as i64).unsigned_abs();

    // gradients at mask=0 pixels are bitwise zero
    let mut g = Graph::<f32>::new();
    let probs = Tensor::new(vec![1, 2, 2, 1], vec![0.9f32, 0.1, 0.7, 0.3]);
    let p = g.leaf(probs);
    let loss = g
        .masked_bce(p, &[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 1.0, 0.0])
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let gp = grads.get(p).unwrap();
    let masked_zero = gp[1].to_bits() == 0 && gp[3].to_bits() == 0;
    let unmasked_live = gp[0] != 0.0 && gp[2] != 0.0;

    report(
        "masked-loss-exactness",
        ulps <= 1 && masked_zero && unmasked_live,
        &format!("ln2 off by {ulps} ulp; masked grads bitwise zero: {masked_zero}"),
    );
}

// --- criterion: refinement stop rule ---

#[test]
fn stop_rule_unit() {
    let (h, w) = (40, 50);
    let n = h * w;
    let zeros = ClassMap::new(h, w, vec![0u8; n]).unwrap();
    // predictions engineered to change fractions 0.4, 0.2, 0.08 round over round
    let flip_first = |base: &ClassMap, k: usize| {
        let mut v = base.values.clone();
        for x in v.iter_mut().take(k) {
            *x = 1 - *x;
        }
        ClassMap::new(h, w, v).unwrap()
    };
    let p1 = flip_first(&zeros, (0.4 * n as f64) as usize);
    let p2 = flip_first(&p1, (0.2 * n as f64) as usize);
    let p3 = flip_first(&p2, (0.08 * n as f64) as usize);
    let preds = [p1, p2, p3.clone()];

    let net = UnetConfig {
        depth: 1,
        base_filters: 1,
        width_multipliers: vec![1],
        bottleneck_multiplier: 1,
        ..UnetConfig::tiny()
    };
    let model = build(&net, 1).unwrap();
    let config = RefineConfig {
        stop_threshold: 0.10,
        max_rounds: 8,
        net,
        ..RefineConfig::default()
    };
    let mut calls = 0usize;
    let outcome = refine_loop_with(&zeros, &config, |round, _| {
        calls += 1;
        Ok((model.clone(), preds[round - 1].clone()))
    })
    .unwrap();
    let cfs: Vec<f64> = outcome.records.iter().map(|r| r.change_fraction).collect();
    let pass = calls == 3
        && outcome.records.len() == 3
        && outcome.converged
        && outcome.labels == p3
        && cfs
            .iter()
            .zip([0.4, 0.2, 0.08])
            .all(|(a, b)| (a - b).abs() < 1e-9);
    report(
        "stop-rule-unit",
        pass,
        &format!("rounds {calls}, change fractions {cfs:?}, converged {}", outcome.converged),
    );
}

// --- criteria: three-way benchmark + determinism ---

struct BenchRun {
    summary: BenchSummary,
    evaluation: Vec<u8>,
    seconds: f64,
}

fn bench_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("forestmap-acceptance-{tag}"));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run_once(tag: &str) -> BenchRun {
    let dir = bench_dir(tag);
    let config = ExperimentConfig::default();
    let started = Instant::now();
    let summary = run_bench(&config, &dir).expect("benchmark run failed");
    let seconds = started.elapsed().as_secs_f64();
    let evaluation = std::fs::read(dir.join("evaluation.json")).unwrap();
    BenchRun {
        summary,
        evaluation,
        seconds,
    }
}

fn first_run() -> &'static BenchRun {
    static RUN: OnceLock<BenchRun> = OnceLock::new();
    RUN.get_or_init(|| run_once("run1"))
}

#[test]
fn benchmark_three_way() {
    let run = first_run();
    let s = &run.summary;
    let dense = s.dense_forest_f1.unwrap_or(0.0);
    let incomplete = s.incomplete_forest_f1.unwrap_or(0.0);
    let initial = s.inaccurate_initial_forest_f1.unwrap_or(0.0);
    let refined = s.inaccurate_forest_f1.unwrap_or(0.0);

    let a = dense >= 0.90;
    let b = dense - incomplete <= 0.05;
    let c = s.refine_converged
        && s.refine_rounds <= 8
        && s.refine_final_change_fraction < 0.10
        && refined >= initial + 0.01;
    // the published budget is 15 minutes on 4 cores; scale by the cores
    // actually available
    let budget = 900.0 * (4.0 / num_cpus_fallback() as f64).max(1.0);
    let timely = run.seconds <= budget;
    report(
        "benchmark-three-way",
        a && b && c && timely,
        &format!(
            "dense F1 {dense:.4} (>=0.90: {a}); incomplete {incomplete:.4} (within 0.05: {b}); \
             refined {refined:.4} vs initial {initial:.4}, {} rounds, final change {:.4}, \
             converged {} (c: {c}); {:.0}s of {budget:.0}s budget",
            s.refine_rounds, s.refine_final_change_fraction, s.refine_converged, run.seconds
        ),
    );
}

fn num_cpus_fallback() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[test]
fn benchmark_determinism() {
    let first = first_run();
    let second = run_once("run2");
    let identical = first.evaluation == second.evaluation;
    report(
        "benchmark-determinism",
        identical,
        &format!(
            "evaluation.json replay byte-identical: {identical} ({} bytes)",
            first.evaluation.len()
        ),
    );
}

// --- criterion: format round-trips ---

#[test]
fn format_round_trips() {
    let dir = bench_dir("formats");
    std::fs::create_dir_all(&dir).unwrap();

    // WSLR: 1,000 randomized rasters survive save/load bit-identically
    // (Raster equality is bitwise, including NaN payloads)
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    let raster_path = dir.join("case.wslr");
    let wslr = runner.run(
        &(1usize..=3, 1usize..=10, 1usize..=10).prop_flat_map(|(b, h, w)| {
            proptest::collection::vec(-1e6f32..1e6, b * h * w)
                .prop_map(move |data| (b, h, w, data))
        }),
        |(b, h, w, data)| {
            let raster = Raster::new(b, h, w, data, f32::NAN).unwrap();
            write_raster(&raster, &raster_path).unwrap();
            let back = read_raster(&raster_path).unwrap();
            prop_assert_eq!(&back, &raster);
            Ok(())
        },
    );

    // WSLM: 1,000 randomized model checkpoints survive bit-identically
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    let model_path = dir.join("case.wslm");
    let wslm = runner.run(
        &(1usize..=2, 1usize..=3, any::<u64>(), 0.0f64..0.9),
        |(depth, base, seed, dropout)| {
            let config = UnetConfig {
                depth,
                base_filters: base,
                width_multipliers: (0..depth).map(|i| 1 << i).collect(),
                bottleneck_multiplier: 1 << (depth - 1),
                dropout_rate: dropout,
                ..UnetConfig::tiny()
            };
            let model = build(&config, seed).unwrap();
            save_checkpoint(&model, &model_path).unwrap();
            let back = load_checkpoint(&model_path).unwrap();
            prop_assert_eq!(back.config, model.config);
            for ((name, a), (_, b)) in model.params.iter().zip(&back.params) {
                let same = a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
                prop_assert!(same, "{} changed", name);
            }
            prop_assert_eq!(model.bn_stats.len(), back.bn_stats.len());
            Ok(())
        },
    );

    report(
        "format-round-trips",
        wslr.is_ok() && wslm.is_ok(),
        &format!("raster: {wslr:?}; checkpoint: {wslm:?}"),
    );
}

// --- criterion: sparse-mask exactness ---

#[test]
fn sparse_mask_exactness() {
    let (count, side) = (1000usize, 64usize);
    let px = side * side;
    let mut rng = forestmap::seeds::rng(3, "acceptance.mask");
    let set = PatchSet {
        count,
        height: side,
        width: side,
        channels: 2,
        inputs: vec![0.0; count * px * 2],
        labels: (0..count * px).map(|_| rng.gen_range(0..=1u8)).collect(),
        mask: vec![1u8; count * px],
    };
    let masked = mask_labels(&set, 0.02, 17).unwrap();
    let expected = (0.02 * px as f64).round() as u64; // 82 for 64x64
    let mut bad = 0usize;
    for i in 0..count {
        let kept: u64 = masked.mask[i * px..(i + 1) * px]
            .iter()
            .map(|&v| v as u64)
            .sum();
        if kept != expected {
            bad += 1;
        }
    }
    let unchanged = masked.labels == set.labels;
    report(
        "sparse-mask-exactness",
        bad == 0 && expected == 82 && unchanged,
        &format!("{count} patches, {expected} kept pixels each, {bad} deviations"),
    );
}
