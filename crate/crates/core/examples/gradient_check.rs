//! Verify analytic gradients against central finite differences, both for a
//! hand-built composite graph and for a small end-to-end segmentation model.
//!
//! Run: cargo run --release --example gradient_check

use anyhow::Result;
use forestmap::autodiff::{
    finite_diff_check, finite_diff_check_f32, finite_diff_debug_f32, AutodiffError, Graph, GraphFn,
    Scalar, Tensor, TensorId,
};
use forestmap::seeds;
use forestmap::unet::{build, Binding, Model, UnetConfig};
use rand::Rng;

/// conv -> relu -> pool -> sigmoid -> sum, checkable at any precision.
struct Composite;

impl GraphFn for Composite {
    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &[TensorId],
    ) -> Result<TensorId, AutodiffError> {
        let conv = g.conv2d(inputs[0], inputs[1], inputs[2])?;
        let act = g.relu(conv);
        let pooled = g.max_pool2(act)?;
        let squashed = g.sigmoid(pooled);
        Ok(g.sum(squashed))
    }
}

/// Masked loss over a tiny model forward pass; the leaves are the model
/// parameters in their stable order, the data tensors are constants.
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
            .forward_graph(g, &binding, x, true, 0)
            .map_err(|_| AutodiffError::ShapeMismatch {
                op: "unet",
                detail: "forward failed".into(),
            })?;
        let labels: Vec<T> = self.labels.iter().map(|&v| T::from_f64(v)).collect();
        let mask: Vec<T> = self.mask.iter().map(|&v| T::from_f64(v)).collect();
        g.masked_bce(out, &labels, &mask)
    }
}

fn main() -> Result<()> {
    // 1. composite graph, 64-bit mode: expect < 1e-6
    let mut rng = seeds::rng(3, "example.gradcheck");
    let x = Tensor::new(
        vec![1, 6, 6, 2],
        (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let k = Tensor::new(
        vec![3, 3, 2, 3],
        (0..54).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    );
    let b = Tensor::new(vec![3], vec![0.05f64, -0.02, 0.01]);
    let err64 = finite_diff_check(
        |g: &mut Graph<f64>, ids: &[TensorId]| Composite.apply(g, ids),
        &[x.clone(), k.clone(), b.clone()],
        1e-5,
    )?;
    println!("composite graph, 64-bit: max relative error {err64:.3e}");
    assert!(err64 < 1e-6);

    // 2. same graph, 32-bit analytic side: expect < 1e-3
    let to32 = |t: &Tensor<f64>| t.cast::<f32>();
    let err32 = finite_diff_check_f32(&Composite, &[to32(&x), to32(&k), to32(&b)], 1e-6)?;
    println!("composite graph, 32-bit: max relative error {err32:.3e}");
    assert!(err32 < 1e-3);

    // 3. end-to-end: every parameter of a depth-2 model through the masked loss
    let config = UnetConfig {
        depth: 2,
        base_filters: 4,
        width_multipliers: vec![1, 2],
        bottleneck_multiplier: 2,
        ..UnetConfig::tiny()
    };
    let model = build(&config, 11)?;
    let tensors: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let total: usize = tensors.iter().map(Tensor::len).sum();
    let mut rng = seeds::rng(5, "example.gradcheck.data");
    let n = 8 * 8;
    let loss = ModelLoss {
        model,
        input: Tensor::new(
            vec![1, 8, 8, 2],
            (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ),
        labels: (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect(),
        mask: vec![1.0; n],
    };
    // Conv biases feeding a training-mode batch norm have a true gradient of
    // exactly zero (mean subtraction cancels the shift), so both sides are
    // rounding noise there; check those in absolute terms, the rest
    // relatively.
    let rows = finite_diff_debug_f32(&loss, &tensors, 1e-6)?;
    let mut worst = 0.0f64;
    for (i, _, a, n, rel) in rows {
        let name = &loss.model.params[i].0;
        if name != "head.bias" && name.ends_with(".bias") {
            assert!(a.abs() < 1e-6 && n.abs() < 1e-6, "{name}: bias drifted");
        } else {
            assert!(rel < 1e-3, "{name}: rel err {rel}");
            worst = worst.max(rel);
        }
    }
    println!("end-to-end model ({total} parameters): max relative error {worst:.3e}");
    Ok(())
}
