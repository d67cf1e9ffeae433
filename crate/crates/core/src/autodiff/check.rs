//! Finite-difference gradient verifiers.
//!
//! Central differences per input element against the analytic backward pass.
//! This is the independent oracle for every op in the engine; it stays
//! separate from the backward implementation it checks.
//!
//! Two modes:
//! - [`finite_diff_check`]: both sides evaluated in the same scalar type. In
//!   f64 this resolves gradients to ~1e-8 relative or better.
//! - [`finite_diff_check_f32`]: analytic gradients in f32, numeric differences
//!   of the same graph in f64. A per-element relative comparison against an
//!   f32 finite difference would drown small gradients in the rounding noise
//!   of the loss reduction, so the 32-bit mode checks the 32-bit backward pass
//!   against a stable difference quotient instead.

use super::{AutodiffError, Graph, Scalar, Tensor, TensorId};

/// A graph-building function usable at any precision. Must be deterministic:
/// the same structure (and dropout masks) on every call.
pub trait GraphFn {
    fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        inputs: &[TensorId],
    ) -> Result<TensorId, AutodiffError>;
}

fn eval<T: Scalar, F>(
    build: &F,
    tensors: &[Tensor<T>],
) -> Result<(Graph<T>, Vec<TensorId>, TensorId), AutodiffError>
where
    F: Fn(&mut Graph<T>, &[TensorId]) -> Result<TensorId, AutodiffError>,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &ids)?;
    if g.value(out).shape != vec![1] {
        return Err(AutodiffError::NonScalarOutput(g.value(out).shape.clone()));
    }
    Ok((g, ids, out))
}

fn numeric_grads<T: Scalar, F>(
    build: &F,
    inputs: &[Tensor<T>],
    epsilon: f64,
) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    F: Fn(&mut Graph<T>, &[TensorId]) -> Result<TensorId, AutodiffError>,
{
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = vec![0.0f64; inputs[i].len()];
        for e in 0..inputs[i].len() {
            let orig = work[i].data[e];
            let h = T::from_f64(epsilon);

            work[i].data[e] = orig + h;
            let (gp, _, op) = eval(build, &work)?;
            let f_plus = Scalar::to_f64(gp.value(op).data[0]);

            work[i].data[e] = orig - h;
            let (gm, _, om) = eval(build, &work)?;
            let f_minus = Scalar::to_f64(gm.value(om).data[0]);

            work[i].data[e] = orig;
            grads[e] = (f_plus - f_minus) / (2.0 * epsilon);
        }
        out.push(grads);
    }
    Ok(out)
}

fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    let mut max_rel = 0.0f64;
    for (a_t, n_t) in analytic.iter().zip(numeric) {
        for (&a, &n) in a_t.iter().zip(n_t) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    max_rel
}

/// Max over all input elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
/// with both sides evaluated at precision `T`.
///
/// `build` must produce a scalar output from leaves created for `inputs` and
/// be deterministic. `epsilon` ~ 1e-5 suits the f64 mode; 1e-3 is the default
/// step for 32-bit callers.
pub fn finite_diff_check<T, F>(
    build: F,
    inputs: &[Tensor<T>],
    epsilon: f64,
) -> Result<f64, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[TensorId]) -> Result<TensorId, AutodiffError>,
{
    let (graph, ids, out) = eval(&build, inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads.get(id).map_or_else(
                || vec![0.0; input.len()],
                |g| g.iter().map(|&v| Scalar::to_f64(v)).collect(),
            )
        })
        .collect();
    let numeric = numeric_grads(&build, inputs, epsilon)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// 32-bit mode: analytic gradients from the f32 graph, central differences
/// from the f64 evaluation of the same graph.
pub fn finite_diff_check_f32<F>(
    build: &F,
    inputs: &[Tensor<f32>],
    epsilon: f64,
) -> Result<f64, AutodiffError>
where
    F: GraphFn,
{
    let (graph, ids, out) = eval(&|g: &mut Graph<f32>, ids: &[TensorId]| build.apply(g, ids), inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads.get(id).map_or_else(
                || vec![0.0; input.len()],
                |g| g.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect();
    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = numeric_grads(
        &|g: &mut Graph<f64>, ids: &[TensorId]| build.apply(g, ids),
        &inputs64,
        epsilon,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}


/// Per-tensor (index, element, analytic, numeric, rel) of the worst element,
/// with both sides evaluated at precision `T`.
pub fn finite_diff_debug<T, F>(
    build: &F,
    inputs: &[Tensor<T>],
    epsilon: f64,
) -> Result<Vec<(usize, usize, f64, f64, f64)>, AutodiffError>
where
    T: Scalar,
    F: GraphFn,
{
    let build_t = |g: &mut Graph<T>, ids: &[TensorId]| build.apply(g, ids);
    let (graph, ids, out) = eval(&build_t, inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads.get(id).map_or_else(
                || vec![0.0; input.len()],
                |g| g.iter().map(|&v| Scalar::to_f64(v)).collect(),
            )
        })
        .collect();
    let numeric = numeric_grads(&build_t, inputs, epsilon)?;
    let mut rows = Vec::new();
    for (i, (a_t, n_t)) in analytic.iter().zip(&numeric).enumerate() {
        let mut worst = (i, 0usize, 0.0, 0.0, 0.0f64);
        for (e, (&a, &n)) in a_t.iter().zip(n_t).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > worst.4 {
                worst = (i, e, a, n, rel);
            }
        }
        rows.push(worst);
    }
    Ok(rows)
}

/// [`finite_diff_debug`] with a fourth-order central stencil,
/// (f(x-2e) - 8 f(x-e) + 8 f(x+e) - f(x+2e)) / 12e.
///
/// A plain central difference cannot verify small-magnitude gradients to
/// 1e-6 relative even in f64: the subtractive cancellation floor at the
/// optimal step is around 1e-11 absolute. The fourth-order stencil tolerates
/// a much larger step (~1e-4), pushing the cancellation floor below 1e-12
/// while keeping the truncation term negligible.
///
/// `floor` is the denominator floor of the relative error: elements whose
/// analytic and numeric gradients are both far below it (true zeros, e.g.
/// conv biases shadowed by batch norm or paths killed by dropout) compare
/// the residual evaluation noise against `floor` rather than against itself.
pub fn finite_diff_debug_o4<T, F>(
    build: &F,
    inputs: &[Tensor<T>],
    epsilon: f64,
    floor: f64,
) -> Result<Vec<(usize, usize, f64, f64, f64)>, AutodiffError>
where
    T: Scalar,
    F: GraphFn,
{
    let build_t = |g: &mut Graph<T>, ids: &[TensorId]| build.apply(g, ids);
    let (graph, ids, out) = eval(&build_t, inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads.get(id).map_or_else(
                || vec![0.0; input.len()],
                |g| g.iter().map(|&v| Scalar::to_f64(v)).collect(),
            )
        })
        .collect();

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut rows = Vec::new();
    for i in 0..inputs.len() {
        let mut worst = (i, 0usize, 0.0, 0.0, 0.0f64);
        for e in 0..inputs[i].len() {
            let orig = work[i].data[e];
            let mut at = |offset: f64| -> Result<f64, AutodiffError> {
                work[i].data[e] = orig + T::from_f64(offset);
                let (g, _, o) = eval(&build_t, &work)?;
                Ok(Scalar::to_f64(g.value(o).data[0]))
            };
            let num = (at(-2.0 * epsilon)? - 8.0 * at(-epsilon)? + 8.0 * at(epsilon)?
                - at(2.0 * epsilon)?)
                / (12.0 * epsilon);
            work[i].data[e] = orig;
            let a = analytic[i][e];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            if rel > worst.4 {
                worst = (i, e, a, num, rel);
            }
        }
        rows.push(worst);
    }
    Ok(rows)
}

/// Debug variant: per-tensor (index, element, analytic, numeric) of the worst
/// element.
pub fn finite_diff_debug_f32<F>(
    build: &F,
    inputs: &[Tensor<f32>],
    epsilon: f64,
) -> Result<Vec<(usize, usize, f64, f64, f64)>, AutodiffError>
where
    F: GraphFn,
{
    let (graph, ids, out) = eval(&|g: &mut Graph<f32>, ids: &[TensorId]| build.apply(g, ids), inputs)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads.get(id).map_or_else(
                || vec![0.0; input.len()],
                |g| g.iter().map(|&v| v as f64).collect(),
            )
        })
        .collect();
    let inputs64: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let numeric = numeric_grads(
        &|g: &mut Graph<f64>, ids: &[TensorId]| build.apply(g, ids),
        &inputs64,
        epsilon,
    )?;
    let mut rows = Vec::new();
    for (i, (a_t, n_t)) in analytic.iter().zip(&numeric).enumerate() {
        let mut worst = (i, 0usize, 0.0, 0.0, 0.0f64);
        for (e, (&a, &n)) in a_t.iter().zip(n_t).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > worst.4 {
                worst = (i, e, a, n, rel);
            }
        }
        rows.push(worst);
    }
    Ok(rows)
}
