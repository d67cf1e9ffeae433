//! Computation graph and backward pass.
//!
//! Ops append nodes to an arena; node ids are therefore already in topological
//! order and `backward` is a single reverse sweep. Forward never mutates its
//! inputs, and a tensor consumed by several ops accumulates the sum of all
//! gradient contributions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AutodiffError, Scalar, Tensor};

/// Handle to a node's output tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// Operation tag plus whatever the backward pass needs.
#[derive(Debug)]
pub enum Op<T: Scalar> {
    Leaf,
    /// Same-padding cross-correlation; inputs x, kernel, bias.
    Conv2d,
    /// 2x2 stride-2 transpose convolution; inputs x, kernel.
    ConvTranspose2d,
    /// Inputs x, gamma, beta. `mean`/`var` are the statistics actually used
    /// (batch stats when training, running stats otherwise).
    BatchNorm {
        mean: Vec<T>,
        var: Vec<T>,
        eps: T,
        training: bool,
    },
    Relu,
    Sigmoid,
    MaxPool2 {
        argmax: Vec<usize>,
    },
    /// Element factors: 0 for dropped, 1/(1-rate) for kept.
    Dropout {
        mask: Vec<T>,
    },
    ConcatChannels,
    Add,
    Sum,
    /// Input: probabilities. Labels/mask captured by value; gradient is
    /// exactly zero wherever mask = 0.
    MaskedBce {
        labels: Vec<T>,
        mask: Vec<T>,
        count: usize,
        eps: T,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<TensorId>,
    value: Tensor<T>,
}

/// Arena-based computation graph. Build one per forward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node, indexed by
/// [`TensorId`]. Nodes not on a path to the loss have no gradient.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }
}

fn nhwc(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected NHWC tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<TensorId>, value: Tensor<T>) -> TensorId {
        self.nodes.push(Node { op, inputs, value });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(Op::Leaf, vec![], value)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Batch statistics computed by a training-mode batch-norm node, for
    /// running-average updates. None for inference-mode nodes.
    pub fn batch_stats(&self, id: TensorId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm {
                mean,
                var,
                training: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// Same-padding cross-correlation with an odd-sized kernel
    /// (kH x kW x Cin x Cout) plus per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        kernel: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let (n, h, w, cin) = nhwc(&self.value(x).shape);
        let kshape = &self.value(kernel).shape;
        let (kh, kw, kcin, cout) = nhwc(kshape);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::EvenKernel(kh, kw));
        }
        if kcin != cin || self.value(bias).shape != vec![cout] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "x {:?} kernel {:?} bias {:?}",
                    self.value(x).shape,
                    kshape,
                    self.value(bias).shape
                ),
            });
        }
        let out = conv2d_forward(
            &self.value(x).data,
            &self.value(kernel).data,
            &self.value(bias).data,
            n,
            h,
            w,
            cin,
            kh,
            kw,
            cout,
        );
        Ok(self.push(
            Op::Conv2d,
            vec![x, kernel, bias],
            Tensor::new(vec![n, h, w, cout], out),
        ))
    }

    /// 2x2 stride-2 transpose convolution (kernel 2 x 2 x Cin x Cout); output
    /// spatial dims are doubled.
    pub fn conv2d_transpose(
        &mut self,
        x: TensorId,
        kernel: TensorId,
    ) -> Result<TensorId, AutodiffError> {
        let (n, h, w, cin) = nhwc(&self.value(x).shape);
        let kshape = self.value(kernel).shape.clone();
        let (kh, kw, kcin, cout) = nhwc(&kshape);
        if kh != 2 || kw != 2 || kcin != cin {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d_transpose",
                detail: format!("x {:?} kernel {:?}", self.value(x).shape, kshape),
            });
        }
        let xd = &self.value(x).data;
        let kd = &self.value(kernel).data;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * oh * ow * cout];
        out.par_chunks_mut(oh * ow * cout)
            .enumerate()
            .for_each(|(ni, on)| {
                for ih in 0..h {
                    for iw in 0..w {
                        let xbase = ((ni * h + ih) * w + iw) * cin;
                        for dkh in 0..2 {
                            for dkw in 0..2 {
                                let obase = ((2 * ih + dkh) * ow + (2 * iw + dkw)) * cout;
                                let kbase = (dkh * 2 + dkw) * cin * cout;
                                for ci in 0..cin {
                                    let xv = xd[xbase + ci];
                                    let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                    for (co, &kv) in krow.iter().enumerate() {
                                        on[obase + co] = on[obase + co] + xv * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        Ok(self.push(
            Op::ConvTranspose2d,
            vec![x, kernel],
            Tensor::new(vec![n, oh, ow, cout], out),
        ))
    }

    /// Batch normalization over N,H,W per channel. Training mode normalizes
    /// by batch statistics (biased variance) and records them for the caller's
    /// running-average update; inference mode uses the supplied running stats.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[T],
        running_var: &[T],
        training: bool,
        eps: T,
    ) -> Result<TensorId, AutodiffError> {
        let (n, h, w, c) = nhwc(&self.value(x).shape);
        if self.value(gamma).shape != vec![c]
            || self.value(beta).shape != vec![c]
            || running_mean.len() != c
            || running_var.len() != c
        {
            return Err(AutodiffError::ShapeMismatch {
                op: "batch_norm",
                detail: format!("x channels {c}, gamma {:?}", self.value(gamma).shape),
            });
        }
        let xd = &self.value(x).data;
        let (mean, var) = if training {
            let m = T::from_f64((n * h * w) as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for px in xd.chunks_exact(c) {
                for (ci, &v) in px.iter().enumerate() {
                    mean[ci] = mean[ci] + v;
                }
            }
            for v in mean.iter_mut() {
                *v = *v / m;
            }
            for px in xd.chunks_exact(c) {
                for (ci, &v) in px.iter().enumerate() {
                    let d = v - mean[ci];
                    var[ci] = var[ci] + d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v / m;
            }
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let gd = &self.value(gamma).data;
        let bd = &self.value(beta).data;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = vec![T::zero(); xd.len()];
        for (opx, px) in out.chunks_exact_mut(c).zip(xd.chunks_exact(c)) {
            for ci in 0..c {
                opx[ci] = gd[ci] * (px[ci] - mean[ci]) * inv_std[ci] + bd[ci];
            }
        }
        let shape = self.value(x).shape.clone();
        Ok(self.push(
            Op::BatchNorm {
                mean,
                var,
                eps,
                training,
            },
            vec![x, gamma, beta],
            Tensor::new(shape, out),
        ))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self
            .value(x)
            .data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.value(x).shape.clone();
        self.push(Op::Relu, vec![x], Tensor::new(shape, out))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<T> = self
            .value(x)
            .data
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect();
        let shape = self.value(x).shape.clone();
        self.push(Op::Sigmoid, vec![x], Tensor::new(shape, out))
    }

    /// 2x2 max pool, stride 2. Gradient routes to the argmax; ties break to
    /// the first element in row-major scan order.
    pub fn max_pool2(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let (n, h, w, c) = nhwc(&self.value(x).shape);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(AutodiffError::OddSpatialDims {
                op: "max_pool2",
                h,
                w,
            });
        }
        let xd = &self.value(x).data;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for ni in 0..n {
            for r in 0..oh {
                for col in 0..ow {
                    let obase = ((ni * oh + r) * ow + col) * c;
                    for ci in 0..c {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let idx = ((ni * h + 2 * r + dr) * w + 2 * col + dc) * c + ci;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[obase + ci] = best;
                        argmax[obase + ci] = best_idx;
                    }
                }
            }
        }
        Ok(self.push(
            Op::MaxPool2 { argmax },
            vec![x],
            Tensor::new(vec![n, oh, ow, c], out),
        ))
    }

    /// Inverted dropout: kept elements are scaled by 1/(1-rate). In inference
    /// mode (or rate 0) this is the identity and the input id is returned.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        seed: u64,
    ) -> Result<TensorId, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::BadDropoutRate(rate));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = self
            .value(x)
            .data
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let out: Vec<T> = self
            .value(x)
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.value(x).shape.clone();
        Ok(self.push(Op::Dropout { mask }, vec![x], Tensor::new(shape, out)))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (na, ha, wa, ca) = nhwc(&self.value(a).shape);
        let (nb, hb, wb, cb) = nhwc(&self.value(b).shape);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        let ad = &self.value(a).data;
        let bd = &self.value(b).data;
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for (pa, pb) in ad.chunks_exact(ca).zip(bd.chunks_exact(cb)) {
            out.extend_from_slice(pa);
            out.extend_from_slice(pb);
        }
        Ok(self.push(
            Op::ConcatChannels,
            vec![a, b],
            Tensor::new(vec![na, ha, wa, ca + cb], out),
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape, self.value(b).shape),
            });
        }
        let out: Vec<T> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Op::Add, vec![a, b], Tensor::new(shape, out)))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: T = self.value(x).data.iter().copied().sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// Masked mean binary cross-entropy over pixels with mask = 1:
    /// -(1/M) sum [y ln(p+e) + (1-y) ln(1-p+e)] with e = 1e-7. The gradient
    /// with respect to `probs` is exactly zero at every mask = 0 pixel.
    pub fn masked_bce(
        &mut self,
        probs: TensorId,
        labels: &[T],
        mask: &[T],
    ) -> Result<TensorId, AutodiffError> {
        let pd = &self.value(probs).data;
        if labels.len() != pd.len() || mask.len() != pd.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_bce",
                detail: format!(
                    "probs {}, labels {}, mask {}",
                    pd.len(),
                    labels.len(),
                    mask.len()
                ),
            });
        }
        let count = mask.iter().filter(|&&m| m > T::from_f64(0.5)).count();
        if count == 0 {
            return Err(AutodiffError::EmptyMask);
        }
        // Clamp rather than shift: probabilities already inside (eps, 1-eps)
        // pass through untouched, so well-conditioned losses are exact to
        // rounding (e.g. p = 0.5 yields ln 2 to the last ulp).
        let eps = T::from_f64(1e-7);
        let mut acc = T::zero();
        for ((&p, &y), &m) in pd.iter().zip(labels).zip(mask) {
            if m > T::from_f64(0.5) {
                let pc = p.max(eps).min(T::one() - eps);
                acc = acc + y * pc.ln() + (T::one() - y) * (T::one() - pc).ln();
            }
        }
        let loss = -acc / T::from_f64(count as f64);
        Ok(self.push(
            Op::MaskedBce {
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
                eps,
            },
            vec![probs],
            Tensor::scalar(loss),
        ))
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>, AutodiffError> {
        if self.value(loss).shape != vec![1] {
            return Err(AutodiffError::NonScalarOutput(
                self.value(loss).shape.clone(),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else {
                continue;
            };
            self.backward_node(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], id: TensorId, contribution: Vec<T>) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, id: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d => {
                let x = node.inputs[0];
                let k = node.inputs[1];
                let b = node.inputs[2];
                let (n, h, w, cin) = nhwc(&self.value(x).shape);
                let (kh, kw, _, cout) = nhwc(&self.value(k).shape);
                let (dx, dk, db) = conv2d_backward(
                    &self.value(x).data,
                    &self.value(k).data,
                    gy,
                    n,
                    h,
                    w,
                    cin,
                    kh,
                    kw,
                    cout,
                );
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, k, dk);
                Self::accumulate(grads, b, db);
            }
            Op::ConvTranspose2d => {
                let x = node.inputs[0];
                let k = node.inputs[1];
                let (n, h, w, cin) = nhwc(&self.value(x).shape);
                let (_, _, _, cout) = nhwc(&self.value(k).shape);
                let kd = &self.value(k).data;
                let xd = &self.value(x).data;
                let ow = 2 * w;
                // dx
                let mut dx = vec![T::zero(); xd.len()];
                dx.par_chunks_mut(h * w * cin)
                    .enumerate()
                    .for_each(|(ni, dn)| {
                        for ih in 0..h {
                            for iw in 0..w {
                                let xbase = (ih * w + iw) * cin;
                                for dkh in 0..2 {
                                    for dkw in 0..2 {
                                        let obase = ((ni * 2 * h + 2 * ih + dkh) * ow
                                            + (2 * iw + dkw))
                                            * cout;
                                        let kbase = (dkh * 2 + dkw) * cin * cout;
                                        for ci in 0..cin {
                                            let mut acc = T::zero();
                                            let krow =
                                                &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                                            for (co, &kv) in krow.iter().enumerate() {
                                                acc = acc + gy[obase + co] * kv;
                                            }
                                            dn[xbase + ci] = dn[xbase + ci] + acc;
                                        }
                                    }
                                }
                            }
                        }
                    });
                // dk: per-sample partials summed in sample order
                let partials: Vec<Vec<T>> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let mut dk = vec![T::zero(); kd.len()];
                        for ih in 0..h {
                            for iw in 0..w {
                                let xbase = ((ni * h + ih) * w + iw) * cin;
                                for dkh in 0..2 {
                                    for dkw in 0..2 {
                                        let obase = ((ni * 2 * h + 2 * ih + dkh) * ow
                                            + (2 * iw + dkw))
                                            * cout;
                                        let kbase = (dkh * 2 + dkw) * cin * cout;
                                        for ci in 0..cin {
                                            let xv = xd[xbase + ci];
                                            let krow = &mut dk
                                                [kbase + ci * cout..kbase + (ci + 1) * cout];
                                            for (co, slot) in krow.iter_mut().enumerate() {
                                                *slot = *slot + xv * gy[obase + co];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        dk
                    })
                    .collect();
                let mut dk = vec![T::zero(); kd.len()];
                for p in partials {
                    for (a, b) in dk.iter_mut().zip(p) {
                        *a = *a + b;
                    }
                }
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, k, dk);
            }
            Op::BatchNorm {
                mean,
                var,
                eps,
                training,
            } => {
                let x = node.inputs[0];
                let gamma = node.inputs[1];
                let beta = node.inputs[2];
                let (n, h, w, c) = nhwc(&self.value(x).shape);
                let xd = &self.value(x).data;
                let gd = &self.value(gamma).data;
                let inv_std: Vec<T> =
                    var.iter().map(|&v| T::one() / (v + *eps).sqrt()).collect();
                let m = T::from_f64((n * h * w) as f64);

                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (gpx, px) in gy.chunks_exact(c).zip(xd.chunks_exact(c)) {
                    for ci in 0..c {
                        let xhat = (px[ci] - mean[ci]) * inv_std[ci];
                        dgamma[ci] = dgamma[ci] + gpx[ci] * xhat;
                        dbeta[ci] = dbeta[ci] + gpx[ci];
                    }
                }
                let mut dx = vec![T::zero(); xd.len()];
                if *training {
                    // full batch-statistics gradient
                    for ((dpx, gpx), px) in dx
                        .chunks_exact_mut(c)
                        .zip(gy.chunks_exact(c))
                        .zip(xd.chunks_exact(c))
                    {
                        for ci in 0..c {
                            let xhat = (px[ci] - mean[ci]) * inv_std[ci];
                            dpx[ci] = gd[ci]
                                * inv_std[ci]
                                * (gpx[ci] - dbeta[ci] / m - xhat * dgamma[ci] / m);
                        }
                    }
                } else {
                    for (dpx, gpx) in dx.chunks_exact_mut(c).zip(gy.chunks_exact(c)) {
                        for ci in 0..c {
                            dpx[ci] = gpx[ci] * gd[ci] * inv_std[ci];
                        }
                    }
                }
                Self::accumulate(grads, x, dx);
                Self::accumulate(grads, gamma, dgamma);
                Self::accumulate(grads, beta, dbeta);
            }
            Op::Relu => {
                let x = node.inputs[0];
                let dx: Vec<T> = self
                    .value(x)
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::Sigmoid => {
                let x = node.inputs[0];
                let dx: Vec<T> = node
                    .value
                    .data
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                Self::accumulate(grads, x, dx);
            }
            Op::MaxPool2 { argmax } => {
                let x = node.inputs[0];
                let mut dx = vec![T::zero(); self.value(x).len()];
                for (i, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + gy[i];
                }
                Self::accumulate(grads, x, dx);
            }
            Op::Dropout { mask } => {
                let x = node.inputs[0];
                let dx: Vec<T> = mask.iter().zip(gy).map(|(&m, &g)| m * g).collect();
                Self::accumulate(grads, x, dx);
            }
            Op::ConcatChannels => {
                let a = node.inputs[0];
                let b = node.inputs[1];
                let ca = *self.value(a).shape.last().unwrap();
                let cb = *self.value(b).shape.last().unwrap();
                let mut da = Vec::with_capacity(self.value(a).len());
                let mut db = Vec::with_capacity(self.value(b).len());
                for px in gy.chunks_exact(ca + cb) {
                    da.extend_from_slice(&px[..ca]);
                    db.extend_from_slice(&px[ca..]);
                }
                Self::accumulate(grads, a, da);
                Self::accumulate(grads, b, db);
            }
            Op::Add => {
                Self::accumulate(grads, node.inputs[0], gy.to_vec());
                Self::accumulate(grads, node.inputs[1], gy.to_vec());
            }
            Op::Sum => {
                let x = node.inputs[0];
                let dx = vec![gy[0]; self.value(x).len()];
                Self::accumulate(grads, x, dx);
            }
            Op::MaskedBce {
                labels,
                mask,
                count,
                eps,
            } => {
                let p = node.inputs[0];
                let pd = &self.value(p).data;
                let scale = gy[0] / T::from_f64(*count as f64);
                let half = T::from_f64(0.5);
                let dx: Vec<T> = pd
                    .iter()
                    .zip(labels)
                    .zip(mask)
                    .map(|((&pv, &y), &m)| {
                        // the loss is constant in p outside the clamp range
                        if m > half && pv > *eps && pv < T::one() - *eps {
                            -scale * (y / pv - (T::one() - y) / (T::one() - pv))
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                Self::accumulate(grads, p, dx);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    xd: &[T],
    kd: &[T],
    bd: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::zero(); n * h * w * cout];
    out.par_chunks_mut(w * cout).enumerate().for_each(|(row_idx, orow)| {
        let ni = row_idx / h;
        let oh = row_idx % h;
        for ow_ in 0..w {
            let opix = &mut orow[ow_ * cout..(ow_ + 1) * cout];
            opix.copy_from_slice(bd);
            for dkh in 0..kh {
                let ih = oh as i64 + dkh as i64 - ph as i64;
                if ih < 0 || ih >= h as i64 {
                    continue;
                }
                for dkw in 0..kw {
                    let iw = ow_ as i64 + dkw as i64 - pw as i64;
                    if iw < 0 || iw >= w as i64 {
                        continue;
                    }
                    let xbase = ((ni * h + ih as usize) * w + iw as usize) * cin;
                    let kbase = (dkh * kw + dkw) * cin * cout;
                    for ci in 0..cin {
                        let xv = xd[xbase + ci];
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (co, &kv) in krow.iter().enumerate() {
                            opix[co] = opix[co] + xv * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    xd: &[T],
    kd: &[T],
    gy: &[T],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ph, pw) = (kh / 2, kw / 2);

    // dbias
    let mut db = vec![T::zero(); cout];
    for px in gy.chunks_exact(cout) {
        for (ci, &g) in px.iter().enumerate() {
            db[ci] = db[ci] + g;
        }
    }

    // dx: each input pixel gathers from the output positions whose window
    // covered it
    let mut dx = vec![T::zero(); xd.len()];
    dx.par_chunks_mut(w * cin).enumerate().for_each(|(row_idx, drow)| {
        let ni = row_idx / h;
        let ih = row_idx % h;
        for iw in 0..w {
            let dpix = &mut drow[iw * cin..(iw + 1) * cin];
            for dkh in 0..kh {
                let oh = ih as i64 - dkh as i64 + ph as i64;
                if oh < 0 || oh >= h as i64 {
                    continue;
                }
                for dkw in 0..kw {
                    let ow_ = iw as i64 - dkw as i64 + pw as i64;
                    if ow_ < 0 || ow_ >= w as i64 {
                        continue;
                    }
                    let gbase = ((ni * h + oh as usize) * w + ow_ as usize) * cout;
                    let kbase = (dkh * kw + dkw) * cin * cout;
                    for ci in 0..cin {
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let mut acc = T::zero();
                        for (co, &kv) in krow.iter().enumerate() {
                            acc = acc + gy[gbase + co] * kv;
                        }
                        dpix[ci] = dpix[ci] + acc;
                    }
                }
            }
        }
    });

    // dk: per-sample partials, summed in sample order for reproducibility
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let mut dk = vec![T::zero(); kd.len()];
            for oh in 0..h {
                for ow_ in 0..w {
                    let gbase = ((ni * h + oh) * w + ow_) * cout;
                    for dkh in 0..kh {
                        let ih = oh as i64 + dkh as i64 - ph as i64;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        for dkw in 0..kw {
                            let iw = ow_ as i64 + dkw as i64 - pw as i64;
                            if iw < 0 || iw >= w as i64 {
                                continue;
                            }
                            let xbase = ((ni * h + ih as usize) * w + iw as usize) * cin;
                            let kbase = (dkh * kw + dkw) * cin * cout;
                            for ci in 0..cin {
                                let xv = xd[xbase + ci];
                                let krow = &mut dk[kbase + ci * cout..kbase + (ci + 1) * cout];
                                for (co, slot) in krow.iter_mut().enumerate() {
                                    *slot = *slot + xv * gy[gbase + co];
                                }
                            }
                        }
                    }
                }
            }
            dk
        })
        .collect();
    let mut dk = vec![T::zero(); kd.len()];
    for p in partials {
        for (a, b) in dk.iter_mut().zip(p) {
            *a = *a + b;
        }
    }

    (dx, dk, db)
}
