//! Minimal reverse-mode differentiation over a recorded tape.
//!
//! Each op validates its inputs, computes the forward value eagerly and
//! records a closure that scatters the upstream gradient to its inputs.
//! The tape holds exactly the layer set the networks need: linear,
//! conv1d, batchnorm1d, relu, maxpool1d, softmax cross-entropy, the
//! gradient-reversal layer, plus add/sum/reshape glue.

use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batchnorm layer, owned by the model and
/// updated in place during train-mode forward passes.
#[derive(Clone, Debug)]
pub struct BnState<S> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Real> BnState<S> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: S::from_f64_c(0.1),
            eps: S::from_f64_c(1e-5),
        }
    }
}

type Grads<S> = Vec<Option<Tensor<S>>>;
type BackwardFn<S> = Box<dyn Fn(&Tensor<S>, &mut Grads<S>)>;

struct Node<S> {
    value: Tensor<S>,
    backward: Option<BackwardFn<S>>,
    requires: bool,
}

/// Recorded computation tape. Nodes are appended in topological order;
/// `backward` walks them once in reverse and consumes the graph.
pub struct Graph<S: Real> {
    nodes: Vec<Node<S>>,
}

fn accumulate<S: Real>(grads: &mut Grads<S>, id: NodeId, g: Tensor<S>) {
    match &mut grads[id.0] {
        Some(acc) => {
            assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch");
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, requires: bool, backward: Option<BackwardFn<S>>) -> NodeId {
        self.nodes.push(Node { value, backward, requires });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        value.assert_finite("leaf");
        self.push(value, requires_grad, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires)
    }

    /// Reverse-mode pass from a scalar loss. Returns per-node gradients
    /// indexed by `NodeId`; the graph is consumed.
    pub fn backward(self, loss: NodeId) -> GradientMap<S> {
        assert!(self.nodes[loss.0].value.is_scalar(), "backward requires a scalar loss");
        let mut grads: Grads<S> = vec![None; self.nodes.len()];
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(seed_shape, S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires {
                continue;
            }
            if let (Some(f), Some(g)) = (&node.backward, grads[i].clone()) {
                f(&g, &mut grads);
            }
        }
        GradientMap { grads }
    }

    // ---- ops -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        va.assert_finite("add lhs");
        vb.assert_finite("add rhs");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let req = self.requires(&[a, b]);
        self.push(
            out,
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    accumulate(grads, a, g.clone());
                    accumulate(grads, b, g.clone());
                })
            }),
        )
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        vx.assert_finite("sum input");
        let total: S = vx.data().iter().copied().sum();
        let shape = vx.shape().to_vec();
        let req = self.requires(&[x]);
        self.push(
            Tensor::scalar(total),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let s = g.scalar_value();
                    accumulate(grads, x, Tensor::full(shape.clone(), s));
                })
            }),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.numel(), shape.iter().product::<usize>(), "reshape: size mismatch");
        let old_shape = vx.shape().to_vec();
        let out = vx.reshaped(shape);
        let req = self.requires(&[x]);
        self.push(
            out,
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    accumulate(grads, x, g.reshaped(old_shape.clone()));
                })
            }),
        )
    }

    /// y[b,o] = sum_i x[b,i] w[o,i] + bias[o]
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        let (vx, vw, vb) = (self.value(x), self.value(weight), self.value(bias));
        assert_eq!(vx.shape().len(), 2, "linear: x must be 2-D");
        assert_eq!(vw.shape().len(), 2, "linear: weight must be 2-D");
        let (batch, d_in) = (vx.shape()[0], vx.shape()[1]);
        let (d_out, wd_in) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(d_in, wd_in, "linear: inner dimensions {d_in} vs {wd_in}");
        assert_eq!(vb.shape(), &[d_out], "linear: bias shape");
        vx.assert_finite("linear x");
        vw.assert_finite("linear weight");
        vb.assert_finite("linear bias");

        let mut out = vec![S::zero(); batch * d_out];
        for b in 0..batch {
            for o in 0..d_out {
                let mut acc = vb.data()[o];
                for i in 0..d_in {
                    acc += vx.data()[b * d_in + i] * vw.data()[o * d_in + i];
                }
                out[b * d_out + o] = acc;
            }
        }
        let xv = vx.clone();
        let wv = vw.clone();
        let req = self.requires(&[x, weight, bias]);
        self.push(
            Tensor::new(vec![batch, d_out], out),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let mut dx = vec![S::zero(); batch * d_in];
                    let mut dw = vec![S::zero(); d_out * d_in];
                    let mut db = vec![S::zero(); d_out];
                    for b in 0..batch {
                        for o in 0..d_out {
                            let go = g.data()[b * d_out + o];
                            db[o] += go;
                            for i in 0..d_in {
                                dx[b * d_in + i] += go * wv.data()[o * d_in + i];
                                dw[o * d_in + i] += go * xv.data()[b * d_in + i];
                            }
                        }
                    }
                    accumulate(grads, x, Tensor::new(vec![batch, d_in], dx));
                    accumulate(grads, weight, Tensor::new(vec![d_out, d_in], dw));
                    accumulate(grads, bias, Tensor::new(vec![d_out], db));
                })
            }),
        )
    }

    /// Cross-correlation over the time axis with zero padding.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> NodeId {
        assert!(stride >= 1, "conv1d: stride must be >= 1");
        let (vx, vk, vb) = (self.value(x), self.value(kernels), self.value(bias));
        assert_eq!(vx.shape().len(), 3, "conv1d: x must be [batch, c_in, len]");
        assert_eq!(vk.shape().len(), 3, "conv1d: kernels must be [c_out, c_in, k]");
        let (batch, c_in, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (c_out, kc_in, k) = (vk.shape()[0], vk.shape()[1], vk.shape()[2]);
        assert_eq!(c_in, kc_in, "conv1d: channel mismatch");
        assert_eq!(vb.shape(), &[c_out], "conv1d: bias shape");
        assert!(len + 2 * padding >= k, "conv1d: kernel longer than padded input");
        vx.assert_finite("conv1d x");
        vk.assert_finite("conv1d kernels");
        vb.assert_finite("conv1d bias");
        let out_len = (len + 2 * padding - k) / stride + 1;

        let mut out = vec![S::zero(); batch * c_out * out_len];
        for b in 0..batch {
            for co in 0..c_out {
                for ol in 0..out_len {
                    let mut acc = vb.data()[co];
                    let start = (ol * stride) as isize - padding as isize;
                    for ci in 0..c_in {
                        for kk in 0..k {
                            let pos = start + kk as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += vx.at3(b, ci, pos as usize) * vk.at3(co, ci, kk);
                            }
                        }
                    }
                    out[(b * c_out + co) * out_len + ol] = acc;
                }
            }
        }
        let xv = vx.clone();
        let kv = vk.clone();
        let req = self.requires(&[x, kernels, bias]);
        self.push(
            Tensor::new(vec![batch, c_out, out_len], out),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let mut dx = vec![S::zero(); batch * c_in * len];
                    let mut dk = vec![S::zero(); c_out * c_in * k];
                    let mut db = vec![S::zero(); c_out];
                    for b in 0..batch {
                        for co in 0..c_out {
                            for ol in 0..out_len {
                                let go = g.data()[(b * c_out + co) * out_len + ol];
                                db[co] += go;
                                let start = (ol * stride) as isize - padding as isize;
                                for ci in 0..c_in {
                                    for kk in 0..k {
                                        let pos = start + kk as isize;
                                        if pos >= 0 && (pos as usize) < len {
                                            let p = pos as usize;
                                            dx[(b * c_in + ci) * len + p] += go * kv.at3(co, ci, kk);
                                            dk[(co * c_in + ci) * k + kk] += go * xv.at3(b, ci, p);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(grads, x, Tensor::new(vec![batch, c_in, len], dx));
                    accumulate(grads, kernels, Tensor::new(vec![c_out, c_in, k], dk));
                    accumulate(grads, bias, Tensor::new(vec![c_out], db));
                })
            }),
        )
    }

    /// Per-channel batch normalization for `[batch, features]` or
    /// `[batch, channels, len]` inputs. Train mode uses batch statistics
    /// and updates the running stats; eval mode uses the running stats.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState<S>,
        mode: BnMode,
    ) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (channels, per_channel, layout3d) = match vx.shape() {
            [b, c] => (*c, *b, false),
            [b, c, l] => (*c, *b * *l, true),
            other => panic!("batchnorm1d: unsupported shape {other:?}"),
        };
        assert_eq!(vg.shape(), &[channels], "batchnorm1d: gamma shape");
        assert_eq!(vb.shape(), &[channels], "batchnorm1d: beta shape");
        assert_eq!(state.running_mean.len(), channels, "batchnorm1d: state shape");
        if mode == BnMode::Train {
            assert!(per_channel >= 2, "batchnorm1d: need >= 2 elements per channel in train mode");
        }
        vx.assert_finite("batchnorm1d x");

        let shape = vx.shape().to_vec();
        let n = vx.numel();
        // flat index -> channel
        let chan_of = move |idx: usize, shape: &[usize]| -> usize {
            if layout3d {
                (idx / shape[2]) % shape[1]
            } else {
                idx % shape[1]
            }
        };

        let (mean, var) = match mode {
            BnMode::Train => {
                let m = S::from_f64_c(per_channel as f64);
                let mut mean = vec![S::zero(); channels];
                for (i, &v) in vx.data().iter().enumerate() {
                    mean[chan_of(i, &shape)] += v;
                }
                for v in mean.iter_mut() {
                    *v /= m;
                }
                let mut var = vec![S::zero(); channels];
                for (i, &v) in vx.data().iter().enumerate() {
                    let d = v - mean[chan_of(i, &shape)];
                    var[chan_of(i, &shape)] += d * d;
                }
                for v in var.iter_mut() {
                    *v /= m;
                }
                let mom = state.momentum;
                for c in 0..channels {
                    state.running_mean[c] = (S::one() - mom) * state.running_mean[c] + mom * mean[c];
                    state.running_var[c] = (S::one() - mom) * state.running_var[c] + mom * var[c];
                }
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        assert!(mean.iter().chain(var.iter()).all(|v| v.is_finite()), "non-finite batchnorm stats");

        let eps = state.eps;
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); n];
        let mut out = vec![S::zero(); n];
        for (i, &v) in vx.data().iter().enumerate() {
            let c = chan_of(i, &shape);
            xhat[i] = (v - mean[c]) * inv_std[c];
            out[i] = vg.data()[c] * xhat[i] + vb.data()[c];
        }
        let gv = vg.clone();
        let xhat_t = xhat;
        let shape_b = shape.clone();
        let req = self.requires(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let m = S::from_f64_c(per_channel as f64);
                    let mut dgamma = vec![S::zero(); channels];
                    let mut dbeta = vec![S::zero(); channels];
                    let mut sum_dy = vec![S::zero(); channels];
                    let mut sum_dy_xhat = vec![S::zero(); channels];
                    for (i, &gy) in g.data().iter().enumerate() {
                        let c = chan_of(i, &shape_b);
                        dbeta[c] += gy;
                        dgamma[c] += gy * xhat_t[i];
                        sum_dy[c] += gy;
                        sum_dy_xhat[c] += gy * xhat_t[i];
                    }
                    let mut dx = vec![S::zero(); n];
                    for (i, &gy) in g.data().iter().enumerate() {
                        let c = chan_of(i, &shape_b);
                        dx[i] = match mode {
                            BnMode::Train => {
                                gv.data()[c] * inv_std[c]
                                    * (gy - sum_dy[c] / m - xhat_t[i] * sum_dy_xhat[c] / m)
                            }
                            BnMode::Eval => gv.data()[c] * inv_std[c] * gy,
                        };
                    }
                    accumulate(grads, x, Tensor::new(shape_b.clone(), dx));
                    accumulate(grads, gamma, Tensor::new(vec![channels], dgamma));
                    accumulate(grads, beta, Tensor::new(vec![channels], dbeta));
                })
            }),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        vx.assert_finite("relu input");
        let out = vx.map(|v| if v > S::zero() { v } else { S::zero() });
        let mask: Vec<bool> = vx.data().iter().map(|&v| v > S::zero()).collect();
        let shape = vx.shape().to_vec();
        let req = self.requires(&[x]);
        self.push(
            out,
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let data = g
                        .data()
                        .iter()
                        .zip(&mask)
                        .map(|(&gy, &m)| if m { gy } else { S::zero() })
                        .collect();
                    accumulate(grads, x, Tensor::new(shape.clone(), data));
                })
            }),
        )
    }

    /// Windowed maximum along the time axis; gradient goes to the first
    /// (earliest) argmax of each window.
    pub fn maxpool1d(&mut self, x: NodeId, k: usize, stride: usize) -> NodeId {
        assert!(stride >= 1, "maxpool1d: stride must be >= 1");
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 3, "maxpool1d: x must be [batch, c, len]");
        let (batch, channels, len) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert!(k <= len, "maxpool1d: window {k} exceeds length {len}");
        vx.assert_finite("maxpool1d x");
        let out_len = (len - k) / stride + 1;

        let mut out = vec![S::zero(); batch * channels * out_len];
        let mut argmax = vec![0usize; batch * channels * out_len];
        for b in 0..batch {
            for c in 0..channels {
                for ol in 0..out_len {
                    let start = ol * stride;
                    let mut best = vx.at3(b, c, start);
                    let mut best_i = start;
                    for p in start + 1..start + k {
                        let v = vx.at3(b, c, p);
                        if v > best {
                            best = v;
                            best_i = p;
                        }
                    }
                    let o = (b * channels + c) * out_len + ol;
                    out[o] = best;
                    argmax[o] = (b * channels + c) * len + best_i;
                }
            }
        }
        let req = self.requires(&[x]);
        let in_shape = vec![batch, channels, len];
        self.push(
            Tensor::new(vec![batch, channels, out_len], out),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let mut dx = vec![S::zero(); batch * channels * len];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g.data()[o];
                    }
                    accumulate(grads, x, Tensor::new(in_shape.clone(), dx));
                })
            }),
        )
    }

    /// Mean over the batch of -log softmax(logits)[target], computed
    /// with max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let vz = self.value(logits);
        assert_eq!(vz.shape().len(), 2, "cross_entropy: logits must be 2-D");
        let (batch, classes) = (vz.shape()[0], vz.shape()[1]);
        assert!(batch > 0, "cross_entropy: empty batch");
        assert_eq!(targets.len(), batch, "cross_entropy: target count mismatch");
        for &t in targets {
            assert!(t < classes, "cross_entropy: target {t} out of range 0..{classes}");
        }
        vz.assert_finite("cross_entropy logits");

        let probs = softmax_rows(vz);
        let mut loss = S::zero();
        for (b, &t) in targets.iter().enumerate() {
            let row = &vz.data()[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse: S = row.iter().map(|&z| (z - m).exp()).sum::<S>().ln() + m;
            loss += lse - row[t];
        }
        let bs = S::from_f64_c(batch as f64);
        loss /= bs;
        let targets_v = targets.to_vec();
        let req = self.requires(&[logits]);
        self.push(
            Tensor::scalar(loss),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let up = g.scalar_value() / bs;
                    let mut dz = probs.data().to_vec();
                    for (b, &t) in targets_v.iter().enumerate() {
                        dz[b * classes + t] -= S::one();
                    }
                    for v in dz.iter_mut() {
                        *v *= up;
                    }
                    accumulate(grads, logits, Tensor::new(vec![batch, classes], dz));
                })
            }),
        )
    }

    /// Select rows of a 2-D tensor; backward scatters gradients back to
    /// the selected rows.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let vx = self.value(x);
        assert_eq!(vx.shape().len(), 2, "gather_rows: x must be 2-D");
        let (n, cols) = (vx.shape()[0], vx.shape()[1]);
        assert!(!rows.is_empty(), "gather_rows: empty selection");
        for &r in rows {
            assert!(r < n, "gather_rows: row {r} out of range 0..{n}");
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&vx.data()[r * cols..(r + 1) * cols]);
        }
        let rows_v = rows.to_vec();
        let req = self.requires(&[x]);
        self.push(
            Tensor::new(vec![rows.len(), cols], data),
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    let mut dx = vec![S::zero(); n * cols];
                    for (i, &r) in rows_v.iter().enumerate() {
                        for c in 0..cols {
                            dx[r * cols + c] += g.data()[i * cols + c];
                        }
                    }
                    accumulate(grads, x, Tensor::new(vec![n, cols], dx));
                })
            }),
        )
    }

    /// Identity forward; backward multiplies the upstream gradient by
    /// `-lambda`.
    pub fn gradient_reversal(&mut self, x: NodeId, lambda: S) -> NodeId {
        assert!(lambda >= S::zero(), "gradient_reversal: lambda must be non-negative");
        let out = self.value(x).clone();
        let req = self.requires(&[x]);
        self.push(
            out,
            req,
            req.then(|| -> BackwardFn<S> {
                Box::new(move |g, grads| {
                    accumulate(grads, x, g.map(|v| -lambda * v));
                })
            }),
        )
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct GradientMap<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> GradientMap<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape when the loss does
    /// not depend on it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

/// Row-wise softmax of a 2-D tensor (forward-only utility).
pub fn softmax_rows<S: Real>(logits: &Tensor<S>) -> Tensor<S> {
    assert_eq!(logits.shape().len(), 2);
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for (j, &z) in row.iter().enumerate() {
            let e = (z - m).exp();
            out[r * cols + j] = e;
            denom += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= denom;
        }
    }
    Tensor::new(vec![rows, cols], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    fn t2(rows: &[Vec<f64>]) -> Tensor64 {
        Tensor64::from_rows(rows)
    }

    #[test]
    fn linear_identity_weights() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[vec![1.0, 2.0]]), false);
        let w = g.leaf(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]), false);
        let b = g.leaf(Tensor64::new(vec![2], vec![0.0, 0.0]), false);
        let y = g.linear(x, w, b);
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_forced_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[vec![1.0, 1.0]]), false);
        let w = g.leaf(t2(&[vec![2.0, 3.0]]), false);
        let b = g.leaf(Tensor64::new(vec![1], vec![1.0]), false);
        let y = g.linear(x, w, b);
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv1d_forced_arithmetic() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]), false);
        let k = g.leaf(Tensor64::new(vec![1, 1, 2], vec![1.0, 1.0]), false);
        let b = g.leaf(Tensor64::new(vec![1], vec![0.0]), false);
        let y = g.conv1d(x, k, b, 1, 0);
        assert_eq!(g.value(y).data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![1, 1, 4], vec![0.5, -1.0, 2.0, 0.0]), false);
        let k = g.leaf(Tensor64::new(vec![1, 1, 1], vec![1.0]), false);
        let b = g.leaf(Tensor64::new(vec![1], vec![0.0]), false);
        let y = g.conv1d(x, k, b, 1, 0);
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "kernel longer than padded input")]
    fn conv1d_kernel_too_long() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor64::new(vec![1, 1, 2], vec![1.0, 2.0]), false);
        let k = g.leaf(Tensor64::new(vec![1, 1, 5], vec![1.0; 5]), false);
        let b = g.leaf(Tensor64::new(vec![1], vec![0.0]), false);
        g.conv1d(x, k, b, 1, 0);
    }

    #[test]
    fn batchnorm_constant_input_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[vec![5.0, 5.0], vec![5.0, 5.0]]), false);
        let gamma = g.leaf(Tensor64::new(vec![2], vec![1.0, 1.0]), false);
        let beta = g.leaf(Tensor64::new(vec![2], vec![0.0, 0.0]), false);
        let mut st = BnState::new(2);
        let y = g.batchnorm1d(x, gamma, beta, &mut st, BnMode::Train);
        for &v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_symmetric_pair() {
        let mut g = Graph::new();
        let x = g.leaf(t2(&[vec![1.0], vec![3.0]]), false);
        let gamma = g.leaf(Tensor64::new(vec![1], vec![1.0]), false);
        let beta = g.leaf(Tensor64::new(vec![1], vec![0.0]), false);
        let mut st = BnState::new(1);
        st.eps = 1e-14;
        let y = g.batchnorm1d(x, gamma, beta, &mut st, BnMode::Train);
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-6);
        assert!((out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    #[should_panic(expected = "2 elements per channel")]
    fn batchnorm_single_element_train() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(t2(&[vec![1.0]]), false);
        let gamma = g.leaf(Tensor64::new(vec![1], vec![1.0]), false);
        let beta = g.leaf(Tensor64::new(vec![1], vec![0.0]), false);
        let mut st = BnState::new(1);
        g.batchnorm1d(x, gamma, beta, &mut st, BnMode::Train);
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![3], vec![-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_sign_mask() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![2], vec![-1.0, 2.0]), true);
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_example() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![1, 1, 4], vec![1.0, 3.0, 2.0, 5.0]), false);
        let y = g.maxpool1d(x, 2, 2);
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn maxpool_tie_gradient_goes_first() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![1, 1, 4], vec![7.0; 4]), true);
        let y = g.maxpool1d(x, 2, 2);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut g = Graph::new();
        let z = g.leaf(t2(&[vec![0.0, 0.0]]), false);
        let l = g.softmax_cross_entropy(z, &[0]);
        assert!((g.value(l).scalar_value() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_logit_stable() {
        let mut g = Graph::new();
        let z = g.leaf(t2(&[vec![1000.0, 0.0]]), false);
        let l = g.softmax_cross_entropy(z, &[0]);
        let v = g.value(l).scalar_value();
        assert!(v.is_finite() && v < 1e-9);
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn cross_entropy_target_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(t2(&[vec![0.0, 0.0]]), false);
        g.softmax_cross_entropy(z, &[2]);
    }

    #[test]
    fn grl_forward_is_bitwise_identity() {
        let mut g = Graph::new();
        let input = Tensor64::new(vec![2], vec![0.3, -2.0]);
        let x = g.leaf(input.clone(), true);
        let y = g.gradient_reversal(x, 1.0);
        assert_eq!(
            g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            input.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn grl_backward_flips_sign() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![2], vec![0.5, -0.2]), true);
        let y = g.gradient_reversal(x, 1.0);
        // loss = sum(y) so upstream grad on y is [1, 1]; check through a
        // hand-seeded upstream by scaling: use sum directly.
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn grl_lambda_zero_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![2], vec![0.5, -0.2]), true);
        let y = g.gradient_reversal(x, 0.0);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::new(vec![3], vec![1.0, 2.0, 3.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::scalar(2.0), true);
        let y = g.add(x, x);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().scalar_value(), 2.0);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor64::scalar(1.0), true);
        let unused = g.leaf(Tensor64::new(vec![2], vec![1.0, 1.0]), true);
        let s = g.sum(x);
        let grads = g.backward(s);
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = t2(&[vec![0.3, -1.0, 2.5], vec![10.0, 10.0, 10.0]]);
        let p = softmax_rows(&t);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| p.at2(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!((0..3).all(|c| p.at2(r, c) >= 0.0));
        }
    }
}
