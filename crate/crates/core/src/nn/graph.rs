//! Reverse-mode automatic differentiation on an arena tape scoped to one
//! training step. Nodes are appended in execution order, so ids double as a
//! topological order and backward is a single reverse sweep. Gradient
//! buffers are only allocated along paths that reach a trainable leaf.
//!
//! Every forward op ends with a finiteness scan; a NaN or Inf anywhere fails
//! fast with a diagnostic naming the op, which is far cheaper to act on than
//! a diverged training run.

use super::conv::{self, ConvDims};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const VBN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

struct VbnOp<S> {
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    /// Weight of the current example's own statistics in the convex
    /// combination with the frozen reference statistics.
    w_cur: f64,
    // Saved forward state, one entry per (channel, example).
    mu_cur: Vec<S>,
    mu_comb: Vec<S>,
    inv_std: Vec<S>,
}

enum Op<S> {
    Leaf,
    Conv1d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        dims: ConvDims,
    },
    /// `dims` describes the underlying convolution this op is the adjoint of.
    TConv1d {
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        dims: ConvDims,
    },
    LeakyRelu {
        x: NodeId,
        alpha: f64,
    },
    PRelu {
        x: NodeId,
        slopes: NodeId,
    },
    Vbn(Box<VbnOp<S>>),
    Dense {
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    ConcatCh {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    MseConst {
        x: NodeId,
        target: f64,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::TConv1d { .. } => "tconv1d",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::PRelu { .. } => "prelu",
            Op::Vbn(_) => "virtual_batch_norm",
            Op::Dense { .. } => "dense",
            Op::ConcatCh { .. } => "concat_ch",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::MseConst { .. } => "mse_const",
            Op::L1Mean { .. } => "l1_mean",
        }
    }
}

pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    grads: Vec<Option<Vec<S>>>,
    needs: Vec<bool>,
    ops: Vec<Op<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// `[channels, batch, length]` split of an activation shape.
fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, b, l] => Ok((*c, *b, *l)),
        other => Err(Error::data(format!(
            "expected a [channels, batch, length] activation, got shape {other:?}"
        ))),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    /// Gradient of the last `backward` target with respect to leaf `id`.
    /// Present only on leaves created with `needs_grad` that the loss
    /// actually reaches.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    pub fn leaf(&mut self, t: Tensor<S>, needs_grad: bool) -> NodeId {
        self.values.push(t);
        self.grads.push(None);
        self.needs.push(needs_grad);
        self.ops.push(Op::Leaf);
        NodeId(self.values.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, needs: bool, op: Op<S>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite values produced by {}",
                op.name()
            )));
        }
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        Ok(NodeId(self.values.len() - 1))
    }

    /// Strided cross-correlation: x `[ci, b, li]`, kernel `[w, ci, co]`,
    /// optional bias `[co]` → `[co, b, (li + 2·pad − w)/stride + 1]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (ci, batch, li) = dims3(&self.values[x.0].shape)?;
        let ks = &self.values[k.0].shape;
        let [w, kci, co] = ks[..] else {
            return Err(Error::data(format!(
                "conv kernel must be [width, ch_in, ch_out], got {ks:?}"
            )));
        };
        if kci != ci {
            return Err(Error::data(format!(
                "conv kernel expects {kci} input channels, input has {ci}"
            )));
        }
        if let Some(b) = bias {
            if self.values[b.0].shape != [co] {
                return Err(Error::data("conv bias shape must be [ch_out]"));
            }
        }
        let dims = ConvDims::new(batch, ci, co, li, w, stride, pad)?;
        let mut out = Tensor::zeros(vec![co, batch, dims.lo()]);
        conv::conv1d_fwd(
            &self.values[x.0].data,
            &self.values[k.0].data,
            bias.map(|b| self.values[b.0].data.as_slice()),
            &dims,
            &mut out.data,
            false,
        );
        let needs =
            self.needs[x.0] || self.needs[k.0] || bias.map(|b| self.needs[b.0]).unwrap_or(false);
        self.push(out, needs, Op::Conv1d { x, k, bias, dims })
    }

    /// Fractional-stride (transposed) convolution: x `[ci, b, l]`, kernel in
    /// the adjoint convolution's layout `[w, co, ci]`, optional bias `[co]`
    /// → `[co, b, l·stride]`.
    pub fn tconv1d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (ci_t, batch, lt) = dims3(&self.values[x.0].shape)?;
        let ks = &self.values[k.0].shape;
        let [w, co_t, kci] = ks[..] else {
            return Err(Error::data(format!(
                "tconv kernel must be [width, ch_out, ch_in], got {ks:?}"
            )));
        };
        if kci != ci_t {
            return Err(Error::data(format!(
                "tconv kernel expects {kci} input channels, input has {ci_t}"
            )));
        }
        if let Some(b) = bias {
            if self.values[b.0].shape != [co_t] {
                return Err(Error::data("tconv bias shape must be [ch_out]"));
            }
        }
        // The underlying convolution maps our output back to our input; its
        // geometry must reproduce the input length exactly.
        let dims = ConvDims::new(batch, co_t, ci_t, lt * stride, w, stride, pad)?;
        if dims.lo() != lt {
            return Err(Error::data(format!(
                "tconv geometry (width {w}, stride {stride}, pad {pad}) cannot invert length {}: \
                 adjoint convolution yields {}",
                lt,
                dims.lo()
            )));
        }
        let mut out = Tensor::zeros(vec![co_t, batch, lt * stride]);
        conv::tconv1d_fwd(
            &self.values[x.0].data,
            &self.values[k.0].data,
            bias.map(|b| self.values[b.0].data.as_slice()),
            &dims,
            &mut out.data,
        );
        let needs =
            self.needs[x.0] || self.needs[k.0] || bias.map(|b| self.needs[b.0]).unwrap_or(false);
        self.push(out, needs, Op::TConv1d { x, k, bias, dims })
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        let a = S::from_f64(alpha);
        let xv = &self.values[x.0];
        let data = xv
            .data
            .iter()
            .map(|&v| if v >= S::ZERO { v } else { a * v })
            .collect();
        let out = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let needs = self.needs[x.0];
        self.push(out, needs, Op::LeakyRelu { x, alpha })
    }

    /// Parametric ReLU with one learnable slope per channel.
    pub fn prelu(&mut self, x: NodeId, slopes: NodeId) -> Result<NodeId> {
        let (c, b, l) = dims3(&self.values[x.0].shape)?;
        if self.values[slopes.0].shape != [c] {
            return Err(Error::data(format!(
                "prelu slopes must be [channels = {c}], got {:?}",
                self.values[slopes.0].shape
            )));
        }
        let xv = &self.values[x.0];
        let sv = &self.values[slopes.0];
        let mut data = Vec::with_capacity(xv.data.len());
        for ch in 0..c {
            let a = sv.data[ch];
            for &v in &xv.data[ch * b * l..(ch + 1) * b * l] {
                data.push(if v >= S::ZERO { v } else { a * v });
            }
        }
        let out = Tensor {
            shape: vec![c, b, l],
            data,
        };
        let needs = self.needs[x.0] || self.needs[slopes.0];
        self.push(out, needs, Op::PRelu { x, slopes })
    }

    /// Virtual batch normalization: each example is normalized per channel by
    /// a convex combination of frozen reference-batch statistics and its own
    /// statistics (weight `w_cur` on the latter), then scaled and shifted.
    pub fn vbn(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        ref_mean: &[S],
        ref_var: &[S],
        w_cur: f64,
    ) -> Result<NodeId> {
        let (c, b, l) = dims3(&self.values[x.0].shape)?;
        if ref_mean.len() != c || ref_var.len() != c {
            return Err(Error::data(format!(
                "reference statistics must have {c} channels, got {}/{}",
                ref_mean.len(),
                ref_var.len()
            )));
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            if self.values[id.0].shape != [c] {
                return Err(Error::data(format!(
                    "vbn {name} must be [channels = {c}], got {:?}",
                    self.values[id.0].shape
                )));
            }
        }
        let w = S::from_f64(w_cur);
        let w1 = S::from_f64(1.0 - w_cur);
        let eps = S::from_f64(VBN_EPS);
        let inv_l = S::from_f64(1.0 / l as f64);
        let xv = &self.values[x.0].data;
        let gv = &self.values[gain.0].data;
        let bv = &self.values[bias.0].data;
        let mut mu_cur = vec![S::ZERO; c * b];
        let mut mu_comb = vec![S::ZERO; c * b];
        let mut inv_std = vec![S::ZERO; c * b];
        let mut data = vec![S::ZERO; c * b * l];
        for ch in 0..c {
            for ex in 0..b {
                let off = ch * b * l + ex * l;
                let xs = &xv[off..off + l];
                let mut mu = S::ZERO;
                for &v in xs {
                    mu += v;
                }
                mu *= inv_l;
                let mut var = S::ZERO;
                for &v in xs {
                    let d = v - mu;
                    var += d * d;
                }
                var *= inv_l;
                let mc = w * mu + w1 * ref_mean[ch];
                let vc = w * var + w1 * ref_var[ch];
                let inv = S::ONE / (vc + eps).sqrt_s();
                mu_cur[ch * b + ex] = mu;
                mu_comb[ch * b + ex] = mc;
                inv_std[ch * b + ex] = inv;
                let (g, be) = (gv[ch], bv[ch]);
                for (o, &v) in data[off..off + l].iter_mut().zip(xs) {
                    *o = g * (v - mc) * inv + be;
                }
            }
        }
        let out = Tensor {
            shape: vec![c, b, l],
            data,
        };
        let needs = self.needs[x.0] || self.needs[gain.0] || self.needs[bias.0];
        self.push(
            out,
            needs,
            Op::Vbn(Box::new(VbnOp {
                x,
                gain,
                bias,
                w_cur,
                mu_cur,
                mu_comb,
                inv_std,
            })),
        )
    }

    /// Fully connected layer over each example's flattened features:
    /// x `[c, b, l]` with weight `[c·l, f_out]` and bias `[f_out]`
    /// → `[f_out, b, 1]`.
    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (c, batch, l) = dims3(&self.values[x.0].shape)?;
        let f_in = c * l;
        let ws = &self.values[weight.0].shape;
        let [wf_in, f_out] = ws[..] else {
            return Err(Error::data(format!(
                "dense weight must be [features_in, features_out], got {ws:?}"
            )));
        };
        if wf_in != f_in {
            return Err(Error::data(format!(
                "dense weight expects {wf_in} input features, input has {f_in}"
            )));
        }
        if let Some(bid) = bias {
            if self.values[bid.0].shape != [f_out] {
                return Err(Error::data("dense bias shape must be [features_out]"));
            }
        }
        let xm = gather_features(&self.values[x.0].data, c, batch, l);
        let wv = &self.values[weight.0].data;
        let mut out = Tensor::zeros(vec![f_out, batch, 1]);
        unsafe {
            // out[o, ex] = Σ_f w[f, o]·xm[f, ex]
            S::gemm(
                f_out,
                f_in,
                batch,
                S::ONE,
                wv.as_ptr(),
                1,
                f_out as isize,
                xm.as_ptr(),
                batch as isize,
                1,
                S::ZERO,
                out.data.as_mut_ptr(),
                batch as isize,
                1,
            );
        }
        if let Some(bid) = bias {
            let bv = &self.values[bid.0].data;
            for o in 0..f_out {
                for e in &mut out.data[o * batch..(o + 1) * batch] {
                    *e += bv[o];
                }
            }
        }
        let needs = self.needs[x.0]
            || self.needs[weight.0]
            || bias.map(|b| self.needs[b.0]).unwrap_or(false);
        self.push(out, needs, Op::Dense { x, weight, bias })
    }

    /// Stack `a` and `b` along the channel axis; lengths and batch must match.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ba, la) = dims3(&self.values[a.0].shape)?;
        let (cb, bb, lb) = dims3(&self.values[b.0].shape)?;
        if (ba, la) != (bb, lb) {
            return Err(Error::data(format!(
                "concat_ch needs matching batch/length, got [{ca},{ba},{la}] vs [{cb},{bb},{lb}]"
            )));
        }
        // Channels are the outermost axis, so this is buffer juxtaposition.
        let mut data = Vec::with_capacity((ca + cb) * ba * la);
        data.extend_from_slice(&self.values[a.0].data);
        data.extend_from_slice(&self.values[b.0].data);
        let out = Tensor {
            shape: vec![ca + cb, ba, la],
            data,
        };
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(out, needs, Op::ConcatCh { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::data(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.values[a.0].shape, self.values[b.0].shape
            )));
        }
        let data = self.values[a.0]
            .data
            .iter()
            .zip(&self.values[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor {
            shape: self.values[a.0].shape.clone(),
            data,
        };
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(out, needs, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let data = self.values[x.0].data.iter().map(|&v| cs * v).collect();
        let out = Tensor {
            shape: self.values[x.0].shape.clone(),
            data,
        };
        let needs = self.needs[x.0];
        self.push(out, needs, Op::Scale { x, c })
    }

    /// Scalar `mean((x − target)²)`: the least-squares GAN objective against a
    /// constant label.
    pub fn mse_const(&mut self, x: NodeId, target: f64) -> Result<NodeId> {
        let t = S::from_f64(target);
        let n = self.values[x.0].data.len();
        let mut acc = S::ZERO;
        for &v in &self.values[x.0].data {
            let d = v - t;
            acc += d * d;
        }
        let out = Tensor {
            shape: vec![1],
            data: vec![acc / S::from_f64(n as f64)],
        };
        let needs = self.needs[x.0];
        self.push(out, needs, Op::MseConst { x, target })
    }

    /// Scalar `mean(|a − b|)`.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape != self.values[b.0].shape {
            return Err(Error::data(format!(
                "l1_mean shape mismatch: {:?} vs {:?}",
                self.values[a.0].shape, self.values[b.0].shape
            )));
        }
        let n = self.values[a.0].data.len();
        let mut acc = S::ZERO;
        for (&x, &y) in self.values[a.0].data.iter().zip(&self.values[b.0].data) {
            acc += (x - y).abs_s();
        }
        let out = Tensor {
            shape: vec![1],
            data: vec![acc / S::from_f64(n as f64)],
        };
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push(out, needs, Op::L1Mean { a, b })
    }

    /// Reverse sweep from a scalar loss. Populates gradients on every
    /// reachable leaf created with `needs_grad`; intermediate buffers are
    /// dropped as soon as their node has been processed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::usage(format!(
                "backward target must be scalar, got shape {:?}",
                self.values[loss.0].shape
            )));
        }
        if !self.needs[loss.0] {
            return Err(Error::usage(
                "backward target does not depend on any trainable leaf",
            ));
        }
        self.grads[loss.0] = Some(vec![S::ONE]);
        for i in (0..=loss.0).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[S]) -> Result<()> {
        // Fields are borrowed separately: ops immutably, grads mutably.
        let values = &self.values;
        let needs = &self.needs;
        let grads = &mut self.grads;
        match &self.ops[i] {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Conv1d { x, k, bias, dims } => {
                if needs[x.0] {
                    let dx = ensure(grads, x.0, values[x.0].numel());
                    conv::conv1d_bwd_input(g, &values[k.0].data, dims, dx);
                }
                if needs[k.0] {
                    let dk = ensure(grads, k.0, values[k.0].numel());
                    conv::conv1d_bwd_kernel(&values[x.0].data, g, dims, dk, None);
                }
                if let Some(b) = bias {
                    if needs[b.0] {
                        let db = ensure(grads, b.0, values[b.0].numel());
                        let n = dims.batch * dims.lo();
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let mut s = S::ZERO;
                            for &v in &g[co * n..(co + 1) * n] {
                                s += v;
                            }
                            *dbv += s;
                        }
                    }
                }
            }
            Op::TConv1d { x, k, bias, dims } => {
                if needs[x.0] {
                    let dx = ensure(grads, x.0, values[x.0].numel());
                    conv::tconv1d_bwd_input(g, &values[k.0].data, dims, dx);
                }
                if needs[k.0] {
                    let dk = ensure(grads, k.0, values[k.0].numel());
                    conv::tconv1d_bwd_kernel(&values[x.0].data, g, dims, dk);
                }
                if let Some(b) = bias {
                    if needs[b.0] {
                        let db = ensure(grads, b.0, values[b.0].numel());
                        let n = dims.batch * dims.li;
                        for (co, dbv) in db.iter_mut().enumerate() {
                            let mut s = S::ZERO;
                            for &v in &g[co * n..(co + 1) * n] {
                                s += v;
                            }
                            *dbv += s;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, alpha } => {
                if needs[x.0] {
                    let a = S::from_f64(*alpha);
                    let xv = &values[x.0].data;
                    let dx = ensure(grads, x.0, xv.len());
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += if v >= S::ZERO { gv } else { a * gv };
                    }
                }
            }
            Op::PRelu { x, slopes } => {
                let (c, b, l) = dims3(&values[x.0].shape).expect("checked at forward");
                let xv = &values[x.0].data;
                let sv = &values[slopes.0].data;
                if needs[x.0] {
                    let dx = ensure(grads, x.0, xv.len());
                    for ch in 0..c {
                        let a = sv[ch];
                        let r = ch * b * l..(ch + 1) * b * l;
                        for ((d, &gv), &v) in dx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xv[r])
                        {
                            *d += if v >= S::ZERO { gv } else { a * gv };
                        }
                    }
                }
                if needs[slopes.0] {
                    let ds = ensure(grads, slopes.0, c);
                    for (ch, dsv) in ds.iter_mut().enumerate() {
                        let r = ch * b * l..(ch + 1) * b * l;
                        let mut s = S::ZERO;
                        for (&gv, &v) in g[r.clone()].iter().zip(&xv[r]) {
                            if v < S::ZERO {
                                s += gv * v;
                            }
                        }
                        *dsv += s;
                    }
                }
            }
            Op::Vbn(op) => {
                let (c, b, l) = dims3(&values[op.x.0].shape).expect("checked at forward");
                let xv = &values[op.x.0].data;
                let gv = &values[op.gain.0].data;
                let w = S::from_f64(op.w_cur);
                let inv_l = S::from_f64(1.0 / l as f64);
                let two = S::from_f64(2.0);
                let half = S::from_f64(0.5);
                if needs[op.gain.0] {
                    let dg = ensure(grads, op.gain.0, c);
                    for (ch, d) in dg.iter_mut().enumerate() {
                        let mut s = S::ZERO;
                        for ex in 0..b {
                            let off = ch * b * l + ex * l;
                            let mc = op.mu_comb[ch * b + ex];
                            let inv = op.inv_std[ch * b + ex];
                            for (&gu, &v) in g[off..off + l].iter().zip(&xv[off..off + l]) {
                                s += gu * (v - mc) * inv;
                            }
                        }
                        *d += s;
                    }
                }
                if needs[op.bias.0] {
                    let db = ensure(grads, op.bias.0, c);
                    for (ch, d) in db.iter_mut().enumerate() {
                        let mut s = S::ZERO;
                        for &gu in &g[ch * b * l..(ch + 1) * b * l] {
                            s += gu;
                        }
                        *d += s;
                    }
                }
                if needs[op.x.0] {
                    let dx = ensure(grads, op.x.0, xv.len());
                    for ch in 0..c {
                        let gain = gv[ch];
                        for ex in 0..b {
                            let off = ch * b * l + ex * l;
                            let mu = op.mu_cur[ch * b + ex];
                            let mc = op.mu_comb[ch * b + ex];
                            let inv = op.inv_std[ch * b + ex];
                            // Reference statistics are constants; only the
                            // current example's mean/variance carry gradient,
                            // each entering the combination with weight w.
                            let mut sum_dxh = S::ZERO;
                            let mut sum_dxh_xm = S::ZERO;
                            for (&gu, &v) in g[off..off + l].iter().zip(&xv[off..off + l]) {
                                let dxh = gu * gain;
                                sum_dxh += dxh;
                                sum_dxh_xm += dxh * (v - mc);
                            }
                            let dmu_comb = -inv * sum_dxh;
                            let dvar_comb = -half * inv * inv * inv * sum_dxh_xm;
                            let mu_term = w * dmu_comb * inv_l;
                            let var_coef = w * dvar_comb * two * inv_l;
                            for ((d, &gu), &v) in dx[off..off + l]
                                .iter_mut()
                                .zip(&g[off..off + l])
                                .zip(&xv[off..off + l])
                            {
                                *d += gu * gain * inv + mu_term + var_coef * (v - mu);
                            }
                        }
                    }
                }
            }
            Op::Dense { x, weight, bias } => {
                let (c, batch, l) = dims3(&values[x.0].shape).expect("checked at forward");
                let f_in = c * l;
                let f_out = values[weight.0].shape[1];
                if needs[x.0] {
                    // dxm = w · g, then scatter back to [c, b, l].
                    let mut dxm = vec![S::ZERO; f_in * batch];
                    unsafe {
                        S::gemm(
                            f_in,
                            f_out,
                            batch,
                            S::ONE,
                            values[weight.0].data.as_ptr(),
                            f_out as isize,
                            1,
                            g.as_ptr(),
                            batch as isize,
                            1,
                            S::ZERO,
                            dxm.as_mut_ptr(),
                            batch as isize,
                            1,
                        );
                    }
                    let dx = ensure(grads, x.0, values[x.0].numel());
                    scatter_features_add(&dxm, c, batch, l, dx);
                }
                if needs[weight.0] {
                    let xm = gather_features(&values[x.0].data, c, batch, l);
                    let dw = ensure(grads, weight.0, values[weight.0].numel());
                    unsafe {
                        // dw[f, o] += Σ_ex xm[f, ex]·g[o, ex]
                        S::gemm(
                            f_in,
                            batch,
                            f_out,
                            S::ONE,
                            xm.as_ptr(),
                            batch as isize,
                            1,
                            g.as_ptr(),
                            1,
                            batch as isize,
                            S::ONE,
                            dw.as_mut_ptr(),
                            f_out as isize,
                            1,
                        );
                    }
                }
                if let Some(bid) = bias {
                    if needs[bid.0] {
                        let db = ensure(grads, bid.0, f_out);
                        for (o, d) in db.iter_mut().enumerate() {
                            let mut s = S::ZERO;
                            for &gv in &g[o * batch..(o + 1) * batch] {
                                s += gv;
                            }
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCh { a, b } => {
                let na = values[a.0].numel();
                if needs[a.0] {
                    let da = ensure(grads, a.0, na);
                    for (d, &gv) in da.iter_mut().zip(&g[..na]) {
                        *d += gv;
                    }
                }
                if needs[b.0] {
                    let db = ensure(grads, b.0, values[b.0].numel());
                    for (d, &gv) in db.iter_mut().zip(&g[na..]) {
                        *d += gv;
                    }
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if needs[id.0] {
                        let d = ensure(grads, id.0, values[id.0].numel());
                        for (dv, &gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs[x.0] {
                    let cs = S::from_f64(*c);
                    let d = ensure(grads, x.0, values[x.0].numel());
                    for (dv, &gv) in d.iter_mut().zip(g) {
                        *dv += cs * gv;
                    }
                }
            }
            Op::MseConst { x, target } => {
                if needs[x.0] {
                    let n = values[x.0].numel();
                    let t = S::from_f64(*target);
                    let coef = S::from_f64(2.0 / n as f64) * g[0];
                    let d = ensure(grads, x.0, n);
                    for (dv, &v) in d.iter_mut().zip(&values[x.0].data) {
                        *dv += coef * (v - t);
                    }
                }
            }
            Op::L1Mean { a, b } => {
                let n = values[a.0].numel();
                let coef = S::from_f64(1.0 / n as f64) * g[0];
                let sign = |x: S, y: S| {
                    if x > y {
                        S::ONE
                    } else if x < y {
                        -S::ONE
                    } else {
                        S::ZERO
                    }
                };
                if needs[a.0] {
                    let d = ensure(grads, a.0, n);
                    for ((dv, &x), &y) in d.iter_mut().zip(&values[a.0].data).zip(&values[b.0].data)
                    {
                        *dv += coef * sign(x, y);
                    }
                }
                if needs[b.0] {
                    let d = ensure(grads, b.0, n);
                    for ((dv, &x), &y) in d.iter_mut().zip(&values[a.0].data).zip(&values[b.0].data)
                    {
                        *dv -= coef * sign(x, y);
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure<'a, S: Scalar>(
    grads: &'a mut [Option<Vec<S>>],
    id: usize,
    len: usize,
) -> &'a mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::ZERO; len])
}

/// Regroup `[c, b, l]` activations into a `[c·l, b]` feature matrix
/// (feature index = c·l_per_channel + l), the layout the dense layer's GEMM
/// consumes.
fn gather_features<S: Scalar>(x: &[S], c: usize, b: usize, l: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; c * l * b];
    for ch in 0..c {
        for ex in 0..b {
            let src = &x[ch * b * l + ex * l..ch * b * l + ex * l + l];
            for (i, &v) in src.iter().enumerate() {
                out[(ch * l + i) * b + ex] = v;
            }
        }
    }
    out
}

fn scatter_features_add<S: Scalar>(m: &[S], c: usize, b: usize, l: usize, dx: &mut [S]) {
    for ch in 0..c {
        for ex in 0..b {
            let dst = &mut dx[ch * b * l + ex * l..ch * b * l + ex * l + l];
            for (i, d) in dst.iter_mut().enumerate() {
                *d += m[(ch * l + i) * b + ex];
            }
        }
    }
}
