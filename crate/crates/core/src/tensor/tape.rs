//! Define-by-run reverse-mode differentiation. A [`Tape`] records every
//! operation as it executes; [`Tape::backward`] walks the record once in
//! reverse, accumulating gradients with `+=` so shared inputs (parameters used
//! at several sites) receive the sum of their contributions.
//!
//! Node order is creation order, which is already a topological order of the
//! dataflow graph, so the reverse sweep needs no explicit sort.

use std::collections::HashMap;

use super::conv::{self, Conv2dSpec};
use super::params::{ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};
use crate::wavelet;

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input node: a parameter, an anonymous differentiable leaf, or a constant.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddConst(Var),
    MulConst(Var, f64),
    /// Elementwise scale of a tensor by a scalar (`[1]`) variable.
    ScaleByScalar(Var, Var),
    MatMul(Var, Var),
    Transpose2d(Var),
    /// `[N, D] + [D]`, broadcasting the row vector over rows.
    AddRow(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    /// `[C, H, W] -> [C]` spatial mean.
    GlobalAvgPool(Var),
    /// `[M, D] -> [D]` mean over rows.
    MeanRows(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
    UpsampleNearest2(Var),
    AvgPool2(Var),
    /// Concatenation along axis 0 (channels for `[C,H,W]`, elements for `[N]`).
    ConcatC(Vec<Var>),
    /// Half-open slice `[start, end)` along axis 0.
    SliceC(Var, usize, usize),
    /// `[C] -> [C, H, W]` spatial broadcast.
    BroadcastChw(Var, usize, usize),
    /// `[C,H,W] * [C]` per-channel scale.
    MulChan(Var, Var),
    /// `[C,H,W] + [C]` per-channel shift.
    AddChan(Var, Var),
    /// Orthonormal 2x2 Haar analysis `[C,H,W] -> [4C,H/2,W/2]`.
    Dwt2(Var),
    /// Orthonormal 2x2 Haar synthesis `[4C,h,w] -> [C,2h,2w]`.
    Idwt2(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Non-differentiable input (data, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_input(value, false)
    }

    /// Anonymous differentiable input; its gradient is read back with
    /// [`Tape::grad`] after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_input(value, true)
    }

    /// Differentiable leaf bound to a registered parameter. Repeated calls for
    /// the same parameter return the same node, so every use shares one
    /// gradient accumulator.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push_input(params.value(id).clone(), true);
        self.param_leaves.insert(id, v);
        v
    }

    /// Parameter loaded as a constant: its value participates in the forward
    /// pass but backward treats it as fixed and assigns it no gradient. This
    /// is how frozen modules enter a training graph.
    pub fn frozen_param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.constant(params.value(id).clone())
    }

    fn push_input(&mut self, mut value: Tensor, needs_grad: bool) -> Var {
        value.requires_grad = needs_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        // Finiteness is enforced at op boundaries in debug builds; release
        // builds rely on the training loop's loss checks instead.
        if cfg!(debug_assertions) && !value.is_all_finite() {
            return Err(Error::numeric(format!(
                "non-finite value produced by {:?}",
                std::mem::discriminant(&op)
            )));
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to `v`, if one was
    /// produced.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise division. The caller is responsible for keeping the
    /// denominator away from zero (losses do so with an epsilon).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("div", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x / y);
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Div(a, b), &[a, b])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::AddConst(a), &[a])
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::MulConst(a, c), &[a])
    }

    pub fn scale_by_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(
                "scale_by_scalar",
                "[1] scale",
                format!("{:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::ScaleByScalar(x, s), &[x, s])
    }

    // ---- activations -------------------------------------------------------

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.exp()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Exp(a), &[a])
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Softplus(a), &[a])
    }

    /// Clamp to `[lo, hi]`; the gradient is passed through strictly inside the
    /// interval and zeroed at and beyond the bounds.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::invalid("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        let data = self.value(a).data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    /// Softmax along `axis`, stabilized by max subtraction per lane.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let (outer, n, inner) = lane_dims(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..n {
                    mx = mx.max(x[at(t)]);
                }
                let mut z = 0.0;
                for t in 0..n {
                    let e = (x[at(t)] - mx).exp();
                    out[at(t)] = e;
                    z += e;
                }
                for t in 0..n {
                    out[at(t)] /= z;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Softmax(a, axis), &[a])
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), &[a])
    }

    /// `[C, H, W] -> [C]` spatial mean per channel.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 3 {
            return Err(Error::shape("global_avg_pool", "[C,H,W]", format!("{shape:?}")));
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let x = self.value(a).data();
        let out: Vec<f64> = (0..c)
            .map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![c], out)?;
        self.push(t, Op::GlobalAvgPool(a), &[a])
    }

    /// `[M, D] -> [D]` mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::shape("mean_rows", "[M,D]", format!("{shape:?}")));
        }
        let (m, d) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; d];
        for r in 0..m {
            for c in 0..d {
                out[c] += x[r * d + c];
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        let t = Tensor::new(vec![d], out)?;
        self.push(t, Op::MeanRows(a), &[a])
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                "[m,k] x [k,n]",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::shape("transpose2d", "[m,n]", format!("{shape:?}")));
        }
        let (m, n) = (shape[0], shape[1]);
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        self.push(t, Op::Transpose2d(a), &[a])
    }

    /// `[N, D] + [D]` broadcast add (bias over rows).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::shape(
                "add_row",
                "[N,D] + [D]",
                format!("{sa:?} + {sb:?}"),
            ));
        }
        let (n, d) = (sa[0], sa[1]);
        let x = self.value(a).data();
        let r = self.value(b).data();
        let mut out = vec![0.0; x.len()];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = x[i * d + j] + r[j];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        self.push(t, Op::AddRow(a, b), &[a, b])
    }

    // ---- structured ops ----------------------------------------------------

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    ) -> Result<Var> {
        let out = conv::forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &spec,
        )?;
        let mut parents = vec![input, kernel];
        if let Some(b) = bias {
            parents.push(b);
        }
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            },
            &parents,
        )
    }

    /// Nearest-neighbour x2 upsampling of `[C, H, W]`.
    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 3 {
            return Err(Error::shape("upsample_nearest2", "[C,H,W]", format!("{shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let x = self.value(a).data();
        let (h2, w2) = (h * 2, w * 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(ch * h + i) * w + j];
                    let base = (ch * h2 + 2 * i) * w2 + 2 * j;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + w2] = v;
                    out[base + w2 + 1] = v;
                }
            }
        }
        let t = Tensor::new(vec![c, h2, w2], out)?;
        self.push(t, Op::UpsampleNearest2(a), &[a])
    }

    /// 2x2 average pooling with stride 2; requires even spatial extents.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 3 {
            return Err(Error::shape("avg_pool2", "[C,H,W]", format!("{shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "avg_pool2",
                format!("spatial extents must be even, got {h}x{w}"),
            ));
        }
        let x = self.value(a).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; c * h2 * w2];
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let base = (ch * h + 2 * i) * w + 2 * j;
                    out[(ch * h2 + i) * w2 + j] =
                        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
                }
            }
        }
        let t = Tensor::new(vec![c, h2, w2], out)?;
        self.push(t, Op::AvgPool2(a), &[a])
    }

    /// Concatenates along axis 0. All inputs must agree on trailing dimensions.
    pub fn concat_c(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat_c", "no inputs"));
        }
        let tail = self.shape(inputs[0])[1..].to_vec();
        let mut c_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_c",
                    format!("trailing dims {tail:?}"),
                    format!("{:?}", &s[1..]),
                ));
            }
            c_total += s[0];
        }
        let mut shape = vec![c_total];
        shape.extend_from_slice(&tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for &v in inputs {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::ConcatC(inputs.to_vec()), inputs)
    }

    /// Half-open slice `[start, end)` along axis 0.
    pub fn slice_c(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(Error::invalid(
                "slice_c",
                format!("range {start}..{end} invalid for axis length {}", shape[0]),
            ));
        }
        let tail: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * tail..end * tail].to_vec();
        let mut out_shape = vec![end - start];
        out_shape.extend_from_slice(&shape[1..]);
        let t = Tensor::new(out_shape, data)?;
        self.push(t, Op::SliceC(a, start, end), &[a])
    }

    /// `[C] -> [C, H, W]`, repeating each channel value over the plane.
    pub fn broadcast_chw(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 1 {
            return Err(Error::shape("broadcast_chw", "[C]", format!("{shape:?}")));
        }
        let c = shape[0];
        let x = self.value(a).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            out[ch * h * w..(ch + 1) * h * w].fill(x[ch]);
        }
        let t = Tensor::new(vec![c, h, w], out)?;
        self.push(t, Op::BroadcastChw(a, h, w), &[a])
    }

    /// `[C,H,W] * [C]`: channel-wise scaling.
    pub fn mul_chan(&mut self, x: Var, v: Var) -> Result<Var> {
        self.chan_check("mul_chan", x, v)?;
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let s = vd[ch];
            for i in 0..hw {
                out[ch * hw + i] = xd[ch * hw + i] * s;
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::MulChan(x, v), &[x, v])
    }

    /// `[C,H,W] + [C]`: channel-wise shift.
    pub fn add_chan(&mut self, x: Var, v: Var) -> Result<Var> {
        self.chan_check("add_chan", x, v)?;
        let shape = self.shape(x).to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; xd.len()];
        for ch in 0..c {
            let s = vd[ch];
            for i in 0..hw {
                out[ch * hw + i] = xd[ch * hw + i] + s;
            }
        }
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::AddChan(x, v), &[x, v])
    }

    fn chan_check(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let (sx, sv) = (self.shape(x), self.shape(v));
        if sx.len() != 3 || sv.len() != 1 || sv[0] != sx[0] {
            return Err(Error::shape(
                op,
                "[C,H,W] with [C]",
                format!("{sx:?} with {sv:?}"),
            ));
        }
        Ok(())
    }

    /// One level of the orthonormal 2x2 Haar transform; see [`crate::wavelet`].
    /// Output stacks the four bands as `[LL | LH | HL | HH]` along channels.
    pub fn dwt2(&mut self, a: Var) -> Result<Var> {
        let out = wavelet::dwt2(self.value(a))?;
        self.push(out, Op::Dwt2(a), &[a])
    }

    /// Inverse of [`Tape::dwt2`].
    pub fn idwt2(&mut self, a: Var) -> Result<Var> {
        let out = wavelet::idwt2(self.value(a))?;
        self.push(out, Op::Idwt2(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    // ---- composite helpers -------------------------------------------------

    /// Affine map of row vectors: `x [N,Din] -> x W + b [N,Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Affine map of a single vector: `[Din] -> [Dout]`.
    pub fn linear_vec(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let d_in = self.shape(x)[0];
        let row = self.reshape(x, vec![1, d_in])?;
        let y = self.linear(row, w, b)?;
        let d_out = self.shape(y)[1];
        self.reshape(y, vec![d_out])
    }

    /// `softmax(q kᵀ / sqrt(D)) v` for `q [M,D]`, `k [L,D]`, `v [L,Dv]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk[0] != sv[0] {
            return Err(Error::shape(
                "scaled_dot_attention",
                "q [M,D], k [L,D], v [L,Dv]",
                format!("{sq:?}, {sk:?}, {sv:?}"),
            ));
        }
        let d = sq[1] as f64;
        let kt = self.transpose2d(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.mul_const(scores, 1.0 / d.sqrt())?;
        let att = self.softmax(scaled, 1)?;
        self.matmul(att, v)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Each tape supports exactly one
    /// backward pass; gradients accumulate additively into every
    /// differentiable leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss variable is not on this tape".into()));
        }
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a new tape per pass".into(),
            ));
        }
        self.backward_done = true;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any differentiable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &op, &g)?;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Adds every parameter gradient on this tape into the parameter store.
    pub fn export_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (&pid, &var) in &self.param_leaves {
            if let Some(g) = self.nodes[var.0].grad.as_ref() {
                params.accumulate_grad(pid, g)?;
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.value.numel());
        let grad = node.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&mut self, _i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, g);
                self.add_grad(b, g);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = zip_map(g, self.value(b).data(), |gi, bi| gi * bi);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let d = zip_map(g, self.value(a).data(), |gi, ai| gi * ai);
                    self.add_grad(b, &d);
                }
            }
            Op::Div(a, b) => {
                if self.needs(a) {
                    let d = zip_map(g, self.value(b).data(), |gi, bi| gi / bi);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let bv = self.value(b).data();
                    let d: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                        .collect();
                    self.add_grad(b, &d);
                }
            }
            Op::AddConst(a) => self.add_grad(a, g),
            Op::MulConst(a, c) => {
                let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(a, &d);
            }
            Op::ScaleByScalar(x, s) => {
                if self.needs(x) {
                    let sv = self.value(s).data()[0];
                    let d: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.add_grad(x, &d);
                }
                if self.needs(s) {
                    let xd = self.value(x).data();
                    let ds: f64 = g.iter().zip(xd).map(|(gi, xi)| gi * xi).sum();
                    self.add_grad(s, &[ds]);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let d = mm_nt(g, self.value(b).data(), m, n, k);
                    self.add_grad(a, &d);
                }
                if self.needs(b) {
                    let d = mm_tn(self.value(a).data(), g, m, k, n);
                    self.add_grad(b, &d);
                }
            }
            Op::Transpose2d(a) => {
                let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] = g[j * m + i];
                    }
                }
                self.add_grad(a, &d);
            }
            Op::AddRow(a, b) => {
                self.add_grad(a, g);
                if self.needs(b) {
                    let (n, dcols) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut d = vec![0.0; dcols];
                    for i in 0..n {
                        for j in 0..dcols {
                            d[j] += g[i * dcols + j];
                        }
                    }
                    self.add_grad(b, &d);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(a).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                    .collect();
                self.add_grad(a, &d);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[_i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(gi, &yi)| gi * yi * (1.0 - yi)).collect();
                self.add_grad(a, &d);
            }
            Op::Exp(a) => {
                let y = self.nodes[_i].value.data();
                let d: Vec<f64> = g.iter().zip(y).map(|(gi, &yi)| gi * yi).collect();
                self.add_grad(a, &d);
            }
            Op::Softplus(a) => {
                let x = self.value(a).data();
                let d: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect();
                self.add_grad(a, &d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(a).data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| if xi > lo && xi < hi { *gi } else { 0.0 })
                    .collect();
                self.add_grad(a, &d);
            }
            Op::Softmax(a, axis) => {
                let shape = self.shape(a).to_vec();
                let (outer, n, inner) = lane_dims(&shape, axis);
                let y = self.nodes[_i].value.data();
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let mut dot = 0.0;
                        for t in 0..n {
                            dot += g[at(t)] * y[at(t)];
                        }
                        for t in 0..n {
                            d[at(t)] = y[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                self.add_grad(a, &d);
            }
            Op::SumAll(a) => {
                let d = vec![g[0]; self.value(a).numel()];
                self.add_grad(a, &d);
            }
            Op::MeanAll(a) => {
                let n = self.value(a).numel();
                let d = vec![g[0] / n as f64; n];
                self.add_grad(a, &d);
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.shape(a).to_vec();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                let mut d = vec![0.0; c * hw];
                for ch in 0..c {
                    let v = g[ch] / hw as f64;
                    d[ch * hw..(ch + 1) * hw].fill(v);
                }
                self.add_grad(a, &d);
            }
            Op::MeanRows(a) => {
                let (m, dcols) = (self.shape(a)[0], self.shape(a)[1]);
                let mut d = vec![0.0; m * dcols];
                for r in 0..m {
                    for c in 0..dcols {
                        d[r * dcols + c] = g[c] / m as f64;
                    }
                }
                self.add_grad(a, &d);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                spec,
            } => {
                let need_db = bias.map(|b| self.needs(b)).unwrap_or(false);
                let (dx, dk, db) = conv::backward(
                    self.value(input),
                    self.value(kernel),
                    g,
                    &spec,
                    self.needs(input),
                    self.needs(kernel),
                    need_db,
                )?;
                if let Some(dx) = dx {
                    self.add_grad(input, &dx);
                }
                if let Some(dk) = dk {
                    self.add_grad(kernel, &dk);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    self.add_grad(b, &db);
                }
            }
            Op::UpsampleNearest2(a) => {
                let shape = self.shape(a).to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (h2, w2) = (h * 2, w * 2);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let base = (ch * h2 + 2 * i) * w2 + 2 * j;
                            d[(ch * h + i) * w + j] =
                                g[base] + g[base + 1] + g[base + w2] + g[base + w2 + 1];
                        }
                    }
                }
                self.add_grad(a, &d);
            }
            Op::AvgPool2(a) => {
                let shape = self.shape(a).to_vec();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (h2, w2) = (h / 2, w / 2);
                let mut d = vec![0.0; c * h * w];
                for ch in 0..c {
                    for i in 0..h2 {
                        for j in 0..w2 {
                            let go = 0.25 * g[(ch * h2 + i) * w2 + j];
                            let base = (ch * h + 2 * i) * w + 2 * j;
                            d[base] = go;
                            d[base + 1] = go;
                            d[base + w] = go;
                            d[base + w + 1] = go;
                        }
                    }
                }
                self.add_grad(a, &d);
            }
            Op::ConcatC(ref inputs) => {
                let mut offset = 0;
                for &v in inputs {
                    let n = self.value(v).numel();
                    if self.needs(v) {
                        let d = g[offset..offset + n].to_vec();
                        self.add_grad(v, &d);
                    }
                    offset += n;
                }
            }
            Op::SliceC(a, start, _end) => {
                let shape = self.shape(a).to_vec();
                let tail: usize = shape[1..].iter().product();
                let mut d = vec![0.0; self.value(a).numel()];
                d[start * tail..start * tail + g.len()].copy_from_slice(g);
                self.add_grad(a, &d);
            }
            Op::BroadcastChw(a, h, w) => {
                let c = self.shape(a)[0];
                let hw = h * w;
                let mut d = vec![0.0; c];
                for ch in 0..c {
                    d[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                }
                self.add_grad(a, &d);
            }
            Op::MulChan(x, v) => {
                let shape = self.shape(x).to_vec();
                let (c, hw) = (shape[0], shape[1] * shape[2]);
                if self.needs(x) {
                    let vd = self.value(v).data();
                    let mut d = vec![0.0; c * hw];
                    for ch in 0..c {
                        let s = vd[ch];
                        for i in 0..hw {
                            d[ch * hw + i] = g[ch * hw + i] * s;
                        }
                    }
                    self.add_grad(x, &d);
                }
                if self.needs(v) {
                    let xd = self.value(x).data();
                    let mut d = vec![0.0; c];
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for i in 0..hw {
                            acc += g[ch * hw + i] * xd[ch * hw + i];
                        }
                        d[ch] = acc;
                    }
                    self.add_grad(v, &d);
                }
            }
            Op::AddChan(x, v) => {
                self.add_grad(x, g);
                if self.needs(v) {
                    let shape = self.shape(x).to_vec();
                    let (c, hw) = (shape[0], shape[1] * shape[2]);
                    let mut d = vec![0.0; c];
                    for ch in 0..c {
                        d[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
                    }
                    self.add_grad(v, &d);
                }
            }
            // The Haar transform is orthonormal, so the adjoint of analysis is
            // synthesis and vice versa.
            Op::Dwt2(a) => {
                let gshape = self.nodes[_i].value.shape().to_vec();
                let gt = Tensor::new(gshape, g.to_vec())?;
                let d = wavelet::idwt2(&gt)?;
                self.add_grad(a, d.data());
            }
            Op::Idwt2(a) => {
                let gshape = self.nodes[_i].value.shape().to_vec();
                let gt = Tensor::new(gshape, g.to_vec())?;
                let d = wavelet::dwt2(&gt)?;
                self.add_grad(a, d.data());
            }
            Op::Reshape(a) => {
                self.add_grad(a, g);
            }
        }
        Ok(())
    }
}

#[inline]
fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C[m,n] = A[m,k] B[k,n]`
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// `C[m,k] = G[m,n] B[k,n]ᵀ`
fn mm_nt(gr: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gr[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// `C[k,n] = A[m,k]ᵀ G[m,n]`
fn mm_tn(a: &[f64], gr: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &gr[i * n..(i + 1) * n];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * grow[j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_matches_two_class_closed_form() {
        // softmax([0, ln 3]) = [1/4, 3/4]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 100.0, 101.0, 99.0]).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        let out = tape.value(y).data();
        for r in 0..2 {
            let s: f64 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        //

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let y2 = tape2.softmax(x2, 0).unwrap();
        let mut tape3 = Tape::new();
        let x3 = tape3.leaf(Tensor::new(vec![3], vec![11.0, 8.0, 10.5]).unwrap());
        let y3 = tape3.softmax(x3, 0).unwrap();
        let d = tape2.value(y2).max_abs_diff(tape3.value(y3)).unwrap();
        assert!(d < 1e-12, "softmax must be invariant to constant shifts, diff={d}");
    }

    #[test]
    fn backward_accumulates_for_shared_inputs() {
        // y = x*x + x -> dy/dx = 2x + 1; x used three times through one leaf.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("already ran"));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // Linearity: grad_x(l1 + l2) == grad_x(l1) + grad_x(l2) computed on
        // separate tapes.
        let x0 = Tensor::new(vec![3], vec![0.3, -0.7, 1.2]).unwrap();

        let joint = {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l1 = tape.sum_all(x).unwrap();
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.sum_all(sq).unwrap();
            let l = tape.add(l1, l2).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };

        let mut separate = vec![0.0; 3];
        {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l1 = tape.sum_all(x).unwrap();
            tape.backward(l1).unwrap();
            for (s, g) in separate.iter_mut().zip(tape.grad(x).unwrap()) {
                *s += g;
            }
        }
        {
            let mut tape = Tape::new();
            let x = tape.leaf(x0);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.sum_all(sq).unwrap();
            tape.backward(l2).unwrap();
            for (s, g) in separate.iter_mut().zip(tape.grad(x).unwrap()) {
                *s += g;
            }
        }
        for (a, b) in joint.iter().zip(&separate) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_dominant_key_selects_its_value() {
        // Q aligned with the first of two well-separated keys picks out the
        // first value row almost exactly.
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
        let k = tape.leaf(Tensor::new(vec![2, 2], vec![10.0, 0.0, 0.0, 10.0]).unwrap());
        let v = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = tape.scaled_dot_attention(q, k, v).unwrap();
        let o = tape.value(out).data();
        assert!(o[0] > 0.999, "got {o:?}");
        assert!(o[1] < 0.001, "got {o:?}");
    }

    #[test]
    fn matmul_backward_matches_hand_computation() {
        // f = sum(A B); dA = 1 Bᵀ, dB = Aᵀ 1.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn parameter_leaves_are_cached_per_tape() {
        let mut params = ParamSet::new();
        let id = params.register("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let v1 = tape.param(&params, id);
        let v2 = tape.param(&params, id);
        assert_eq!(v1, v2);
        // Both uses flow gradient into the single leaf.
        let y = tape.mul(v1, v2).unwrap();
        tape.backward(y).unwrap();
        tape.export_grads(&mut params).unwrap();
        assert_eq!(params.grad(id).unwrap(), &[4.0]);
    }

    #[test]
    fn debug_builds_reject_non_finite_results() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let z = tape.constant(Tensor::scalar(0.0));
        let err = tape.div(x, z).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
