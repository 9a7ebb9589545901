//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so operands always precede their results. [`Var::backward`] walks
//! the record once in reverse and accumulates gradients additively, which
//! handles fan-out (a value used twice receives the sum of both uses).
//!
//! Tapes are cheap and meant to be rebuilt for every training step.
//!
//! ```
//! use xpert::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! loss.backward().unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    MatMul(usize, usize),
    Linear { x: usize, w: usize, b: usize },
    AddChannelBias { x: usize, bias: usize },
    Conv3x3 { input: usize, kernel: usize },
    Softmax(usize),
    Sum(usize),
    Reshape(usize),
    SliceRows { x: usize, start: usize },
    RepeatCols { x: usize, times: usize },
    ReverseGrad { x: usize, scale: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient on [`Var::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: inner.nodes.len() - 1,
        })
    }

    fn requires_grad(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.inner.borrow(), |inner| &inner.nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Value of a one-element Var.
    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    /// Gradient from the most recent backward pass, if this Var was reached.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.inner.borrow().grads.get(self.id).cloned().flatten()
    }

    fn same_tape(&self, other: &Var<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract(format!("{op}: operands belong to different tapes")))
        }
    }

    fn unary(self, name: &'static str, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.value())?;
        let rg = self.requires_grad();
        self.tape.push(value, op, rg, name)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other, name)?;
        let value = {
            let a = self.value();
            let b = other.value();
            a.expect_same_shape(&b, name)?;
            a.zip_map(&b, f)?
        };
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        self.tape.push(value, op, rg, name)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", Op::Scale(self.id, c), |t| Ok(t.scaled(c)))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        self.unary("offset", Op::Offset(self.id), |t| Ok(t.map(|v| v + c)))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", Op::Sigmoid(self.id), |t| Ok(t.map(sigmoid)))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", Op::Exp(self.id), |t| Ok(t.map(f64::exp)))
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary("log", Op::Log(self.id), |t| {
            if let Some(v) = t.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::domain("log", format!("non-positive input {v}")));
            }
            Ok(t.map(f64::ln))
        })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", Op::Relu(self.id), |t| Ok(t.map(|v| v.max(0.0))))
    }

    /// Elementwise `min(hi, max(lo, x))`. The gradient passes only where
    /// `lo < x < hi`.
    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>> {
        if lo > hi {
            return Err(Error::domain("clamp", format!("empty interval [{lo}, {hi}]")));
        }
        self.unary("clamp", Op::Clamp { x: self.id, lo, hi }, |t| {
            Ok(t.map(|v| v.clamp(lo, hi)))
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other, "matmul")?;
        let value = self.value().matmul(&other.value())?;
        let rg = self.tape.requires_grad(&[self.id, other.id]);
        self.tape.push(value, Op::MatMul(self.id, other.id), rg, "matmul")
    }

    /// Affine map `x·wᵀ + b` for `x: [B×in]`, `w: [out×in]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight, "linear")?;
        self.same_tape(&bias, "linear")?;
        let value = {
            let x = self.value();
            let w = weight.value();
            let b = bias.value();
            let (batch, fan_in) = x.dims2()?;
            let (fan_out, w_in) = w.dims2()?;
            if w_in != fan_in || b.len() != fan_out {
                return Err(Error::dim(
                    "linear",
                    format!(
                        "input {:?}, weight {:?}, bias {:?}",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    ),
                ));
            }
            let mut out = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                out.extend_from_slice(b.data());
            }
            gemm(
                batch,
                fan_in,
                fan_out,
                x.data(),
                Layout::RowMajor,
                w.data(),
                Layout::Transposed,
                &mut out,
                true,
            );
            Tensor::from_parts(vec![batch, fan_out], out)
        };
        let rg = self.tape.requires_grad(&[self.id, weight.id, bias.id]);
        self.tape.push(
            value,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            rg,
            "linear",
        )
    }

    /// Adds `bias[f]` to every element of channel `f` of a `[B×F×H×W]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias, "add_channel_bias")?;
        let value = {
            let x = self.value();
            let b = bias.value();
            let [_, channels, h, w] = dims4(&x, "add_channel_bias")?;
            if b.len() != channels {
                return Err(Error::dim(
                    "add_channel_bias",
                    format!("{} biases for {channels} channels", b.len()),
                ));
            }
            let plane = h * w;
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b.data()[(i / plane) % channels];
            }
            out
        };
        let rg = self.tape.requires_grad(&[self.id, bias.id]);
        self.tape.push(
            value,
            Op::AddChannelBias {
                x: self.id,
                bias: bias.id,
            },
            rg,
            "add_channel_bias",
        )
    }

    /// Same-size 3×3 cross-correlation with zero padding.
    /// `self: [B×C×H×W]`, `kernel: [F×C×3×3]`, result `[B×F×H×W]`.
    pub fn conv2d_3x3(self, kernel: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&kernel, "conv2d_3x3")?;
        let value = {
            let x = self.value();
            let k = kernel.value();
            let xs = dims4(&x, "conv2d_3x3")?;
            let ks = dims4(&k, "conv2d_3x3")?;
            if ks[1] != xs[1] || ks[2] != 3 || ks[3] != 3 {
                return Err(Error::dim(
                    "conv2d_3x3",
                    format!("kernel {:?} does not fit input {:?}", k.shape(), x.shape()),
                ));
            }
            conv3x3_forward(&x, &k, xs, ks[0])
        };
        let rg = self.tape.requires_grad(&[self.id, kernel.id]);
        self.tape.push(
            value,
            Op::Conv3x3 {
                input: self.id,
                kernel: kernel.id,
            },
            rg,
            "conv2d_3x3",
        )
    }

    /// Row-wise softmax of a `[B×K]` matrix.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary("softmax", Op::Softmax(self.id), |t| {
            let (_, k) = t.dims2()?;
            if k < 2 {
                return Err(Error::dim("softmax", "need at least two classes"));
            }
            Ok(softmax_rows(t))
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        self.unary("sum", Op::Sum(self.id), |t| Ok(Tensor::scalar(t.sum())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary("reshape", Op::Reshape(self.id), |t| t.clone().reshape(shape))
    }

    /// Leading-axis rows `start..end`.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary("slice_rows", Op::SliceRows { x: self.id, start }, |t| {
            if start >= end || end > t.rows() {
                return Err(Error::dim(
                    "slice_rows",
                    format!("rows {start}..{end} of {}", t.rows()),
                ));
            }
            let idx: Vec<usize> = (start..end).collect();
            t.select_rows(&idx)
        })
    }

    /// `[B×P]` to `[B×(times·P)]`, repeating each row's block `times` times.
    pub fn repeat_cols(self, times: usize) -> Result<Var<'t>> {
        self.unary("repeat_cols", Op::RepeatCols { x: self.id, times }, |t| {
            let (b, p) = t.dims2()?;
            if times == 0 {
                return Err(Error::dim("repeat_cols", "zero repetitions"));
            }
            let mut out = Vec::with_capacity(b * p * times);
            for i in 0..b {
                for _ in 0..times {
                    out.extend_from_slice(t.row(i));
                }
            }
            Ok(Tensor::from_parts(vec![b, p * times], out))
        })
    }

    /// Identity forward; backward multiplies the incoming gradient by `-scale`.
    ///
    /// Everything upstream of this node ascends the loss while everything
    /// downstream descends it, so a min-max objective needs one backward pass.
    pub fn reverse_grad(self, scale: f64) -> Result<Var<'t>> {
        self.unary("reverse_grad", Op::ReverseGrad { x: self.id, scale }, |t| Ok(t.clone()))
    }

    /// A constant copy of this value; no gradient flows back through it.
    pub fn detach(self) -> Var<'t> {
        let value = self.value().clone();
        self.tape.constant(value)
    }

    /// Runs the reverse pass from this scalar, replacing any previous gradients.
    pub fn backward(self) -> Result<()> {
        let mut guard = self.tape.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *guard;
        let seed = &nodes[self.id].value;
        if seed.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be scalar, shape is {:?}", seed.shape()),
            ));
        }
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[self.id] = Some(Tensor::from_parts(seed.shape().to_vec(), vec![1.0]));

        for id in (0..=self.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        s => Err(Error::dim(op, format!("expected rank 4, shape is {s:?}"))),
    }
}

/// Zero-padded 3×3 taps over an `h×w` plane: for tap `t = 3·di + dj`, the
/// output rows, the output column range, and the signed offset from an
/// output index to its source index.
fn conv_taps(h: usize, w: usize) -> impl Iterator<Item = (usize, std::ops::Range<usize>, std::ops::Range<usize>, isize)> {
    (0..9usize).filter_map(move |t| {
        let (di, dj) = (t / 3, t % 3);
        let rows = 1usize.saturating_sub(di)..(h + 1).saturating_sub(di).min(h);
        let cols = 1usize.saturating_sub(dj)..(w + 1).saturating_sub(dj).min(w);
        let offset = (di as isize - 1) * w as isize + (dj as isize - 1);
        (!rows.is_empty() && !cols.is_empty()).then_some((t, rows, cols, offset))
    })
}

fn conv3x3_forward(x: &Tensor, k: &Tensor, [batch, chans, h, w]: [usize; 4], filters: usize) -> Tensor {
    let mut out = vec![0.0; batch * filters * h * w];
    let xd = x.data();
    let kd = k.data();
    for b in 0..batch {
        for f in 0..filters {
            let o = &mut out[(b * filters + f) * h * w..][..h * w];
            for c in 0..chans {
                let plane = &xd[(b * chans + c) * h * w..][..h * w];
                let ker = &kd[(f * chans + c) * 9..][..9];
                for (t, rows, cols, offset) in conv_taps(h, w) {
                    let kv = ker[t];
                    for i in rows {
                        let start = i * w + cols.start;
                        let src = (start as isize + offset) as usize;
                        let n = cols.len();
                        for (a, &v) in o[start..start + n].iter_mut().zip(&plane[src..src + n]) {
                            *a += kv * v;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, filters, h, w], out)
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, contribution: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop(nodes: &[Node], grads: &mut [Option<Tensor>], node: &Node, g: &Tensor) {
    let val = |id: usize| &nodes[id].value;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.clone());
            accumulate(grads, nodes, b, g.scaled(-1.0));
        }
        Op::Mul(a, b) => {
            if wants(nodes, a) {
                accumulate(grads, nodes, a, g.zip_map(val(b), |g, y| g * y).unwrap());
            }
            if wants(nodes, b) {
                accumulate(grads, nodes, b, g.zip_map(val(a), |g, x| g * x).unwrap());
            }
        }
        Op::Scale(a, c) => accumulate(grads, nodes, a, g.scaled(c)),
        Op::Offset(a) => accumulate(grads, nodes, a, g.clone()),
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(grads, nodes, a, g.zip_map(y, |g, y| g * y * (1.0 - y)).unwrap());
        }
        Op::Exp(a) => {
            accumulate(grads, nodes, a, g.zip_map(&node.value, |g, y| g * y).unwrap());
        }
        Op::Log(a) => {
            accumulate(grads, nodes, a, g.zip_map(val(a), |g, x| g / x).unwrap());
        }
        Op::Relu(a) => {
            let d = g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 }).unwrap();
            accumulate(grads, nodes, a, d);
        }
        Op::Clamp { x, lo, hi } => {
            let d = g
                .zip_map(val(x), |g, v| if v > lo && v < hi { g } else { 0.0 })
                .unwrap();
            accumulate(grads, nodes, x, d);
        }
        Op::MatMul(a, b) => {
            let av = val(a);
            let bv = val(b);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if wants(nodes, a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), Layout::RowMajor, bv.data(), Layout::Transposed, &mut ga, false);
                accumulate(grads, nodes, a, Tensor::from_parts(vec![m, k], ga));
            }
            if wants(nodes, b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), Layout::Transposed, g.data(), Layout::RowMajor, &mut gb, false);
                accumulate(grads, nodes, b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Linear { x, w, b } => {
            let xv = val(x);
            let wv = val(w);
            let (batch, fan_in) = (xv.shape()[0], xv.shape()[1]);
            let fan_out = wv.shape()[0];
            if wants(nodes, x) {
                let mut gx = vec![0.0; batch * fan_in];
                gemm(batch, fan_out, fan_in, g.data(), Layout::RowMajor, wv.data(), Layout::RowMajor, &mut gx, false);
                accumulate(grads, nodes, x, Tensor::from_parts(vec![batch, fan_in], gx));
            }
            if wants(nodes, w) {
                let mut gw = vec![0.0; fan_out * fan_in];
                gemm(fan_out, batch, fan_in, g.data(), Layout::Transposed, xv.data(), Layout::RowMajor, &mut gw, false);
                accumulate(grads, nodes, w, Tensor::from_parts(vec![fan_out, fan_in], gw));
            }
            if wants(nodes, b) {
                let mut gb = vec![0.0; fan_out];
                for i in 0..batch {
                    for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                accumulate(grads, nodes, b, Tensor::from_parts(val(b).shape().to_vec(), gb));
            }
        }
        Op::AddChannelBias { x, bias } => {
            accumulate(grads, nodes, x, g.clone());
            if wants(nodes, bias) {
                let s = g.shape();
                let (channels, plane) = (s[1], s[2] * s[3]);
                let mut gb = vec![0.0; channels];
                for (i, v) in g.data().iter().enumerate() {
                    gb[(i / plane) % channels] += v;
                }
                accumulate(grads, nodes, bias, Tensor::from_parts(val(bias).shape().to_vec(), gb));
            }
        }
        Op::Conv3x3 { input, kernel } => {
            let xv = val(input);
            let kv = val(kernel);
            let s = xv.shape();
            let (batch, chans, h, w) = (s[0], s[1], s[2], s[3]);
            let filters = kv.shape()[0];
            let need_x = wants(nodes, input);
            let need_k = wants(nodes, kernel);
            let mut gx = vec![0.0; if need_x { xv.len() } else { 0 }];
            let mut gk = vec![0.0; if need_k { kv.len() } else { 0 }];
            let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
            for b in 0..batch {
                for f in 0..filters {
                    let go = &gd[(b * filters + f) * h * w..][..h * w];
                    for c in 0..chans {
                        let base = (b * chans + c) * h * w;
                        let kbase = (f * chans + c) * 9;
                        for (t, rows, cols, offset) in conv_taps(h, w) {
                            let n = cols.len();
                            let kv = kd[kbase + t];
                            let mut acc = 0.0;
                            for i in rows {
                                let start = i * w + cols.start;
                                let src = base + (start as isize + offset) as usize;
                                let g_row = &go[start..start + n];
                                if need_x {
                                    for (a, &gv) in gx[src..src + n].iter_mut().zip(g_row) {
                                        *a += gv * kv;
                                    }
                                }
                                if need_k {
                                    acc += g_row.iter().zip(&xd[src..src + n]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            if need_k {
                                gk[kbase + t] += acc;
                            }
                        }
                    }
                }
            }
            if need_x {
                accumulate(grads, nodes, input, Tensor::from_parts(s.to_vec(), gx));
            }
            if need_k {
                accumulate(grads, nodes, kernel, Tensor::from_parts(kv.shape().to_vec(), gk));
            }
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let mut d = g.clone();
            for i in 0..y.rows() {
                let yr = y.row(i);
                let dot: f64 = g.row(i).iter().zip(yr).map(|(g, y)| g * y).sum();
                for (dv, yv) in d.row_mut(i).iter_mut().zip(yr) {
                    *dv = yv * (*dv - dot);
                }
            }
            accumulate(grads, nodes, a, d);
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            let shape = val(a).shape().to_vec();
            let len = val(a).len();
            accumulate(grads, nodes, a, Tensor::from_parts(shape, vec![gv; len]));
        }
        Op::Reshape(a) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, nodes, a, Tensor::from_parts(shape, g.data().to_vec()));
        }
        Op::SliceRows { x, start } => {
            if wants(nodes, x) {
                let xv = val(x);
                let mut d = vec![0.0; xv.len()];
                let offset = start * xv.row_len();
                d[offset..offset + g.len()].copy_from_slice(g.data());
                accumulate(grads, nodes, x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
        }
        Op::RepeatCols { x, times } => {
            let xv = val(x);
            let (b, p) = (xv.shape()[0], xv.shape()[1]);
            let mut d = vec![0.0; b * p];
            for i in 0..b {
                let gr = g.row(i);
                for t in 0..times {
                    for (acc, v) in d[i * p..(i + 1) * p].iter_mut().zip(&gr[t * p..(t + 1) * p]) {
                        *acc += v;
                    }
                }
            }
            accumulate(grads, nodes, x, Tensor::from_parts(vec![b, p], d));
        }
        Op::ReverseGrad { x, scale } => accumulate(grads, nodes, x, g.scaled(-scale)),
    }
}
