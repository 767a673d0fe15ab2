//! Dynamically recorded computation tape with reverse-mode gradients.
//!
//! Every op evaluates eagerly, pushes its result onto the tape and remembers
//! its inputs. [`Tape::backward`] walks the tape in reverse from a scalar
//! loss. Nodes that depend on no differentiable leaf are skipped.

use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

use super::tensor::{gemm, split_axis, Tensor};
use crate::boxes::{log_softplus, sigmoid, softplus};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
    Exp,
    Log,
    Log1p,
    Softplus,
    LogSoftplus,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Sqrt,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    SumAxis(Var, usize),
    ProdAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    GroupSoftmax {
        input: Var,
        groups: Rc<Vec<Range<usize>>>,
        mask: Option<Rc<Vec<bool>>>,
    },
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather(Var, Rc<Vec<usize>>),
    SegmentSoftmax(Var, Rc<Vec<Range<usize>>>),
    SegmentSum(Var, Rc<Vec<Range<usize>>>),
    Reshape(Var),
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// Broadcast output shape of two equal-rank shapes, numpy style.
fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, a, b)),
        })
        .collect()
}

/// Flat source index into `src` for each flat index of `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if src[d] == 1 { 0 } else { acc };
        acc *= src[d];
    }
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for d in (0..rank).rev() {
            counter[d] += 1;
            flat += strides[d];
            if counter[d] < out[d] {
                break;
            }
            flat -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sums `grad` (shaped like the broadcast output) back onto `src_shape`.
fn unbroadcast(grad: &Tensor, src_shape: &[usize]) -> Tensor {
    if grad.shape() == src_shape {
        return grad.clone();
    }
    let idx = broadcast_index(src_shape, grad.shape());
    let mut out = Tensor::zeros(src_shape);
    let data = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&idx) {
        data[i] += g;
    }
    out
}

fn apply_unary(u: Unary, x: f64) -> f64 {
    match u {
        Unary::Neg => -x,
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Log1p => x.ln_1p(),
        Unary::Softplus => softplus(x),
        Unary::LogSoftplus => log_softplus(x),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                x
            } else {
                s * x
            }
        }
        Unary::Sqrt => x.sqrt(),
    }
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_deriv(u: Unary, x: f64, y: f64) -> f64 {
    match u {
        Unary::Neg => -1.0,
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Log1p => 1.0 / (1.0 + x),
        Unary::Softplus => sigmoid(x),
        Unary::LogSoftplus => {
            let sp = softplus(x);
            if sp > 0.0 {
                sigmoid(x) / sp
            } else {
                1.0
            }
        }
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::LeakyRelu(s) => {
            if x > 0.0 {
                1.0
            } else {
                s
            }
        }
        Unary::Sqrt => 0.5 / y,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Max => "maximum",
            Binary::Min => "minimum",
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Max => x.max(y),
            Binary::Min => x.min(y),
        };
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            Tensor::from_parts(
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
        } else {
            let out = broadcast_shape(name, va.shape(), vb.shape())?;
            let ia = broadcast_index(va.shape(), &out);
            let ib = broadcast_index(vb.shape(), &out);
            let (da, db) = (va.data(), vb.data());
            let d = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::from_parts(out, d)
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, Op::Binary(kind, a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }
    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }
    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, u: Unary, a: Var) -> Var {
        let out = self.value(a).map(|x| apply_unary(u, x));
        let needs = self.needs(a);
        self.push(out, Op::Unary(u, a), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }
    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(Unary::Log1p, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    /// `log(softplus(a))`, stable for very negative inputs.
    pub fn log_softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::LogSoftplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(slope), a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va
            .dims2()
            .ok_or_else(|| shape_err("matmul", va.shape(), vb.shape()))?;
        let (k2, n) = vb
            .dims2()
            .ok_or_else(|| shape_err("matmul", va.shape(), vb.shape()))?;
        if k != k2 {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, va.data(), false, vb.data(), false, 0.0, &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    fn check_axis(&self, op: &str, a: Var, axis: usize) -> Result<()> {
        let shape = self.value(a).shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(())
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis(a, axis), needs))
    }

    /// Product along `axis`, keeping it as a length-1 dimension.
    pub fn prod_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("prod", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![1.0; outer * inner];
        let d = v.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] *= d[base + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ProdAxis(a, axis), needs))
    }

    /// Sum of every element, as shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    /// Mean of every element, as shape `[1]`. Empty tensors average to 0.
    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.len().max(1) as f64;
        let s = v.data().iter().sum::<f64>() / n;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), needs)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - max).exp();
                    out[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(a, axis), needs))
    }

    /// Softmax over disjoint index groups of a flat input.
    ///
    /// Entries whose `mask` is false are excluded from their group and output
    /// 0; an entry covered by no group also outputs 0.
    pub fn group_softmax(
        &mut self,
        a: Var,
        groups: Rc<Vec<Range<usize>>>,
        mask: Option<Rc<Vec<bool>>>,
    ) -> Result<Var> {
        let v = self.value(a);
        let n = v.len();
        if groups.iter().any(|g| g.end > n) || mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(Error::invalid(format!(
                "group_softmax: groups or mask do not fit input of length {n}"
            )));
        }
        let d = v.data();
        let mut out = vec![0.0; n];
        let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        for g in groups.iter() {
            let max = g
                .clone()
                .filter(|&i| on(i))
                .map(|i| d[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for i in g.clone().filter(|&i| on(i)) {
                out[i] = (d[i] - max).exp();
                z += out[i];
            }
            for i in g.clone().filter(|&i| on(i)) {
                out[i] /= z;
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GroupSoftmax {
                input: a,
                groups,
                mask,
            },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.value(*first).shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            needs,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let v = self.value(a);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if start > end || end > len {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} out of bounds for axis {axis} of {:?}",
                v.shape()
            )));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            out.extend_from_slice(&v.data()[from..from + w * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = w;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: a,
                axis,
                start,
            },
            needs,
        ))
    }

    /// Rows of `a` (along axis 0) at `indices`, repeats allowed.
    pub fn gather_rows(&mut self, a: Var, indices: Rc<Vec<usize>>) -> Result<Var> {
        let v = self.value(a);
        let rows = *v
            .shape()
            .first()
            .ok_or_else(|| Error::invalid("gather_rows: rank-0 input"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let width: usize = v.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices.iter() {
            out.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather(a, indices), needs))
    }

    /// Softmax down axis 0 within each row range, column by column.
    /// Rows outside every range output 0.
    pub fn segment_softmax(&mut self, a: Var, segments: Rc<Vec<Range<usize>>>) -> Result<Var> {
        let v = self.value(a);
        let rows = rows_of("segment_softmax", v, &segments)?;
        let width = v.len() / rows.max(1);
        let d = v.data();
        let mut out = vec![0.0; d.len()];
        for seg in segments.iter().filter(|s| !s.is_empty()) {
            for j in 0..width {
                let max = seg.clone().map(|r| d[r * width + j]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for r in seg.clone() {
                    let e = (d[r * width + j] - max).exp();
                    out[r * width + j] = e;
                    z += e;
                }
                for r in seg.clone() {
                    out[r * width + j] /= z;
                }
            }
        }
        let shape = v.shape().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SegmentSoftmax(a, segments), needs))
    }

    /// Sums the rows of each range; output row `i` is the sum over
    /// `segments[i]` (zero for an empty range).
    pub fn segment_sum(&mut self, a: Var, segments: Rc<Vec<Range<usize>>>) -> Result<Var> {
        let v = self.value(a);
        let rows = rows_of("segment_sum", v, &segments)?;
        let width = v.len() / rows.max(1);
        let d = v.data();
        let mut out = vec![0.0; segments.len() * width];
        for (i, seg) in segments.iter().enumerate() {
            let dst = &mut out[i * width..(i + 1) * width];
            for r in seg.clone() {
                for (o, x) in dst.iter_mut().zip(&d[r * width..(r + 1) * width]) {
                    *o += x;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] = segments.len();
        let needs = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SegmentSum(a, segments), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let needs = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    /// Inverted dropout: at train time zeroes entries with probability `p`
    /// and scales survivors by `1 / (1 - p)`. Identity when `train` is false.
    pub fn dropout(&mut self, a: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout: p must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let v = self.value(a);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = Tensor::from_parts(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let needs = self.needs(a);
        Ok(self.push(out, Op::Dropout(a, mask), needs))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let out = node.value.shape();
                let same = va.shape() == out && vb.shape() == out;
                let (ia, ib) = if same {
                    (None, None)
                } else {
                    (
                        Some(broadcast_index(va.shape(), out)),
                        Some(broadcast_index(vb.shape(), out)),
                    )
                };
                let xa = |i: usize| va.data()[ia.as_ref().map_or(i, |ix| ix[i])];
                let xb = |i: usize| vb.data()[ib.as_ref().map_or(i, |ix| ix[i])];
                let n = g.len();
                let gd = g.data();
                let (mut ga, mut gb) = (vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let (x, y) = (xa(i), xb(i));
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (y, x),
                        Binary::Div => (1.0 / y, -x / (y * y)),
                        Binary::Max => {
                            if x >= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Min => {
                            if x <= y {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[i] = gd[i] * da;
                    gb[i] = gd[i] * db;
                }
                let ga = Tensor::from_parts(out.to_vec(), ga);
                let gb = Tensor::from_parts(out.to_vec(), gb);
                acc(*a, unbroadcast(&ga, va.shape()));
                acc(*b, unbroadcast(&gb, vb.shape()));
            }
            Op::Unary(u, a) => {
                let x = self.value(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| if g == 0.0 { 0.0 } else { g * unary_deriv(*u, x, y) })
                    .collect();
                acc(*a, Tensor::from_parts(x.shape().to_vec(), d));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2().unwrap();
                let n = vb.shape()[1];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, g.data(), false, vb.data(), true, 0.0, &mut da);
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, va.data(), true, g.data(), false, 0.0, &mut db);
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::SumAxis(a, axis) => {
                let v = self.value(*a);
                acc(*a, unbroadcast_expand(g, v.shape(), *axis));
            }
            Op::ProdAxis(a, axis) => {
                let v = self.value(*a);
                let (outer, len, inner) = split_axis(v.shape(), *axis);
                let d = v.data();
                let mut out = vec![0.0; d.len()];
                let mut prefix = vec![1.0; len + 1];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        for l in 0..len {
                            prefix[l + 1] = prefix[l] * d[at(l)];
                        }
                        let mut suffix = 1.0;
                        let gi = g.data()[o * inner + i];
                        for l in (0..len).rev() {
                            out[at(l)] = gi * prefix[l] * suffix;
                            suffix *= d[at(l)];
                        }
                    }
                }
                acc(*a, Tensor::from_parts(v.shape().to_vec(), out));
            }
            Op::SumAll(a) => {
                let v = self.value(*a);
                acc(*a, Tensor::full(v.shape(), g.data()[0]));
            }
            Op::MeanAll(a) => {
                let v = self.value(*a);
                let n = v.len().max(1) as f64;
                acc(*a, Tensor::full(v.shape(), g.data()[0] / n));
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| yd[at(l)] * gd[at(l)]).sum();
                        for l in 0..len {
                            out[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                        }
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::GroupSoftmax {
                input,
                groups,
                mask,
            } => {
                let y = &node.value;
                let (yd, gd) = (y.data(), g.data());
                let on = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let mut out = vec![0.0; yd.len()];
                for grp in groups.iter() {
                    let dot: f64 = grp.clone().filter(|&i| on(i)).map(|i| yd[i] * gd[i]).sum();
                    for i in grp.clone().filter(|&i| on(i)) {
                        out[i] = yd[i] * (gd[i] - dot);
                    }
                }
                acc(*input, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let len = ps[*axis];
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let from = (o * total + offset) * inner;
                        d.extend_from_slice(&g.data()[from..from + len * inner]);
                    }
                    offset += len;
                    acc(p, Tensor::from_parts(ps, d));
                }
            }
            Op::Slice { input, axis, start } => {
                let src = self.value(*input).shape().to_vec();
                let (outer, len, inner) = split_axis(&src, *axis);
                let w = node.value.shape()[*axis];
                let mut d = vec![0.0; src.iter().product()];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    let from = o * w * inner;
                    d[to..to + w * inner].copy_from_slice(&g.data()[from..from + w * inner]);
                }
                acc(*input, Tensor::from_parts(src, d));
            }
            Op::Gather(a, indices) => {
                let src = self.value(*a).shape().to_vec();
                let width: usize = src[1..].iter().product();
                let mut d = vec![0.0; src.iter().product()];
                for (r, &i) in indices.iter().enumerate() {
                    let gr = &g.data()[r * width..(r + 1) * width];
                    for (t, s) in d[i * width..(i + 1) * width].iter_mut().zip(gr) {
                        *t += s;
                    }
                }
                acc(*a, Tensor::from_parts(src, d));
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = &node.value;
                let width = y.len() / y.shape()[0].max(1);
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for seg in segments.iter() {
                    for j in 0..width {
                        let dot: f64 = seg.clone().map(|r| yd[r * width + j] * gd[r * width + j]).sum();
                        for r in seg.clone() {
                            let i = r * width + j;
                            out[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                }
                acc(*a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::SegmentSum(a, segments) => {
                let src = self.value(*a).shape().to_vec();
                let width: usize = src[1..].iter().product();
                let mut d = vec![0.0; src.iter().product()];
                for (i, seg) in segments.iter().enumerate() {
                    let gr = &g.data()[i * width..(i + 1) * width];
                    for r in seg.clone() {
                        for (t, s) in d[r * width..(r + 1) * width].iter_mut().zip(gr) {
                            *t += s;
                        }
                    }
                }
                acc(*a, Tensor::from_parts(src, d));
            }
            Op::Reshape(a) => {
                let src = self.value(*a).shape().to_vec();
                acc(*a, Tensor::from_parts(src, g.data().to_vec()));
            }
            Op::Dropout(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
        }
    }
}

fn rows_of(op: &str, v: &Tensor, segments: &[Range<usize>]) -> Result<usize> {
    let rows = *v
        .shape()
        .first()
        .ok_or_else(|| Error::invalid(format!("{op}: rank-0 input")))?;
    if let Some(bad) = segments.iter().find(|s| s.end > rows || s.start > s.end) {
        return Err(Error::invalid(format!("{op}: segment {bad:?} out of range for {rows} rows")));
    }
    Ok(rows)
}

/// Expands a keep-dim reduction gradient back over `axis`.
fn unbroadcast_expand(g: &Tensor, src_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(src_shape, axis);
    let mut d = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let row = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..len {
            d.extend_from_slice(row);
        }
    }
    Tensor::from_parts(src_shape.to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, d: &[f64]) -> Tensor {
        Tensor::matrix(r, c, d.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits() {
        let mut t = Tape::new();
        let x = t.constant(m(1, 2, &[0.0, 0.0]));
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.softplus(x);
        assert!((t.value(y).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn matmul_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 1]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 1]);
        let err = t.matmul(b, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn broadcast_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[2, 2]"));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::new();
        let w = t.param(m(2, 2, &[1.0, -2.0, 3.0, 0.5]));
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square_sum_is_twice() {
        let mut t = Tape::new();
        let w = t.param(m(1, 3, &[1.0, -2.0, 3.0]));
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(w), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.param(m(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let y = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
        let z = t.dropout(x, 0.5, true, &mut rng).unwrap();
        for (a, b) in t.value(z).data().iter().zip(t.value(x).data()) {
            assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn group_softmax_masks_and_groups() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::column(vec![0.0, 0.0, 5.0, 1.0, 2.0]));
        let groups = Rc::new(vec![0..3, 3..5]);
        let mask = Rc::new(vec![true, true, false, true, true]);
        let y = t.group_softmax(x, groups, Some(mask)).unwrap();
        let d = t.value(y).data();
        assert_eq!(d[0], 0.5);
        assert_eq!(d[1], 0.5);
        assert_eq!(d[2], 0.0);
        assert!((d[3] + d[4] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn broadcasting_rows_and_columns() {
        let mut t = Tape::new();
        let a = t.param(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let r = t.param(m(1, 3, &[10.0, 20.0, 30.0]));
        let c = t.param(m(2, 1, &[100.0, 200.0]));
        let x = t.add(a, r).unwrap();
        let y = t.add(x, c).unwrap();
        assert_eq!(t.value(y).data(), &[111.0, 122.0, 133.0, 214.0, 225.0, 236.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(r).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(c).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_slice_gather_roundtrip() {
        let mut t = Tape::new();
        let a = t.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = t.param(m(2, 1, &[5.0, 6.0]));
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = t.slice(c, 1, 1, 3).unwrap();
        assert_eq!(t.value(s).data(), &[2.0, 5.0, 4.0, 6.0]);
        let gth = t.gather_rows(s, Rc::new(vec![1, 1, 0])).unwrap();
        assert_eq!(t.value(gth).data(), &[4.0, 6.0, 4.0, 6.0, 2.0, 5.0]);
        let l = t.sum(gth);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn segment_softmax_and_sum_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, 2.0, 5.0, 3.0]).unwrap());
        let y = t.segment_softmax(x, Rc::new(vec![0..2, 2..3])).unwrap();
        let d = t.value(y).data().to_vec();
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[2] - 0.5).abs() < 1e-15);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
        assert_eq!(&d[4..], &[1.0, 1.0]);
        let s = t.segment_sum(x, Rc::new(vec![0..3, 1..1])).unwrap();
        assert_eq!(t.value(s).shape(), &[2, 2]);
        assert_eq!(t.value(s).data(), &[5.0, 6.0, 0.0, 0.0]);
        assert!(t.segment_sum(x, Rc::new(vec![0..4])).is_err());
    }
}
