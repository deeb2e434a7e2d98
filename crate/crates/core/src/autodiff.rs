//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! A [`Tape`] records every primitive op in execution order. Node inputs
//! always precede the node, so the backward sweep is a single reverse pass.
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op.
//!
//! ```
//! use gpvae::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x).item(), 6.0);
//! ```
//!
//! Ops that are awkward to express with the built-in primitives (banded
//! solves, closed-form divergences) plug in through [`CustomOp`].

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op implemented outside this module.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and returns one gradient per input (same shapes).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    MatMul,
    Conv1dSame,
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Sum,
    Broadcast,
    Reshape,
    SliceLast { start: usize, end: usize },
    Custom(Arc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Conv1dSame => "conv1d_same",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Broadcast => "broadcast",
            Op::Reshape => "reshape",
            Op::SliceLast { .. } => "slice_last",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one accumulated gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

struct ConvDims {
    batch: usize,
    len: usize,
    c_in: usize,
    c_out: usize,
    width: usize,
    pad: usize,
}

impl ConvDims {
    fn of(x: &Tensor, w: &Tensor) -> Result<Self> {
        if x.shape.len() != 3 || w.shape.len() != 3 || x.shape[2] != w.shape[1] {
            return Err(Error::shape(
                "conv1d_same",
                format!("input {:?}, filter {:?}", x.shape, w.shape),
            ));
        }
        if w.shape[0] == 0 {
            return Err(Error::shape("conv1d_same", "empty filter"));
        }
        Ok(ConvDims {
            batch: x.shape[0],
            len: x.shape[1],
            c_in: x.shape[2],
            c_out: w.shape[2],
            width: w.shape[0],
            pad: (w.shape[0] - 1) / 2,
        })
    }

    /// Input time index feeding output step `t` through filter tap `s`.
    fn source(&self, t: usize, s: usize) -> Option<usize> {
        let idx = (t + s).checked_sub(self.pad)?;
        (idx < self.len).then_some(idx)
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

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient (data, masks, noise).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            inputs: Vec::new(),
            value: t,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let v = x.zip(y, |p, q| p + q);
        self.push(Op::Add, vec![a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let v = x.zip(y, |p, q| p - q);
        self.push(Op::Sub, vec![a, b], v)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let v = x.zip(y, |p, q| p * q);
        self.push(Op::Mul, vec![a, b], v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, vec![a], v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape.len() != 2 || y.shape.len() != 2 || x.shape[1] != y.shape[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", x.shape, y.shape),
            ));
        }
        let (m, k, n) = (x.shape[0], x.shape[1], y.shape[1]);
        let v = Tensor {
            shape: vec![m, n],
            data: matmul_raw(&x.data, &y.data, m, k, n),
        };
        self.push(Op::MatMul, vec![a, b], v)
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `x` is `[batch, T, c_in]`, `w` is `[width, c_in, c_out]`; the output is
    /// `[batch, T, c_out]`. Padding puts `(width - 1) / 2` zeros before the
    /// sequence and the remainder after it, so step `t` sees inputs
    /// `t - pad ..= t - pad + width - 1`.
    pub fn conv1d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = ConvDims::of(xv, wv)?;
        let mut out = vec![0.0; d.batch * d.len * d.c_out];
        for b in 0..d.batch {
            for t in 0..d.len {
                let o_row = &mut out[(b * d.len + t) * d.c_out..][..d.c_out];
                for s in 0..d.width {
                    let Some(src) = d.source(t, s) else { continue };
                    let x_row = &xv.data[(b * d.len + src) * d.c_in..][..d.c_in];
                    for (c, &xc) in x_row.iter().enumerate() {
                        if xc == 0.0 {
                            continue;
                        }
                        let w_row = &wv.data[(s * d.c_in + c) * d.c_out..][..d.c_out];
                        for (o, &wc) in o_row.iter_mut().zip(w_row) {
                            *o += xc * wc;
                        }
                    }
                }
            }
        }
        let v = Tensor {
            shape: vec![d.batch, d.len, d.c_out],
            data: out,
        };
        self.push(Op::Conv1dSame, vec![x, w], v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu, vec![a], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(stable_sigmoid);
        self.push(Op::Sigmoid, vec![a], v)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(stable_softplus);
        self.push(Op::Softplus, vec![a], v)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp, vec![a], v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("argument {bad} is not positive"),
            });
        }
        let v = x.map(f64::ln);
        self.push(Op::Log, vec![a], v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square, vec![a], v)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    /// Repeat `a` over leading axes so it takes `shape`. The shape of `a`
    /// must equal the trailing axes of `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let r = x.shape.len();
        if r > shape.len() || x.shape[..] != shape[shape.len() - r..] {
            return Err(Error::shape(
                "broadcast",
                format!("{:?} -> {shape:?}", x.shape),
            ));
        }
        let reps: usize = shape[..shape.len() - r].iter().product();
        let mut data = Vec::with_capacity(reps * x.len());
        for _ in 0..reps {
            data.extend_from_slice(&x.data);
        }
        let v = Tensor {
            shape: shape.to_vec(),
            data,
        };
        self.push(Op::Broadcast, vec![a], v)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape, vec![a], v)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let last = *x.shape.last().unwrap_or(&0);
        if x.shape.is_empty() || start > end || end > last {
            return Err(Error::shape(
                "slice_last",
                format!("{start}..{end} of {:?}", x.shape),
            ));
        }
        let width = end - start;
        let rows = x.len() / last.max(1);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&x.data[r * last + start..r * last + end]);
        }
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = width;
        self.push(
            Op::SliceLast { start, end },
            vec![a],
            Tensor { shape, data },
        )
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        self.push(Op::Custom(op), inputs.to_vec(), out)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::NotScalar(out.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(&out.shape, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let input_grads = self.adjoint(node, &g)?;
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                if matches!(self.nodes[inp.0].op, Op::Constant) {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        let y = &node.value;
        let grads = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![g.zip(input(1), |a, b| a * b), g.zip(input(0), |a, b| a * b)],
            Op::Scale(c) => vec![g.map(|v| v * c)],
            Op::AddScalar => vec![g.clone()],
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g.data[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &b.data[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g.data[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = a.data[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += aip * gv;
                        }
                    }
                }
                vec![
                    Tensor {
                        shape: a.shape.clone(),
                        data: da,
                    },
                    Tensor {
                        shape: b.shape.clone(),
                        data: db,
                    },
                ]
            }
            Op::Conv1dSame => {
                let (x, w) = (input(0), input(1));
                let d = ConvDims::of(x, w)?;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                for b in 0..d.batch {
                    for t in 0..d.len {
                        let g_row = &g.data[(b * d.len + t) * d.c_out..][..d.c_out];
                        for s in 0..d.width {
                            let Some(src) = d.source(t, s) else { continue };
                            let xoff = (b * d.len + src) * d.c_in;
                            for c in 0..d.c_in {
                                let woff = (s * d.c_in + c) * d.c_out;
                                let w_row = &w.data[woff..woff + d.c_out];
                                dx[xoff + c] +=
                                    g_row.iter().zip(w_row).map(|(a, b)| a * b).sum::<f64>();
                                let xc = x.data[xoff + c];
                                if xc != 0.0 {
                                    for (o, &gv) in dw[woff..woff + d.c_out].iter_mut().zip(g_row) {
                                        *o += xc * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![
                    Tensor {
                        shape: x.shape.clone(),
                        data: dx,
                    },
                    Tensor {
                        shape: w.shape.clone(),
                        data: dw,
                    },
                ]
            }
            Op::Relu => vec![g.zip(input(0), |gv, a| if a > 0.0 { gv } else { 0.0 })],
            Op::Sigmoid => vec![g.zip(y, |gv, s| gv * s * (1.0 - s))],
            Op::Softplus => vec![g.zip(input(0), |gv, a| gv * stable_sigmoid(a))],
            Op::Exp => vec![g.zip(y, |gv, e| gv * e)],
            Op::Log => vec![g.zip(input(0), |gv, a| gv / a)],
            Op::Square => vec![g.zip(input(0), |gv, a| 2.0 * a * gv)],
            Op::Sum => vec![Tensor::full(&input(0).shape, g.item())],
            Op::Broadcast => {
                let a = input(0);
                let mut acc = vec![0.0; a.len()];
                for chunk in g.data.chunks(a.len().max(1)) {
                    for (o, v) in acc.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                vec![Tensor {
                    shape: a.shape.clone(),
                    data: acc,
                }]
            }
            Op::Reshape => vec![g.clone().reshaped(&input(0).shape)?],
            Op::SliceLast { start, end } => {
                let a = input(0);
                let last = *a.shape.last().unwrap();
                let width = end - start;
                let mut da = vec![0.0; a.len()];
                for (r, chunk) in g.data.chunks(width.max(1)).enumerate() {
                    if width == 0 {
                        break;
                    }
                    da[r * last + start..r * last + end].copy_from_slice(chunk);
                }
                vec![Tensor {
                    shape: a.shape.clone(),
                    data: da,
                }]
            }
            Op::Custom(op) => {
                let vals: Vec<&Tensor> =
                    node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gs = op.backward(&vals, y, g)?;
                if gs.len() != vals.len() || gs.iter().zip(&vals).any(|(a, b)| a.shape != b.shape) {
                    return Err(Error::shape(
                        "custom backward",
                        format!("{} returned mismatched gradients", op.name()),
                    ));
                }
                gs
            }
        };
        Ok(grads)
    }
}

/// Max over coordinates of `|g_ad - g_fd| / (|g_fd| + 1e-8)`, comparing the
/// tape gradient of `f` at `point` against central differences with `step`.
pub fn gradient_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let ad = tape.backward(y)?.wrt(x);

    let eval = |p: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(p);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data[i] += step;
        let mut minus = point.clone();
        minus.data[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (ad.data[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from(seed);
        let n = shape.iter().product();
        t(
            shape,
            &(0..n)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = tape.leaf(t(&[2, 2], &[1.5, -2.0, 3.0, 0.25]));
        let y = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(y), tape.value(a));
    }

    #[test]
    fn conv_identity_filter() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4, 1], &[1.0, -2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d_same(x, w).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv_same_padding_keeps_length_and_alignment() {
        // width 3 filter [1, 0, 0] picks the previous step
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(t(&[3, 1, 1], &[1.0, 0.0, 0.0]));
        let y = tape.conv1d_same(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
    }

    #[test]
    fn sum_relu_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        let z = tape.leaf(Tensor::from_vec(vec![0.0]));
        assert!(matches!(tape.log(z), Err(Error::Domain { .. })));
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let big = tape.leaf(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn disconnected_leaf_gets_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = tape.leaf(t(&[2, 2], &[1.0; 4]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&[3, 2], 5));
        let w = tape.leaf(random(&[2, 4], 6));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(h).unwrap();
        let l = tape.sum(s).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
        assert_eq!(g1.wrt(w), g2.wrt(w));
    }

    #[test]
    fn gradient_check_trivial_cases() {
        let p = random(&[5], 1);
        let err = gradient_check(
            |tape, x| {
                let s = tape.square(x)?;
                tape.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let err = gradient_check(
            |tape, x| {
                let z = tape.scale(x, 0.0)?;
                tape.sum(z)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    /// Each primitive, contracted against fixed random weights so the
    /// reduction to a scalar exercises every output coordinate.
    fn primitive_error(name: &str, seed: u64) -> f64 {
        let shape = [2, 3, 4];
        let weights = random(&[64], seed + 100);
        let point = random(&shape, seed);
        let positive = point.map(|v| v.abs() + 0.5);
        let contract = |tape: &mut Tape, y: Var| -> Result<Var> {
            let n = tape.value(y).len();
            let w = tape.constant(
                Tensor::new(tape.value(y).shape.clone(), weights.data[..n].to_vec()).unwrap(),
            );
            let p = tape.mul(y, w)?;
            tape.sum(p)
        };
        let other = random(&shape, seed + 7);
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let y = match name {
                "add" => {
                    let o = tape.leaf(other.clone());
                    tape.add(x, o)?
                }
                "sub" => {
                    let o = tape.leaf(other.clone());
                    tape.sub(o, x)?
                }
                "mul" => {
                    let o = tape.leaf(other.clone());
                    tape.mul(x, o)?
                }
                "matmul" => {
                    let a = tape.reshape(x, &[6, 4])?;
                    let b = tape.constant(random(&[4, 3], seed + 3));
                    tape.matmul(a, b)?
                }
                "matmul_rhs" => {
                    let b = tape.reshape(x, &[4, 6])?;
                    let a = tape.constant(random(&[3, 4], seed + 3));
                    tape.matmul(a, b)?
                }
                "conv_x" => {
                    let w = tape.constant(random(&[3, 4, 2], seed + 4));
                    tape.conv1d_same(x, w)?
                }
                "conv_w" => {
                    let xin = tape.constant(random(&[2, 5, 2], seed + 4));
                    let w = tape.reshape(x, &[3, 2, 4])?;
                    tape.conv1d_same(xin, w)?
                }
                "conv_even" => {
                    let w = tape.constant(random(&[2, 4, 3], seed + 4));
                    tape.conv1d_same(x, w)?
                }
                "relu" => tape.relu(x)?,
                "sigmoid" => tape.sigmoid(x)?,
                "softplus" => tape.softplus(x)?,
                "exp" => tape.exp(x)?,
                "log" => {
                    let sq = tape.square(x)?;
                    let pos = tape.add_scalar(sq, 0.5)?;
                    tape.log(pos)?
                }
                "square" => tape.square(x)?,
                "scale" => tape.scale(x, -1.7)?,
                "broadcast" => {
                    let s = tape.slice_last(x, 1, 3)?;
                    let r = tape.reshape(s, &[12])?;
                    tape.broadcast(r, &[2, 12])?
                }
                "slice" => tape.slice_last(x, 1, 3)?,
                "sum" => {
                    let s = tape.sum(x)?;
                    return tape.square(s);
                }
                _ => unreachable!(),
            };
            contract(tape, y)
        };
        let at = if name == "log" { &positive } else { &point };
        gradient_check(f, at, 1e-5).unwrap()
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for name in [
            "add",
            "sub",
            "mul",
            "matmul",
            "matmul_rhs",
            "conv_x",
            "conv_w",
            "conv_even",
            "relu",
            "sigmoid",
            "softplus",
            "exp",
            "log",
            "square",
            "scale",
            "broadcast",
            "slice",
            "sum",
        ] {
            for seed in 0..3 {
                let err = primitive_error(name, seed);
                assert!(err < 1e-4, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let x = random(&[5, 3], 11);
        let w2 = random(&[4, 2], 12);
        let w1 = random(&[3, 4], 13);
        let err = gradient_check(
            |tape, w| {
                let xi = tape.constant(x.clone());
                let h = tape.matmul(xi, w)?;
                let h = tape.relu(h)?;
                let w2v = tape.leaf(w2.clone());
                let o = tape.matmul(h, w2v)?;
                let o = tape.sigmoid(o)?;
                let o = tape.square(o)?;
                tape.sum(o)
            },
            &w1,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn reshape_and_broadcast_preserve_totals(data in prop::collection::vec(-10.0f64..10.0, 6)) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![2, 3], data.clone()).unwrap());
            let b = tape.broadcast(x, &[4, 2, 3]).unwrap();
            let s = tape.sum(b).unwrap();
            let total: f64 = data.iter().sum();
            prop_assert!((tape.value(s).item() - 4.0 * total).abs() < 1e-9);
            let g = tape.backward(s).unwrap().wrt(x);
            prop_assert!(g.data().iter().all(|&v| v == 4.0));
        }
    }
}
