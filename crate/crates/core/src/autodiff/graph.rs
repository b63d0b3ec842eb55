//! Tape-based reverse-mode differentiation.
//!
//! Every value produced through a [`Graph`] is appended to its node list, so
//! the list is already in topological order. [`Graph::backward`] walks it once
//! in reverse and adds each node's vector-Jacobian product into its inputs.
//!
//! Non-differentiable points (relu at 0, clamp at its bounds, ties in `min`)
//! always take the first-argument branch: `relu(x) = max(x, 0)` passes the
//! gradient at `x == 0`, `clamp` passes it at `x == lo` or `x == hi`, and `min`
//! sends it to the left operand on ties.

use crate::error::{Error, Result};

use super::kernels::{col2im, gemm, im2col, Trans};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise sum of equal shapes, or a bias `[n]` added along the last axis.
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Square,
    Softmax,
    LogSoftmax,
    /// Picks one entry per row: `[b, n] -> [b]`.
    Gather(Vec<usize>),
    Sum,
    Mean,
    SumLastAxis,
    Min,
    Clamp { lo: f64, hi: f64 },
    Scale(f64),
    AddScalar(f64),
    /// `x: [b, c_in, len]`, `w: [c_out, c_in, k]`, optional bias `[c_out]`.
    Conv1d { stride: usize, pad_left: usize, pad_right: usize },
    Reshape(Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    // `None` for leaves and for values computed from constants only.
    op: Option<(Primitive, Vec<Var>)>,
}

/// A computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It is differentiated iff `tensor.requires_grad()`.
    /// Any gradient already stored on the tensor is discarded.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        if tensor.requires_grad() {
            tensor.zero_grad();
        }
        self.push(tensor, None)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Accumulated gradient of a differentiable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let node = &self.nodes[v.0];
        if node.op.is_some() {
            return None;
        }
        node.value.grad()
    }

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<Var>)>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("variable {} does not belong to this tape", v.0)));
        }
        Ok(())
    }

    /// Evaluates a primitive and records it when any input is differentiable.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check_var(v)?;
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(&prim, &vals)?;
        if !out.is_finite() {
            return Err(Error::Numerical(format!("{prim:?} produced a non-finite value")));
        }
        let record = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        let mut out = out;
        if record {
            out.set_requires_grad(true);
            Ok(self.push(out, Some((prim, inputs.to_vec()))))
        } else {
            Ok(self.push(out, None))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather(index), &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn sum_last_axis(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::SumLastAxis, &[a])
    }
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Min, &[a, b])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(c), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[a])
    }
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        let prim = Primitive::Conv1d { stride, pad_left, pad_right };
        match bias {
            Some(b) => self.apply(prim, &[x, w, b]),
            None => self.apply(prim, &[x, w]),
        }
    }

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        if !root.requires_grad() {
            return Err(Error::Graph("loss is detached from every differentiable leaf".into()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                None => {
                    let node = &mut self.nodes[i];
                    if node.value.requires_grad() {
                        node.value.accumulate_grad(&g)?;
                    }
                }
                Some((prim, inputs)) => {
                    let vals: Vec<&Tensor> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let wants: Vec<bool> = vals.iter().map(|t| t.requires_grad()).collect();
                    let out = &self.nodes[i].value;
                    let input_grads = vjp(prim, &vals, out, &g, &wants)?;
                    for (v, dg) in inputs.iter().zip(input_grads) {
                        let Some(dg) = dg else { continue };
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                            slot => *slot = Some(dg),
                        }
                    }
                }
            }
        }

        for node in &self.nodes[..=loss.0] {
            if let (None, Some(g)) = (&node.op, node.value.grad()) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical("backward produced a non-finite gradient".into()));
                }
            }
        }
        Ok(())
    }
}

fn shape_err(prim: &Primitive, msg: impl std::fmt::Display) -> Error {
    Error::Shape(format!("{prim:?}: {msg}"))
}

fn expect_arity(prim: &Primitive, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(shape_err(prim, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        .expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn last_axis(prim: &Primitive, t: &Tensor) -> Result<(usize, usize)> {
    let n = *t.shape().last().ok_or_else(|| shape_err(prim, "needs at least one axis"))?;
    if n == 0 {
        return Err(shape_err(prim, "empty last axis"));
    }
    Ok((t.len() / n, n))
}

fn is_bias_of(a: &Tensor, b: &Tensor) -> bool {
    b.shape().len() == 1 && a.shape().len() > 1 && a.shape().last() == b.shape().first()
}

fn conv_out_len(len: usize, k: usize, stride: usize, pl: usize, pr: usize) -> Option<usize> {
    let padded = len + pl + pr;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn forward(prim: &Primitive, x: &[&Tensor]) -> Result<Tensor> {
    use Primitive::*;
    let unary = matches!(
        prim,
        Relu | Exp
            | Log
            | Square
            | Softmax
            | LogSoftmax
            | Gather(_)
            | Sum
            | Mean
            | SumLastAxis
            | Clamp { .. }
            | Scale(_)
            | AddScalar(_)
            | Reshape(_)
    );
    if unary {
        expect_arity(prim, x, 1)?;
    }
    match prim {
        MatMul => {
            expect_arity(prim, x, 2)?;
            let (a, b) = (x[0], x[1]);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(shape_err(prim, format!("{:?} x {:?}", a.shape(), b.shape())));
            };
            if k != k2 {
                return Err(shape_err(prim, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), Trans::No, b.data(), Trans::No, &mut out, false);
            Tensor::new(vec![m, n], out)
        }
        Add | Sub | Mul | Min => {
            expect_arity(prim, x, 2)?;
            let (a, b) = (x[0], x[1]);
            if a.shape() == b.shape() {
                Ok(match prim {
                    Add => zip_map(a, b, |p, q| p + q),
                    Sub => zip_map(a, b, |p, q| p - q),
                    Mul => zip_map(a, b, |p, q| p * q),
                    _ => zip_map(a, b, |p, q| if p <= q { p } else { q }),
                })
            } else if matches!(prim, Add) && is_bias_of(a, b) {
                let n = b.len();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v + b.data()[i % n])
                    .collect();
                Tensor::new(a.shape().to_vec(), data)
            } else {
                Err(shape_err(prim, format!("{:?} vs {:?}", a.shape(), b.shape())))
            }
        }
        Relu => Ok(map(x[0], |v| v.max(0.0))),
        Exp => Ok(map(x[0], f64::exp)),
        Log => Ok(map(x[0], f64::ln)),
        Square => Ok(map(x[0], |v| v * v)),
        Scale(c) => Ok(map(x[0], |v| v * c)),
        AddScalar(c) => Ok(map(x[0], |v| v + c)),
        Clamp { lo, hi } => {
            if lo > hi {
                return Err(shape_err(prim, "lower bound above upper bound"));
            }
            Ok(map(x[0], |v| v.max(*lo).min(*hi)))
        }
        Softmax | LogSoftmax => {
            let t = x[0];
            let (rows, n) = last_axis(prim, t)?;
            let mut out = vec![0.0; t.len()];
            for r in 0..rows {
                let row = &t.data()[r * n..(r + 1) * n];
                let o = &mut out[r * n..(r + 1) * n];
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                if matches!(prim, Softmax) {
                    for (o, v) in o.iter_mut().zip(row) {
                        *o = (v - max).exp() / z;
                    }
                } else {
                    let lz = z.ln();
                    for (o, v) in o.iter_mut().zip(row) {
                        *o = v - max - lz;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), out)
        }
        Gather(index) => {
            let t = x[0];
            let &[rows, n] = t.shape() else {
                return Err(shape_err(prim, format!("needs a matrix, got {:?}", t.shape())));
            };
            if index.len() != rows {
                return Err(shape_err(prim, format!("{} indices for {rows} rows", index.len())));
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &i) in index.iter().enumerate() {
                if i >= n {
                    return Err(shape_err(prim, format!("index {i} out of range {n}")));
                }
                out.push(t.data()[r * n + i]);
            }
            Ok(Tensor::from_vec(out))
        }
        Sum => Ok(Tensor::scalar(x[0].data().iter().sum())),
        Mean => {
            if x[0].is_empty() {
                return Err(shape_err(prim, "mean of an empty tensor"));
            }
            Ok(Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64))
        }
        SumLastAxis => {
            let t = x[0];
            let (rows, n) = last_axis(prim, t)?;
            let out = t.data().chunks(n).map(|c| c.iter().sum()).collect();
            debug_assert_eq!(rows * n, t.len());
            Tensor::new(t.shape()[..t.shape().len() - 1].to_vec(), out)
        }
        Reshape(shape) => x[0].clone().reshape(shape.clone()).map(|mut t| {
            t.set_requires_grad(false);
            t
        }),
        Conv1d { stride, pad_left, pad_right } => {
            if x.len() != 2 && x.len() != 3 {
                return Err(shape_err(prim, "expects input, weight and optional bias"));
            }
            let (inp, w) = (x[0], x[1]);
            let (&[b, c_in, len], &[c_out, c_in2, k]) = (inp.shape(), w.shape()) else {
                return Err(shape_err(prim, format!("{:?} with kernel {:?}", inp.shape(), w.shape())));
            };
            if c_in != c_in2 {
                return Err(shape_err(prim, format!("{c_in} input channels, kernel expects {c_in2}")));
            }
            let l_out = conv_out_len(len, k, *stride, *pad_left, *pad_right)
                .ok_or_else(|| shape_err(prim, "kernel longer than padded input"))?;
            if let Some(bias) = x.get(2) {
                if bias.shape() != [c_out] {
                    return Err(shape_err(prim, format!("bias shape {:?}", bias.shape())));
                }
            }
            let cols = im2col(inp.data(), b, c_in, len, k, *stride, *pad_left, l_out);
            let rows = b * l_out;
            let mut mat = vec![0.0; rows * c_out];
            gemm(rows, c_in * k, c_out, &cols, Trans::No, w.data(), Trans::Yes, &mut mat, false);
            let mut out = vec![0.0; b * c_out * l_out];
            for bi in 0..b {
                for o in 0..l_out {
                    for co in 0..c_out {
                        let bias = x.get(2).map_or(0.0, |t| t.data()[co]);
                        out[(bi * c_out + co) * l_out + o] = mat[(bi * l_out + o) * c_out + co] + bias;
                    }
                }
            }
            Tensor::new(vec![b, c_out, l_out], out)
        }
    }
}

/// Vector-Jacobian products for each input; `None` where no gradient is wanted.
fn vjp(
    prim: &Primitive,
    x: &[&Tensor],
    out: &Tensor,
    g: &[f64],
    wants: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    use Primitive::*;
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
    let res = match prim {
        MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = wants[0].then(|| {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, Trans::No, b.data(), Trans::Yes, &mut da, false);
                da
            });
            let db = wants[1].then(|| {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Trans::Yes, g, Trans::No, &mut db, false);
                db
            });
            vec![da, db]
        }
        Add => {
            let (a, b) = (x[0], x[1]);
            let db = wants[1].then(|| {
                if a.shape() == b.shape() {
                    g.to_vec()
                } else {
                    let n = b.len();
                    let mut db = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        db[i % n] += v;
                    }
                    db
                }
            });
            vec![wants[0].then(|| g.to_vec()), db]
        }
        Sub => vec![wants[0].then(|| g.to_vec()), wants[1].then(|| g.iter().map(|v| -v).collect())],
        Mul => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![
                wants[0].then(|| elementwise(&|i| g[i] * b[i])),
                wants[1].then(|| elementwise(&|i| g[i] * a[i])),
            ]
        }
        Min => {
            let (a, b) = (x[0].data(), x[1].data());
            vec![
                wants[0].then(|| elementwise(&|i| if a[i] <= b[i] { g[i] } else { 0.0 })),
                wants[1].then(|| elementwise(&|i| if a[i] <= b[i] { 0.0 } else { g[i] })),
            ]
        }
        Relu => {
            let a = x[0].data();
            vec![Some(elementwise(&|i| if a[i] >= 0.0 { g[i] } else { 0.0 }))]
        }
        Exp => vec![Some(elementwise(&|i| g[i] * out.data()[i]))],
        Log => {
            let a = x[0].data();
            vec![Some(elementwise(&|i| g[i] / a[i]))]
        }
        Square => {
            let a = x[0].data();
            vec![Some(elementwise(&|i| 2.0 * a[i] * g[i]))]
        }
        Scale(c) => vec![Some(elementwise(&|i| g[i] * c))],
        AddScalar(_) | Reshape(_) => vec![Some(g.to_vec())],
        Clamp { lo, hi } => {
            let a = x[0].data();
            vec![Some(elementwise(&|i| if a[i] >= *lo && a[i] <= *hi { g[i] } else { 0.0 }))]
        }
        Softmax => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let s = r * n..(r + 1) * n;
                let dot: f64 = y[s.clone()].iter().zip(&g[s.clone()]).map(|(p, q)| p * q).sum();
                for j in s {
                    dx[j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        LogSoftmax => {
            let n = *out.shape().last().unwrap();
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..y.len() / n {
                let s = r * n..(r + 1) * n;
                let total: f64 = g[s.clone()].iter().sum();
                for j in s {
                    dx[j] = g[j] - y[j].exp() * total;
                }
            }
            vec![Some(dx)]
        }
        Gather(index) => {
            let n = x[0].shape()[1];
            let mut dx = vec![0.0; x[0].len()];
            for (r, &i) in index.iter().enumerate() {
                dx[r * n + i] += g[r];
            }
            vec![Some(dx)]
        }
        Sum => vec![Some(vec![g[0]; x[0].len()])],
        Mean => vec![Some(vec![g[0] / x[0].len() as f64; x[0].len()])],
        SumLastAxis => {
            let n = *x[0].shape().last().unwrap();
            vec![Some((0..x[0].len()).map(|j| g[j / n]).collect())]
        }
        Conv1d { stride, pad_left, .. } => {
            let (inp, w) = (x[0], x[1]);
            let (b, c_in, len) = (inp.shape()[0], inp.shape()[1], inp.shape()[2]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            let l_out = out.shape()[2];
            let rows = b * l_out;
            // Gradient w.r.t. the im2col product, laid out as [b * l_out, c_out].
            let mut dmat = vec![0.0; rows * c_out];
            for bi in 0..b {
                for co in 0..c_out {
                    for o in 0..l_out {
                        dmat[(bi * l_out + o) * c_out + co] = g[(bi * c_out + co) * l_out + o];
                    }
                }
            }
            let dx = wants[0].then(|| {
                let mut dcols = vec![0.0; rows * c_in * k];
                gemm(rows, c_out, c_in * k, &dmat, Trans::No, w.data(), Trans::No, &mut dcols, false);
                col2im(&dcols, b, c_in, len, k, *stride, *pad_left, l_out)
            });
            let dw = wants[1].then(|| {
                let cols = im2col(inp.data(), b, c_in, len, k, *stride, *pad_left, l_out);
                let mut dw = vec![0.0; c_out * c_in * k];
                gemm(c_out, rows, c_in * k, &dmat, Trans::Yes, &cols, Trans::No, &mut dw, false);
                dw
            });
            let mut res = vec![dx, dw];
            if x.len() == 3 {
                res.push(wants[2].then(|| {
                    let mut db = vec![0.0; c_out];
                    for row in dmat.chunks(c_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    db
                }));
            }
            res
        }
    };
    Ok(res)
}
