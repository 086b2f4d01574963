//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse from a scalar root and
//! returns [`Gradients`] for every node that requires them. Parameters enter
//! the tape through [`Graph::param`]; frozen ones become constants, so no
//! gradient work is spent on them.
//!
//! Matrices are row-major. Image batches use `[B, C, H, W]`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_2d, gemm, numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias { x: usize, bias: usize },
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    LnClamped { x: usize, lo: f64, hi: f64 },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    LogSumExp(usize),
    LogSumExpAxis { x: usize, axis: usize },
    BatchMatMul { a: usize, b: usize, ta: bool, tb: bool },
    CosineRows { a: usize, b: usize, eps: f64 },
    Stack(Vec<usize>),
    Pick { x: usize, idx: Vec<usize> },
    Reshape(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<Vec<f64>> },
    Upsample2(usize),
    AvgPool2(usize),
    GlobalAvgPool(usize),
    NchwToRows(usize),
    BroadcastSpatial(usize),
    ConcatChannels(usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    frozen_prefixes: Vec<String>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph with no parameter store; inputs come from [`Graph::leaf`].
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Graph::new()
        }
    }

    /// Treat every parameter whose name starts with `prefix` as a constant in
    /// this graph, regardless of its trainable flag.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter to this graph. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let store = self.store.expect("graph created without a parameter store");
        let p = store.get(id);
        let frozen = self.frozen_prefixes.iter().any(|pre| p.name.starts_with(pre.as_str()));
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable && !frozen);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    /// Copies the value into a fresh constant node, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, true, b, false)
    }

    fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_2d("matmul", av)?;
        check_2d("matmul", bv)?;
        let (m, ka) = if ta { (av.cols(), av.rows()) } else { (av.rows(), av.cols()) };
        let (kb, n) = if tb { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {:?}{} x {:?}{}",
                    av.shape(),
                    if ta { "^T" } else { "" },
                    bv.shape(),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, ka, n, av.data(), ta, bv.data(), tb, &mut out, 0.0);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a: a.0, b: b.0, ta, tb },
            rg,
        ))
    }

    /// Independent products of matching slices of two `[G, p, q]` tensors,
    /// each optionally transposed.
    pub fn batch_matmul(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 3 || bv.ndim() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::shape(
                "batch_matmul",
                format!("operands {:?} and {:?} are not matching [G, p, q] stacks", av.shape(), bv.shape()),
            ));
        }
        let (sa, sb) = (av.shape(), bv.shape());
        let groups = sa[0];
        let (m, ka) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if ka != kb {
            return Err(Error::shape(
                "batch_matmul",
                format!("inner dimensions differ: {:?} x {:?}", sa, sb),
            ));
        }
        let mut out = vec![0.0; groups * m * n];
        for gi in 0..groups {
            gemm(
                m,
                ka,
                n,
                &av.data()[gi * m * ka..(gi + 1) * m * ka],
                ta,
                &bv.data()[gi * ka * n..(gi + 1) * ka * n],
                tb,
                &mut out[gi * m * n..(gi + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::BatchMatMul { a: a.0, b: b.0, ta, tb },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        check_2d("transpose", av)?;
        let t = av.transpose();
        let rg = self.rg(&[a.0]);
        Ok(self.push(t, Op::Transpose(a.0), rg))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("operands {:?} and {:?}", sa, sb)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a `[d]` vector to every row of an `n x d` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        check_2d("add_bias", xv)?;
        if bv.shape() != [xv.cols()] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not fit rows of {:?}", bv.shape(), xv.shape()),
            ));
        }
        let d = xv.cols();
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % d];
        }
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(out, Op::AddBias { x: x.0, bias: bias.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a.0]);
        self.push(t, Op::AddScalar(a.0), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let rg = self.rg(&[a.0]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a.0, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log of the input clamped to `[lo, hi]`; zero gradient outside.
    pub fn ln_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::LnClamped { x: a.0, lo, hi }, |x| x.clamp(lo, hi).ln())
    }

    // ----- normalisation --------------------------------------------------

    /// Softmax along `axis` of any tensor, stabilised by max
    /// subtraction. Entries where `keep` is false get probability zero and
    /// take no part in the normalisation; a fully masked slice is all zeros.
    pub fn softmax(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let lanes = Lanes::new("softmax", xv.shape(), axis)?;
        if let Some(k) = keep {
            if k.len() != xv.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} entries for shape {:?}", k.len(), xv.shape()),
                ));
            }
        }
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for g in 0..lanes.count {
            let kept = |t: usize| keep.is_none_or(|k| k[lanes.at(g, t)]);
            let mut max = f64::NEG_INFINITY;
            for t in 0..lanes.len {
                if kept(t) {
                    max = max.max(src[lanes.at(g, t)]);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for t in 0..lanes.len {
                if kept(t) {
                    let e = (src[lanes.at(g, t)] - max).exp();
                    out[lanes.at(g, t)] = e;
                    total += e;
                }
            }
            for t in 0..lanes.len {
                out[lanes.at(g, t)] /= total;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Softmax { x: x.0, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let lanes = Lanes::new("log_softmax", xv.shape(), axis)?;
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for g in 0..lanes.count {
            let max = (0..lanes.len)
                .map(|t| src[lanes.at(g, t)])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + (0..lanes.len)
                    .map(|t| (src[lanes.at(g, t)] - max).exp())
                    .sum::<f64>()
                    .ln();
            for t in 0..lanes.len {
                out[lanes.at(g, t)] = src[lanes.at(g, t)] - lse;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::LogSoftmax { x: x.0, axis }, rg))
    }

    /// Row-wise layer normalisation with learned gain and bias (biased variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_2d("layer_norm", xv)?;
        let (n, d) = (xv.rows(), xv.cols());
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for rows of width {d}", gv.shape(), bv.shape()),
            ));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x.0, gain.0, bias.0]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a.0]);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    /// Column means of an `n x d` matrix, as a `[d]` vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        check_2d("mean_rows", v)?;
        let (n, d) = (v.rows(), v.cols());
        if n == 0 {
            return Err(Error::DegenerateInput("mean over zero rows".into()));
        }
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(a.0), rg))
    }

    /// `log(sum(exp(x)))` over all entries, stabilised by max subtraction.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(Error::DegenerateInput("logsumexp of an empty tensor".into()));
        }
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s = max + v.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::LogSumExp(a.0), rg))
    }

    /// Log-sum-exp along `axis`; the axis is removed from the shape.
    pub fn logsumexp_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let lanes = Lanes::new("logsumexp_axis", v.shape(), axis)?;
        if lanes.len == 0 {
            return Err(Error::DegenerateInput("logsumexp over an empty axis".into()));
        }
        let src = v.data();
        let out = (0..lanes.count)
            .map(|l| {
                let max = (0..lanes.len).map(|t| src[lanes.at(l, t)]).fold(f64::NEG_INFINITY, f64::max);
                max + (0..lanes.len).map(|t| (src[lanes.at(l, t)] - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSumExpAxis { x: a.0, axis }, rg))
    }

    /// Cosine similarity between matching rows of two `n x d` matrices, as
    /// `[n]`. The norm product is floored at `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        check_2d("cosine_rows", av)?;
        let n = av.rows();
        let out = (0..n)
            .map(|i| {
                let (x, y) = (av.row(i), bv.row(i));
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx: f64 = x.iter().map(|p| p * p).sum();
                let ny: f64 = y.iter().map(|q| q * q).sum();
                dot / (nx * ny).sqrt().max(eps)
            })
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::vector(out), Op::CosineRows { a: a.0, b: b.0, eps }, rg))
    }

    // ----- structural -----------------------------------------------------

    /// Packs single-element tensors into a tensor of the given shape.
    pub fn stack(&mut self, items: &[Var], shape: &[usize]) -> Result<Var> {
        if numel(shape) != items.len() {
            return Err(Error::shape(
                "stack",
                format!("{} items for shape {:?}", items.len(), shape),
            ));
        }
        let mut data = Vec::with_capacity(items.len());
        for v in items {
            let t = &self.nodes[v.0].value;
            if t.len() != 1 {
                return Err(Error::shape("stack", format!("item of shape {:?}", t.shape())));
            }
            data.push(t.data()[0]);
        }
        let idx: Vec<usize> = items.iter().map(|v| v.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::Stack(idx), rg))
    }

    /// Selects flat (row-major) entries into a `[idx.len()]` vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::shape("pick", format!("index {bad} outside {:?}", v.shape())));
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::vector(data), Op::Pick { x: x.0, idx: idx.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(t, Op::Reshape(x.0), rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_2d("slice_rows", v)?;
        if start + len > v.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, v.shape()),
            ));
        }
        let c = v.cols();
        let data = v.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x: x.0, start }, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_2d("slice_cols", v)?;
        if start > end || end > v.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{end} of {:?}", v.shape()),
            ));
        }
        let r = v.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..end]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![r, end - start], data)?, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_rows(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let cols = self.nodes[first.0].value.shape().get(1).copied().unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for v in items {
            let t = &self.nodes[v.0].value;
            check_2d("concat_rows", t)?;
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("widths {cols} and {} differ", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let idx: Vec<usize> = items.iter().map(|v| v.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(idx), rg))
    }

    pub fn concat_cols(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let rows = self.nodes[first.0].value.shape().first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(items.len());
        for v in items {
            let t = &self.nodes[v.0].value;
            check_2d("concat_cols", t)?;
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("heights {rows} and {} differ", t.rows()),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for v in items {
                data.extend_from_slice(self.nodes[v.0].value.row(i));
            }
        }
        let idx: Vec<usize> = items.iter().map(|v| v.0).collect();
        let rg = self.rg(&idx);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(idx), rg))
    }

    /// Selects rows of a matrix (embedding lookup, masked compaction).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_2d("gather_rows", v)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} outside {:?}", v.shape()),
            ));
        }
        let mut data = Vec::with_capacity(idx.len() * v.cols());
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let c = v.cols();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), c], data)?,
            Op::GatherRows { x: x.0, idx: idx.to_vec() },
            rg,
        ))
    }

    // ----- image ops ------------------------------------------------------

    /// 2-D convolution of a `[B, C, H, W]` batch with weights `[O, C*k*k]`
    /// and bias `[O]`, via im2col.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        if xv.ndim() != 4 {
            return Err(Error::shape("conv2d", format!("input {:?} is not [B, C, H, W]", xv.shape())));
        }
        let (batch, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if wv.ndim() != 2 || wv.cols() != cin * k * k || bv.shape() != [wv.rows()] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weights {:?} / bias {:?} for input {:?} with kernel {k}",
                    wv.shape(),
                    bv.shape(),
                    xv.shape()
                ),
            ));
        }
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::shape("conv2d", format!("kernel {k} larger than padded input {:?}", xv.shape())));
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout: wv.rows(),
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let plane = geom.ho * geom.wo;
        let ckk = cin * k * k;
        let mut out = vec![0.0; batch * geom.cout * plane];
        let keep_cols = self.nodes[w.0].requires_grad;
        let mut saved = Vec::new();
        for bi in 0..batch {
            let img = &xv.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let cols = im2col(img, &geom);
            let dst = &mut out[bi * geom.cout * plane..(bi + 1) * geom.cout * plane];
            for (o, row) in dst.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v = bv.data()[o]);
            }
            gemm(geom.cout, ckk, plane, wv.data(), false, &cols, false, dst, 1.0);
            if keep_cols {
                saved.push(cols);
            }
        }
        let t = Tensor::new(vec![batch, geom.cout, geom.ho, geom.wo], out)?;
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            t,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
                cols: saved,
            },
            rg,
        ))
    }

    fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(op, format!("input {:?} is not [B, C, H, W]", s)));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw("upsample2", x)?;
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; b * c * 4 * h * w];
        for p in 0..b * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[p * 4 * h * w + i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![b, c, 2 * h, 2 * w], out)?, Op::Upsample2(x.0), rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("odd spatial size {h}x{w}")));
        }
        let t = avg_pool2_values(self.nodes[x.0].value.data(), b * c, h, w);
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![b, c, h / 2, w / 2], t)?, Op::AvgPool2(x.0), rg))
    }

    /// `[B, C, H, W] -> [B, C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw("global_avg_pool", x)?;
        let src = self.nodes[x.0].value.data();
        let out = (0..b * c)
            .map(|p| src[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
            .collect();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalAvgPool(x.0), rg))
    }

    /// `[B, C, H, W] -> [B*H*W, C]`, one row per spatial location in
    /// (batch, row, column) order.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw("nchw_to_rows", x)?;
        let src = self.nodes[x.0].value.data();
        let plane = h * w;
        let mut out = vec![0.0; b * plane * c];
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..plane {
                    out[(bi * plane + p) * c + ci] = src[(bi * c + ci) * plane + p];
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![b * plane, c], out)?, Op::NchwToRows(x.0), rg))
    }

    /// `[B, D] -> [B, D, h, w]` by repeating each vector over the grid.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        check_2d("broadcast_spatial", v)?;
        let (b, d) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(b * d * h * w);
        for &val in v.data() {
            out.extend(std::iter::repeat_n(val, h * w));
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![b, d, h, w], out)?, Op::BroadcastSpatial(x.0), rg))
    }

    /// Concatenates two `[B, C, H, W]` batches along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, h, w] = self.nchw("concat_channels", a)?;
        let [bb, cb, hb, wb] = self.nchw("concat_channels", b)?;
        if ba != bb || h != hb || w != wb {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let plane = h * w;
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for i in 0..ba {
            out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor::new(vec![ba, ca + cb, h, w], out)?, Op::ConcatChannels(a.0, b.0), rg))
    }

    // ----- backward -------------------------------------------------------

    /// Reverse-mode sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let len = self.nodes[j].value.len();
        Some(grads[j].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let val = |j: usize| &self.nodes[j].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let k = if *ta { av.rows() } else { av.cols() };
                if let Some(ga) = self.slot(grads, *a) {
                    if *ta {
                        gemm(k, n, m, bv.data(), *tb, g, true, ga, 1.0);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !*tb, ga, 1.0);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *tb {
                        gemm(n, m, k, g, true, av.data(), *ta, gb, 1.0);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g, false, gb, 1.0);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d += gi * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(av.data()) {
                        *d += gi * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(gx, g, 1.0);
                }
                let d = out.cols();
                if let Some(gb) = self.slot(grads, *bias) {
                    for (idx, gi) in g.iter().enumerate() {
                        gb[idx % d] += gi;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, *c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(av.data()) {
                        if *x > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(av.data()) {
                        *d += if *x > 0.0 { *gi } else { slope * gi };
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d += gi * y;
                    }
                }
            }
            Op::LnClamped { x, lo, hi } => {
                let xv = val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gi), v) in gx.iter_mut().zip(g).zip(xv.data()) {
                        if *v >= *lo && *v <= *hi {
                            *d += gi / v;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let lanes = Lanes::new("softmax", out.shape(), *axis).expect("validated in forward");
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for l in 0..lanes.count {
                        let dot: f64 = (0..lanes.len).map(|t| g[lanes.at(l, t)] * y[lanes.at(l, t)]).sum();
                        for t in 0..lanes.len {
                            let p = lanes.at(l, t);
                            gx[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let lanes = Lanes::new("log_softmax", out.shape(), *axis).expect("validated in forward");
                let y = out.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for l in 0..lanes.count {
                        let total: f64 = (0..lanes.len).map(|t| g[lanes.at(l, t)]).sum();
                        for t in 0..lanes.len {
                            let p = lanes.at(l, t);
                            gx[p] += g[p] - y[p].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (n, d) = (out.rows(), out.cols());
                let gv = val(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (idx, gi) in g.iter().enumerate() {
                        gg[idx % d] += gi * xhat[idx];
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for (idx, gi) in g.iter().enumerate() {
                        gb[idx % d] += gi;
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let row = r * d;
                        for j in 0..d {
                            dxhat[j] = g[row + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = (0..d).map(|j| dxhat[j] * xhat[row + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[row + j] += inv_std[r] * (dxhat[j] - mean_d - xhat[row + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::MeanRows(a) => {
                let av = val(*a);
                let (n, d) = (av.rows(), av.cols());
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..n {
                        for j in 0..d {
                            ga[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let s = out.item();
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, x) in ga.iter_mut().zip(av.data()) {
                        *d += g[0] * (x - s).exp();
                    }
                }
            }
            Op::LogSumExpAxis { x, axis } => {
                let xv = val(*x);
                let lanes = Lanes::new("logsumexp_axis", xv.shape(), *axis).expect("validated in forward");
                if let Some(gx) = self.slot(grads, *x) {
                    for l in 0..lanes.count {
                        for t in 0..lanes.len {
                            let p = lanes.at(l, t);
                            gx[p] += g[l] * (xv.data()[p] - out.data()[l]).exp();
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (groups, m, n) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                let k = if *ta { av.shape()[1] } else { av.shape()[2] };
                if let Some(ga) = self.slot(grads, *a) {
                    for gi in 0..groups {
                        let go = &g[gi * m * n..(gi + 1) * m * n];
                        let bs = &bv.data()[gi * k * n..(gi + 1) * k * n];
                        let dst = &mut ga[gi * m * k..(gi + 1) * m * k];
                        if *ta {
                            gemm(k, n, m, bs, *tb, go, true, dst, 1.0);
                        } else {
                            gemm(m, n, k, go, false, bs, !*tb, dst, 1.0);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for gi in 0..groups {
                        let go = &g[gi * m * n..(gi + 1) * m * n];
                        let as_ = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *tb {
                            gemm(n, m, k, go, true, as_, *ta, dst, 1.0);
                        } else {
                            gemm(k, m, n, as_, !*ta, go, false, dst, 1.0);
                        }
                    }
                }
            }
            Op::CosineRows { a, b, eps } => {
                let (av, bv) = (val(*a), val(*b));
                let (n, d) = (av.rows(), av.cols());
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for r in 0..n {
                    let (x, y) = (av.row(r), bv.row(r));
                    let nx: f64 = x.iter().map(|p| p * p).sum();
                    let ny: f64 = y.iter().map(|q| q * q).sum();
                    let raw = (nx * ny).sqrt();
                    let cos = out.data()[r];
                    for j in 0..d {
                        if raw > *eps {
                            da[r * d + j] = g[r] * (y[j] / raw - cos * x[j] / nx);
                            db[r * d + j] = g[r] * (x[j] / raw - cos * y[j] / ny);
                        } else {
                            da[r * d + j] = g[r] * y[j] / eps;
                            db[r * d + j] = g[r] * x[j] / eps;
                        }
                    }
                }
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, &da, 1.0);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, &db, 1.0);
                }
            }
            Op::Stack(items) => {
                for (k, &j) in items.iter().enumerate() {
                    if let Some(gj) = self.slot(grads, j) {
                        gj[0] += g[k];
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &p) in idx.iter().enumerate() {
                        gx[p] += g[k];
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, g, 1.0);
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(&mut gx[start * c..start * c + g.len()], g, 1.0);
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (out.rows(), out.cols());
                let full = val(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        axpy(&mut gx[i * full + start..i * full + start + c], &g[i * c..(i + 1) * c], 1.0);
                    }
                }
            }
            Op::ConcatRows(items) => {
                let mut offset = 0;
                for &j in items {
                    let len = val(j).len();
                    if let Some(gj) = self.slot(grads, j) {
                        axpy(gj, &g[offset..offset + len], 1.0);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(items) => {
                let total = out.cols();
                let mut offset = 0;
                for &j in items {
                    let (r, c) = (val(j).rows(), val(j).cols());
                    if let Some(gj) = self.slot(grads, j) {
                        for i in 0..r {
                            axpy(&mut gj[i * c..(i + 1) * c], &g[i * total + offset..i * total + offset + c], 1.0);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (k, &r) in idx.iter().enumerate() {
                        axpy(&mut gx[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let plane = geom.ho * geom.wo;
                let ckk = geom.cin * geom.k * geom.k;
                let per_out = geom.cout * plane;
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..geom.batch {
                        for o in 0..geom.cout {
                            gb[o] += g[bi * per_out + o * plane..bi * per_out + (o + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *w) {
                    for (bi, col) in cols.iter().enumerate() {
                        let go = &g[bi * per_out..(bi + 1) * per_out];
                        gemm(geom.cout, plane, ckk, go, false, col, true, gw, 1.0);
                    }
                }
                let wv = val(*w);
                let per_in = geom.cin * geom.h * geom.w;
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dcols = vec![0.0; ckk * plane];
                    for bi in 0..geom.batch {
                        let go = &g[bi * per_out..(bi + 1) * per_out];
                        gemm(ckk, geom.cout, plane, wv.data(), true, go, false, &mut dcols, 0.0);
                        col2im_add(&dcols, *geom, &mut gx[bi * per_in..(bi + 1) * per_in]);
                    }
                }
            }
            Op::Upsample2(a) => {
                let s = out.shape();
                let (pc, h2, w2) = (s[0] * s[1], s[2], s[3]);
                let (h, w) = (h2 / 2, w2 / 2);
                if let Some(ga) = self.slot(grads, *a) {
                    for p in 0..pc {
                        for i in 0..h2 {
                            for j in 0..w2 {
                                ga[p * h * w + (i / 2) * w + j / 2] += g[p * h2 * w2 + i * w2 + j];
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(a) => {
                let s = out.shape();
                let (pc, ho, wo) = (s[0] * s[1], s[2], s[3]);
                let (h, w) = (ho * 2, wo * 2);
                if let Some(ga) = self.slot(grads, *a) {
                    for p in 0..pc {
                        for i in 0..h {
                            for j in 0..w {
                                ga[p * h * w + i * w + j] += 0.25 * g[p * ho * wo + (i / 2) * wo + j / 2];
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = val(*a).shape();
                let plane = s[2] * s[3];
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, gi) in g.iter().enumerate() {
                        ga[p * plane..(p + 1) * plane]
                            .iter_mut()
                            .for_each(|d| *d += gi / plane as f64);
                    }
                }
            }
            Op::NchwToRows(a) => {
                let s = val(*a).shape();
                let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..plane {
                                ga[(bi * c + ci) * plane + p] += g[(bi * plane + p) * c + ci];
                            }
                        }
                    }
                }
            }
            Op::BroadcastSpatial(a) => {
                let plane = out.shape()[2] * out.shape()[3];
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, d) in ga.iter_mut().enumerate() {
                        *d += g[p * plane..(p + 1) * plane].iter().sum::<f64>();
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let s = out.shape();
                let plane = s[2] * s[3];
                let ca = val(*a).shape()[1];
                let cb = val(*b).shape()[1];
                let per = (ca + cb) * plane;
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..s[0] {
                        axpy(&mut ga[bi * ca * plane..(bi + 1) * ca * plane], &g[bi * per..bi * per + ca * plane], 1.0);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..s[0] {
                        axpy(
                            &mut gb[bi * cb * plane..(bi + 1) * cb * plane],
                            &g[bi * per + ca * plane..(bi + 1) * per],
                            1.0,
                        );
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// require gradients or the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Like [`Gradients::get`] but zero-filled for absent gradients.
    pub fn get_or_zero(&self, g: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(d) => Tensor::new(g.shape(v).to_vec(), d.to_vec()).expect("shape recorded"),
            None => Tensor::zeros(g.shape(v)),
        }
    }

    pub(crate) fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(node, id)| self.grads[node].as_deref().map(|g| (id, g)))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Iteration helper for reductions along one axis of a row-major tensor.
/// Lane `l` splits into an outer index and an inner offset below `step`.
struct Lanes {
    count: usize,
    len: usize,
    step: usize,
}

impl Lanes {
    fn new(op: &'static str, shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} invalid for shape {:?}", shape)));
        }
        let len = shape[axis];
        let step: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        Ok(Lanes {
            count: outer * step,
            len,
            step,
        })
    }

    #[inline]
    fn at(&self, lane: usize, t: usize) -> usize {
        let (outer, inner) = (lane / self.step, lane % self.step);
        outer * self.len * self.step + t * self.step + inner
    }
}

pub(crate) fn avg_pool2_values(src: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let base = p * h * w;
                let s = src[base + 2 * i * w + 2 * j]
                    + src[base + 2 * i * w + 2 * j + 1]
                    + src[base + (2 * i + 1) * w + 2 * j]
                    + src[base + (2 * i + 1) * w + 2 * j + 1];
                out[p * ho * wo + i * wo + j] = 0.25 * s;
            }
        }
    }
    out
}

fn im2col(img: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.k * g.k * plane];
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &img[c * g.h * g.w + ii as usize * g.w..];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * g.wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], g: ConvGeom, dst: &mut [f64]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + ii as usize * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[base + jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}
