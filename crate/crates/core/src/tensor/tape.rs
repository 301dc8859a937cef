//! Reverse-mode differentiation by operation recording.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. In
//! inference mode nothing is recorded and each op produces a plain leaf.

use std::collections::HashMap;

use super::ops::Activation;
use super::ops::{self, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Floor applied to row norms in [`Tape::normalize_rows`].
const NORM_EPS: f64 = 1e-12;
/// Probability clamp for the cross-entropy op.
const BCE_EPS: f64 = 1e-12;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddColBias(Var, Var),
    MulColBroadcast(Var, Var),
    MulRowBroadcast(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    Concat(Vec<Var>),
    SumAll(Var),
    SumRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Norm(Var),
    MaxAll {
        x: Var,
        index: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads(pub Vec<(ParamId, Vec<f64>)>);

impl ParamGrads {
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (id, g) in &self.0 {
            store.accumulate_grad(*id, g);
        }
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            param_vars: HashMap::new(),
        }
    }

    /// A tape that evaluates without recording anything for backward.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Places a parameter on the tape. Each parameter gets one node per
    /// tape, so repeated uses accumulate into the same gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = store.value(id).clone();
        let v = if self.record && store.is_trainable(id) {
            self.nodes.push(Node {
                value,
                op: Op::Param(id),
                needs_grad: true,
            });
            Var(self.nodes.len() - 1)
        } else {
            self.constant(value)
        };
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|x| x * s);
        self.push(y, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|x| x + s);
        self.push(y, Op::AddScalar(a), &[a])
    }

    /// `x [m x n] + b[m]`, bias broadcast along each row.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_col_bias")?;
        let bias = self.value(b);
        if bias.len() != m {
            return Err(Error::dim("add_col_bias", self.shape(x), bias.shape()));
        }
        let mut y = self.value(x).to_vec();
        for (row, &bv) in y.chunks_mut(n).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let y = Tensor::from_parts(vec![m, n], y);
        Ok(self.push(y, Op::AddColBias(x, b), &[x, b]))
    }

    /// `y[i][j] = x[i][j] * s[i]`.
    pub fn mul_col_broadcast(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mul_col_broadcast")?;
        let sv = self.value(s);
        if sv.len() != m {
            return Err(Error::dim("mul_col_broadcast", self.shape(x), sv.shape()));
        }
        let mut y = self.value(x).to_vec();
        for (row, &k) in y.chunks_mut(n).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let y = Tensor::from_parts(vec![m, n], y);
        Ok(self.push(y, Op::MulColBroadcast(x, s), &[x, s]))
    }

    /// `y[i][j] = x[i][j] * g[j]`.
    pub fn mul_row_broadcast(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("mul_row_broadcast")?;
        let gv = self.value(g);
        if gv.len() != n {
            return Err(Error::dim("mul_row_broadcast", self.shape(x), gv.shape()));
        }
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(n) {
            row.iter_mut().zip(gv.data()).for_each(|(v, k)| *v *= k);
        }
        let y = Tensor::from_parts(vec![m, n], y);
        Ok(self.push(y, Op::MulRowBroadcast(x, g), &[x, g]))
    }

    pub fn activation(&mut self, x: Var, f: Activation) -> Var {
        let y = ops::elementwise(self.value(x), f);
        let op = match f {
            Activation::Relu => Op::Relu(x),
            Activation::Sigmoid => Op::Sigmoid(x),
        };
        self.push(y, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax_rows(self.value(x))?;
        Ok(self.push(y, Op::SoftmaxRows(x), &[x]))
    }

    /// Softmax down each column of a rank-2 tensor.
    pub fn softmax_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.transpose(x)?;
        let s = self.softmax_rows(t)?;
        self.transpose(s)
    }

    /// Concatenates along the leading axis. Trailing dimensions must agree;
    /// rank-1 and scalar inputs are stacked into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 1 && s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += if s.len() > 1 {
                s[0]
            } else {
                self.value(p).len()
            };
            data.extend_from_slice(self.value(p).data());
        }
        let shape = if tail.is_empty() {
            vec![lead]
        } else {
            std::iter::once(lead).chain(tail).collect()
        };
        let y = Tensor::from_parts(shape, data);
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        self.push(y, Op::SumAll(x), &[x])
    }

    /// `[m x n] -> [m]`, summing each row.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("sum_rows")?;
        let y: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let y = Tensor::from_parts(vec![m], y);
        Ok(self.push(y, Op::SumRows(x), &[x]))
    }

    /// Divides each row by `max(||row||_2, 1e-12)`.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("normalize_rows")?;
        let mut y = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in y.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let d = norm.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(norm);
        }
        let y = Tensor::from_parts(vec![m, n], y);
        Ok(self.push(y, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Euclidean norm of all elements; the subgradient at zero is zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).norm());
        self.push(y, Op::Norm(x), &[x])
    }

    /// Largest element. Ties resolve to the smallest flat index.
    pub fn max_all(&mut self, x: Var) -> Var {
        let data = self.value(x).data();
        let mut index = 0;
        for (i, &v) in data.iter().enumerate() {
            if v > data[index] {
                index = i;
            }
        }
        let y = Tensor::scalar(data[index]);
        self.push(y, Op::MaxAll { x, index }, &[x])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        let cols = geom.im2col(self.value(x).data());
        let y = ops::conv2d_from_cols(&geom, &cols, self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let cols = if self.record { cols } else { Vec::new() };
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`
    /// over the cells where `mask` is set.
    pub fn bce(&mut self, p: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let pv = self.value(p);
        if target.len() != pv.len() || mask.len() != pv.len() {
            return Err(Error::dim("bce", pv.shape(), &[target.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegeneratePair { side: "bce mask" });
        }
        let mut total = 0.0;
        for ((&pi, &yi), _) in pv.data().iter().zip(target).zip(mask).filter(|(_, &m)| m) {
            let q = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            total -= yi * q.ln() + (1.0 - yi) * (1.0 - q).ln();
        }
        let y = Tensor::scalar(total / count as f64);
        Ok(self.push(
            y,
            Op::Bce {
                p,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[p],
        ))
    }

    /// `W x + b` applied to every column of `x`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let z = self.matmul(w, x)?;
        self.add_col_bias(z, b)
    }

    /// Linear layers with ReLU between them (none after the last).
    pub fn mlp(&mut self, x: Var, layers: &[(Var, Var)]) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = self.linear(w, b, h)?;
            if i + 1 < layers.len() {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter reached. The store's gradients are reset and then filled.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let grads = self.backward_seeded(loss, &Tensor::scalar(1.0))?;
        store.zero_grad();
        grads.apply_to(store);
        Ok(())
    }

    /// Vector-Jacobian product from `root` with upstream gradient `seed`.
    pub fn backward_seeded(&self, root: Var, seed: &Tensor) -> Result<ParamGrads> {
        if seed.len() != self.value(root).len() {
            return Err(Error::dim("backward seed", self.shape(root), seed.shape()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());
        let mut out = Vec::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, g, &mut grads, &mut out)?;
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(ParamGrads(out))
    }

    fn propagate(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Vec<(ParamId, Vec<f64>)>,
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                slot => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.push((*id, g)),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).shape()[1];
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    ops::gemm(m, n, k, &g, false, val(*b).data(), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    ops::gemm(k, m, n, val(*a).data(), true, &g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = val(*a).dims2("transpose")?;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                acc(*a, da);
            }
            Op::Reshape(a) | Op::AddScalar(a) => acc(*a, g),
            Op::SumAll(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|x| -x).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddColBias(x, b) => {
                let n = val(*x).shape()[1];
                acc(*b, g.chunks(n).map(|r| r.iter().sum()).collect());
                acc(*x, g);
            }
            Op::MulColBroadcast(x, s) => {
                let n = val(*x).shape()[1];
                let (xv, sv) = (val(*x).data(), val(*s).data());
                let ds = g
                    .chunks(n)
                    .zip(xv.chunks(n))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                let dx = g
                    .chunks(n)
                    .zip(sv)
                    .flat_map(|(gr, &k)| gr.iter().map(move |v| v * k))
                    .collect();
                acc(*s, ds);
                acc(*x, dx);
            }
            Op::MulRowBroadcast(x, gate) => {
                let n = val(*x).shape()[1];
                let (xv, gv) = (val(*x).data(), val(*gate).data());
                let mut dgate = vec![0.0; n];
                for (gr, xr) in g.chunks(n).zip(xv.chunks(n)) {
                    for j in 0..n {
                        dgate[j] += gr[j] * xr[j];
                    }
                }
                let dx = g
                    .chunks(n)
                    .flat_map(|gr| gr.iter().zip(gv).map(|(a, b)| a * b))
                    .collect();
                acc(*gate, dgate);
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(
                    *x,
                    g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                );
            }
            Op::SoftmaxRows(x) => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((dr, gr), yr) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SumRows(x) => {
                let n = val(*x).shape()[1];
                acc(
                    *x,
                    g.iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, n))
                        .collect(),
                );
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for (((dr, gr), yr), &norm) in dx
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(y.chunks(n))
                    .zip(norms)
                {
                    if norm > NORM_EPS {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    } else {
                        for j in 0..n {
                            dr[j] = gr[j] / NORM_EPS;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Norm(x) => {
                let s = node.value.data()[0];
                let xv = val(*x).data();
                if s > 0.0 {
                    acc(*x, xv.iter().map(|v| g[0] * v / s).collect());
                }
            }
            Op::MaxAll { x, index } => {
                let mut dx = vec![0.0; val(*x).len()];
                dx[*index] = g[0];
                acc(*x, dx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let npos = geom.out_positions();
                let patch = geom.patch_len();
                if let Some(b) = b {
                    acc(*b, g.chunks(npos).map(|r| r.iter().sum()).collect());
                }
                if wants(*w) {
                    let mut dw = vec![0.0; geom.c_out * patch];
                    ops::gemm(geom.c_out, npos, patch, &g, false, cols, true, &mut dw, 0.0);
                    acc(*w, dw);
                }
                if wants(*x) {
                    let mut dcols = vec![0.0; patch * npos];
                    ops::gemm(
                        patch,
                        geom.c_out,
                        npos,
                        val(*w).data(),
                        true,
                        &g,
                        false,
                        &mut dcols,
                        0.0,
                    );
                    let mut dx = vec![0.0; val(*x).len()];
                    geom.col2im(&dcols, &mut dx);
                    acc(*x, dx);
                }
            }
            Op::Bce {
                p,
                target,
                mask,
                count,
            } => {
                let pv = val(*p).data();
                let scale = g[0] / *count as f64;
                let dp = pv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&pi, &yi), &m)| {
                        if !m {
                            return 0.0;
                        }
                        let q = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        scale * (q - yi) / (q * (1.0 - q))
                    })
                    .collect();
                acc(*p, dp);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new(0);
        let p = store.add_uniform("p", &[2, 3], 3);
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let loss = tape.sum(v);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::full([3], 1.0));
        let q = store.add("q", Tensor::full([3], 1.0));
        store.accumulate_grad(p, &[9.0; 3]);
        let mut tape = Tape::new();
        let _ = tape.param(&store, p);
        let qv = tape.param(&store, q);
        let loss = tape.sum(qv);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::full([3], 1.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        assert!(matches!(
            tape.backward(v, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::full([3], 2.0));
        let mut tape = Tape::inference();
        let v = tape.param(&store, p);
        let loss = tape.sum(v);
        assert_eq!(tape.value(loss).data(), &[6.0]);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[0.0; 3]);
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::new([1], vec![3.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        let s = tape.add(a, b).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[2.0]);
    }

    #[test]
    fn max_all_ties_pick_first() {
        let mut store = ParamStore::new(0);
        let p = store.add("p", Tensor::new([3], vec![1.0, 5.0, 5.0]).unwrap());
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let m = tape.max_all(v);
        tape.backward(m, &mut store).unwrap();
        assert_eq!(store.get(p).gradient.data(), &[0.0, 1.0, 0.0]);
    }
}
