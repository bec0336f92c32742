//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value and whatever
//! it needs for the backward pass. `backward` walks the nodes from the loss
//! down to index 0, so each node is visited once, after all its consumers.

use std::collections::HashMap;

use super::{Array, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Elu,
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    Tanh,
    Exp,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if y > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::LeakyRelu(slope) => {
                if y > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Exp => y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Statistics used by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub enum NormStats<'a> {
    /// Normalize with the statistics of the valid rows in this batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Unary(Var, Activation),
    Glu(Var),
    Softmax(Var),
    LogClamp(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        valid: Vec<bool>,
        batch_stats: bool,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: usize,
    },
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    OuterSum(Var, Var),
    Gaussian2Nll {
        params: Var,
        truth: Vec<f64>,
    },
}

struct Node {
    value: Array,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (shape.iter().product::<usize>() / cols.max(1), cols)
}

fn accumulate(grads: &mut [Option<Array>], v: Var, delta: Array) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn with_shape(shape: &[usize], data: Vec<f64>) -> Array {
    Array::new(shape, data).expect("internal shape bookkeeping")
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(with_shape(va.shape(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[..., j] + b[j]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() != 1 || bs[0] != *xs.last().unwrap() {
            return Err(Error::dim("add_bias", xs, bs));
        }
        let n = bs[0];
        let bias = self.value(b).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let out = with_shape(vx.shape(), data);
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Array) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::dim("mul_const", self.shape(x), c.shape()));
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = with_shape(vx.shape(), data);
        Ok(self.push(out, Op::MulConst(x, c.data().to_vec())))
    }

    /// `x[..., k] · w[k, n] -> [..., n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::dim("matmul", &xs, &ws));
        }
        let (m, k) = rows_of(&xs);
        let n = ws[1];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = xv[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let wrow = &wv[p * n..(p + 1) * n];
                for (o, &b) in orow.iter_mut().zip(wrow) {
                    *o += a * b;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(with_shape(&shape, out), Op::MatMul(x, w)))
    }

    /// Batched product `[G, m, k] · [G, k, n]`, or `[G, m, k] · [G, n, k]ᵀ`
    /// when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(Error::dim("bmm", &as_, &bs));
        }
        let (g, m, k) = (as_[0], as_[1], as_[2]);
        let (kb, n) = if transpose_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if kb != k {
            return Err(Error::dim("bmm", &as_, &bs));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        let bval = if transpose_b { bb[j * k + p] } else { bb[p * n + j] };
                        s += ab[i * k + p] * bval;
                    }
                    ob[i * n + j] = s;
                }
            }
        }
        Ok(self.push(with_shape(&[g, m, n], out), Op::Bmm { a, b, transpose_b }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(out, Op::Unary(x, kind))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Elu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.activation(x, Activation::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Exp)
    }

    /// Gated linear unit over the last axis: first half gated by the
    /// sigmoid of the second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, cols) = rows_of(&xs);
        if cols % 2 != 0 {
            return Err(Error::dim("glu (odd channel count)", &xs, &[cols]));
        }
        let h = cols / 2;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * h);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            for j in 0..h {
                out.push(row[j] * sigmoid(row[h + j]));
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = h;
        Ok(self.push(with_shape(&shape, out), Op::Glu(x)))
    }

    /// Softmax over the last axis. Entries with `mask == false` get zero
    /// weight; a row with no unmasked entry is all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(Error::dim("softmax mask", &xs, &[m.len()]));
            }
        }
        let (rows, cols) = rows_of(&xs);
        let xv = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let keep = |j: usize| mask.is_none_or(|m| m[r * cols + j]);
            let row = &xv[r * cols..(r + 1) * cols];
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    out[r * cols + j] = e;
                    total += e;
                }
            }
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= total;
            }
        }
        Ok(self.push(with_shape(&xs, out), Op::Softmax(x)))
    }

    /// `ln(max(x, floor))`; no gradient flows through floored entries.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::LogClamp(x, floor))
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, cols) = rows_of(&xs);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::dim("layer_norm", &xs, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push(
            with_shape(&xs, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch normalization of `x: [R, F]` per feature. Rows with
    /// `valid[r] == false` are excluded from the statistics and produce zero
    /// output. Returns the node and, for batch statistics, the
    /// `(mean, population variance)` that were used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        valid: &[bool],
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || valid.len() != xs[0] {
            return Err(Error::dim("batch_norm", &xs, &[valid.len()]));
        }
        let (rows, cols) = (xs[0], xs[1]);
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::dim("batch_norm", &xs, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let count = valid.iter().filter(|&&v| v).count();
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                if count > 0 {
                    for r in (0..rows).filter(|&r| valid[r]) {
                        for j in 0..cols {
                            mean[j] += xv[r * cols + j];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= count as f64);
                    for r in (0..rows).filter(|&r| valid[r]) {
                        for j in 0..cols {
                            var[j] += (xv[r * cols + j] - mean[j]).powi(2);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= count as f64);
                }
                (mean, var, true)
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::dim("batch_norm stats", &xs, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for r in (0..rows).filter(|&r| valid[r]) {
            for j in 0..cols {
                let h = (xv[r * cols + j] - mean[j]) * inv_std[j];
                xhat[r * cols + j] = h;
                out[r * cols + j] = gv[j] * h + bv[j];
            }
        }
        let v = self.push(
            with_shape(&xs, out),
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                valid: valid.to_vec(),
                batch_stats,
            },
        );
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Zero-padded cross-correlation: `x: [B, Cin, H, W]`,
    /// `kernel: [Cout, Cin, KH, KW]`, optional `bias: [Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::dim("conv2d", &xs, &ks));
        }
        let (oh, ow) = (h + 2 * padding + 1 - kh, w + 2 * padding + 1 - kw);
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim("conv2d bias", &ks, self.shape(bv)));
            }
        }
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let bias_v = bias.map(|bv| self.value(bv).data().to_vec());
        let geo = ConvGeometry { cin, h, w, kh, kw, padding, oh, ow };
        let (kdim, npix) = (cin * kh * kw, oh * ow);
        let mut out = vec![0.0; b * cout * npix];
        let mut cols = vec![0.0; kdim * npix];
        for bi in 0..b {
            geo.im2col(&xv[bi * cin * h * w..(bi + 1) * cin * h * w], &mut cols);
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * npix..(bi * cout + co + 1) * npix];
                if let Some(bv) = &bias_v {
                    orow.fill(bv[co]);
                }
                for (k, &kval) in kv[co * kdim..(co + 1) * kdim].iter().enumerate() {
                    if kval == 0.0 {
                        continue;
                    }
                    for (o, &c) in orow.iter_mut().zip(&cols[k * npix..(k + 1) * npix]) {
                        *o += kval * c;
                    }
                }
            }
        }
        Ok(self.push(
            with_shape(&[b, cout, oh, ow], out),
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &xs, axes));
        }
        let mut strides = vec![1usize; xs.len()];
        for i in (0..xs.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * xs[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let n = self.value(x).len();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; xs.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(axes).map(|(&i, &a)| i * strides[a]).sum());
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(x, map, &out_shape)
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let xv = self.value(x).data();
        if n != index.len() || index.iter().any(|&i| i >= xv.len()) {
            return Err(Error::dim("gather", self.shape(x), shape));
        }
        let data = index.iter().map(|&i| xv[i]).collect();
        Ok(self.push(with_shape(shape, data), Op::Gather(x, index)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of zero parts".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat axis", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let mid = self.shape(p)[axis];
                let v = self.value(p).data();
                out.extend_from_slice(&v[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(with_shape(&shape, out), Op::Concat(parts.to_vec(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::dim("slice", &xs, &[axis, start, len]));
        }
        let (outer, mid, inner) = split_axis(&xs, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * mid + start) * inner;
            out.extend_from_slice(&v[off..off + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        Ok(self.push(with_shape(&shape, out), Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / v.len() as f64;
        self.push(Array::scalar(s), Op::Mean(x))
    }

    /// `out[g, i, j] = a[g, i] + b[g, j]`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("outer_sum", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("outer_sum", &s, &s));
        }
        let (g, n) = (s[0], s[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; g * n * n];
        for gi in 0..g {
            for i in 0..n {
                for j in 0..n {
                    out[(gi * n + i) * n + j] = av[gi * n + i] + bv[gi * n + j];
                }
            }
        }
        Ok(self.push(with_shape(&[g, n, n], out), Op::OuterSum(a, b)))
    }

    /// Negative log-density of bivariate Gaussians. `params` has last axis
    /// `(mu_x, mu_y, sigma_x, sigma_y, corr)`; `truth` has the same leading
    /// shape with last axis 2. Output drops the last axis.
    pub fn gaussian2_nll(&mut self, params: Var, truth: &Array) -> Result<Var> {
        let ps = self.shape(params).to_vec();
        let ts = truth.shape();
        if *ps.last().unwrap() != 5 || ts.last() != Some(&2) || ps[..ps.len() - 1] != ts[..ts.len() - 1] {
            return Err(Error::dim("gaussian2_nll", &ps, ts));
        }
        let pv = self.value(params).data();
        let tv = truth.data();
        let n = pv.len() / 5;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let p = &pv[i * 5..i * 5 + 5];
            let (sx, sy, rho) = (p[2], p[3], p[4]);
            if !(sx > 0.0 && sy > 0.0 && rho.abs() < 1.0) {
                return Err(Error::Loss(format!(
                    "invalid bivariate parameters sigma=({sx}, {sy}) corr={rho}"
                )));
            }
            out.push(gaussian2_nll_value(p, tv[i * 2], tv[i * 2 + 1]));
        }
        let mut shape = ps;
        shape.pop();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(
            with_shape(&shape, out),
            Op::Gaussian2Nll {
                params,
                truth: tv.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let da = gd.iter().zip(vb).map(|(g, b)| g * b).collect();
                let db = gd.iter().zip(va).map(|(g, a)| g * a).collect();
                accumulate(grads, *a, with_shape(y.shape(), da));
                accumulate(grads, *b, with_shape(y.shape(), db));
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                let mut db = vec![0.0; n];
                for (k, v) in gd.iter().enumerate() {
                    db[k % n] += v;
                }
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, with_shape(&[n], db));
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.map(|v| v * k)),
            Op::MulConst(x, c) => {
                let d = gd.iter().zip(c).map(|(g, c)| g * c).collect();
                accumulate(grads, *x, with_shape(y.shape(), d));
            }
            Op::MatMul(x, w) => {
                let xs = self.shape(*x);
                let (m, k) = rows_of(xs);
                let n = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0; m * k];
                let mut dw = vec![0.0; k * n];
                for r in 0..m {
                    let grow = &gd[r * n..(r + 1) * n];
                    for p in 0..k {
                        let wrow = &wv[p * n..(p + 1) * n];
                        dx[r * k + p] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                        let a = xv[r * k + p];
                        if a != 0.0 {
                            for (d, &gv) in dw[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a * gv;
                            }
                        }
                    }
                }
                accumulate(grads, *x, with_shape(xs, dx));
                accumulate(grads, *w, with_shape(&[k, n], dw));
            }
            Op::Bmm { a, b, transpose_b } => {
                let as_ = self.shape(*a);
                let (gn, m, k) = (as_[0], as_[1], as_[2]);
                let n = y.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0; gn * m * k];
                let mut db = vec![0.0; gn * k * n];
                for gi in 0..gn {
                    let ab = &av[gi * m * k..(gi + 1) * m * k];
                    let bb = &bv[gi * k * n..(gi + 1) * k * n];
                    let gb = &gd[gi * m * n..(gi + 1) * m * n];
                    let dab = &mut da[gi * m * k..(gi + 1) * m * k];
                    let dbb = &mut db[gi * k * n..(gi + 1) * k * n];
                    for r in 0..m {
                        for j in 0..n {
                            let gv = gb[r * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                let bi = if *transpose_b { j * k + p } else { p * n + j };
                                dab[r * k + p] += gv * bb[bi];
                                dbb[bi] += gv * ab[r * k + p];
                            }
                        }
                    }
                }
                accumulate(grads, *a, with_shape(as_, da));
                accumulate(grads, *b, with_shape(self.shape(*b), db));
            }
            Op::Unary(x, kind) => {
                let d = gd
                    .iter()
                    .zip(y.data())
                    .map(|(g, &yv)| g * kind.derivative_from_output(yv))
                    .collect();
                accumulate(grads, *x, with_shape(y.shape(), d));
            }
            Op::Glu(x) => {
                let xs = self.shape(*x);
                let (rows, cols) = rows_of(xs);
                let h = cols / 2;
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for j in 0..h {
                        let a = xv[r * cols + j];
                        let s = sigmoid(xv[r * cols + h + j]);
                        let gv = gd[r * h + j];
                        dx[r * cols + j] = gv * s;
                        dx[r * cols + h + j] = gv * a * s * (1.0 - s);
                    }
                }
                accumulate(grads, *x, with_shape(xs, dx));
            }
            Op::Softmax(x) => {
                let (rows, cols) = rows_of(y.shape());
                let yv = y.data();
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &yv[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, with_shape(y.shape(), dx));
            }
            Op::LogClamp(x, floor) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > *floor { g / v } else { 0.0 })
                    .collect();
                accumulate(grads, *x, with_shape(y.shape(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = rows_of(y.shape());
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let nf = cols as f64;
                for r in 0..rows {
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for j in 0..cols {
                        let k = r * cols + j;
                        let dh = gd[k] * gv[j];
                        sum_d += dh;
                        sum_dh += dh * xhat[k];
                        dgain[j] += gd[k] * xhat[k];
                        dbias[j] += gd[k];
                    }
                    for j in 0..cols {
                        let k = r * cols + j;
                        let dh = gd[k] * gv[j];
                        dx[k] = inv_std[r] / nf * (nf * dh - sum_d - xhat[k] * sum_dh);
                    }
                }
                accumulate(grads, *x, with_shape(y.shape(), dx));
                accumulate(grads, *gain, with_shape(&[cols], dgain));
                accumulate(grads, *bias, with_shape(&[cols], dbias));
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                valid,
                batch_stats,
            } => {
                let (rows, cols) = (y.shape()[0], y.shape()[1]);
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let count = valid.iter().filter(|&&v| v).count() as f64;
                let mut sum_d = vec![0.0; cols];
                let mut sum_dh = vec![0.0; cols];
                for r in (0..rows).filter(|&r| valid[r]) {
                    for j in 0..cols {
                        let k = r * cols + j;
                        let dh = gd[k] * gv[j];
                        sum_d[j] += dh;
                        sum_dh[j] += dh * xhat[k];
                        dgain[j] += gd[k] * xhat[k];
                        dbias[j] += gd[k];
                    }
                }
                for r in (0..rows).filter(|&r| valid[r]) {
                    for j in 0..cols {
                        let k = r * cols + j;
                        let dh = gd[k] * gv[j];
                        dx[k] = if *batch_stats {
                            inv_std[j] / count * (count * dh - sum_d[j] - xhat[k] * sum_dh[j])
                        } else {
                            dh * inv_std[j]
                        };
                    }
                }
                accumulate(grads, *x, with_shape(y.shape(), dx));
                accumulate(grads, *gain, with_shape(&[cols], dgain));
                accumulate(grads, *bias, with_shape(&[cols], dbias));
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                padding,
            } => {
                let xs = self.shape(*x);
                let ks = self.shape(*kernel);
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                let geo = ConvGeometry {
                    cin,
                    h,
                    w,
                    kh,
                    kw,
                    padding: *padding,
                    oh,
                    ow,
                };
                let (kdim, npix) = (cin * kh * kw, oh * ow);
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dbias = vec![0.0; cout];
                let mut cols = vec![0.0; kdim * npix];
                let mut dcols = vec![0.0; kdim * npix];
                for bi in 0..b {
                    geo.im2col(&xv[bi * cin * h * w..(bi + 1) * cin * h * w], &mut cols);
                    dcols.fill(0.0);
                    for co in 0..cout {
                        let grow = &gd[(bi * cout + co) * npix..(bi * cout + co + 1) * npix];
                        dbias[co] += grow.iter().sum::<f64>();
                        for k in 0..kdim {
                            let crow = &cols[k * npix..(k + 1) * npix];
                            dk[co * kdim + k] += grow.iter().zip(crow).map(|(g, c)| g * c).sum::<f64>();
                            let kval = kv[co * kdim + k];
                            for (d, &g) in dcols[k * npix..(k + 1) * npix].iter_mut().zip(grow) {
                                *d += kval * g;
                            }
                        }
                    }
                    geo.col2im(&dcols, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
                }
                accumulate(grads, *x, with_shape(xs, dx));
                accumulate(grads, *kernel, with_shape(ks, dk));
                if let Some(bv) = bias {
                    accumulate(grads, *bv, with_shape(&[cout], dbias));
                }
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                accumulate(grads, *x, d);
            }
            Op::Gather(x, index) => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &ix) in gd.iter().zip(index) {
                    dx[ix] += gv;
                }
                accumulate(grads, *x, with_shape(self.shape(*x), dx));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let mid = ps[*axis];
                    let mut d = Vec::with_capacity(outer * mid * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[s..s + mid * inner]);
                    }
                    accumulate(grads, p, with_shape(ps, d));
                    offset += mid;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, mid, inner) = split_axis(xs, *axis);
                let len = y.shape()[*axis];
                let mut dx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(grads, *x, with_shape(xs, dx));
            }
            Op::Sum(x) => accumulate(grads, *x, Array::full(self.shape(*x), gd[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                accumulate(grads, *x, Array::full(self.shape(*x), gd[0] / n));
            }
            Op::OuterSum(a, b) => {
                let s = self.shape(*a);
                let (gn, n) = (s[0], s[1]);
                let mut da = vec![0.0; gn * n];
                let mut db = vec![0.0; gn * n];
                for gi in 0..gn {
                    for r in 0..n {
                        for c in 0..n {
                            let v = gd[(gi * n + r) * n + c];
                            da[gi * n + r] += v;
                            db[gi * n + c] += v;
                        }
                    }
                }
                accumulate(grads, *a, with_shape(s, da));
                accumulate(grads, *b, with_shape(s, db));
            }
            Op::Gaussian2Nll { params, truth } => {
                let pv = self.value(*params).data();
                let mut dp = vec![0.0; pv.len()];
                for (k, gv) in gd.iter().enumerate() {
                    let d = gaussian2_nll_grad(&pv[k * 5..k * 5 + 5], truth[k * 2], truth[k * 2 + 1]);
                    for c in 0..5 {
                        dp[k * 5 + c] = gv * d[c];
                    }
                }
                accumulate(grads, *params, with_shape(self.shape(*params), dp));
            }
        }
    }
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `-ln N2((x, y) | mu, sigma, corr)` for `p = (mu_x, mu_y, sigma_x, sigma_y, corr)`.
pub fn gaussian2_nll_value(p: &[f64], x: f64, y: f64) -> f64 {
    let (zx, zy) = ((x - p[0]) / p[2], (y - p[1]) / p[3]);
    let rho = p[4];
    let q = 1.0 - rho * rho;
    let z = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    LN_2PI + p[2].ln() + p[3].ln() + 0.5 * q.ln() + z / (2.0 * q)
}

fn gaussian2_nll_grad(p: &[f64], x: f64, y: f64) -> [f64; 5] {
    let (sx, sy, rho) = (p[2], p[3], p[4]);
    let (zx, zy) = ((x - p[0]) / sx, (y - p[1]) / sy);
    let q = 1.0 - rho * rho;
    let z = zx * zx + zy * zy - 2.0 * rho * zx * zy;
    [
        -(zx - rho * zy) / (q * sx),
        -(zy - rho * zx) / (q * sy),
        1.0 / sx - zx * (zx - rho * zy) / (q * sx),
        1.0 / sy - zy * (zy - rho * zx) / (q * sy),
        -rho / q - zx * zy / q + z * rho / (q * q),
    ]
}

/// Index geometry of a zero-padded convolution over one sample.
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Source index of output pixel `(oi, oj)` under kernel offset `(di, dj)`.
    fn source(&self, oi: usize, oj: usize, di: usize, dj: usize) -> Option<usize> {
        let (ii, jj) = (oi + di, oj + dj);
        let p = self.padding;
        (ii >= p && ii < self.h + p && jj >= p && jj < self.w + p).then(|| (ii - p) * self.w + jj - p)
    }

    /// Fills `cols` `[cin*kh*kw, oh*ow]` from one sample `x` `[cin, h, w]`.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let npix = self.oh * self.ow;
        for ci in 0..self.cin {
            let xin = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let k = (ci * self.kh + di) * self.kw + dj;
                    let row = &mut cols[k * npix..(k + 1) * npix];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            row[oi * self.ow + oj] = self.source(oi, oj, di, dj).map_or(0.0, |s| xin[s]);
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`]: scatters `cols` back into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let npix = self.oh * self.ow;
        for ci in 0..self.cin {
            let din = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let k = (ci * self.kh + di) * self.kw + dj;
                    let row = &cols[k * npix..(k + 1) * npix];
                    for oi in 0..self.oh {
                        for oj in 0..self.ow {
                            if let Some(s) = self.source(oi, oj, di, dj) {
                                din[s] += row[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
