//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The op set covers exactly what the segmentation model needs: matrix
//! products, row softmaxes (plain, log, masked), layer norm, elementwise
//! nonlinearities, gathers/slices for attention heads and sparse voxel
//! neighborhoods, and scalar reductions. A [`Tape`] records one forward
//! pass; [`Tape::backward`] replays it in reverse exactly once.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod optim;

/// Sentinel standing in for -inf in additive attention masks. Kept finite so
/// arithmetic on masked logits never produces NaN.
pub const NEG_INF: f64 = f64::MIN;

fn is_masked_sentinel(v: f64) -> bool {
    v < f64::MIN / 2.0
}

/// A plain dense tensor: shape plus row-major f64 data.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::Dim(format!("expected rank-2 tensor, got shape {:?}", s))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.data[i * n..(i + 1) * n]
    }
}

/// Named parameter collection shared by the optimizer and checkpointing.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter '{}'", name)))
    }
}

pub type TensorId = usize;

#[derive(Clone)]
enum Op {
    Leaf,
    /// C = A·B
    Matmul(TensorId, TensorId),
    /// C = A·Bᵀ
    MatmulNt(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// x (m×n) + row vector b (n), broadcast over rows
    AddRow(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
    Log(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        inv_std: Vec<f64>,
        normed: Vec<f64>,
    },
    Recip(TensorId),
    Clamp {
        x: TensorId,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    // masked positions need no record: their weight is exactly 0, so the
    // softmax Jacobian already zeroes their gradient
    MaskedSoftmaxRows {
        logits: TensorId,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    /// Gather where a missing index yields a zero row (sparse-neighbor pad).
    GatherRowsOrZero {
        x: TensorId,
        idx: Vec<Option<usize>>,
    },
    GatherElems {
        x: TensorId,
        idx: Vec<(usize, usize)>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    /// Mean-pool rows of x into one row per group.
    PoolRows {
        x: TensorId,
        groups: Vec<Vec<usize>>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// One recorded forward pass. Create a fresh tape per pass; `backward` may
/// run at most once.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// -- raw matmul kernels (also used in backward) ------------------------------

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

/// a (m×k) · b (n×k)ᵀ -> m×n
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// a (p×q)ᵀ · b (p×r) -> q×r
fn mm_tn(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; q * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let brow = &b[i * r..(i + 1) * r];
        for x in 0..q {
            let av = arow[x];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[x * r..(x + 1) * r];
            for y in 0..r {
                crow[y] += av * brow[y];
            }
        }
    }
    c
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].value.data
    }

    /// Gradient of the last backward root w.r.t. this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    /// Record a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.push_unchecked(t, false, Op::Leaf)
    }

    /// Record a differentiable leaf (a parameter or input requiring grad).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push_unchecked(t, true, Op::Leaf)
    }

    fn push_unchecked(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        self.nodes.len() - 1
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<TensorId> {
        if let Some(v) = value.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} produced by forward op",
                v
            )));
        }
        Ok(self.push_unchecked(value, requires_grad, op))
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents disagree: {}x{} vs {}x{}",
                m, k, k2, n
            )));
        }
        let data = mm_nn(self.data(a), self.data(b), m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        self.push(t, self.rg(a) || self.rg(b), Op::Matmul(a, b))
    }

    /// a (m×k) · b (n×k)ᵀ
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul_nt inner extents disagree: {}x{} vs {}x{}",
                m, k, n, k2
            )));
        }
        let data = mm_nt(self.data(a), self.data(b), m, k, n);
        let t = Tensor { shape: vec![m, n], data };
        self.push(t, self.rg(a) || self.rg(b), Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(t, self.rg(a) || self.rg(b), Op::Add(a, b))
    }

    /// x (m×n) plus a length-n row vector broadcast over rows.
    pub fn add_row(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(b).numel() != n {
            return Err(Error::Dim(format!(
                "add_row: vector length {} vs row width {}",
                self.value(b).numel(),
                n
            )));
        }
        let bx = self.data(b).to_vec();
        let mut data = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bx[j];
            }
        }
        let t = Tensor { shape: vec![m, n], data };
        self.push(t, self.rg(x) || self.rg(b), Op::AddRow(x, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        self.push(t, self.rg(a) || self.rg(b), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::AddScalar(x))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        // Branch on sign so large |x| never overflows exp.
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Relu(x))
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.ln()).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Log(x))
    }

    /// Elementwise 1/x.
    pub fn recip(&mut self, x: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.data(x).iter().map(|&v| 1.0 / v).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Recip(x))
    }

    /// Elementwise clamp to [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> Result<TensorId> {
        if !(lo < hi) {
            return Err(Error::Usage(format!("clamp: lo {} must be < hi {}", lo, hi)));
        }
        let data: Vec<f64> = self.data(x).iter().map(|&v| v.clamp(lo, hi)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data };
        self.push(t, self.rg(x), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), self.rg(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), self.rg(x), Op::Mean(x))
    }

    /// Row-wise layer norm with learned gain/bias (length = row width).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::Dim(format!(
                "layer_norm: gain/bias length must be {}",
                n
            )));
        }
        let xs = self.data(x).to_vec();
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut normed = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let nv = (row[j] - mean) * is;
                normed[i * n + j] = nv;
                out[i * n + j] = nv * g[j] + b[j];
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(t, rg, Op::LayerNorm { x, gain, bias, inv_std, normed })
    }

    /// x·W + b with W of shape in×out and b of length out.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let xs = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        self.push(t, self.rg(x), Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let xs = self.data(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        self.push(t, self.rg(x), Op::LogSoftmaxRows(x))
    }

    /// Row softmax of logits + additive mask. Mask entries are 0 (open) or
    /// the [`NEG_INF`] sentinel (closed); closed positions get weight exactly
    /// 0 and open positions renormalize to 1. A fully closed row is an error.
    pub fn masked_softmax(&mut self, logits: TensorId, mask: TensorId) -> Result<TensorId> {
        let (m, n) = self.value(logits).dims2()?;
        if self.shape(mask) != [m, n] {
            return Err(Error::Dim(format!(
                "masked_softmax: mask shape {:?} vs logits {}x{}",
                self.shape(mask),
                m,
                n
            )));
        }
        let masked: Vec<bool> = self.data(mask).iter().map(|&v| is_masked_sentinel(v)).collect();
        let xs = self.data(logits);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if !masked[i * n + j] {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::AllMasked(i));
            }
            let mut z = 0.0;
            for j in 0..n {
                if masked[i * n + j] {
                    out[i * n + j] = 0.0;
                } else {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        self.push(t, self.rg(logits), Op::MaskedSoftmaxRows { logits })
    }

    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Dim(format!("gather_rows: index {} out of {}", i, m)));
            }
            data.extend_from_slice(&self.data(x)[i * n..(i + 1) * n]);
        }
        let t = Tensor { shape: vec![idx.len(), n], data };
        self.push(t, self.rg(x), Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Gather rows; a `None` index yields a zero row.
    pub fn gather_rows_or_zero(&mut self, x: TensorId, idx: &[Option<usize>]) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            match i {
                Some(i) => {
                    if i >= m {
                        return Err(Error::Dim(format!(
                            "gather_rows_or_zero: index {} out of {}",
                            i, m
                        )));
                    }
                    data.extend_from_slice(&self.data(x)[i * n..(i + 1) * n]);
                }
                None => data.extend(std::iter::repeat(0.0).take(n)),
            }
        }
        let t = Tensor { shape: vec![idx.len(), n], data };
        self.push(t, self.rg(x), Op::GatherRowsOrZero { x, idx: idx.to_vec() })
    }

    /// Pick individual elements (row, col) into a 1×len tensor.
    pub fn gather_elems(&mut self, x: TensorId, idx: &[(usize, usize)]) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(Error::Dim(format!(
                    "gather_elems: ({},{}) out of {}x{}",
                    r, c, m, n
                )));
            }
            data.push(self.data(x)[r * n + c]);
        }
        let t = Tensor { shape: vec![1, idx.len()], data };
        self.push(t, self.rg(x), Op::GatherElems { x, idx: idx.to_vec() })
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, width: usize) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        if start + width > n {
            return Err(Error::Dim(format!(
                "slice_cols: [{}, {}) out of width {}",
                start,
                start + width,
                n
            )));
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            data.extend_from_slice(&self.data(x)[i * n + start..i * n + start + width]);
        }
        let t = Tensor { shape: vec![m, width], data };
        self.push(t, self.rg(x), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols: empty input list".into()));
        }
        let (m, _) = self.value(parts[0]).dims2()?;
        let mut width = 0;
        for &p in parts {
            let (mp, np) = self.value(p).dims2()?;
            if mp != m {
                return Err(Error::Dim("concat_cols: row counts differ".into()));
            }
            width += np;
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            for &p in parts {
                let np = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[i * np..(i + 1) * np]);
            }
        }
        let t = Tensor { shape: vec![m, width], data };
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, rg, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean-pool rows of x into one output row per group of row indices.
    pub fn pool_rows(&mut self, x: TensorId, groups: &[Vec<usize>]) -> Result<TensorId> {
        let (m, n) = self.value(x).dims2()?;
        let mut data = vec![0.0; groups.len() * n];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Data(format!("pool_rows: empty group {}", g)));
            }
            for &i in members {
                if i >= m {
                    return Err(Error::Dim(format!("pool_rows: index {} out of {}", i, m)));
                }
                for j in 0..n {
                    data[g * n + j] += self.data(x)[i * n + j];
                }
            }
            let inv = 1.0 / members.len() as f64;
            for j in 0..n {
                data[g * n + j] *= inv;
            }
        }
        let t = Tensor { shape: vec![groups.len(), n], data };
        self.push(t, self.rg(x), Op::PoolRows { x, groups: groups.to_vec() })
    }

    /// Reverse pass from a scalar root. Populates `grad` on every
    /// requires-grad node reachable from the root. Errors if the root is not
    /// scalar or if backward already ran on this tape.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward called twice on the same tape".into(),
            ));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.backward_done = true;
        self.nodes[root].grad = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let g = self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (gv, dv) in g.iter_mut().zip(delta) {
            *gv += dv;
        }
    }

    fn propagate(&mut self, id: TensorId) {
        let dy = match &self.nodes[id].grad {
            Some(g) => g.clone(),
            None => return,
        };
        // Inputs of recorded ops always precede the op node on the tape, so a
        // single reverse sweep visits everything in valid order.
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let da = mm_nt(&dy, self.data(b), m, n, k);
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db = mm_tn(self.data(a), &dy, m, k, n);
                    self.accum(b, &db);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[0];
                if self.rg(a) {
                    let da = mm_nn(&dy, self.data(b), m, n, k);
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db = mm_tn(&dy, self.data(a), m, n, k);
                    self.accum(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(a, &dy);
                self.accum(b, &dy);
            }
            Op::AddRow(x, b) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                self.accum(x, &dy);
                if self.rg(b) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += dy[i * n + j];
                        }
                    }
                    self.accum(b, &db);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let da: Vec<f64> = dy.iter().zip(self.data(b)).map(|(d, v)| d * v).collect();
                    self.accum(a, &da);
                }
                if self.rg(b) {
                    let db: Vec<f64> = dy.iter().zip(self.data(a)).map(|(d, v)| d * v).collect();
                    self.accum(b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = dy.iter().map(|d| d * c).collect();
                self.accum(x, &dx);
            }
            Op::AddScalar(x) => {
                self.accum(x, &dy);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(&self.nodes[id].value.data)
                    .map(|(d, y)| d * y * (1.0 - y))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Log(x) => {
                let dx: Vec<f64> = dy.iter().zip(self.data(x)).map(|(d, v)| d / v).collect();
                self.accum(x, &dx);
            }
            Op::Recip(x) => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(d, v)| -d / (v * v))
                    .collect();
                self.accum(x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = dy
                    .iter()
                    .zip(self.data(x))
                    .map(|(d, v)| if *v > lo && *v < hi { *d } else { 0.0 })
                    .collect();
                self.accum(x, &dx);
            }
            Op::Sum(x) => {
                let dx = vec![dy[0]; self.nodes[x].value.numel()];
                self.accum(x, &dx);
            }
            Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                let dx = vec![dy[0] / n as f64; n];
                self.accum(x, &dx);
            }
            Op::LayerNorm { x, gain, bias, inv_std, normed } => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let g = self.data(gain).to_vec();
                if self.rg(gain) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += dy[i * n + j] * normed[i * n + j];
                        }
                    }
                    self.accum(gain, &dg);
                }
                if self.rg(bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += dy[i * n + j];
                        }
                    }
                    self.accum(bias, &db);
                }
                if self.rg(x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let mut mean_h = 0.0;
                        let mut mean_hn = 0.0;
                        for j in 0..n {
                            let h = dy[i * n + j] * g[j];
                            mean_h += h;
                            mean_hn += h * normed[i * n + j];
                        }
                        mean_h /= n as f64;
                        mean_hn /= n as f64;
                        for j in 0..n {
                            let h = dy[i * n + j] * g[j];
                            dx[i * n + j] =
                                inv_std[i] * (h - mean_h - normed[i * n + j] * mean_hn);
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::SoftmaxRows(x) | Op::MaskedSoftmaxRows { logits: x, .. } => {
                // Masked positions have output exactly 0, so the standard
                // softmax Jacobian already sends zero gradient to them.
                let (m, n) = (self.shape(id)[0], self.shape(id)[1]);
                let y = self.nodes[id].value.data.clone();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += dy[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = y[i * n + j] * (dy[i * n + j] - dot);
                    }
                }
                self.accum(x, &dx);
            }
            Op::LogSoftmaxRows(x) => {
                let (m, n) = (self.shape(id)[0], self.shape(id)[1]);
                let y = self.nodes[id].value.data.clone();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let sum_dy: f64 = dy[i * n..(i + 1) * n].iter().sum();
                    for j in 0..n {
                        dx[i * n + j] = dy[i * n + j] - y[i * n + j].exp() * sum_dy;
                    }
                }
                self.accum(x, &dx);
            }
            Op::GatherRows { x, idx } => {
                if self.rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; m * n];
                    for (o, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            dx[i * n + j] += dy[o * n + j];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::GatherRowsOrZero { x, idx } => {
                if self.rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; m * n];
                    for (o, &i) in idx.iter().enumerate() {
                        if let Some(i) = i {
                            for j in 0..n {
                                dx[i * n + j] += dy[o * n + j];
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::GatherElems { x, idx } => {
                if self.rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; m * n];
                    for (o, &(r, c)) in idx.iter().enumerate() {
                        dx[r * n + c] += dy[o];
                    }
                    self.accum(x, &dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let w = self.shape(id)[1];
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..w {
                            dx[i * n + start + j] += dy[i * w + j];
                        }
                    }
                    self.accum(x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let m = self.shape(id)[0];
                let total = self.shape(id)[1];
                let mut offset = 0;
                for p in parts {
                    let np = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = vec![0.0; m * np];
                        for i in 0..m {
                            for j in 0..np {
                                dp[i * np + j] = dy[i * total + offset + j];
                            }
                        }
                        self.accum(p, &dp);
                    }
                    offset += np;
                }
            }
            Op::PoolRows { x, groups } => {
                if self.rg(x) {
                    let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                    let mut dx = vec![0.0; m * n];
                    for (g, members) in groups.iter().enumerate() {
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for j in 0..n {
                                dx[i * n + j] += dy[g * n + j] * inv;
                            }
                        }
                    }
                    self.accum(x, &dx);
                }
            }
        }
    }
}
