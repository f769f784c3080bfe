//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Everything the graph-transformer stack needs is two-dimensional (vectors
//! are stored as `[len]` and broadcast as a single row). The [`Tape`] records
//! operations in creation order, which is already a topological order, and
//! replays them backwards in [`Tape::backward`].

use thiserror::Error;

/// Finite stand-in for `-inf` in additive attention masks.
pub const MASK_NEG: f64 = -1e9;

/// Additive-mask entries at or below this value count as masked.
const MASKED_THRESHOLD: f64 = -1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("softmax row {0} has no unmasked positions")]
    FullyMasked(usize),
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("class {label} out of range for {classes} logits")]
    Label { label: usize, classes: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows. Ragged input is a shape error.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::vector(vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
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

    /// Row count; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let cols = self.cols();
        self.data[row * cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn value_only(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ScaleRows(Var, Var),
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Wengert list of tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// `c (+)= a[m×k] · b[k×n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents checked by the callers'
    // shape validation; matrixmultiply only reads/writes within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain `a · b` on tensors, outside any tape.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, k, 1, &b.data, n, 1, &mut out, false);
    Tensor::matrix(m, n, out)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.value_only(), Op::Leaf, rg)
    }

    /// Records a gradient-carrying leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.value_only(), Op::Leaf, true)
    }

    /// As [`Tape::param`], taking ownership to avoid a copy.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// The value at `v` with its accumulated gradient attached.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = node.value.value_only();
        t.requires_grad = node.requires_grad;
        t.grad = self.grads[v.0].clone();
        t
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, k2) = (bv.rows(), bv.cols());
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul_nt",
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &av.data, k, 1, &bv.data, 1, k, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(TensorError::Shape {
                op,
                left: av.shape.clone(),
                right: bv.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `[cols]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        let cols = av.cols();
        if rv.len() != cols {
            return Err(TensorError::Shape {
                op: "add_row",
                left: av.shape.clone(),
                right: rv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        for chunk in data.chunks_mut(cols.max(1)) {
            chunk.iter_mut().zip(&rv.data).for_each(|(x, b)| *x += b);
        }
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape.clone(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row-wise softmax of `x + mask`. Mask entries are `0` or [`MASK_NEG`].
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.rows() != rows || m.cols() != cols {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    left: xv.shape.clone(),
                    right: m.shape.clone(),
                });
            }
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = xv.row(r);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut any_open = mask.is_none();
            for (c, d) in dst.iter_mut().enumerate() {
                let add = mask.map_or(0.0, |m| m.data[r * cols + c]);
                if add > MASKED_THRESHOLD {
                    any_open = true;
                }
                *d = src[c] + add;
            }
            if !any_open || cols == 0 {
                return Err(TensorError::FullyMasked(r));
            }
            let max = dst.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for d in dst.iter_mut() {
                *d = (*d - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let out = Tensor::new(xv.shape.clone(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Per-row layer normalisation with affine `gain`/`bias` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != cols || bv.len() != cols {
            return Err(TensorError::Shape {
                op: "layer_norm",
                left: xv.shape.clone(),
                right: gv.shape.clone(),
            });
        }
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normed[r * cols + c] = n;
                out[r * cols + c] = n * gv.data[c] + bv.data[c];
            }
        }
        let out = Tensor::new(xv.shape.clone(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(TensorError::RowIndex { index: i, rows });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(index.len(), cols, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GatherRows(x, index.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape.clone(),
                    right: v.shape.clone(),
                });
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` has one entry per row.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() {
            return Err(TensorError::Shape {
                op: "scale_rows",
                left: xv.shape.clone(),
                right: sv.shape.clone(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data.clone();
        for (r, chunk) in data.chunks_mut(cols.max(1)).enumerate() {
            let f = sv.data[r];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(xv.shape.clone(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Softmax cross-entropy of a single row of logits against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let classes = lv.len();
        if label >= classes {
            return Err(TensorError::Label { label, classes });
        }
        let max = lv.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = -(lv.data[label] - max - z.ln());
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Forward value `hard`, backward identity into `soft`.
    pub fn straight_through(&mut self, hard: Tensor, soft: Var) -> Result<Var> {
        let sv = self.value(soft);
        if sv.len() != hard.len() {
            return Err(TensorError::Shape {
                op: "straight_through",
                left: hard.shape.clone(),
                right: sv.shape.clone(),
            });
        }
        let rg = self.rg(soft);
        Ok(self.push(hard.value_only(), Op::StraightThrough(soft), rg))
    }

    /// Accumulates `d loss / d v` into every gradient-carrying node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalar(lv.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            add_into(&mut self.grads[i], &g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    // g[m×n] · bᵀ[n×k]
                    let buf = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, n, 1, &bv.data, 1, n, buf, true);
                }
                if needs(*b) {
                    // aᵀ[k×m] · g[m×n]
                    let buf = adj[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    gemm(k, m, n, &av.data, 1, k, g, n, 1, buf, true);
                }
            }
            Op::MatMulNt(a, b) => {
                // out[m×n] = a[m×k] · b[n×k]ᵀ
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    let buf = adj[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    gemm(m, n, k, g, n, 1, &bv.data, k, 1, buf, true);
                }
                if needs(*b) {
                    let buf = adj[b.0].get_or_insert_with(|| vec![0.0; n * k]);
                    gemm(n, m, k, g, 1, n, &av.data, k, 1, buf, true);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        add_into(&mut adj[v.0], g);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    add_into(&mut adj[a.0], g);
                }
                if needs(*row) {
                    let cols = self.value(*row).len();
                    let buf = adj[row.0].get_or_insert_with(|| vec![0.0; cols]);
                    for chunk in g.chunks(cols.max(1)) {
                        buf.iter_mut().zip(chunk).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[a.0], &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    add_into(&mut adj[b.0], &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|x| x * c).collect();
                add_into(&mut adj[a.0], &d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(&av.data)
                    .map(|(x, v)| x * gelu_grad(*v))
                    .collect();
                add_into(&mut adj[a.0], &d);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d: Vec<f64> = g
                    .iter()
                    .zip(&av.data)
                    .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut adj[a.0], &d);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_into(&mut adj[x.0], &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let cols = gv.len();
                let rows = inv_std.len();
                if needs(*gain) {
                    let buf = adj[gain.0].get_or_insert_with(|| vec![0.0; cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += g[r * cols + c] * normed[r * cols + c];
                        }
                    }
                }
                if needs(*bias) {
                    let buf = adj[bias.0].get_or_insert_with(|| vec![0.0; cols]);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[c] += g[r * cols + c];
                        }
                    }
                }
                if needs(*x) {
                    let mut d = vec![0.0; rows * cols];
                    let nf = cols as f64;
                    for r in 0..rows {
                        let off = r * cols;
                        let mut sum_dn = 0.0;
                        let mut sum_dn_n = 0.0;
                        for c in 0..cols {
                            let dn = g[off + c] * gv.data[c];
                            sum_dn += dn;
                            sum_dn_n += dn * normed[off + c];
                        }
                        for c in 0..cols {
                            let dn = g[off + c] * gv.data[c];
                            d[off + c] = inv_std[r] / nf
                                * (nf * dn - sum_dn - normed[off + c] * sum_dn_n);
                        }
                    }
                    add_into(&mut adj[x.0], &d);
                }
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let buf = adj[x.0].get_or_insert_with(|| vec![0.0; xv.len()]);
                for (o, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        buf[src * cols + c] += g[o * cols + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if needs(*p) {
                        let buf = adj[p.0].get_or_insert_with(|| vec![0.0; rows * pc]);
                        for r in 0..rows {
                            for c in 0..pc {
                                buf[r * pc + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let cols = xv.cols();
                if needs(*x) {
                    let mut d = g.to_vec();
                    for (r, chunk) in d.chunks_mut(cols.max(1)).enumerate() {
                        let f = sv.data[r];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    add_into(&mut adj[x.0], &d);
                }
                if needs(*s) {
                    let d: Vec<f64> = (0..xv.rows())
                        .map(|r| {
                            xv.row(r)
                                .iter()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    add_into(&mut adj[s.0], &d);
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                add_into(&mut adj[x.0], &vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                add_into(&mut adj[x.0], &vec![g[0] / n.max(1) as f64; n]);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let d: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(c, p)| g[0] * (p - if c == *label { 1.0 } else { 0.0 }))
                    .collect();
                add_into(&mut adj[logits.0], &d);
            }
            Op::StraightThrough(soft) => {
                add_into(&mut adj[soft.0], g);
            }
        }
    }
}
