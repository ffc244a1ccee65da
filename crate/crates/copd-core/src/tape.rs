//! Define-by-run reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of one forward pass as a node; calling
//! [`Tape::backward`] on a scalar loss walks the record in reverse and
//! accumulates `dL/dx` into every node that requires gradient. The tape is
//! rebuilt each training step, so the recorded graph always matches the batch
//! that produced it, and gradients never leak across steps.
//!
//! Tensors are two-dimensional `(rows, cols)`; scalars are `1x1` and column
//! vectors are `n x 1`.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::matrix::Matrix;
use crate::rng::SplitMix64;
use crate::sparse::SparseMatrix;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a[m,k] . b[k,n]`
    Matmul { a: TensorId, b: TensorId },
    /// `a[m,k] . b[n,k]^T` — right operand stored row-per-output-column.
    MatmulNt { a: TensorId, b: TensorId },
    /// `s[m,k] . d[k,n]` with a fixed (non-differentiable) sparse left factor.
    SparseDense { s: Arc<SparseMatrix>, d: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    /// `a[n,d] + bias[1,d]` broadcast over rows.
    AddBias { a: TensorId, bias: TensorId },
    /// `a[n,d] * col[n,1]` broadcast over columns.
    MulCol { a: TensorId, col: TensorId },
    Scale { a: TensorId, c: f64 },
    AddScalar { a: TensorId, c: f64 },
    ConcatRows { a: TensorId, b: TensorId },
    ConcatCols { a: TensorId, b: TensorId },
    SliceRows { a: TensorId, start: usize },
    SliceCols { a: TensorId, start: usize },
    GatherRows { a: TensorId, idx: Vec<usize> },
    /// `out[r,0] = a[r, idx[r]]`
    PickCols { a: TensorId, idx: Vec<usize> },
    /// Running-mean readout; exact identity when all inputs are equal.
    MeanStack { inputs: Vec<TensorId> },
    Relu { a: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Softplus { a: TensorId },
    /// Mask entries are 0 or 1/(1-rate), fixed at record time.
    Dropout { a: TensorId, mask: Vec<f64> },
    Log { a: TensorId },
    Exp { a: TensorId },
    Sum { a: TensorId },
    RowSum { a: TensorId },
    RowL2Norm { a: TensorId, floor: f64 },
    LogSoftmaxRows { a: TensorId },
    Clamp { a: TensorId, lo: f64, hi: f64 },
    StopGradient { a: TensorId },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { rows, cols, values, requires_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.node(id).values.len(), 1);
        self.node(id).values[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.node(id).requires_grad
    }

    /// Gradient accumulated by the last `backward`, if any reached this node.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, id: TensorId) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.node(id).values.len()],
        }
    }

    pub fn value_as_matrix(&self, id: TensorId) -> Matrix {
        let n = self.node(id);
        Matrix::from_vec(n.rows, n.cols, n.values.clone()).expect("node shape is consistent")
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Bind a persistent matrix onto the tape.
    pub fn leaf(&mut self, m: &Matrix, requires_grad: bool) -> TensorId {
        self.push(m.rows(), m.cols(), m.values().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<TensorId> {
        if values.len() != rows * cols {
            return Err(CoreError::InvalidShape(
                "constant value count does not match shape".to_string(),
            ));
        }
        Ok(self.push(rows, cols, values, false, Op::Leaf))
    }

    /// Column-vector constant `[n,1]`.
    pub fn constant_col(&mut self, values: Vec<f64>) -> TensorId {
        let n = values.len();
        self.push(n, 1, values, false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.push(1, 1, vec![v], false, Op::Leaf)
    }

    // ── Binary dense ops ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(CoreError::InvalidShape(format!(
                "matmul {m}x{k} . {k2}x{n}"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aik = av[i * k + p];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, rg, Op::Matmul { a, b }))
    }

    /// `a . b^T`: `a[m,k]`, `b[n,k]` -> `[m,n]`. Both operands are scanned
    /// along contiguous rows, which is the cache-friendly layout for scoring
    /// a batch of row embeddings against an embedding table.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(CoreError::InvalidShape(format!(
                "matmul_nt {m}x{k} . ({n}x{k2})^T"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                orow[j] = acc;
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(m, n, out, rg, Op::MatmulNt { a, b }))
    }

    pub fn sparse_dense_matmul(
        &mut self,
        s: &Arc<SparseMatrix>,
        d: TensorId,
    ) -> Result<TensorId> {
        let (k, n) = self.shape(d);
        if s.cols() != k {
            return Err(CoreError::InvalidShape(format!(
                "sparse_dense {}x{} . {k}x{n}",
                s.rows(),
                s.cols()
            )));
        }
        let dv = &self.node(d).values;
        let m = s.rows();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for (c, w) in s.row(r) {
                let drow = &dv[c * n..(c + 1) * n];
                for j in 0..n {
                    orow[j] += w * drow[j];
                }
            }
        }
        let rg = self.requires_grad(d);
        Ok(self.push(m, n, out, rg, Op::SparseDense { s: Arc::clone(s), d }))
    }

    fn same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(CoreError::InvalidShape(format!(
                "{what}: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        let out = zip_map(&self.node(a).values, &self.node(b).values, |x, y| x + y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(r, c, out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        let out = zip_map(&self.node(a).values, &self.node(b).values, |x, y| x - y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(r, c, out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        let out = zip_map(&self.node(a).values, &self.node(b).values, |x, y| x * y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(r, c, out, rg, Op::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (r, c) = self.same_shape(a, b, "div")?;
        let out = zip_map(&self.node(a).values, &self.node(b).values, |x, y| x / y);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(r, c, out, rg, Op::Div { a, b }))
    }

    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != d {
            return Err(CoreError::InvalidShape(format!(
                "add_bias {n}x{d} + {br}x{bc}"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(bias).values;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                out.push(av[r * d + j] + bv[j]);
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(bias);
        Ok(self.push(n, d, out, rg, Op::AddBias { a, bias }))
    }

    pub fn mul_col(&mut self, a: TensorId, col: TensorId) -> Result<TensorId> {
        let (n, d) = self.shape(a);
        let (cr, cc) = self.shape(col);
        if cr != n || cc != 1 {
            return Err(CoreError::InvalidShape(format!(
                "mul_col {n}x{d} * {cr}x{cc}"
            )));
        }
        let av = &self.node(a).values;
        let cv = &self.node(col).values;
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            for j in 0..d {
                out.push(av[r * d + j] * cv[r]);
            }
        }
        let rg = self.requires_grad(a) || self.requires_grad(col);
        Ok(self.push(n, d, out, rg, Op::MulCol { a, col }))
    }

    // ── Scalar-parameter ops ─────────────────────────────────────────

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let out = self.node(a).values.iter().map(|x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push(r, cl, out, rg, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let (r, cl) = self.shape(a);
        let out = self.node(a).values.iter().map(|x| x + c).collect();
        let rg = self.requires_grad(a);
        self.push(r, cl, out, rg, Op::AddScalar { a, c })
    }

    // ── Structural ops ───────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(CoreError::InvalidShape(format!(
                "concat_rows {ra}x{ca} | {rb}x{cb}"
            )));
        }
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(&self.node(a).values);
        out.extend_from_slice(&self.node(b).values);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(ra + rb, ca, out, rg, Op::ConcatRows { a, b }))
    }

    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(CoreError::InvalidShape(format!(
                "concat_cols {ra}x{ca} | {rb}x{cb}"
            )));
        }
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(ra, ca + cb, out, rg, Op::ConcatCols { a, b }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > r {
            return Err(CoreError::InvalidShape(format!(
                "slice_rows [{start}, {}) of {r} rows",
                start + len
            )));
        }
        let out = self.node(a).values[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(len, c, out, rg, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if len == 0 || start + len > c {
            return Err(CoreError::InvalidShape(format!(
                "slice_cols [{start}, {}) of {c} cols",
                start + len
            )));
        }
        let av = &self.node(a).values;
        let mut out = Vec::with_capacity(r * len);
        for row in 0..r {
            out.extend_from_slice(&av[row * c + start..row * c + start + len]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(r, len, out, rg, Op::SliceCols { a, start }))
    }

    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(CoreError::InvalidArgument(format!(
                "gather_rows index {bad} out of {r} rows"
            )));
        }
        let av = &self.node(a).values;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(idx.len(), c, out, rg, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    /// Per-row column pick: `out[r, 0] = a[r, idx[r]]`.
    pub fn pick_cols(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(CoreError::InvalidShape(format!(
                "pick_cols wants {r} indices, got {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(CoreError::InvalidArgument(format!(
                "pick_cols index {bad} out of {c} cols"
            )));
        }
        let av = &self.node(a).values;
        let out = idx.iter().enumerate().map(|(row, &col)| av[row * c + col]).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(r, 1, out, rg, Op::PickCols { a, idx: idx.to_vec() }))
    }

    /// Mean of same-shape tensors, accumulated as a running mean so that a
    /// stack of identical tensors reproduces that tensor bit for bit.
    pub fn mean_stack(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(CoreError::InvalidArgument("mean_stack of nothing".to_string()));
        }
        let (r, c) = self.shape(inputs[0]);
        for &t in &inputs[1..] {
            self.same_shape(inputs[0], t, "mean_stack")?;
        }
        let mut out = self.node(inputs[0]).values.clone();
        for (k, &t) in inputs.iter().enumerate().skip(1) {
            let tv = &self.node(t).values;
            let count = (k + 1) as f64;
            for (m, &x) in out.iter_mut().zip(tv.iter()) {
                *m += (x - *m) / count;
            }
        }
        let rg = inputs.iter().any(|&t| self.requires_grad(t));
        Ok(self.push(r, c, out, rg, Op::MeanStack { inputs: inputs.to_vec() }))
    }

    // ── Elementwise nonlinearities ───────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| libm::tanh(x)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Sigmoid { a })
    }

    /// `ln(1 + e^x)`, evaluated in the overflow-safe branch form.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| softplus(x)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Softplus { a })
    }

    /// Inverted dropout: at train time each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; at inference the input
    /// passes through untouched.
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        seed: u64,
        training: bool,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep_scale = 1.0 / (1.0 - rate);
        let mut rng = SplitMix64::new(seed);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        let out = zip_map(&self.node(a).values, &mask, |x, m| x * m);
        let rg = self.requires_grad(a);
        Ok(self.push(r, c, out, rg, Op::Dropout { a, mask }))
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| libm::log(x)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Log { a })
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| libm::exp(x)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Exp { a })
    }

    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.iter().map(|&x| x.clamp(lo, hi)).collect();
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::Clamp { a, lo, hi })
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.node(a).values.iter().sum();
        let rg = self.requires_grad(a);
        self.push(1, 1, vec![total], rg, Op::Sum { a })
    }

    /// Mean over all entries; `scale(sum(a), 1/numel)`.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let numel = self.node(a).values.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / numel as f64)
    }

    pub fn row_sum(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let av = &self.node(a).values;
        let out = (0..r).map(|row| av[row * c..(row + 1) * c].iter().sum()).collect();
        let rg = self.requires_grad(a);
        self.push(r, 1, out, rg, Op::RowSum { a })
    }

    /// Per-row Euclidean norm with a lower floor; rows at the floor pass no
    /// gradient.
    pub fn row_l2_norm(&mut self, a: TensorId, floor: f64) -> TensorId {
        let (r, c) = self.shape(a);
        let av = &self.node(a).values;
        let out = (0..r)
            .map(|row| {
                let s: f64 = av[row * c..(row + 1) * c].iter().map(|x| x * x).sum();
                let norm = libm::sqrt(s);
                if norm > floor {
                    norm
                } else {
                    floor
                }
            })
            .collect();
        let rg = self.requires_grad(a);
        self.push(r, 1, out, rg, Op::RowL2Norm { a, floor })
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let av = &self.node(a).values;
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            let slice = &av[row * c..(row + 1) * c];
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_z = libm::log(slice.iter().map(|&x| libm::exp(x - max)).sum::<f64>());
            out.extend(slice.iter().map(|&x| x - max - log_z));
        }
        let rg = self.requires_grad(a);
        self.push(r, c, out, rg, Op::LogSoftmaxRows { a })
    }

    /// Forward identity that blocks all gradient flow into its input.
    pub fn stop_gradient(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        let out = self.node(a).values.clone();
        self.push(r, c, out, false, Op::StopGradient { a })
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Populate gradients of every reachable `requires_grad` node with
    /// `d loss / d node`. Gradients of disjoint uses accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            let Tape { nodes, grads } = self;
            propagate_node(nodes, grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

#[inline]
fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let t = libm::exp(x);
        t / (1.0 + t)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn add_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: TensorId,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let len = nodes[id.0].values.len();
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Push the output gradient `g` of node `id` into that node's inputs.
fn propagate_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf | Op::StopGradient { .. } => {}

        Op::Matmul { a, b } => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = cols;
            let av = &nodes[a.0].values;
            let bv = &nodes[b.0].values;
            add_grad(nodes, grads, *a, |da| {
                // dA = g . B^T
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            });
            add_grad(nodes, grads, *b, |db| {
                // dB = A^T . g
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            dbrow[j] += aip * grow[j];
                        }
                    }
                }
            });
        }

        Op::MatmulNt { a, b } => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = cols;
            let av = &nodes[a.0].values;
            let bv = &nodes[b.0].values;
            add_grad(nodes, grads, *a, |da| {
                // dA = g . B
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = grow[j];
                        if gij == 0.0 {
                            continue;
                        }
                        let brow = &bv[j * k..(j + 1) * k];
                        for p in 0..k {
                            darow[p] += gij * brow[p];
                        }
                    }
                }
            });
            add_grad(nodes, grads, *b, |db| {
                // dB = g^T . A
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gij = grow[j];
                        if gij == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[j * k..(j + 1) * k];
                        for p in 0..k {
                            dbrow[p] += gij * arow[p];
                        }
                    }
                }
            });
        }

        Op::SparseDense { s, d } => {
            let n = cols;
            add_grad(nodes, grads, *d, |dd| {
                // dD = S^T . g, applied as a scatter over S's entries.
                for r in 0..s.rows() {
                    let grow = &g[r * n..(r + 1) * n];
                    for (c, w) in s.row(r) {
                        let drow = &mut dd[c * n..(c + 1) * n];
                        for j in 0..n {
                            drow[j] += w * grow[j];
                        }
                    }
                }
            });
        }

        Op::Add { a, b } => {
            add_grad(nodes, grads, *a, |da| axpy(da, g, 1.0));
            add_grad(nodes, grads, *b, |db| axpy(db, g, 1.0));
        }

        Op::Sub { a, b } => {
            add_grad(nodes, grads, *a, |da| axpy(da, g, 1.0));
            add_grad(nodes, grads, *b, |db| axpy(db, g, -1.0));
        }

        Op::Mul { a, b } => {
            let av = &nodes[a.0].values;
            let bv = &nodes[b.0].values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * bv[i];
                }
            });
            add_grad(nodes, grads, *b, |db| {
                for i in 0..db.len() {
                    db[i] += g[i] * av[i];
                }
            });
        }

        Op::Div { a, b } => {
            let av = &nodes[a.0].values;
            let bv = &nodes[b.0].values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] / bv[i];
                }
            });
            add_grad(nodes, grads, *b, |db| {
                for i in 0..db.len() {
                    db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }

        Op::AddBias { a, bias } => {
            let d = cols;
            add_grad(nodes, grads, *a, |da| axpy(da, g, 1.0));
            add_grad(nodes, grads, *bias, |db| {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            });
        }

        Op::MulCol { a, col } => {
            let d = cols;
            let av = &nodes[a.0].values;
            let cv = &nodes[col.0].values;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    let c = cv[r];
                    for j in 0..d {
                        da[r * d + j] += g[r * d + j] * c;
                    }
                }
            });
            add_grad(nodes, grads, *col, |dc| {
                for r in 0..rows {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += g[r * d + j] * av[r * d + j];
                    }
                    dc[r] += acc;
                }
            });
        }

        Op::Scale { a, c } => {
            let c = *c;
            add_grad(nodes, grads, *a, |da| axpy(da, g, c));
        }

        Op::AddScalar { a, .. } => {
            add_grad(nodes, grads, *a, |da| axpy(da, g, 1.0));
        }

        Op::ConcatRows { a, b } => {
            let split = nodes[a.0].values.len();
            add_grad(nodes, grads, *a, |da| axpy(da, &g[..split], 1.0));
            add_grad(nodes, grads, *b, |db| axpy(db, &g[split..], 1.0));
        }

        Op::ConcatCols { a, b } => {
            let ca = nodes[a.0].cols;
            let cb = nodes[b.0].cols;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    for j in 0..ca {
                        da[r * ca + j] += g[r * (ca + cb) + j];
                    }
                }
            });
            add_grad(nodes, grads, *b, |db| {
                for r in 0..rows {
                    for j in 0..cb {
                        db[r * cb + j] += g[r * (ca + cb) + ca + j];
                    }
                }
            });
        }

        Op::SliceRows { a, start } => {
            let c = cols;
            let start = *start;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    for j in 0..c {
                        da[(start + r) * c + j] += g[r * c + j];
                    }
                }
            });
        }

        Op::SliceCols { a, start } => {
            let full = nodes[a.0].cols;
            let start = *start;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    for j in 0..cols {
                        da[r * full + start + j] += g[r * cols + j];
                    }
                }
            });
        }

        Op::GatherRows { a, idx } => {
            let c = cols;
            add_grad(nodes, grads, *a, |da| {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        da[src * c + j] += g[r * c + j];
                    }
                }
            });
        }

        Op::PickCols { a, idx } => {
            let c = nodes[a.0].cols;
            add_grad(nodes, grads, *a, |da| {
                for (r, &col) in idx.iter().enumerate() {
                    da[r * c + col] += g[r];
                }
            });
        }

        Op::MeanStack { inputs } => {
            let w = 1.0 / inputs.len() as f64;
            for &t in inputs {
                add_grad(nodes, grads, t, |dt| axpy(dt, g, w));
            }
        }

        Op::Relu { a } => {
            let av = &nodes[a.0].values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            });
        }

        Op::Tanh { a } => {
            let yv = &node.values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            });
        }

        Op::Sigmoid { a } => {
            let yv = &node.values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            });
        }

        Op::Softplus { a } => {
            let av = &nodes[a.0].values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * sigmoid(av[i]);
                }
            });
        }

        Op::Dropout { a, mask } => {
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * mask[i];
                }
            });
        }

        Op::Log { a } => {
            let av = &nodes[a.0].values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] / av[i];
                }
            });
        }

        Op::Exp { a } => {
            let yv = &node.values;
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * yv[i];
                }
            });
        }

        Op::Sum { a } => {
            let g0 = g[0];
            add_grad(nodes, grads, *a, |da| {
                for v in da.iter_mut() {
                    *v += g0;
                }
            });
        }

        Op::RowSum { a } => {
            let c = nodes[a.0].cols;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    for j in 0..c {
                        da[r * c + j] += g[r];
                    }
                }
            });
        }

        Op::RowL2Norm { a, floor } => {
            let c = nodes[a.0].cols;
            let av = &nodes[a.0].values;
            let yv = &node.values;
            let floor = *floor;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    let norm = yv[r];
                    if norm <= floor {
                        continue; // clipped rows pass no gradient
                    }
                    let scale = g[r] / norm;
                    for j in 0..c {
                        da[r * c + j] += scale * av[r * c + j];
                    }
                }
            });
        }

        Op::LogSoftmaxRows { a } => {
            let c = cols;
            let yv = &node.values;
            add_grad(nodes, grads, *a, |da| {
                for r in 0..rows {
                    let grow = &g[r * c..(r + 1) * c];
                    let yrow = &yv[r * c..(r + 1) * c];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..c {
                        da[r * c + j] += grow[j] - libm::exp(yrow[j]) * gsum;
                    }
                }
            });
        }

        Op::Clamp { a, lo, hi } => {
            let av = &nodes[a.0].values;
            let (lo, hi) = (*lo, *hi);
            add_grad(nodes, grads, *a, |da| {
                for i in 0..da.len() {
                    if av[i] >= lo && av[i] <= hi {
                        da[i] += g[i];
                    }
                }
            });
        }
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += c * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(tape: &mut Tape, rows: usize, cols: usize, values: &[f64]) -> TensorId {
        let m = Matrix::from_vec(rows, cols, values.to_vec()).unwrap();
        tape.leaf(&m, true)
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 1, &[3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 3, &[1.0, -2.0, 0.5]);
        let frozen = tape.stop_gradient(x);
        assert_eq!(tape.value(frozen), tape.value(x));
        let sq = tape.mul(frozen, frozen).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_or_zeros(x), vec![0.0; 3]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 1, &[2.0]);
        let a = tape.mul(x, x).unwrap(); // x^2
        let b = tape.add(a, x).unwrap(); // x^2 + x
        let loss = tape.sum(b);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]); // 2x + 1
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 2, 1, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(CoreError::InvalidArgument(_))));
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(x, 0.0, 7, true).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dropout_inference_passes_through() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = tape.dropout(x, 0.9, 7, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_masks_and_scales() {
        let mut tape = Tape::new();
        let n = 10_000;
        let ones = Matrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let x = tape.leaf(&ones, false);
        let y = tape.dropout(x, 0.3, 11, true).unwrap();
        let vals = tape.value(y);
        let scale = 1.0 / 0.7;
        assert!(vals.iter().all(|&v| v == 0.0 || (v - scale).abs() < 1e-15));
        let kept = vals.iter().filter(|&&v| v != 0.0).count() as f64;
        assert!((kept / n as f64 - 0.7).abs() < 0.02);
    }

    #[test]
    fn dropout_rejects_bad_rate() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 1, &[1.0]);
        assert!(tape.dropout(x, 1.0, 0, true).is_err());
        assert!(tape.dropout(x, -0.1, 0, true).is_err());
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 4, 4, &[1.0; 16]);
        let a = tape.dropout(x, 0.5, 99, true).unwrap();
        let b = tape.dropout(x, 0.5, 99, true).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn sparse_dense_matches_densified_product() {
        let s = SparseMatrix::from_entries(3, 3, &[(0, 1, 2.0), (2, 0, -1.5)]).unwrap();
        let s = Arc::new(s);
        let mut tape = Tape::new();
        let d = param(&mut tape, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let sparse_out = tape.sparse_dense_matmul(&s, d).unwrap();

        let dense = tape.constant(3, 3, s.to_dense()).unwrap();
        let dense_out = tape.matmul(dense, d).unwrap();
        assert_eq!(tape.value(sparse_out), tape.value(dense_out));
    }

    #[test]
    fn mean_stack_of_equal_tensors_is_exact_identity() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 2, 2, &[0.1, 0.2, 0.3, -0.7]);
        for n in 2..=5 {
            let stack: Vec<TensorId> = (0..n).map(|_| x).collect();
            let m = tape.mean_stack(&stack).unwrap();
            assert_eq!(tape.value(m), tape.value(x), "stack of {n}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = param(&mut tape, 2, 3, &[0.0; 6]);
        let b = param(&mut tape, 2, 3, &[0.0; 6]);
        assert!(matches!(tape.matmul(a, b), Err(CoreError::InvalidShape(_))));
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut tape = Tape::new();
        let a = param(&mut tape, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = param(&mut tape, 2, 3, &[-1.0, 0.5, 2.0, 3.0, -2.0, 1.0]);
        let c = tape.matmul_nt(a, b).unwrap();
        // rows of a dotted with rows of b
        assert_eq!(tape.value(c), &[1.0 * -1.0 + 2.0 * 0.5 + 3.0 * 2.0,
                                    1.0 * 3.0 + 2.0 * -2.0 + 3.0 * 1.0,
                                    4.0 * -1.0 + 5.0 * 0.5 + 6.0 * 2.0,
                                    4.0 * 3.0 + 5.0 * -2.0 + 6.0 * 1.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = param(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = param(&mut tape, 1, 2, &[5.0, 6.0]);
        let cat = tape.concat_rows(a, b).unwrap();
        let back_a = tape.slice_rows(cat, 0, 2).unwrap();
        let back_b = tape.slice_rows(cat, 2, 1).unwrap();
        assert_eq!(tape.value(back_a), tape.value(a));
        assert_eq!(tape.value(back_b), tape.value(b));
    }

    #[test]
    fn log_softmax_rows_shift_invariant() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 4, &[0.3, -1.2, 2.0, 0.0]);
        let shifted = tape.add_scalar(x, 123.456);
        let a = tape.log_softmax_rows(x);
        let b = tape.log_softmax_rows(shifted);
        for (u, v) in tape.value(a).iter().zip(tape.value(b).iter()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn unreachable_parameter_reports_zero_grad() {
        let mut tape = Tape::new();
        let x = param(&mut tape, 1, 1, &[1.0]);
        let y = param(&mut tape, 1, 1, &[2.0]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad_or_zeros(y), vec![0.0]);
    }
}
