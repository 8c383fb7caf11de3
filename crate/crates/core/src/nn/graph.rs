//! Reverse-mode automatic differentiation over a recorded op tape.
//!
//! Ops are recorded eagerly: each builder computes its forward value at once
//! and appends a node. Node values are stored as f32, but all op arithmetic
//! runs in f64 (reductions therefore accumulate in 64 bits) and rounds at
//! node boundaries. The same evaluator can replay the whole tape in pure f64
//! (`eval_f64`), which gives finite-difference checks a noise-free function
//! to probe, and `backward` runs a single f64 gradient engine over either
//! value table.

use super::tensor::Tensor;
use super::NnError;
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`]. Valid only for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    /// Position of this node in its graph; indexes the per-node gradient
    /// list returned by [`Graph::backward_f64_exact`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// `[m,k] · [k,n]`
    Matmul { a: Var, b: Var },
    /// `[m,k] · [n,k]ᵀ` — the natural orientation for `[out,in]` weights.
    MatmulBt { a: Var, b: Var },
    /// `[m,n] + [1,n]` broadcast over rows.
    AddRow { a: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// `mul·x + add`, elementwise.
    Affine { x: Var, mul: f64, add: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Softplus { x: Var },
    /// Row-wise softmax.
    SoftmaxRows { x: Var },
    /// Elementwise product with a frozen mask (entries 0 or 1/keep-rate).
    DropoutMask { x: Var, mask: Vec<f32> },
    /// Per-row dot product: `[m,d] × [m,d] → [m,1]`.
    RowDot { a: Var, b: Var },
    /// Each row of `[m,d]` scaled by the matching `[m,1]` entry.
    MulCol { a: Var, col: Var },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    /// Sum of all entries → `[1,1]`.
    Sum { x: Var },
    /// Mean of all entries → `[1,1]`.
    Mean { x: Var },
}

struct Node {
    shape: (usize, usize),
    data: Vec<f32>,
    op: Op,
    param: Option<String>,
}

/// A tape of eagerly evaluated ops.
#[derive(Default)]
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

    // ── Leaves ──────────────────────────────────────────────────────────

    fn leaf(&mut self, shape: (usize, usize), data: Vec<f32>, param: Option<String>) -> Var {
        debug_assert_eq!(shape.0 * shape.1, data.len());
        self.nodes.push(Node { shape, data, op: Op::Leaf, param });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (receives a gradient internally but exports none).
    pub fn input(&mut self, t: &Tensor) -> Var {
        let s = t.shape();
        assert_eq!(s.len(), 2, "graph tensors are rank 2, got {s:?}");
        self.leaf((s[0], s[1]), t.data().to_vec(), None)
    }

    /// Constant `[1, n]` row from a slice.
    pub fn input_row(&mut self, data: &[f32]) -> Var {
        self.leaf((1, data.len()), data.to_vec(), None)
    }

    /// Constant `[m, n]` from a flat slice.
    pub fn input_mat(&mut self, rows: usize, cols: usize, data: &[f32]) -> Var {
        assert_eq!(rows * cols, data.len());
        self.leaf((rows, cols), data.to_vec(), None)
    }

    pub fn scalar(&mut self, x: f32) -> Var {
        self.leaf((1, 1), vec![x], None)
    }

    /// Trainable leaf; gradients are exported under `name` by [`Graph::backward`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let s = t.shape();
        assert_eq!(s.len(), 2, "graph tensors are rank 2, got {s:?}");
        self.leaf((s[0], s[1]), t.data().to_vec(), Some(name.to_string()))
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.nodes[v.0].shape;
        Tensor::from_vec(&[r, c], self.nodes[v.0].data.clone())
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar_value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].shape.0 * self.nodes[v.0].shape.1, 1);
        self.nodes[v.0].data[0]
    }

    // ── Op builders ─────────────────────────────────────────────────────

    fn push(&mut self, shape: (usize, usize), op: Op) -> Var {
        let data = self.compute(&op, shape, None);
        self.nodes.push(Node { shape, data: data.iter().map(|&x| x as f32).collect(), op, param: None });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(op: &'static str, l: (usize, usize), r: (usize, usize)) -> NnError {
        NnError::ShapeMismatch { op, left: vec![l.0, l.1], right: vec![r.0, r.1] }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Self::mismatch("matmul", (m, k), (k2, n)));
        }
        Ok(self.push((m, n), Op::Matmul { a, b }))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Self::mismatch("matmul_bt", (m, k), (n, k2)));
        }
        Ok(self.push((m, n), Op::MatmulBt { a, b }))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (m, n) = self.shape(a);
        let (br, bn) = self.shape(bias);
        if br != 1 || bn != n {
            return Err(Self::mismatch("add_row", (m, n), (br, bn)));
        }
        Ok(self.push((m, n), Op::AddRow { a, bias }))
    }

    fn same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<(usize, usize), NnError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Self::mismatch(op_name, sa, sb));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(s, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(s, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(s, Op::Mul { a, b }))
    }

    pub fn affine(&mut self, x: Var, mul: f32, add: f32) -> Var {
        let s = self.shape(x);
        self.push(s, Op::Affine { x, mul: mul as f64, add: add as f64 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.push(s, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.push(s, Op::Sigmoid { x })
    }

    pub fn tanh_(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.push(s, Op::Tanh { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.push(s, Op::Softplus { x })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.push(s, Op::SoftmaxRows { x })
    }

    /// Elementwise product with a precomputed dropout mask. Prefer the
    /// higher-level [`super::dropout`], which draws the mask from a stream.
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f32>) -> Result<Var, NnError> {
        let s = self.shape(x);
        if mask.len() != s.0 * s.1 {
            return Err(Self::mismatch("dropout_mask", s, (1, mask.len())));
        }
        Ok(self.push(s, Op::DropoutMask { x, mask }))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let s = self.same_shape("row_dot", a, b)?;
        Ok(self.push((s.0, 1), Op::RowDot { a, b }))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, NnError> {
        let (m, d) = self.shape(a);
        let sc = self.shape(col);
        if sc != (m, 1) {
            return Err(Self::mismatch("mul_col", (m, d), sc));
        }
        Ok(self.push((m, d), Op::MulCol { a, col }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let m = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != m {
                return Err(Self::mismatch("concat_cols", (m, cols), s));
            }
            cols += s.1;
        }
        Ok(self.push((m, cols), Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, c) = self.shape(x);
        if start + len > c {
            return Err(Self::mismatch("slice_cols", (m, c), (start, len)));
        }
        Ok(self.push((m, len), Op::SliceCols { x, start, len }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push((1, 1), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push((1, 1), Op::Mean { x })
    }

    // ── Shared evaluator ────────────────────────────────────────────────

    /// Parent values as f64. When `table` is given (f64 replay) values come
    /// from it; otherwise from the stored f32 data.
    fn fetch(&self, v: Var, table: Option<&[Vec<f64>]>) -> Vec<f64> {
        match table {
            Some(t) => t[v.0].clone(),
            None => self.nodes[v.0].data.iter().map(|&x| x as f64).collect(),
        }
    }

    /// Evaluates one op in f64. The single source of truth for op semantics:
    /// both the eager forward pass and the f64 replay go through here.
    fn compute(&self, op: &Op, shape: (usize, usize), table: Option<&[Vec<f64>]>) -> Vec<f64> {
        let (rows, cols) = shape;
        match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Matmul { a, b } => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                let av = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = av[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += x * bv[l * n + j];
                        }
                    }
                }
                out
            }
            Op::MatmulBt { a, b } => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                let av = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for l in 0..k {
                            acc += av[i * k + l] * bv[j * k + l];
                        }
                        out[i * n + j] = acc;
                    }
                }
                out
            }
            Op::AddRow { a, bias } => {
                let av = self.fetch(*a, table);
                let bv = self.fetch(*bias, table);
                let mut out = av;
                for i in 0..rows {
                    for j in 0..cols {
                        out[i * cols + j] += bv[j];
                    }
                }
                out
            }
            Op::Add { a, b } => {
                let mut out = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                for (o, x) in out.iter_mut().zip(bv) {
                    *o += x;
                }
                out
            }
            Op::Sub { a, b } => {
                let mut out = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                for (o, x) in out.iter_mut().zip(bv) {
                    *o -= x;
                }
                out
            }
            Op::Mul { a, b } => {
                let mut out = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                for (o, x) in out.iter_mut().zip(bv) {
                    *o *= x;
                }
                out
            }
            Op::Affine { x, mul, add } => {
                self.fetch(*x, table).into_iter().map(|v| mul * v + add).collect()
            }
            Op::Relu { x } => self.fetch(*x, table).into_iter().map(|v| v.max(0.0)).collect(),
            Op::Sigmoid { x } => self.fetch(*x, table).into_iter().map(sigmoid64).collect(),
            Op::Tanh { x } => self.fetch(*x, table).into_iter().map(|v| v.tanh()).collect(),
            Op::Softplus { x } => self.fetch(*x, table).into_iter().map(softplus64).collect(),
            Op::SoftmaxRows { x } => {
                let xv = self.fetch(*x, table);
                let mut out = vec![0.0; xv.len()];
                for i in 0..rows {
                    let row = &xv[i * cols..(i + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..cols {
                        let e = (row[j] - max).exp();
                        out[i * cols + j] = e;
                        denom += e;
                    }
                    for j in 0..cols {
                        out[i * cols + j] /= denom;
                    }
                }
                out
            }
            Op::DropoutMask { x, mask } => {
                let xv = self.fetch(*x, table);
                xv.into_iter().zip(mask.iter()).map(|(v, &m)| v * m as f64).collect()
            }
            Op::RowDot { a, b } => {
                let d = self.shape(*a).1;
                let av = self.fetch(*a, table);
                let bv = self.fetch(*b, table);
                (0..rows)
                    .map(|i| (0..d).map(|j| av[i * d + j] * bv[i * d + j]).sum())
                    .collect()
            }
            Op::MulCol { a, col } => {
                let av = self.fetch(*a, table);
                let cv = self.fetch(*col, table);
                let mut out = av;
                for i in 0..rows {
                    for j in 0..cols {
                        out[i * cols + j] *= cv[i];
                    }
                }
                out
            }
            Op::ConcatCols { parts } => {
                let mut out = vec![0.0; rows * cols];
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    let pv = self.fetch(p, table);
                    for i in 0..rows {
                        out[i * cols + off..i * cols + off + pc]
                            .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
                    }
                    off += pc;
                }
                out
            }
            Op::SliceCols { x, start, len } => {
                let c = self.shape(*x).1;
                let xv = self.fetch(*x, table);
                let mut out = vec![0.0; rows * len];
                for i in 0..rows {
                    out[i * len..(i + 1) * len]
                        .copy_from_slice(&xv[i * c + start..i * c + start + len]);
                }
                out
            }
            Op::Sum { x } => vec![self.fetch(*x, table).iter().sum()],
            Op::Mean { x } => {
                let xv = self.fetch(*x, table);
                let n = xv.len().max(1) as f64;
                vec![xv.iter().sum::<f64>() / n]
            }
        }
    }

    // ── f64 replay ──────────────────────────────────────────────────────

    /// Recomputes every node in pure f64. `overrides` replaces leaf values
    /// (full buffers); non-leaf overrides are ignored.
    pub fn eval_f64(&self, overrides: &[(Var, Vec<f64>)]) -> Vec<Vec<f64>> {
        let mut table: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let val = if let Op::Leaf = node.op {
                overrides
                    .iter()
                    .find(|(v, _)| v.0 == idx)
                    .map(|(_, d)| d.clone())
                    .unwrap_or_else(|| node.data.iter().map(|&x| x as f64).collect())
            } else {
                self.compute(&node.op, node.shape, Some(&table))
            };
            table.push(val);
        }
        table
    }

    /// f64 value of a scalar node after replaying with leaf `overrides`.
    pub fn eval_scalar_f64(&self, target: Var, overrides: &[(Var, Vec<f64>)]) -> f64 {
        let table = self.eval_f64(overrides);
        debug_assert_eq!(table[target.0].len(), 1);
        table[target.0][0]
    }

    // ── Backward ────────────────────────────────────────────────────────

    fn backward_table(
        &self,
        table: &[Vec<f64>],
        loss: Var,
    ) -> Result<Vec<Option<Vec<f64>>>, NnError> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(NnError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, numel: usize) -> &mut [f64] {
            grads[idx].get_or_insert_with(|| vec![0.0; numel])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            let (rows, cols) = node.shape;
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    let av = &table[a.0];
                    let bv = &table[b.0];
                    {
                        let da = acc(&mut grads, a.0, m * k);
                        for i2 in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[l * n + j];
                                }
                                da[i2 * k + l] += s;
                            }
                        }
                    }
                    let db = acc(&mut grads, b.0, k * n);
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i2 in 0..m {
                                s += av[i2 * k + l] * g[i2 * n + j];
                            }
                            db[l * n + j] += s;
                        }
                    }
                }
                Op::MatmulBt { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).0;
                    let av = &table[a.0];
                    let bv = &table[b.0];
                    {
                        let da = acc(&mut grads, a.0, m * k);
                        for i2 in 0..m {
                            for l in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i2 * n + j] * bv[j * k + l];
                                }
                                da[i2 * k + l] += s;
                            }
                        }
                    }
                    let db = acc(&mut grads, b.0, n * k);
                    for j in 0..n {
                        for l in 0..k {
                            let mut s = 0.0;
                            for i2 in 0..m {
                                s += g[i2 * n + j] * av[i2 * k + l];
                            }
                            db[j * k + l] += s;
                        }
                    }
                }
                Op::AddRow { a, bias } => {
                    {
                        let da = acc(&mut grads, a.0, rows * cols);
                        for (d, gv) in da.iter_mut().zip(&g) {
                            *d += gv;
                        }
                    }
                    let db = acc(&mut grads, bias.0, cols);
                    for i2 in 0..rows {
                        for j in 0..cols {
                            db[j] += g[i2 * cols + j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for &(v, sign) in &[(*a, 1.0), (*b, 1.0)] {
                        let dv = acc(&mut grads, v.0, rows * cols);
                        for (d, gv) in dv.iter_mut().zip(&g) {
                            *d += sign * gv;
                        }
                    }
                }
                Op::Sub { a, b } => {
                    for &(v, sign) in &[(*a, 1.0), (*b, -1.0)] {
                        let dv = acc(&mut grads, v.0, rows * cols);
                        for (d, gv) in dv.iter_mut().zip(&g) {
                            *d += sign * gv;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let av = table[a.0].clone();
                    let bv = table[b.0].clone();
                    {
                        let da = acc(&mut grads, a.0, rows * cols);
                        for ((d, gv), x) in da.iter_mut().zip(&g).zip(&bv) {
                            *d += gv * x;
                        }
                    }
                    let db = acc(&mut grads, b.0, rows * cols);
                    for ((d, gv), x) in db.iter_mut().zip(&g).zip(&av) {
                        *d += gv * x;
                    }
                }
                Op::Affine { x, mul, .. } => {
                    let mul = *mul;
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for (d, gv) in dx.iter_mut().zip(&g) {
                        *d += mul * gv;
                    }
                }
                Op::Relu { x } => {
                    let out = &table[i];
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for ((d, gv), &o) in dx.iter_mut().zip(&g).zip(out.iter()) {
                        if o > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let out = table[i].clone();
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for ((d, gv), o) in dx.iter_mut().zip(&g).zip(out) {
                        *d += gv * o * (1.0 - o);
                    }
                }
                Op::Tanh { x } => {
                    let out = table[i].clone();
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for ((d, gv), o) in dx.iter_mut().zip(&g).zip(out) {
                        *d += gv * (1.0 - o * o);
                    }
                }
                Op::Softplus { x } => {
                    let xv = table[x.0].clone();
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for ((d, gv), v) in dx.iter_mut().zip(&g).zip(xv) {
                        *d += gv * sigmoid64(v);
                    }
                }
                Op::SoftmaxRows { x } => {
                    let out = table[i].clone();
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for r2 in 0..rows {
                        let o = &out[r2 * cols..(r2 + 1) * cols];
                        let gr = &g[r2 * cols..(r2 + 1) * cols];
                        let dot: f64 = o.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[r2 * cols + j] += o[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::DropoutMask { x, mask } => {
                    let mask = mask.clone();
                    let dx = acc(&mut grads, x.0, rows * cols);
                    for ((d, gv), &m) in dx.iter_mut().zip(&g).zip(mask.iter()) {
                        *d += gv * m as f64;
                    }
                }
                Op::RowDot { a, b } => {
                    let d2 = self.shape(*a).1;
                    let av = table[a.0].clone();
                    let bv = table[b.0].clone();
                    {
                        let da = acc(&mut grads, a.0, rows * d2);
                        for i2 in 0..rows {
                            for j in 0..d2 {
                                da[i2 * d2 + j] += g[i2] * bv[i2 * d2 + j];
                            }
                        }
                    }
                    let db = acc(&mut grads, b.0, rows * d2);
                    for i2 in 0..rows {
                        for j in 0..d2 {
                            db[i2 * d2 + j] += g[i2] * av[i2 * d2 + j];
                        }
                    }
                }
                Op::MulCol { a, col } => {
                    let av = table[a.0].clone();
                    let cv = table[col.0].clone();
                    {
                        let da = acc(&mut grads, a.0, rows * cols);
                        for i2 in 0..rows {
                            for j in 0..cols {
                                da[i2 * cols + j] += g[i2 * cols + j] * cv[i2];
                            }
                        }
                    }
                    let dc = acc(&mut grads, col.0, rows);
                    for i2 in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += g[i2 * cols + j] * av[i2 * cols + j];
                        }
                        dc[i2] += s;
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(p).1;
                        let dp = acc(&mut grads, p.0, rows * pc);
                        for i2 in 0..rows {
                            for j in 0..pc {
                                dp[i2 * pc + j] += g[i2 * cols + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (start, len) = (*start, *len);
                    let c = self.shape(*x).1;
                    let dx = acc(&mut grads, x.0, rows * c);
                    for i2 in 0..rows {
                        for j in 0..len {
                            dx[i2 * c + start + j] += g[i2 * len + j];
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.nodes[x.0].data.len();
                    let dx = acc(&mut grads, x.0, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].data.len();
                    let scale = g[0] / n.max(1) as f64;
                    let dx = acc(&mut grads, x.0, n);
                    for d in dx.iter_mut() {
                        *d += scale;
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `loss` with respect to every parameter leaf, keyed by
    /// name. Gradients of parameters bound more than once accumulate.
    pub fn backward(&self, loss: Var) -> Result<GradMap, NnError> {
        let table: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| n.data.iter().map(|&x| x as f64).collect()).collect();
        let grads = self.backward_table(&table, loss)?;
        let mut out = GradMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let g = match &grads[idx] {
                Some(g) => g.clone(),
                None => vec![0.0; node.data.len()],
            };
            let (r, c) = node.shape;
            let gt = Tensor::from_vec(&[r, c], g.iter().map(|&x| x as f32).collect());
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(gt);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().data_mut().iter_mut().zip(gt.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-node gradients computed on the pure-f64 replay of the tape.
    /// This is the comparison path for finite-difference checks.
    pub fn backward_f64_exact(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, NnError> {
        let table = self.eval_f64(&[]);
        self.backward_table(&table, loss)
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus64(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect())
    }

    /// Central finite difference of a scalar node w.r.t. one leaf element,
    /// on the f64 replay path.
    fn fd(g: &Graph, loss: Var, leaf: Var, idx: usize, eps: f64) -> f64 {
        let base: Vec<f64> = g.value(leaf).iter().map(|&x| x as f64).collect();
        let mut hi = base.clone();
        hi[idx] += eps;
        let mut lo = base;
        lo[idx] -= eps;
        let fhi = g.eval_scalar_f64(loss, &[(leaf, hi)]);
        let flo = g.eval_scalar_f64(loss, &[(leaf, lo)]);
        (fhi - flo) / (2.0 * eps)
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// FD-checks the gradient of `loss` w.r.t. every element of `leaf`.
    fn assert_fd_close(g: &Graph, loss: Var, leaf: Var, tol: f64) {
        let grads = g.backward_f64_exact(loss).unwrap();
        let analytic = grads[leaf.0].clone().unwrap_or_else(|| {
            vec![0.0; g.value(leaf).len()]
        });
        let numeric: Vec<f64> =
            (0..analytic.len()).map(|i| fd(g, loss, leaf, i, 1e-4)).collect();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "max rel err {err} >= {tol}\nanalytic {analytic:?}\nnumeric {numeric:?}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.input_row(&[1.0, -2.0, 3.0]);
        let s = g.sum(x);
        let grads = g.backward_f64_exact(s).unwrap();
        assert_eq!(grads[x.0].as_deref().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.input_row(&[3.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        assert_eq!(g.scalar_value(s), 9.0);
        let grads = g.backward_f64_exact(s).unwrap();
        assert_eq!(grads[x.0].as_deref().unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_forward_matches_hand_case() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let mut g = Graph::new();
        let a = g.input_mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = g.input_mat(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_bt_matches_transposed_matmul() {
        let mut rng = RngStream::from_seed(5);
        let at = randn_tensor(&[3, 4], &mut rng);
        let bt = randn_tensor(&[2, 4], &mut rng);
        // b transposed by hand: [4,2]
        let mut btr = vec![0.0f32; 8];
        for i in 0..2 {
            for j in 0..4 {
                btr[j * 2 + i] = bt.at(i, j);
            }
        }
        let mut g = Graph::new();
        let a = g.input(&at);
        let b = g.input(&bt);
        let b_tr = g.input_mat(4, 2, &btr);
        let c1 = g.matmul_bt(a, b).unwrap();
        let c2 = g.matmul(a, b_tr).unwrap();
        for (x, y) in g.value(c1).iter().zip(g.value(c2)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = RngStream::from_seed(1);
        let at = randn_tensor(&[3, 4], &mut rng);
        let bt = randn_tensor(&[4, 2], &mut rng);
        let mut g = Graph::new();
        let a = g.input(&at);
        let b = g.input(&bt);
        let c = g.matmul(a, b).unwrap();
        let sq = g.mul(c, c).unwrap();
        let loss = g.sum(sq);
        assert_fd_close(&g, loss, a, 1e-7);
        assert_fd_close(&g, loss, b, 1e-7);
    }

    #[test]
    fn mlp_chain_gradients_match_finite_differences() {
        let mut rng = RngStream::from_seed(2);
        let x = randn_tensor(&[2, 3], &mut rng);
        let w1 = randn_tensor(&[4, 3], &mut rng);
        let b1 = randn_tensor(&[1, 4], &mut rng);
        let w2 = randn_tensor(&[1, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let w1v = g.param("w1", &w1);
        let b1v = g.param("b1", &b1);
        let w2v = g.param("w2", &w2);
        let z1 = g.matmul_bt(xv, w1v).unwrap();
        let z1b = g.add_row(z1, b1v).unwrap();
        let h = g.tanh_(z1b);
        let y = g.matmul_bt(h, w2v).unwrap();
        let loss = g.mean(y);
        assert_fd_close(&g, loss, w1v, 1e-6);
        assert_fd_close(&g, loss, b1v, 1e-6);
        assert_fd_close(&g, loss, w2v, 1e-6);
        assert_fd_close(&g, loss, xv, 1e-6);

        // Production (f32-stored) backward agrees with the exact path.
        let grads = g.backward(loss).unwrap();
        let exact = g.backward_f64_exact(loss).unwrap();
        let w1g = grads.get("w1").unwrap();
        let w1e = exact[w1v.0].as_ref().unwrap();
        for (a, b) in w1g.data().iter().zip(w1e) {
            assert!((*a as f64 - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grads_check() {
        let mut rng = RngStream::from_seed(3);
        let x = randn_tensor(&[3, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let sm = g.softmax_rows(xv);
        for i in 0..3 {
            let row_sum: f32 = g.value(sm)[i * 5..(i + 1) * 5].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-5);
        }
        // A non-symmetric scalar head so softmax grads are exercised fully.
        let w = randn_tensor(&[1, 5], &mut rng);
        let wv = g.input(&w);
        let y = g.matmul_bt(sm, wv).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        assert_fd_close(&g, loss, xv, 1e-6);
    }

    #[test]
    fn pointwise_ops_grads_check() {
        let mut rng = RngStream::from_seed(4);
        let x = randn_tensor(&[2, 4], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let a = g.relu(xv);
        let b = g.sigmoid(a);
        let c = g.tanh_(b);
        let d = g.softplus(c);
        let e = g.affine(d, -1.7, 0.3);
        let loss = g.mean(e);
        assert_fd_close(&g, loss, xv, 1e-6);
    }

    #[test]
    fn row_dot_and_mul_col_grads_check() {
        let mut rng = RngStream::from_seed(6);
        let a = randn_tensor(&[3, 4], &mut rng);
        let b = randn_tensor(&[3, 4], &mut rng);
        let mut g = Graph::new();
        let av = g.input(&a);
        let bv = g.input(&b);
        let dots = g.row_dot(av, bv).unwrap();
        let scaled = g.mul_col(av, dots).unwrap();
        let loss = g.mean(scaled);
        assert_fd_close(&g, loss, av, 1e-6);
        assert_fd_close(&g, loss, bv, 1e-6);
    }

    #[test]
    fn concat_slice_round_trip_and_grads() {
        let mut rng = RngStream::from_seed(7);
        let a = randn_tensor(&[2, 3], &mut rng);
        let b = randn_tensor(&[2, 2], &mut rng);
        let mut g = Graph::new();
        let av = g.input(&a);
        let bv = g.input(&b);
        let cat = g.concat_cols(&[av, bv]).unwrap();
        assert_eq!(g.shape(cat), (2, 5));
        let back = g.slice_cols(cat, 3, 2).unwrap();
        assert_eq!(g.value(back), g.value(bv));
        let sq = g.mul(cat, cat).unwrap();
        let loss = g.sum(sq);
        assert_fd_close(&g, loss, av, 1e-7);
        assert_fd_close(&g, loss, bv, 1e-7);
    }

    #[test]
    fn shape_mismatch_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input_mat(2, 3, &[0.0; 6]);
        let b = g.input_mat(2, 3, &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "got: {msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let a = g.input_row(&[1.0, 2.0]);
        let err = g.backward(a).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }

    #[test]
    fn reusing_a_param_accumulates_its_gradient() {
        let w = Tensor::row(vec![2.0]);
        let x1 = Tensor::row(vec![3.0]);
        let x2 = Tensor::row(vec![5.0]);
        let mut g = Graph::new();
        let wv = g.param("w", &w);
        let x1v = g.input(&x1);
        let x2v = g.input(&x2);
        let p1 = g.mul(wv, x1v).unwrap();
        let p2 = g.mul(wv, x2v).unwrap();
        let both = g.add(p1, p2).unwrap();
        let loss = g.sum(both);
        let grads = g.backward(loss).unwrap();
        // d/dw (w·3 + w·5) = 8.
        assert_eq!(grads.get("w").unwrap().data(), &[8.0]);
    }

    #[test]
    fn unused_param_exports_zero_gradient() {
        let mut g = Graph::new();
        let used = g.param("used", &Tensor::row(vec![1.0]));
        let _unused = g.param("unused", &Tensor::row(vec![1.0]));
        let loss = g.sum(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("unused").unwrap().data(), &[0.0]);
        assert_eq!(grads.get("used").unwrap().data(), &[1.0]);
    }

    #[test]
    fn dropout_mask_scales_entries() {
        let mut g = Graph::new();
        let x = g.input_row(&[1.0, 2.0, 3.0, 4.0]);
        let d = g.dropout_mask(x, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(g.value(d), &[0.0, 4.0, 0.0, 8.0]);
        let loss = g.sum(d);
        let grads = g.backward_f64_exact(loss).unwrap();
        assert_eq!(grads[x.0].as_deref().unwrap(), &[0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn eval_f64_tracks_f32_forward() {
        let mut rng = RngStream::from_seed(8);
        let x = randn_tensor(&[2, 3], &mut rng);
        let w = randn_tensor(&[4, 3], &mut rng);
        let mut g = Graph::new();
        let xv = g.input(&x);
        let wv = g.input(&w);
        let y = g.matmul_bt(xv, wv).unwrap();
        let s = g.sigmoid(y);
        let table = g.eval_f64(&[]);
        for (f32v, f64v) in g.value(s).iter().zip(&table[s.0]) {
            assert!((*f32v as f64 - f64v).abs() < 1e-5);
        }
    }
}
