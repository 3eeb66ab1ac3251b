//! Forward operations and their adjoints.
//!
//! Each op validates shapes at construction, computes its value eagerly,
//! and records enough payload to replay the adjoint. Reductions accumulate
//! left to right so forward and backward are bitwise deterministic.

use crate::error::{Error, Result};
use crate::numkern::tape::{Node, Tape, Var};
use crate::numkern::tensor::{Scalar, Tensor};

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    ScaleByScalar(Var, Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    RowSoftmax(Var),
    CausalRowSoftmax(Var),
    Silu(Var),
    LayerNormRows { x: Var, gain: Var, bias: Var, eps: T },
    L2NormalizeRows { x: Var, eps: T },
    Rope { x: Var, heads: usize, base: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    SelectCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    Sum(Var),
    MeanRows(Var),
    DotConst(Var, Vec<T>),
    GatherRowsCols { x: Var, indices: Vec<usize>, k: usize },
    DivRowsBySum(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    MoeStaticUpdate { v: Var, indices: Vec<usize>, k: usize, weights: Var },
    MoeMlpUpdate {
        w_down: Var,
        w_up: Var,
        rank: usize,
        indices: Vec<usize>,
        k: usize,
        weights: Var,
        h: Var,
        saved_z: Vec<T>,
    },
}

// ── dense kernels ────────────────────────────────────────────────────

/// out += a·b with a [m×k], b [k×n].
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// out += a·bᵀ with a [m×k], b [n×k].
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out += aᵀ·b with a [k×m], b [k×n].
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            if api == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + api * brow[j];
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_row_into<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &x in row.iter().skip(1) {
        if x > mx {
            mx = x;
        }
    }
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row.iter()) {
        let e = (x - mx).exp();
        *o = e;
        sum = sum + e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

// ── shape helpers ────────────────────────────────────────────────────

fn want_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} must be rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ── forward builders ─────────────────────────────────────────────────

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::Scale(a, c), &[a]))
    }

    /// Elementwise product with a constant vector (dropout masks etc).
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::Shape("mul_const: mask length mismatch".to_string()));
        }
        let data = self.value(a).data().iter().zip(c.iter()).map(|(&x, &m)| x * m).collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::MulConst(a, c), &[a]))
    }

    /// Multiply every element of `a` by a learnable scalar `s` (shape [1]).
    pub fn scale_by_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape("scale_by_scalar: s must have one element".to_string()));
        }
        let sv = self.value(s).data()[0];
        let data = self.value(a).data().iter().map(|&x| x * sv).collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::ScaleByScalar(a, s), &[a, s]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = want_matrix(self.value(a), "matmul lhs")?;
        let (k2, n) = want_matrix(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        Ok(self.push_computed(out, Op::Matmul(a, b), &[a, b]))
    }

    /// a·bᵀ with a [m×k], b [n×k].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = want_matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = want_matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt: inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, out.data_mut());
        Ok(self.push_computed(out, Op::MatmulNT(a, b), &[a, b]))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if cols < 1 {
            return Err(Error::Shape("softmax: empty rows".to_string()));
        }
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        for r in 0..rows {
            let src = &self.value(x).data()[r * cols..(r + 1) * cols];
            // borrow juggling: compute into a scratch row
            let mut row = vec![T::zero(); cols];
            softmax_row_into(src, &mut row);
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&row);
        }
        Ok(self.push_computed(out, Op::RowSoftmax(x), &[x]))
    }

    /// Row-wise softmax over a square matrix where row i only attends to
    /// columns j ≤ i; masked entries get probability zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (n, n2) = want_matrix(self.value(x), "causal_softmax")?;
        if n != n2 {
            return Err(Error::Shape(format!("causal_softmax: square needed, got {n}×{n2}")));
        }
        let mut out = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            let src = &self.value(x).data()[i * n..i * n + i + 1];
            let mut row = vec![T::zero(); i + 1];
            softmax_row_into(src, &mut row);
            out.data_mut()[i * n..i * n + i + 1].copy_from_slice(&row);
        }
        Ok(self.push_computed(out, Op::CausalRowSoftmax(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(self.value(x).shape().to_vec(), data)?;
        Ok(self.push_computed(out, Op::Silu(x), &[x]))
    }

    /// Zero-mean unit-variance normalization over the last dimension,
    /// then elementwise affine with `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if cols < 2 {
            return Err(Error::Shape("layer_norm: needs at least 2 features".to_string()));
        }
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::Shape("layer_norm: gain/bias length mismatch".to_string()));
        }
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        let d = T::from_usize(cols).unwrap();
        for r in 0..rows {
            let src = &self.value(x).data()[r * cols..(r + 1) * cols];
            let mut mean = T::zero();
            for &v in src {
                mean = mean + v;
            }
            mean = mean / d;
            let mut var = T::zero();
            for &v in src {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / d;
            let inv = T::one() / (var + eps).sqrt();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            let mut row = vec![T::zero(); cols];
            for j in 0..cols {
                row[j] = (src[j] - mean) * inv * g[j] + b[j];
            }
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&row);
        }
        Ok(self.push_computed(out, Op::LayerNormRows { x, gain, bias, eps }, &[x, gain, bias]))
    }

    /// Row-wise v/(‖v‖₂ + eps) over the last dimension.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        let mut out = Tensor::zeros(self.value(x).shape().to_vec());
        for r in 0..rows {
            let src = &self.value(x).data()[r * cols..(r + 1) * cols];
            let mut sq = T::zero();
            for &v in src {
                sq = sq + v * v;
            }
            let denom = sq.sqrt() + eps;
            let mut row = vec![T::zero(); cols];
            for j in 0..cols {
                row[j] = src[j] / denom;
            }
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&row);
        }
        Ok(self.push_computed(out, Op::L2NormalizeRows { x, eps }, &[x]))
    }

    /// Rotary position embedding over [seq × heads·head_dim]; row index is
    /// the sequence position. head_dim must be even; adjacent element pairs
    /// rotate by position-dependent angles.
    pub fn rope_apply(&mut self, x: Var, heads: usize, base: f64) -> Result<Var> {
        let (seq, width) = want_matrix(self.value(x), "rope_apply")?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!("rope_apply: width {width} not divisible by heads {heads}")));
        }
        let head_dim = width / heads;
        if head_dim % 2 != 0 {
            return Err(Error::Shape(format!("rope_apply: head_dim {head_dim} must be even")));
        }
        let mut out = self.value(x).clone();
        out.requires_grad = false;
        out.zero_grad();
        rope_rotate(out.data_mut(), seq, heads, head_dim, base, false);
        Ok(self.push_computed(out, Op::Rope { x, heads, base }, &[x]))
    }

    /// Mean negative log-softmax of the target entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, vocab) = want_matrix(self.value(logits), "cross_entropy logits")?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("cross_entropy: target {bad} ≥ vocab {vocab}")));
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &self.value(logits).data()[r * vocab..(r + 1) * vocab];
            let mut mx = row[0];
            for &v in row.iter().skip(1) {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for &v in row {
                sum = sum + (v - mx).exp();
            }
            let lse = mx + sum.ln();
            total = total + (lse - row[t]);
        }
        let loss = total / T::from_usize(n).unwrap();
        let out = Tensor::scalar(loss);
        Ok(self.push_computed(out, Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Row lookup: out[t] = table[ids[t]].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = want_matrix(self.value(table), "embedding table")?;
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index(format!("embedding: id {bad} ≥ vocab {vocab}")));
        }
        let mut out = Tensor::zeros(vec![ids.len(), d]);
        for (t, &id) in ids.iter().enumerate() {
            let src = &self.value(table).data()[id * d..(id + 1) * d];
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(src);
        }
        Ok(self.push_computed(out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn select_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = want_matrix(self.value(x), "select_cols")?;
        if start + len > cols {
            return Err(Error::Shape(format!("select_cols: {start}+{len} > {cols}")));
        }
        let mut out = Tensor::zeros(vec![rows, len]);
        for r in 0..rows {
            let src = &self.value(x).data()[r * cols + start..r * cols + start + len];
            out.data_mut()[r * len..(r + 1) * len].copy_from_slice(src);
        }
        Ok(self.push_computed(out, Op::SelectCols { x, start, len }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".to_string()));
        }
        let rows = want_matrix(self.value(parts[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = want_matrix(self.value(p), "concat_cols part")?;
            if r != rows {
                return Err(Error::Shape("concat_cols: row mismatch".to_string()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(vec![rows, total]);
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let c = widths[pi];
                let src = &self.value(p).data()[r * c..(r + 1) * c];
                out.data_mut()[r * total + off..r * total + off + c].copy_from_slice(src);
                off += c;
            }
        }
        Ok(self.push_computed(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let out = Tensor::scalar(acc);
        Ok(self.push_computed(out, Op::Sum(x), &[x]))
    }

    /// Column means of a matrix: [n×m] → [m].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = want_matrix(self.value(x), "mean_rows")?;
        if rows == 0 {
            return Err(Error::Shape("mean_rows: zero rows".to_string()));
        }
        let inv = T::one() / T::from_usize(rows).unwrap();
        let mut acc = vec![T::zero(); cols];
        for r in 0..rows {
            let src = &self.value(x).data()[r * cols..(r + 1) * cols];
            for j in 0..cols {
                acc[j] = acc[j] + src[j];
            }
        }
        for v in acc.iter_mut() {
            *v = *v * inv;
        }
        let out = Tensor::from_vec(vec![cols], acc)?;
        Ok(self.push_computed(out, Op::MeanRows(x), &[x]))
    }

    /// Weighted sum against a constant vector: Σᵢ xᵢ·wᵢ.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::Shape("dot_const: weight length mismatch".to_string()));
        }
        let mut acc = T::zero();
        for (&v, &w) in self.value(x).data().iter().zip(weights.iter()) {
            acc = acc + v * w;
        }
        let out = Tensor::scalar(acc);
        Ok(self.push_computed(out, Op::DotConst(x, weights), &[x]))
    }

    /// out[t,j] = x[t, indices[t·k+j]] for a [rows×cols] input.
    pub fn gather_rows_cols(&mut self, x: Var, indices: &[usize], k: usize) -> Result<Var> {
        let (rows, cols) = want_matrix(self.value(x), "gather_rows_cols")?;
        if indices.len() != rows * k {
            return Err(Error::Shape("gather_rows_cols: index count mismatch".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= cols) {
            return Err(Error::Index(format!("gather_rows_cols: column {bad} ≥ {cols}")));
        }
        let mut out = Tensor::zeros(vec![rows, k]);
        for t in 0..rows {
            for j in 0..k {
                out.data_mut()[t * k + j] = self.value(x).data()[t * cols + indices[t * k + j]];
            }
        }
        Ok(self.push_computed(out, Op::GatherRowsCols { x, indices: indices.to_vec(), k }, &[x]))
    }

    /// Normalize each row to sum to one.
    pub fn div_rows_by_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = want_matrix(self.value(x), "div_rows_by_sum")?;
        let mut out = Tensor::zeros(vec![rows, cols]);
        for t in 0..rows {
            let src = &self.value(x).data()[t * cols..(t + 1) * cols];
            let mut s = T::zero();
            for &v in src {
                s = s + v;
            }
            for j in 0..cols {
                out.data_mut()[t * cols + j] = src[j] / s;
            }
        }
        Ok(self.push_computed(out, Op::DivRowsBySum(x), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = want_matrix(self.value(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Index(format!("gather_rows: row {bad} ≥ {n}")));
        }
        let mut out = Tensor::zeros(vec![rows.len(), d]);
        for (t, &r) in rows.iter().enumerate() {
            let src = &self.value(x).data()[r * d..(r + 1) * d];
            out.data_mut()[t * d..(t + 1) * d].copy_from_slice(src);
        }
        Ok(self.push_computed(out, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Place rows of x into a zero matrix of `total` rows at the given positions.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], total: usize) -> Result<Var> {
        let (n, d) = want_matrix(self.value(x), "scatter_rows")?;
        if n != rows.len() {
            return Err(Error::Shape("scatter_rows: row count mismatch".to_string()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= total) {
            return Err(Error::Index(format!("scatter_rows: row {bad} ≥ {total}")));
        }
        let mut out = Tensor::zeros(vec![total, d]);
        for (t, &r) in rows.iter().enumerate() {
            let src = &self.value(x).data()[t * d..(t + 1) * d];
            out.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
        }
        Ok(self.push_computed(out, Op::ScatterRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Weighted sum of static expert vectors:
    /// out[t] = Σⱼ weights[t,j] · v[indices[t·k+j]].
    pub fn moe_static_update(
        &mut self,
        v: Var,
        indices: &[usize],
        k: usize,
        weights: Var,
    ) -> Result<Var> {
        let (m, d) = want_matrix(self.value(v), "moe_static_update pool")?;
        let (rows, kw) = want_matrix(self.value(weights), "moe_static_update weights")?;
        if kw != k || indices.len() != rows * k {
            return Err(Error::Shape("moe_static_update: index/weight mismatch".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("moe_static_update: expert {bad} ≥ {m}")));
        }
        let mut out = Tensor::zeros(vec![rows, d]);
        for t in 0..rows {
            for j in 0..k {
                let e = indices[t * k + j];
                let w = self.value(weights).data()[t * k + j];
                let src = &self.value(v).data()[e * d..(e + 1) * d];
                let dst = &mut out.data_mut()[t * d..(t + 1) * d];
                for c in 0..d {
                    dst[c] = dst[c] + w * src[c];
                }
            }
        }
        Ok(self.push_computed(
            out,
            Op::MoeStaticUpdate { v, indices: indices.to_vec(), k, weights },
            &[v, weights],
        ))
    }

    /// Rank-r expert MLP update:
    /// out[t] = Σⱼ weights[t,j] · W_up[e]·SiLU(W_down[e]·h[t]).
    ///
    /// `w_down` is [M×(r·d)] with expert rows flattened [r][d];
    /// `w_up` is [M×(d·r)] with expert rows flattened [d][r].
    pub fn moe_mlp_update(
        &mut self,
        w_down: Var,
        w_up: Var,
        rank: usize,
        indices: &[usize],
        k: usize,
        weights: Var,
        h: Var,
    ) -> Result<Var> {
        let (m, rd) = want_matrix(self.value(w_down), "moe_mlp_update w_down")?;
        let (m2, dr) = want_matrix(self.value(w_up), "moe_mlp_update w_up")?;
        let (rows, d) = want_matrix(self.value(h), "moe_mlp_update h")?;
        let (rows2, kw) = want_matrix(self.value(weights), "moe_mlp_update weights")?;
        if m != m2 || rd != rank * d || dr != d * rank {
            return Err(Error::Shape("moe_mlp_update: pool shape mismatch".to_string()));
        }
        if rows != rows2 || kw != k || indices.len() != rows * k {
            return Err(Error::Shape("moe_mlp_update: index/weight mismatch".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(Error::Index(format!("moe_mlp_update: expert {bad} ≥ {m}")));
        }
        let mut out = Tensor::zeros(vec![rows, d]);
        let mut saved_z = vec![T::zero(); rows * k * rank];
        for t in 0..rows {
            let ht = &self.value(h).data()[t * d..(t + 1) * d];
            for j in 0..k {
                let e = indices[t * k + j];
                let w = self.value(weights).data()[t * k + j];
                let wd = &self.value(w_down).data()[e * rd..(e + 1) * rd];
                let wu = &self.value(w_up).data()[e * dr..(e + 1) * dr];
                let zslot = &mut saved_z[(t * k + j) * rank..(t * k + j + 1) * rank];
                for rho in 0..rank {
                    let mut acc = T::zero();
                    let wrow = &wd[rho * d..(rho + 1) * d];
                    for c in 0..d {
                        acc = acc + wrow[c] * ht[c];
                    }
                    zslot[rho] = acc;
                }
                let dst = &mut out.data_mut()[t * d..(t + 1) * d];
                for c in 0..d {
                    let mut acc = T::zero();
                    for rho in 0..rank {
                        let z = zslot[rho];
                        acc = acc + wu[c * rank + rho] * (z * sigmoid(z));
                    }
                    dst[c] = dst[c] + w * acc;
                }
            }
        }
        Ok(self.push_computed(
            out,
            Op::MoeMlpUpdate {
                w_down,
                w_up,
                rank,
                indices: indices.to_vec(),
                k,
                weights,
                h,
                saved_z,
            },
            &[w_down, w_up, weights, h],
        ))
    }
}

/// Rotate pairs in place; `inverse` applies the transpose rotation (adjoint).
fn rope_rotate<T: Scalar>(
    data: &mut [T],
    seq: usize,
    heads: usize,
    head_dim: usize,
    base: f64,
    inverse: bool,
) {
    let width = heads * head_dim;
    let half = head_dim / 2;
    for s in 0..seq {
        for hh in 0..heads {
            let off = s * width + hh * head_dim;
            for j in 0..half {
                let theta = s as f64 * base.powf(-(2.0 * j as f64) / head_dim as f64);
                let (sin, cos) = theta.sin_cos();
                let (sin, cos) = if inverse { (-sin, cos) } else { (sin, cos) };
                let c = T::of_f64(cos);
                let sn = T::of_f64(sin);
                let x0 = data[off + 2 * j];
                let x1 = data[off + 2 * j + 1];
                data[off + 2 * j] = x0 * c - x1 * sn;
                data[off + 2 * j + 1] = x0 * sn + x1 * c;
            }
        }
    }
}

// ── adjoints ─────────────────────────────────────────────────────────

fn wants_grad<T: Scalar>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].value.requires_grad
}

fn acc_into<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    write: impl FnOnce(&mut [T]),
) {
    if !wants_grad(nodes, v) {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
    write(slot);
}

pub(crate) fn backward_op<T: Scalar>(
    nodes: &[Node<T>],
    out_idx: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let out_val = &nodes[out_idx].value;
    match &nodes[out_idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_into(nodes, grads, *a, |ga| {
                for (gi, &v) in ga.iter_mut().zip(g) {
                    *gi = *gi + v;
                }
            });
            acc_into(nodes, grads, *b, |gb| {
                for (gi, &v) in gb.iter_mut().zip(g) {
                    *gi = *gi + v;
                }
            });
        }
        Op::Sub(a, b) => {
            acc_into(nodes, grads, *a, |ga| {
                for (gi, &v) in ga.iter_mut().zip(g) {
                    *gi = *gi + v;
                }
            });
            acc_into(nodes, grads, *b, |gb| {
                for (gi, &v) in gb.iter_mut().zip(g) {
                    *gi = *gi - v;
                }
            });
        }
        Op::Mul(a, b) => {
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            acc_into(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * bv[i];
                }
            });
            acc_into(nodes, grads, *b, |gb| {
                for i in 0..gb.len() {
                    gb[i] = gb[i] + g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            let c = *c;
            acc_into(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * c;
                }
            });
        }
        Op::MulConst(a, mask) => {
            acc_into(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * mask[i];
                }
            });
        }
        Op::ScaleByScalar(a, s) => {
            let sv = nodes[s.0].value.data()[0];
            let av = nodes[a.0].value.data();
            acc_into(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] = ga[i] + g[i] * sv;
                }
            });
            acc_into(nodes, grads, *s, |gs| {
                let mut acc = T::zero();
                for i in 0..av.len() {
                    acc = acc + g[i] * av[i];
                }
                gs[0] = gs[0] + acc;
            });
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            acc_into(nodes, grads, *a, |ga| {
                matmul_nt(g, bv, m, n, k, ga);
            });
            acc_into(nodes, grads, *b, |gb| {
                matmul_tn(av, g, m, k, n, gb);
            });
        }
        Op::MatmulNT(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[0];
            let av = nodes[a.0].value.data();
            let bv = nodes[b.0].value.data();
            acc_into(nodes, grads, *a, |ga| {
                matmul_nn(g, bv, m, n, k, ga);
            });
            acc_into(nodes, grads, *b, |gb| {
                matmul_tn(g, av, m, n, k, gb);
            });
        }
        Op::RowSoftmax(x) => {
            let (rows, cols) = out_val.rows_cols();
            let p = out_val.data();
            acc_into(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot = dot + pr[j] * gr[j];
                    }
                    for j in 0..cols {
                        gx[r * cols + j] = gx[r * cols + j] + pr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::CausalRowSoftmax(x) => {
            let n = out_val.shape()[0];
            let p = out_val.data();
            acc_into(nodes, grads, *x, |gx| {
                for i in 0..n {
                    let pr = &p[i * n..i * n + i + 1];
                    let gr = &g[i * n..i * n + i + 1];
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot = dot + pr[j] * gr[j];
                    }
                    for j in 0..=i {
                        gx[i * n + j] = gx[i * n + j] + pr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Silu(x) => {
            let xv = nodes[x.0].value.data();
            acc_into(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    let s = sigmoid(xv[i]);
                    let d = s * (T::one() + xv[i] * (T::one() - s));
                    gx[i] = gx[i] + g[i] * d;
                }
            });
        }
        Op::LayerNormRows { x, gain, bias, eps } => {
            let (rows, cols) = nodes[x.0].value.rows_cols();
            let xv = nodes[x.0].value.data();
            let gv = nodes[gain.0].value.data();
            let d = T::from_usize(cols).unwrap();
            // per-row recompute of mean/var/normalized values
            let mut xhat = vec![T::zero(); rows * cols];
            let mut invs = vec![T::zero(); rows];
            for r in 0..rows {
                let src = &xv[r * cols..(r + 1) * cols];
                let mut mean = T::zero();
                for &v in src {
                    mean = mean + v;
                }
                mean = mean / d;
                let mut var = T::zero();
                for &v in src {
                    let c = v - mean;
                    var = var + c * c;
                }
                var = var / d;
                let inv = T::one() / (var + *eps).sqrt();
                invs[r] = inv;
                for j in 0..cols {
                    xhat[r * cols + j] = (src[j] - mean) * inv;
                }
            }
            acc_into(nodes, grads, *gain, |gg| {
                for r in 0..rows {
                    for j in 0..cols {
                        gg[j] = gg[j] + g[r * cols + j] * xhat[r * cols + j];
                    }
                }
            });
            acc_into(nodes, grads, *bias, |gb| {
                for r in 0..rows {
                    for j in 0..cols {
                        gb[j] = gb[j] + g[r * cols + j];
                    }
                }
            });
            acc_into(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..cols {
                        let dxh = g[r * cols + j] * gv[j];
                        sum_dxhat = sum_dxhat + dxh;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[r * cols + j];
                    }
                    let mean_dxhat = sum_dxhat / d;
                    let mean_dxhat_xhat = sum_dxhat_xhat / d;
                    for j in 0..cols {
                        let dxh = g[r * cols + j] * gv[j];
                        gx[r * cols + j] = gx[r * cols + j]
                            + invs[r] * (dxh - mean_dxhat - xhat[r * cols + j] * mean_dxhat_xhat);
                    }
                }
            });
        }
        Op::L2NormalizeRows { x, eps } => {
            let (rows, cols) = nodes[x.0].value.rows_cols();
            let xv = nodes[x.0].value.data();
            acc_into(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    let src = &xv[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut sq = T::zero();
                    for &v in src {
                        sq = sq + v * v;
                    }
                    let norm = sq.sqrt();
                    let denom = norm + *eps;
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot = dot + gr[j] * src[j];
                    }
                    for j in 0..cols {
                        let mut d = gr[j] / denom;
                        if norm > T::zero() {
                            d = d - src[j] * dot / (norm * denom * denom);
                        }
                        gx[r * cols + j] = gx[r * cols + j] + d;
                    }
                }
            });
        }
        Op::Rope { x, heads, base } => {
            let seq = nodes[x.0].value.shape()[0];
            let width = nodes[x.0].value.shape()[1];
            let head_dim = width / heads;
            acc_into(nodes, grads, *x, |gx| {
                let mut rotated = g.to_vec();
                rope_rotate(&mut rotated, seq, *heads, head_dim, *base, true);
                for i in 0..gx.len() {
                    gx[i] = gx[i] + rotated[i];
                }
            });
        }
        Op::CrossEntropy { logits, targets } => {
            let (n, vocab) = (nodes[logits.0].value.shape()[0], nodes[logits.0].value.shape()[1]);
            let lv = nodes[logits.0].value.data();
            let scale = g[0] / T::from_usize(n).unwrap();
            acc_into(nodes, grads, *logits, |gl| {
                let mut p = vec![T::zero(); vocab];
                for (r, &t) in targets.iter().enumerate() {
                    softmax_row_into(&lv[r * vocab..(r + 1) * vocab], &mut p);
                    for j in 0..vocab {
                        let ind = if j == t { T::one() } else { T::zero() };
                        gl[r * vocab + j] = gl[r * vocab + j] + scale * (p[j] - ind);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[table.0].value.shape()[1];
            acc_into(nodes, grads, *table, |gt| {
                for (t, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] = gt[id * d + c] + g[t * d + c];
                    }
                }
            });
        }
        Op::SelectCols { x, start, len } => {
            let (rows, cols) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            acc_into(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    for j in 0..*len {
                        gx[r * cols + start + j] = gx[r * cols + start + j] + g[r * len + j];
                    }
                }
            });
        }
        Op::ConcatCols(parts) => {
            let rows = out_val.shape()[0];
            let total = out_val.shape()[1];
            let mut off = 0;
            for &p in parts {
                let c = nodes[p.0].value.shape()[1];
                let cur = off;
                acc_into(nodes, grads, p, |gp| {
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] = gp[r * c + j] + g[r * total + cur + j];
                        }
                    }
                });
                off += c;
            }
        }
        Op::Sum(x) => {
            acc_into(nodes, grads, *x, |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            });
        }
        Op::MeanRows(x) => {
            let (rows, cols) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let inv = T::one() / T::from_usize(rows).unwrap();
            acc_into(nodes, grads, *x, |gx| {
                for r in 0..rows {
                    for j in 0..cols {
                        gx[r * cols + j] = gx[r * cols + j] + g[j] * inv;
                    }
                }
            });
        }
        Op::DotConst(x, w) => {
            acc_into(nodes, grads, *x, |gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[0] * w[i];
                }
            });
        }
        Op::GatherRowsCols { x, indices, k } => {
            let cols = nodes[x.0].value.shape()[1];
            let rows = nodes[x.0].value.shape()[0];
            acc_into(nodes, grads, *x, |gx| {
                for t in 0..rows {
                    for j in 0..*k {
                        let c = indices[t * k + j];
                        gx[t * cols + c] = gx[t * cols + c] + g[t * k + j];
                    }
                }
            });
        }
        Op::DivRowsBySum(x) => {
            let (rows, cols) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
            let xv = nodes[x.0].value.data();
            acc_into(nodes, grads, *x, |gx| {
                for t in 0..rows {
                    let src = &xv[t * cols..(t + 1) * cols];
                    let gr = &g[t * cols..(t + 1) * cols];
                    let mut s = T::zero();
                    for &v in src {
                        s = s + v;
                    }
                    let mut dot = T::zero();
                    for j in 0..cols {
                        dot = dot + gr[j] * src[j];
                    }
                    for j in 0..cols {
                        gx[t * cols + j] = gx[t * cols + j] + gr[j] / s - dot / (s * s);
                    }
                }
            });
        }
        Op::GatherRows { x, rows } => {
            let d = nodes[x.0].value.shape()[1];
            acc_into(nodes, grads, *x, |gx| {
                for (t, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        gx[r * d + c] = gx[r * d + c] + g[t * d + c];
                    }
                }
            });
        }
        Op::ScatterRows { x, rows } => {
            let d = nodes[x.0].value.shape()[1];
            acc_into(nodes, grads, *x, |gx| {
                for (t, &r) in rows.iter().enumerate() {
                    for c in 0..d {
                        gx[t * d + c] = gx[t * d + c] + g[r * d + c];
                    }
                }
            });
        }
        Op::MoeStaticUpdate { v, indices, k, weights } => {
            let d = nodes[v.0].value.shape()[1];
            let rows = nodes[weights.0].value.shape()[0];
            let vv = nodes[v.0].value.data();
            let wv = nodes[weights.0].value.data();
            acc_into(nodes, grads, *v, |gv| {
                for t in 0..rows {
                    for j in 0..*k {
                        let e = indices[t * k + j];
                        let w = wv[t * k + j];
                        for c in 0..d {
                            gv[e * d + c] = gv[e * d + c] + w * g[t * d + c];
                        }
                    }
                }
            });
            acc_into(nodes, grads, *weights, |gw| {
                for t in 0..rows {
                    for j in 0..*k {
                        let e = indices[t * k + j];
                        let mut acc = T::zero();
                        for c in 0..d {
                            acc = acc + vv[e * d + c] * g[t * d + c];
                        }
                        gw[t * k + j] = gw[t * k + j] + acc;
                    }
                }
            });
        }
        Op::MoeMlpUpdate { w_down, w_up, rank, indices, k, weights, h, saved_z } => {
            let d = nodes[h.0].value.shape()[1];
            let rows = nodes[h.0].value.shape()[0];
            let rank = *rank;
            let k = *k;
            let wdv = nodes[w_down.0].value.data();
            let wuv = nodes[w_up.0].value.data();
            let hv = nodes[h.0].value.data();
            let wv = nodes[weights.0].value.data();
            let need_wd = wants_grad(nodes, *w_down);
            let need_wu = wants_grad(nodes, *w_up);
            let need_w = wants_grad(nodes, *weights);
            let need_h = wants_grad(nodes, *h);
            // one pass filling whichever gradients are wanted
            let mut gwd = if need_wd { Some(vec![T::zero(); nodes[w_down.0].value.numel()]) } else { None };
            let mut gwu = if need_wu { Some(vec![T::zero(); nodes[w_up.0].value.numel()]) } else { None };
            let mut gw = if need_w { Some(vec![T::zero(); nodes[weights.0].value.numel()]) } else { None };
            let mut gh = if need_h { Some(vec![T::zero(); nodes[h.0].value.numel()]) } else { None };
            let mut act = vec![T::zero(); rank];
            let mut u = vec![T::zero(); d];
            let mut du = vec![T::zero(); d];
            let mut dz = vec![T::zero(); rank];
            for t in 0..rows {
                let gt = &g[t * d..(t + 1) * d];
                let ht = &hv[t * d..(t + 1) * d];
                for j in 0..k {
                    let e = indices[t * k + j];
                    let w = wv[t * k + j];
                    let z = &saved_z[(t * k + j) * rank..(t * k + j + 1) * rank];
                    let wd = &wdv[e * rank * d..(e + 1) * rank * d];
                    let wu = &wuv[e * d * rank..(e + 1) * d * rank];
                    for rho in 0..rank {
                        act[rho] = z[rho] * sigmoid(z[rho]);
                    }
                    // u = W_up · act, needed for the weight gradient
                    if need_w {
                        for c in 0..d {
                            let mut acc = T::zero();
                            for rho in 0..rank {
                                acc = acc + wu[c * rank + rho] * act[rho];
                            }
                            u[c] = acc;
                        }
                        let gwslot = gw.as_mut().unwrap();
                        let mut acc = T::zero();
                        for c in 0..d {
                            acc = acc + u[c] * gt[c];
                        }
                        gwslot[t * k + j] = gwslot[t * k + j] + acc;
                    }
                    // du = w · g[t]
                    for c in 0..d {
                        du[c] = gt[c] * w;
                    }
                    if need_wu {
                        let slot = gwu.as_mut().unwrap();
                        let base = e * d * rank;
                        for c in 0..d {
                            for rho in 0..rank {
                                slot[base + c * rank + rho] =
                                    slot[base + c * rank + rho] + du[c] * act[rho];
                            }
                        }
                    }
                    if need_wd || need_h {
                        for rho in 0..rank {
                            let mut da = T::zero();
                            for c in 0..d {
                                da = da + wu[c * rank + rho] * du[c];
                            }
                            let s = sigmoid(z[rho]);
                            let dsilu = s * (T::one() + z[rho] * (T::one() - s));
                            dz[rho] = da * dsilu;
                        }
                        if need_wd {
                            let slot = gwd.as_mut().unwrap();
                            let base = e * rank * d;
                            for rho in 0..rank {
                                for c in 0..d {
                                    slot[base + rho * d + c] =
                                        slot[base + rho * d + c] + dz[rho] * ht[c];
                                }
                            }
                        }
                        if need_h {
                            let slot = gh.as_mut().unwrap();
                            for rho in 0..rank {
                                for c in 0..d {
                                    slot[t * d + c] = slot[t * d + c] + wd[rho * d + c] * dz[rho];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(buf) = gwd {
                acc_into(nodes, grads, *w_down, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + buf[i];
                    }
                });
            }
            if let Some(buf) = gwu {
                acc_into(nodes, grads, *w_up, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + buf[i];
                    }
                });
            }
            if let Some(buf) = gw {
                acc_into(nodes, grads, *weights, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + buf[i];
                    }
                });
            }
            if let Some(buf) = gh {
                acc_into(nodes, grads, *h, |gx| {
                    for i in 0..gx.len() {
                        gx[i] = gx[i] + buf[i];
                    }
                });
            }
        }
    }
    Ok(())
}
