use super::{ParamRef, Real, COSINE_EPS};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Recorded primitive with the input refs its backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    /// Leaf or constant; nothing to replay.
    Source,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    AddScalar { x: usize },
    Scale { x: usize, c: f64 },
    RowSoftmax { x: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Elu { x: usize },
    Sigmoid { x: usize },
    Exp { x: usize },
    Ln { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    SumAll { x: usize },
    MeanAll { x: usize },
    RowSum { x: usize },
    ColMean { x: usize },
    RowNorm { x: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    GatherRows { table: usize, ids: Vec<usize> },
    Diag { x: usize },
}

struct Node<F: Real> {
    rows: usize,
    cols: usize,
    value: Vec<F>,
    op: Op,
    needs_grad: bool,
    /// Bound leaf storage; gradients flush here after backward.
    leaf: Option<ParamRef<F>>,
}

/// Computation record for one forward pass.
///
/// Ops are recorded in execution order; `backward` walks them once in
/// reverse. A tape and its tensors stay on one thread; independent tapes
/// may run on parallel threads.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<F>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            leaf: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Var {
        self.push(rows, cols, data, Op::Source, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(1, 1, vec![v])
    }

    /// Register a leaf tensor. Its current data is snapshotted onto the tape;
    /// after backward, the accumulated gradient is added to `tensor.grad`
    /// when the tensor requires gradients.
    pub fn leaf(&mut self, tensor: &ParamRef<F>) -> Var {
        let t = tensor.borrow();
        let var = self.push(
            t.rows(),
            t.cols(),
            t.data.clone(),
            Op::Source,
            t.requires_grad,
        );
        drop(t);
        self.nodes[var.0].leaf = Some(tensor.clone());
        var
    }

    /// Non-leaf input whose gradient is wanted (cross-tape seeding).
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<F>) -> Var {
        self.push(rows, cols, data, Op::Source, true)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> F {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient accumulated at `v` during backward, if any flowed there.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    fn shape_str(&self, v: Var) -> String {
        let n = &self.nodes[v.0];
        format!("{}x{}", n.rows, n.cols)
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::dim("matmul", self.shape_str(a), self.shape_str(b)));
        }
        let mut out = vec![F::ZERO; m * n];
        F::gemm(
            m,
            ka,
            n,
            F::ONE,
            self.value(a),
            ka as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::ZERO,
            &mut out,
            n as isize,
            1,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::MatMul { a: a.0, b: b.0 }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(x);
        self.push(n, m, out, Op::Transpose { x: x.0 }, ng)
    }

    fn zip2(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(usize, usize, Vec<F>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::dim(name, self.shape_str(a), self.shape_str(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((sa.0, sa.1, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, out) = self.zip2("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, out) = self.zip2("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, out) = self.zip2("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    /// Elementwise division. Callers keep denominators bounded away from zero.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n, out) = self.zip2("div", a, b, |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(m, n, out, Op::Div { a: a.0, b: b.0 }, ng))
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::AddScalar { x: x.0 }, ng)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.needs(x);
        self.push(m, n, out, Op::Scale { x: x.0, c: c.to_f64() }, ng)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let src = self.value(x);
        let mut out = vec![F::ZERO; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maxv(v);
            }
            let mut sum = F::ZERO;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / sum;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(m, n, out, Op::RowSoftmax { x: x.0 }, ng))
    }

    fn map1(&mut self, x: Var, op: Op, f: impl Fn(F) -> F) -> Var {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.needs(x);
        self.push(m, n, out, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map1(x, Op::Relu { x: x.0 }, |v| v.maxv(F::ZERO))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: F) -> Var {
        self.map1(x, Op::LeakyRelu { x: x.0, slope: slope.to_f64() }, |v| {
            if v > F::ZERO {
                v
            } else {
                v * slope
            }
        })
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.map1(x, Op::Elu { x: x.0 }, |v| {
            if v > F::ZERO {
                v
            } else {
                v.exp() - F::ONE
            }
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map1(x, Op::Sigmoid { x: x.0 }, |v| {
            F::ONE / (F::ONE + (-v).exp())
        })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map1(x, Op::Exp { x: x.0 }, |v| v.exp())
    }

    /// Natural log. Callers clamp inputs to stay positive.
    pub fn ln(&mut self, x: Var) -> Var {
        self.map1(x, Op::Ln { x: x.0 }, |v| v.ln())
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.map1(x, Op::Clamp { x: x.0, lo: lo.to_f64(), hi: hi.to_f64() }, |v| {
            v.maxv(lo).minv(hi)
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = F::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        let ng = self.needs(x);
        self.push(1, 1, vec![s], Op::SumAll { x: x.0 }, ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.value(x).len();
        let mut s = F::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        let ng = self.needs(x);
        self.push(
            1,
            1,
            vec![s / F::from_f64(len as f64)],
            Op::MeanAll { x: x.0 },
            ng,
        )
    }

    /// Sum along each row: `m x n -> m x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![F::ZERO; m];
        for i in 0..m {
            for j in 0..n {
                out[i] += src[i * n + j];
            }
        }
        let ng = self.needs(x);
        self.push(m, 1, out, Op::RowSum { x: x.0 }, ng)
    }

    /// Mean down each column: `m x n -> 1 x n`.
    pub fn col_mean(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let src = self.value(x);
        let inv = F::ONE / F::from_f64(m as f64);
        let mut out = vec![F::ZERO; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let ng = self.needs(x);
        self.push(1, n, out, Op::ColMean { x: x.0 }, ng)
    }

    /// Euclidean norm of each row: `m x d -> m x 1`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let (m, n) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![F::ZERO; m];
        for i in 0..m {
            let mut s = F::ZERO;
            for j in 0..n {
                s += src[i * n + j] * src[i * n + j];
            }
            out[i] = s.sqrt();
        }
        let ng = self.needs(x);
        self.push(m, 1, out, Op::RowNorm { x: x.0 }, ng)
    }

    /// Horizontal concatenation; all parts share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pm != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape_str(parts[0]),
                    self.shape_str(p),
                ));
            }
            total += pn;
        }
        let mut out = vec![F::ZERO; m * total];
        let mut col = 0;
        for &p in parts {
            let (_, pn) = self.shape(p);
            let src = self.value(p);
            for i in 0..m {
                out[i * total + col..i * total + col + pn]
                    .copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            col += pn;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let op = Op::ConcatCols {
            parts: parts.iter().map(|p| p.0).collect(),
        };
        Ok(self.push(m, total, out, op, ng))
    }

    /// Vertical stacking; all parts share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.shape(p);
            if pn != n {
                return Err(Error::dim(
                    "concat_rows",
                    self.shape_str(parts[0]),
                    self.shape_str(p),
                ));
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(total * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            total,
            n,
            out,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            ng,
        ))
    }

    /// Select rows of `table` by index, duplicates allowed.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary(format!(
                    "row index {id} out of range for {v} rows"
                )));
            }
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Main diagonal of a square matrix as a column vector.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m != n {
            return Err(Error::dim("diag", self.shape_str(x), "square"));
        }
        let src = self.value(x);
        let out = (0..m).map(|i| src[i * n + i]).collect();
        let ng = self.needs(x);
        Ok(self.push(m, 1, out, Op::Diag { x: x.0 }, ng))
    }

    // ── composite helpers ──────────────────────────────────────────────

    /// Broadcast a column vector `m x 1` across `n` columns.
    pub fn broadcast_col(&mut self, d: Var, n: usize) -> Result<Var> {
        let ones = self.constant(1, n, vec![F::ONE; n]);
        self.matmul(d, ones)
    }

    /// Broadcast a row vector `1 x n` across `m` rows.
    pub fn broadcast_row(&mut self, v: Var, m: usize) -> Result<Var> {
        let ones = self.constant(m, 1, vec![F::ONE; m]);
        self.matmul(ones, v)
    }

    /// Pairwise cosine similarity between rows of `a` (m x d) and rows of
    /// `b` (n x d): `out[i][j] = a_i . b_j / (|a_i||b_j| + eps)`.
    pub fn pairwise_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, da) = self.shape(a);
        let (n, db) = self.shape(b);
        if da != db {
            return Err(Error::dim(
                "pairwise_cosine",
                self.shape_str(a),
                self.shape_str(b),
            ));
        }
        let bt = self.transpose(b);
        let dots = self.matmul(a, bt)?;
        let na = self.row_norm(a);
        let nb = self.row_norm(b);
        let nbt = self.transpose(nb);
        let outer = self.matmul(na, nbt)?; // m x n of |a_i||b_j|
        let denom = self.add_scalar(outer, F::from_f64(COSINE_EPS));
        let _ = n;
        self.div(dots, denom)
    }

    // ── backward ───────────────────────────────────────────────────────

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse sweep from a scalar loss with seed 1, then flush leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (m, n) = self.shape(loss);
        if m * n != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got {}",
                self.shape_str(loss)
            )));
        }
        self.backward_seeded(&[(loss, vec![F::ONE])])?;
        self.flush_leaf_grads();
        Ok(())
    }

    /// Reverse sweep seeded at arbitrary nodes. Does NOT flush leaf grads;
    /// call [`Tape::flush_leaf_grads`] when accumulation order is settled.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<F>)]) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(
                "backward already ran on this tape; record a new tape instead".into(),
            ));
        }
        self.consumed = true;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            if g.len() != node.value.len() {
                return Err(Error::dim("backward seed", g.len(), node.value.len()));
            }
            self.accumulate(v.0, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = self.grads[idx].take().unwrap();
            self.replay(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Add tape-local leaf gradients into their bound tensors.
    /// Kept separate from the sweep so a trainer can order flushes
    /// deterministically across parallel tapes.
    pub fn flush_leaf_grads(&mut self) {
        for (idx, node) in self.nodes.iter().enumerate() {
            let (Some(param), Some(g)) = (&node.leaf, &self.grads[idx]) else {
                continue;
            };
            let mut t = param.borrow_mut();
            if !t.requires_grad {
                continue;
            }
            for (dst, &src) in t.grad.iter_mut().zip(g.iter()) {
                *dst += src;
            }
        }
    }

    fn accumulate(&mut self, idx: usize, g: Vec<F>) {
        match &mut self.grads[idx] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn accumulate_slice(&mut self, idx: usize, g: &[F]) {
        match &mut self.grads[idx] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn replay(&mut self, idx: usize, g: &[F]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Source => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                if self.nodes[a].needs_grad {
                    // gA += G . B^T
                    let mut ga = vec![F::ZERO; m * k];
                    F::gemm(
                        m,
                        n,
                        k,
                        F::ONE,
                        g,
                        n as isize,
                        1,
                        &self.nodes[b].value,
                        1,
                        n as isize,
                        F::ZERO,
                        &mut ga,
                        k as isize,
                        1,
                    );
                    self.accumulate(a, ga);
                }
                if self.nodes[b].needs_grad {
                    // gB += A^T . G
                    let mut gb = vec![F::ZERO; k * n];
                    F::gemm(
                        k,
                        m,
                        n,
                        F::ONE,
                        &self.nodes[a].value,
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::ZERO,
                        &mut gb,
                        n as isize,
                        1,
                    );
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose { x } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut gx = vec![F::ZERO; m * n];
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] = g[i * m + j];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Add { a, b } => {
                if self.nodes[a].needs_grad {
                    self.accumulate_slice(a, g);
                }
                if self.nodes[b].needs_grad {
                    self.accumulate_slice(b, g);
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a].needs_grad {
                    self.accumulate_slice(a, g);
                }
                if self.nodes[b].needs_grad {
                    let gb: Vec<F> = g.iter().map(|&v| -v).collect();
                    self.accumulate(b, gb);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a].needs_grad {
                    let ga: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b].value)
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    self.accumulate(a, ga);
                }
                if self.nodes[b].needs_grad {
                    let gb: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[a].value)
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    self.accumulate(b, gb);
                }
            }
            Op::Div { a, b } => {
                if self.nodes[a].needs_grad {
                    let ga: Vec<F> = g
                        .iter()
                        .zip(&self.nodes[b].value)
                        .map(|(&gv, &bv)| gv / bv)
                        .collect();
                    self.accumulate(a, ga);
                }
                if self.nodes[b].needs_grad {
                    let av = &self.nodes[a].value;
                    let bv = &self.nodes[b].value;
                    let gb: Vec<F> = (0..g.len())
                        .map(|i| -g[i] * av[i] / (bv[i] * bv[i]))
                        .collect();
                    self.accumulate(b, gb);
                }
            }
            Op::AddScalar { x } => self.accumulate_slice(x, g),
            Op::Scale { x, c } => {
                let c = F::from_f64(c);
                let gx: Vec<F> = g.iter().map(|&v| v * c).collect();
                self.accumulate(x, gx);
            }
            Op::RowSoftmax { x } => {
                let (m, n) = (self.nodes[idx].rows, self.nodes[idx].cols);
                let y = &self.nodes[idx].value;
                let mut gx = vec![F::ZERO; m * n];
                for i in 0..m {
                    let mut dot = F::ZERO;
                    for j in 0..n {
                        dot += g[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        gx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                self.accumulate(x, gx);
            }
            Op::Relu { x } => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { F::ZERO })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::LeakyRelu { x, slope } => {
                let s = F::from_f64(slope);
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(&gv, &xv)| if xv > F::ZERO { gv } else { gv * s })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Elu { x } => {
                let y = &self.nodes[idx].value;
                let gx: Vec<F> = g
                    .iter()
                    .zip(self.nodes[x].value.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| {
                        if xv > F::ZERO {
                            gv
                        } else {
                            gv * (yv + F::ONE)
                        }
                    })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[idx].value;
                let gx: Vec<F> = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (F::ONE - yv))
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Exp { x } => {
                let y = &self.nodes[idx].value;
                let gx: Vec<F> = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(x, gx);
            }
            Op::Ln { x } => {
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(&gv, &xv)| gv / xv)
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let lo = F::from_f64(lo);
                let hi = F::from_f64(hi);
                let gx: Vec<F> = g
                    .iter()
                    .zip(&self.nodes[x].value)
                    .map(|(&gv, &xv)| {
                        if xv > lo && xv < hi {
                            gv
                        } else {
                            F::ZERO
                        }
                    })
                    .collect();
                self.accumulate(x, gx);
            }
            Op::SumAll { x } => {
                let len = self.nodes[x].value.len();
                self.accumulate(x, vec![g[0]; len]);
            }
            Op::MeanAll { x } => {
                let len = self.nodes[x].value.len();
                let gv = g[0] / F::from_f64(len as f64);
                self.accumulate(x, vec![gv; len]);
            }
            Op::RowSum { x } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let mut gx = vec![F::ZERO; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[i];
                    }
                }
                self.accumulate(x, gx);
            }
            Op::ColMean { x } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let inv = F::ONE / F::from_f64(m as f64);
                let mut gx = vec![F::ZERO; m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = g[j] * inv;
                    }
                }
                self.accumulate(x, gx);
            }
            Op::RowNorm { x } => {
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let norms = &self.nodes[idx].value;
                let xv = &self.nodes[x].value;
                let tiny = F::from_f64(1e-12);
                let mut gx = vec![F::ZERO; m * n];
                for i in 0..m {
                    let denom = norms[i].maxv(tiny);
                    for j in 0..n {
                        gx[i * n + j] = g[i] * xv[i * n + j] / denom;
                    }
                }
                self.accumulate(x, gx);
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[idx].rows;
                let total = self.nodes[idx].cols;
                let mut col = 0;
                for p in parts {
                    let pn = self.nodes[p].cols;
                    if self.nodes[p].needs_grad {
                        let mut gp = vec![F::ZERO; m * pn];
                        for i in 0..m {
                            gp[i * pn..(i + 1) * pn]
                                .copy_from_slice(&g[i * total + col..i * total + col + pn]);
                        }
                        self.accumulate(p, gp);
                    }
                    col += pn;
                }
            }
            Op::ConcatRows { parts } => {
                let n = self.nodes[idx].cols;
                let mut row = 0;
                for p in parts {
                    let pm = self.nodes[p].rows;
                    if self.nodes[p].needs_grad {
                        self.accumulate_slice(p, &g[row * n..(row + pm) * n]);
                    }
                    row += pm;
                }
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[table].cols;
                let rows = self.nodes[table].rows;
                let mut gt = vec![F::ZERO; rows * d];
                for (pos, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[pos * d + j];
                    }
                }
                self.accumulate(table, gt);
            }
            Op::Diag { x } => {
                let n = self.nodes[x].cols;
                let mut gx = vec![F::ZERO; n * n];
                for i in 0..n {
                    gx[i * n + i] = g[i];
                }
                self.accumulate(x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param;

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let x = tape.constant(3, 3, (1..=9).map(|v| v as f64).collect());
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(2, 1, vec![1.0, 1.0]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..15).map(|_| next()).collect();
        // independent oracle: naive triple loop
        let mut want = vec![0.0f64; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a[i * 5 + k] * b[k * 3 + j];
                }
                want[i * 3 + j] = acc;
            }
        }
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(4, 5, a);
        let bv = tape.constant(5, 3, b);
        let y = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(y).iter().zip(&want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(2, 3, vec![0.0; 6]);
        let b = tape.constant(2, 2, vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(1, 3, vec![1.0, 1.0, 1.0]);
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(1, 2, vec![1000.0, 1000.0]);
        let y = tape.row_softmax(x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_quarter_three_quarters() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(1, 2, vec![0.0, 3.0f64.ln()]);
        let y = tape.row_softmax(x).unwrap();
        let got = tape.value(y);
        assert!((got[0] - 0.25).abs() < 1e-12 && (got[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_stay_positive() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(3, 4, vec![-3.0, 0.0, 2.0, 9.0, 1.0, 1.0, 1.0, 1.0, -50.0, 50.0, 0.0, 0.1]);
        let y = tape.row_softmax(x).unwrap();
        let v = tape.value(y);
        for i in 0..3 {
            let s: f64 = v[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(v[i * 4..(i + 1) * 4].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(1, 2, vec![f64::NAN, 0.0]);
        assert!(matches!(
            tape.row_softmax(x).unwrap_err(),
            Error::Numeric(_)
        ));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let p = param(1, 3, vec![1.0f64, 2.0, 3.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_with_no_recorded_ops_leaves_grads_zero() {
        let p = param(1, 2, vec![5.0f64, -1.0]);
        let mut tape = Tape::new();
        let _x = tape.leaf(&p);
        let c = tape.scalar(3.0);
        tape.backward(c).unwrap();
        assert_eq!(p.borrow().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_is_a_contract_error() {
        let p = param(1, 2, vec![1.0f64, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss).unwrap_err(),
            Error::Contract(_)
        ));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = param(1, 2, vec![1.0f64, 2.0]);
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        assert!(matches!(tape.backward(x).unwrap_err(), Error::Contract(_)));
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let p = param(1, 2, vec![1.0f64, 2.0]);
        p.borrow_mut().requires_grad = false;
        let mut tape = Tape::new();
        let x = tape.leaf(&p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad, vec![0.0, 0.0]);
    }

    #[test]
    fn pairwise_cosine_matches_scalar_cosine() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(2, 3, vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.25]);
        let b = tape.constant(2, 3, vec![0.5, 1.0, -1.0, 2.0, 2.0, 2.0]);
        let c = tape.pairwise_cosine(a, b).unwrap();
        let av = [[1.0, 0.0, 2.0], [-1.0, 0.5, 0.25]];
        let bv = [[0.5, 1.0, -1.0], [2.0, 2.0, 2.0]];
        for i in 0..2 {
            for j in 0..2 {
                let want = crate::autodiff::cosine(&av[i], &bv[j]).unwrap();
                let got = tape.value(c)[i * 2 + j];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }
}
