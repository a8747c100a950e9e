//! Define-by-run reverse-mode differentiation over 2-D values.
//!
//! Every value on a tape is a `rows × cols` matrix; vectors are `1 × n` and
//! scalars `1 × 1`. Nodes are appended in evaluation order, so the node list
//! is already topologically sorted and [`Tape::backward`] walks it in reverse.

use std::collections::HashMap;

use crate::tensor::{Real, Tensor, TensorError, TensorId};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherCols { x: Var, cols: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation plus the bindings from parameter tensors to leaves.
#[derive(Debug)]
pub struct Tape<F: Real = f32> {
    nodes: Vec<Node<F>>,
    bound: HashMap<TensorId, Var>,
    clamp_hits: usize,
    consumed: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: (usize, usize), b: (usize, usize)) -> TensorError {
    TensorError::Shape {
        op,
        lhs: vec![a.0, a.1],
        rhs: vec![b.0, b.1],
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bound: HashMap::new(),
            clamp_hits: 0,
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<F>, rows: usize, cols: usize, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Binds a parameter tensor; repeated calls with the same tensor return
    /// the same leaf so shared storage accumulates a single gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let (rows, cols) = t.dims2();
        let value = t.data().iter().map(|&x| F::from_single(x)).collect();
        let v = self.push(value, rows, cols, Op::Leaf, t.requires_grad());
        self.bound.insert(t.id(), v);
        v
    }

    /// Records a free leaf in the tape's own precision.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<F>, requires_grad: bool) -> Result<Var, TensorError> {
        if value.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                len: value.len(),
            });
        }
        Ok(self.push(value, rows, cols, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<F>) -> Result<Var, TensorError> {
        self.leaf(rows, cols, value, false)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn bound_var(&self, t: &Tensor) -> Option<Var> {
        self.bound.get(&t.id()).copied()
    }

    /// Number of entries that [`Tape::clamp_min`] lifted to its floor.
    pub fn clamp_hits(&self) -> usize {
        self.clamp_hits
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, m, n, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = transpose_raw(self.value(a), r, c);
        let ng = self.ng(a);
        self.push(out, c, r, Op::Transpose(a), ng)
    }

    fn binary_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F, mk: Op) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(shape_err(op, sa, sb));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, sa.0, sa.1, mk, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 × cols` bias to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        let sb = self.shape(bias);
        if sb != (1, c) {
            return Err(shape_err("add_row_bias", (r, c), sb));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, r, c, Op::AddRowBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let k = F::lit(c);
        let (r, cc) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * k).collect();
        let ng = self.ng(x);
        self.push(out, r, cc, Op::Scale(x, c), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let ng = self.ng(x);
        self.push(out, r, c, op, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// `max(x, floor)` elementwise; clamped entries pass no gradient.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let lo = F::lit(floor);
        let hits = self.value(x).iter().filter(|&&v| v < lo).count();
        self.clamp_hits += hits;
        self.unary(x, |v| if v < lo { lo } else { v }, Op::ClampMin(x, floor))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(out, r, c, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let ng = self.ng(x);
        self.push(out, r, c, Op::LogSoftmaxRows(x), ng)
    }

    /// Row-wise layer normalisation with `1 × cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(shape_err("layer_norm", (r, c), self.shape(p)));
            }
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let (mean, rstd) = row_stats(row);
            for j in 0..c {
                out.push((row[j] - mean) * rstd * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(out, r, c, Op::LayerNorm { x, gamma, beta }, ng))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(shape_err("embedding_lookup", (v, d), (0, d)));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            out,
            ids.len(),
            d,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(shape_err("concat_rows", (0, 0), (0, 0)));
        };
        let c = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", (rows, c), (pr, pc)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, rows, c, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > r {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                bound: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(x);
        Ok(self.push(out, len, c, Op::SliceRows { x, start }, ng))
    }

    /// Selects the listed columns of every row.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if cols.is_empty() {
            return Err(shape_err("gather_cols", (r, c), (r, 0)));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index {
                op: "gather_cols",
                index: bad,
                bound: c,
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * cols.len());
        for row in xv.chunks(c) {
            out.extend(cols.iter().map(|&j| row[j]));
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            r,
            cols.len(),
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(x);
        self.push(vec![s], 1, 1, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<F>() / F::lit(v.len() as f64);
        let ng = self.ng(x);
        self.push(vec![s], 1, 1, Op::Mean(x), ng)
    }

    /// `x W + b` for a `1 × out` bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    /// Propagates d`loss`/d(node) to every node that needs a gradient.
    ///
    /// The tape can be differentiated once; a second call fails.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(TensorError::NonScalarLoss { shape: vec![r, c] });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let bound = self.bound.clone();
        Ok(Gradients { grads, bound })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if self.ng(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    acc(grads, self, *a, |buf| add_into(buf, &da));
                }
                if self.ng(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    acc(grads, self, *b, |buf| add_into(buf, &db));
                }
            }
            Op::Transpose(a) => {
                let gt = transpose_raw(g, rows, cols);
                acc(grads, self, *a, |buf| add_into(buf, &gt));
            }
            Op::Add(a, b) => {
                acc(grads, self, *a, |buf| add_into(buf, g));
                acc(grads, self, *b, |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(grads, self, *a, |buf| add_into(buf, g));
                acc(grads, self, *b, |buf| buf.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::AddRowBias(x, bias) => {
                acc(grads, self, *x, |buf| add_into(buf, g));
                acc(grads, self, *bias, |buf| {
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(grads, self, *a, |buf| {
                    for ((x, &gy), &y) in buf.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * y;
                    }
                });
                acc(grads, self, *b, |buf| {
                    for ((x, &gy), &y) in buf.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * y;
                    }
                });
            }
            Op::Scale(x, c) => {
                let k = F::lit(*c);
                acc(grads, self, *x, |buf| buf.iter_mut().zip(g).for_each(|(b, &gy)| *b = *b + gy * k));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v > F::zero() {
                            *b = *b + gy;
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                let y = &node.value;
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &t) in buf.iter_mut().zip(g).zip(y) {
                        *b = *b + gy * (F::one() - t * t);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &s) in buf.iter_mut().zip(g).zip(y) {
                        *b = *b + gy * s * (F::one() - s);
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value;
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &e) in buf.iter_mut().zip(g).zip(y) {
                        *b = *b + gy * e;
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        *b = *b + gy / v;
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let lo = F::lit(*floor);
                let xv = self.value(*x);
                acc(grads, self, *x, |buf| {
                    for ((b, &gy), &v) in buf.iter_mut().zip(g).zip(xv) {
                        if v >= lo {
                            *b = *b + gy;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                acc(grads, self, *x, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            brow[j] = brow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let y = &node.value;
                acc(grads, self, *x, |buf| {
                    for ((brow, grow), yrow) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let gs: F = grow.iter().copied().sum();
                        for j in 0..cols {
                            brow[j] = brow[j] + grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let nf = F::lit(cols as f64);
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgamma = vec![F::zero(); cols];
                let mut dbeta = vec![F::zero(); cols];
                for ((xrow, grow), dxrow) in xv.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)) {
                    let (mean, rstd) = row_stats(xrow);
                    let xhat: Vec<F> = xrow.iter().map(|&v| (v - mean) * rstd).collect();
                    let dxhat: Vec<F> = grow.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().copied().sum::<F>() / nf;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() / nf;
                    for j in 0..cols {
                        dxrow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        dgamma[j] = dgamma[j] + grow[j] * xhat[j];
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                }
                acc(grads, self, *x, |buf| add_into(buf, &dx));
                acc(grads, self, *gamma, |buf| add_into(buf, &dgamma));
                acc(grads, self, *beta, |buf| add_into(buf, &dbeta));
            }
            Op::Embedding { table, ids } => {
                acc(grads, self, *table, |buf| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(grads, self, p, |buf| add_into(buf, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let off = start * cols;
                acc(grads, self, *x, |buf| add_into(&mut buf[off..off + g.len()], g));
            }
            Op::GatherCols { x, cols: picked } => {
                let src_cols = self.shape(*x).1;
                acc(grads, self, *x, |buf| {
                    for (r, grow) in g.chunks(picked.len()).enumerate() {
                        for (j, &c) in picked.iter().enumerate() {
                            buf[r * src_cols + c] = buf[r * src_cols + c] + grow[j];
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gy = g[0];
                acc(grads, self, *x, |buf| buf.iter_mut().for_each(|b| *b = *b + gy));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let gy = g[0] / F::lit(n as f64);
                acc(grads, self, *x, |buf| buf.iter_mut().for_each(|b| *b = *b + gy));
            }
        }
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<F: Real = f32> {
    grads: Vec<Option<Vec<F>>>,
    bound: HashMap<TensorId, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of the leaf bound to `t`, if `t` took part and needed one.
    pub fn wrt_tensor(&self, t: &Tensor) -> Option<&[F]> {
        self.bound.get(&t.id()).and_then(|&v| self.wrt(v))
    }

    /// Gradients of all bound parameter tensors, keyed by tensor identity.
    pub fn by_tensor(&self) -> impl Iterator<Item = (TensorId, &[F])> + '_ {
        self.bound
            .iter()
            .filter_map(|(&id, &v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Adds this pass's gradient for `t` into `t.grad`.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<(), TensorError> {
        if let Some(g) = self.wrt_tensor(t) {
            let g32: Vec<f32> = g.iter().map(|x| x.to_single()).collect();
            t.accumulate_grad(&g32)?;
        }
        Ok(())
    }
}

fn acc<F: Real>(grads: &mut [Option<Vec<F>>], tape: &Tape<F>, v: Var, f: impl FnOnce(&mut [F])) {
    if !tape.nodes[v.0].needs_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); tape.nodes[v.0].value.len()]);
    f(buf);
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

fn row_stats<F: Real>(row: &[F]) -> (F, F) {
    let n = F::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, F::one() / (var + F::lit(LN_EPS)).sqrt())
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub(crate) fn matmul_raw<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<F: Real>(a: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
