use super::{Result, Tensor, TensorError};

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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRows(Var, Var),
    Affine { x: Var, scale: f64 },
    MatVec(Var, Var),
    VecMat(Var, Var),
    MatMulT(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Row { table: Var, index: usize },
    Stack(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt { x: Var, eps: f64 },
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, index: usize },
    Dot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive operations.
///
/// Inputs of a node always precede it, so the node list is already in
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `var`, zero-filled when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match self.get(var) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.adjoints.get_mut(var.0).and_then(|a| a.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(TensorError::Invalid {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Max-subtracted softmax over the unmasked entries; masked entries are 0.
fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(i, _)| keep(i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| if keep(i) { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x, y));
        }
        let v = zip(x, y, |p, q| p + q);
        let t = self.tracked(&[a, b]);
        self.push("add", v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("sub", x, y));
        }
        let v = zip(x, y, |p, q| p - q);
        let t = self.tracked(&[a, b]);
        self.push("sub", v, Op::Sub(a, b), t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x, y));
        }
        let v = zip(x, y, |p, q| p * q);
        let t = self.tracked(&[a, b]);
        self.push("mul", v, Op::Mul(a, b), t)
    }

    /// Adds vector `v` (length c) to every row of matrix `m` (n×c).
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (x, y) = (self.value(m), self.value(v));
        expect_rank("add_rows", x, 2)?;
        expect_rank("add_rows", y, 1)?;
        if x.cols() != y.len() {
            return Err(mismatch("add_rows", x, y));
        }
        let c = y.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &p)| p + y.data()[k % c])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let t = self.tracked(&[m, v]);
        self.push("add_rows", value, Op::AddRows(m, v), t)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = map(self.value(x), |p| scale * p + shift);
        let t = self.tracked(&[x]);
        self.push("affine", v, Op::Affine { x, scale }, t)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    /// Matrix (r×c) times vector (c).
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (m, v) = (self.value(w), self.value(x));
        expect_rank("matvec", m, 2)?;
        expect_rank("matvec", v, 1)?;
        if m.cols() != v.len() {
            return Err(mismatch("matvec", m, v));
        }
        let c = m.cols();
        let out: Vec<f64> = m
            .data()
            .chunks_exact(c)
            .map(|row| row.iter().zip(v.data()).map(|(a, b)| a * b).sum())
            .collect();
        let value = Tensor::vector(out);
        let t = self.tracked(&[w, x]);
        self.push("matvec", value, Op::MatVec(w, x), t)
    }

    /// Row vector (r) times matrix (r×c): `Σ_i x_i · w[i, :]`.
    pub fn vecmat(&mut self, x: Var, w: Var) -> Result<Var> {
        let (v, m) = (self.value(x), self.value(w));
        expect_rank("vecmat", v, 1)?;
        expect_rank("vecmat", m, 2)?;
        if m.rows() != v.len() {
            return Err(mismatch("vecmat", v, m));
        }
        let c = m.cols();
        let mut out = vec![0.0; c];
        for (xi, row) in v.data().iter().zip(m.data().chunks_exact(c)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        let value = Tensor::vector(out);
        let t = self.tracked(&[x, w]);
        self.push("vecmat", value, Op::VecMat(x, w), t)
    }

    /// `a · bᵀ` for a (n×k) and b (r×k).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        expect_rank("matmul_t", x, 2)?;
        expect_rank("matmul_t", y, 2)?;
        if x.cols() != y.cols() {
            return Err(mismatch("matmul_t", x, y));
        }
        let (n, k, r) = (x.rows(), x.cols(), y.rows());
        let mut out = Vec::with_capacity(n * r);
        for xr in x.data().chunks_exact(k) {
            for yr in y.data().chunks_exact(k) {
                out.push(xr.iter().zip(yr).map(|(p, q)| p * q).sum());
            }
        }
        let value = Tensor::matrix(n, r, out)?;
        let t = self.tracked(&[a, b]);
        self.push("matmul_t", value, Op::MatMulT(a, b), t)
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            expect_rank("concat", v, 1)?;
            out.extend_from_slice(v.data());
        }
        let t = self.tracked(parts);
        self.push("concat", Tensor::vector(out), Op::Concat(parts.to_vec()), t)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        expect_rank("slice", v, 1)?;
        if len == 0 || start + len > v.len() {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!(
                    "range {start}..{} out of bounds for length {}",
                    start + len,
                    v.len()
                ),
            });
        }
        let value = Tensor::vector(v.data()[start..start + len].to_vec());
        let t = self.tracked(&[x]);
        self.push("slice", value, Op::Slice { x, start }, t)
    }

    /// Row `index` of a matrix, as a vector (embedding lookup).
    pub fn row(&mut self, table: Var, index: usize) -> Result<Var> {
        let m = self.value(table);
        expect_rank("row", m, 2)?;
        if index >= m.rows() {
            return Err(TensorError::Invalid {
                op: "row",
                msg: format!("row {index} out of bounds for {} rows", m.rows()),
            });
        }
        let value = Tensor::vector(m.row(index).to_vec());
        let t = self.tracked(&[table]);
        self.push("row", value, Op::Row { table, index }, t)
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(&first) = rows.first() else {
            return Err(TensorError::Invalid {
                op: "stack",
                msg: "no inputs".into(),
            });
        };
        let f = self.value(first);
        expect_rank("stack", f, 1)?;
        let c = f.len();
        let mut out = Vec::with_capacity(c * rows.len());
        for &r in rows {
            let v = self.value(r);
            if v.shape() != [c] {
                return Err(mismatch("stack", self.value(first), v));
            }
            out.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows.len(), c, out)?;
        let t = self.tracked(rows);
        self.push("stack", value, Op::Stack(rows.to_vec()), t)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), f64::tanh);
        let t = self.tracked(&[x]);
        self.push("tanh", v, Op::Tanh(x), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |p| 1.0 / (1.0 + (-p).exp()));
        let t = self.tracked(&[x]);
        self.push("sigmoid", v, Op::Sigmoid(x), t)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), f64::exp);
        let t = self.tracked(&[x]);
        self.push("exp", v, Op::Exp(x), t)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&p| p <= 0.0) {
            return Err(TensorError::Invalid {
                op: "log",
                msg: "argument must be positive".into(),
            });
        }
        let v = map(v, f64::ln);
        let t = self.tracked(&[x]);
        self.push("log", v, Op::Log(x), t)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = map(self.value(x), |p| p * p);
        let t = self.tracked(&[x]);
        self.push("square", v, Op::Square(x), t)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.sqrt_eps(x, 0.0)
    }

    /// Square root whose backward pass evaluates `0.5 / sqrt(x + eps)`, so the
    /// derivative stays finite at zero while the forward value is exact.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        if v.data().iter().any(|&p| p < 0.0) {
            return Err(TensorError::Invalid {
                op: "sqrt",
                msg: "argument must be non-negative".into(),
            });
        }
        let v = map(v, f64::sqrt);
        let t = self.tracked(&[x]);
        self.push("sqrt", v, Op::Sqrt { x, eps }, t)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let t = self.tracked(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), t)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the positions where `mask` is true; the rest get
    /// probability exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(x);
        expect_rank("softmax", v, 1)?;
        if let Some(m) = mask {
            if m.len() != v.len() {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: format!("mask length {} vs input length {}", m.len(), v.len()),
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(TensorError::Invalid {
                    op: "softmax",
                    msg: "mask excludes every position".into(),
                });
            }
        }
        let value = Tensor::vector(softmax_values(v.data(), mask));
        let t = self.tracked(&[x]);
        self.push("softmax", value, Op::Softmax(x), t)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        expect_rank("log_softmax", v, 1)?;
        let max = v.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data().iter().map(|p| (p - max).exp()).sum::<f64>().ln();
        let value = map(v, |p| p - lse);
        let t = self.tracked(&[x]);
        self.push("log_softmax", value, Op::LogSoftmax(x), t)
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        expect_rank("pick", v, 1)?;
        if index >= v.len() {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("index {index} out of bounds for length {}", v.len()),
            });
        }
        let value = Tensor::scalar(v.data()[index]);
        let t = self.tracked(&[x]);
        self.push("pick", value, Op::Pick { x, index }, t)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("dot", x, y));
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        let t = self.tracked(&[a, b]);
        self.push("dot", Tensor::scalar(s), Op::Dot(a, b), t)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        if self.nodes[loss.0].tracked {
            adj[loss.0] = Some(Tensor::scalar(1.0));
        }
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], var: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[var.0];
        if !node.tracked {
            return;
        }
        let slot = adj[var.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, |d| add_into(d, gd));
                self.accumulate(adj, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, |d| add_into(d, gd));
                self.accumulate(adj, *b, |d| {
                    for (o, g) in d.iter_mut().zip(gd) {
                        *o -= g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(adj, *a, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * bv[k];
                    }
                });
                self.accumulate(adj, *b, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] * av[k];
                    }
                });
            }
            Op::AddRows(m, v) => {
                self.accumulate(adj, *m, |d| add_into(d, gd));
                let c = self.value(*v).len();
                self.accumulate(adj, *v, |d| {
                    for row in gd.chunks_exact(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(adj, *x, |d| {
                    for (o, g) in d.iter_mut().zip(gd) {
                        *o += scale * g;
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let c = wv.cols();
                self.accumulate(adj, *w, |d| {
                    for (row, gi) in d.chunks_exact_mut(c).zip(gd) {
                        for (o, xj) in row.iter_mut().zip(xv.data()) {
                            *o += gi * xj;
                        }
                    }
                });
                self.accumulate(adj, *x, |d| {
                    for (row, gi) in wv.data().chunks_exact(c).zip(gd) {
                        for (o, wij) in d.iter_mut().zip(row) {
                            *o += wij * gi;
                        }
                    }
                });
            }
            Op::VecMat(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = wv.cols();
                self.accumulate(adj, *x, |d| {
                    for (o, row) in d.iter_mut().zip(wv.data().chunks_exact(c)) {
                        *o += row.iter().zip(gd).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
                self.accumulate(adj, *w, |d| {
                    for (row, xi) in d.chunks_exact_mut(c).zip(xv.data()) {
                        for (o, gj) in row.iter_mut().zip(gd) {
                            *o += xi * gj;
                        }
                    }
                });
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, r) = (av.cols(), bv.rows());
                self.accumulate(adj, *a, |d| {
                    for (drow, grow) in d.chunks_exact_mut(k).zip(gd.chunks_exact(r)) {
                        for (gnr, brow) in grow.iter().zip(bv.data().chunks_exact(k)) {
                            for (o, bk) in drow.iter_mut().zip(brow) {
                                *o += gnr * bk;
                            }
                        }
                    }
                });
                self.accumulate(adj, *b, |d| {
                    for (grow, arow) in gd.chunks_exact(r).zip(av.data().chunks_exact(k)) {
                        for (drow, gnr) in d.chunks_exact_mut(k).zip(grow) {
                            for (o, ak) in drow.iter_mut().zip(arow) {
                                *o += gnr * ak;
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(adj, p, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice { x, start } => {
                let len = y.len();
                self.accumulate(adj, *x, |d| add_into(&mut d[*start..*start + len], gd));
            }
            Op::Row { table, index } => {
                let c = y.len();
                self.accumulate(adj, *table, |d| {
                    add_into(&mut d[index * c..(index + 1) * c], gd)
                });
            }
            Op::Stack(rows) => {
                let c = self.value(rows[0]).len();
                for (k, &r) in rows.iter().enumerate() {
                    self.accumulate(adj, r, |d| add_into(d, &gd[k * c..(k + 1) * c]));
                }
            }
            Op::Tanh(x) => {
                self.accumulate(adj, *x, |d| {
                    for ((o, g), yk) in d.iter_mut().zip(gd).zip(y.data()) {
                        *o += g * (1.0 - yk * yk);
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.accumulate(adj, *x, |d| {
                    for ((o, g), yk) in d.iter_mut().zip(gd).zip(y.data()) {
                        *o += g * yk * (1.0 - yk);
                    }
                });
            }
            Op::Exp(x) => {
                self.accumulate(adj, *x, |d| {
                    for ((o, g), yk) in d.iter_mut().zip(gd).zip(y.data()) {
                        *o += g * yk;
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.accumulate(adj, *x, |d| {
                    for ((o, g), xk) in d.iter_mut().zip(gd).zip(xv) {
                        *o += g / xk;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                self.accumulate(adj, *x, |d| {
                    for ((o, g), xk) in d.iter_mut().zip(gd).zip(xv) {
                        *o += 2.0 * xk * g;
                    }
                });
            }
            Op::Sqrt { x, eps } => {
                let xv = self.value(*x).data();
                self.accumulate(adj, *x, |d| {
                    for ((o, g), xk) in d.iter_mut().zip(gd).zip(xv) {
                        *o += g * 0.5 / (xk + eps).sqrt();
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.accumulate(adj, *x, |d| {
                    for o in d.iter_mut() {
                        *o += g0;
                    }
                });
            }
            Op::Softmax(x) => {
                let yd = y.data();
                let inner: f64 = yd.iter().zip(gd).map(|(a, b)| a * b).sum();
                self.accumulate(adj, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += yd[k] * (gd[k] - inner);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let yd = y.data();
                let total: f64 = gd.iter().sum();
                self.accumulate(adj, *x, |d| {
                    for k in 0..d.len() {
                        d[k] += gd[k] - yd[k].exp() * total;
                    }
                });
            }
            Op::Pick { x, index } => {
                let g0 = gd[0];
                self.accumulate(adj, *x, |d| d[*index] += g0);
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(adj, *a, |d| {
                    for (o, bk) in d.iter_mut().zip(bv) {
                        *o += g0 * bk;
                    }
                });
                self.accumulate(adj, *b, |d| {
                    for (o, ak) in d.iter_mut().zip(av) {
                        *o += g0 * ak;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tight() -> GradCheckConfig {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-6,
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0; 3]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn activation_identity_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let t = tape.tanh(x).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
        assert_eq!(tape.value(s).item(), 0.5);
    }

    #[test]
    fn identity_matvec() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(3));
        let v = tape.constant(Tensor::vector(vec![0.3, -1.7, 2.5]));
        let y = tape.matvec(i, v).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -1.7, 2.5]);
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::vector(vec![1.0; 2]));
        match tape.matvec(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(4.0));
        let grads = tape.backward(c).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.wrt(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn untouched_parameter_gets_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0]));
        let u = tape.param(Tensor::zeros(&[2, 2]));
        let loss = tape.sum(w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(u), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn sqrt_eps_keeps_gradient_finite_at_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![0.5, 0.5]));
        let b = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let diff = tape.sub(a, b).unwrap();
        let sq = tape.square(diff).unwrap();
        let s = tape.sum(sq).unwrap();
        let d = tape.sqrt_eps(s, 1e-12).unwrap();
        let grads = tape.backward(d).unwrap();
        assert!(grads.wrt(a).is_finite());
    }

    #[test]
    fn log_of_nonpositive_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1, 2.0, -0.3, 5.0]));
        let y = tape
            .masked_softmax(x, Some(&[true, true, true, false]))
            .unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[3], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let plain = tape.constant(Tensor::vector(vec![0.1, 2.0, -0.3]));
        let z = tape.softmax(plain).unwrap();
        assert_eq!(&tape.value(y).data()[..3], tape.value(z).data());
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(&mut rng, &[4, 3]);
        let x = random(&mut rng, &[3]);
        let run = || {
            let mut tape = Tape::new();
            let wv = tape.param(w.clone());
            let xv = tape.param(x.clone());
            let h = tape.matvec(wv, xv).unwrap();
            let h = tape.tanh(h).unwrap();
            let p = tape.softmax(h).unwrap();
            let l = tape.pick(p, 1).unwrap();
            let g = tape.backward(l).unwrap();
            (g.wrt(wv), g.wrt(xv))
        };
        let (a, b) = run();
        let (c, d) = run();
        assert_eq!(a.data(), c.data());
        assert_eq!(b.data(), d.data());
    }

    // Random 3-layer tanh network checked against central differences.
    #[test]
    fn three_layer_tanh_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let d0 = rng.gen_range(1..=5);
            let d1 = rng.gen_range(1..=5);
            let d2 = rng.gen_range(1..=5);
            let d3 = rng.gen_range(1..=5);
            let params = vec![
                random(&mut rng, &[d0]),
                random(&mut rng, &[d1, d0]),
                random(&mut rng, &[d1]),
                random(&mut rng, &[d2, d1]),
                random(&mut rng, &[d2]),
                random(&mut rng, &[d3, d2]),
            ];
            let report = check_gradients(&params, &tight(), |tape, p| {
                let h = tape.matvec(p[1], p[0])?;
                let h = tape.add(h, p[2])?;
                let h = tape.tanh(h)?;
                let h = tape.matvec(p[3], h)?;
                let h = tape.add(h, p[4])?;
                let h = tape.tanh(h)?;
                let h = tape.matvec(p[5], h)?;
                let h = tape.tanh(h)?;
                let sq = tape.square(h)?;
                tape.sum(sq)
            })
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    fn unary_check(op: fn(&mut Tape, Var) -> Result<Var>, positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let mut x = random(&mut rng, &[4]);
            if positive {
                for v in x.data_mut() {
                    *v = v.abs() + 0.5;
                }
            }
            let c = random(&mut rng, &[4]);
            let report = check_gradients(&[x, c], &tight(), |tape, p| {
                let y = op(tape, p[0])?;
                let y = match tape.value(y).rank() {
                    0 => y,
                    _ => tape.dot(y, p[1])?,
                };
                Ok(y)
            })
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    #[test]
    fn elementwise_primitives_match_finite_differences() {
        unary_check(|t, x| t.tanh(x), false);
        unary_check(|t, x| t.sigmoid(x), false);
        unary_check(|t, x| t.exp(x), false);
        unary_check(|t, x| t.log(x), true);
        unary_check(|t, x| t.square(x), false);
        unary_check(|t, x| t.sqrt(x), true);
        unary_check(|t, x| t.softmax(x), false);
        unary_check(|t, x| t.log_softmax(x), false);
        unary_check(|t, x| t.affine(x, -1.5, 2.0), false);
        unary_check(|t, x| t.slice(x, 1, 2).and_then(|s| t.sum(s)), false);
        unary_check(|t, x| t.pick(x, 2), false);
        unary_check(|t, x| t.sum(x), false);
        unary_check(
            |t, x| t.masked_softmax(x, Some(&[true, false, true, true])),
            false,
        );
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = vec![
            random(&mut rng, &[3, 4]),
            random(&mut rng, &[4]),
            random(&mut rng, &[3]),
            random(&mut rng, &[2, 4]),
            random(&mut rng, &[3, 2]),
        ];
        let report = check_gradients(&params, &tight(), |tape, p| {
            let a = tape.matvec(p[0], p[1])?; // 3
            let b = tape.vecmat(p[2], p[0])?; // 4
            let m = tape.matmul_t(p[0], p[3])?; // 3x2
            let bias = tape_row_sum(tape, p[3])?;
            let m = tape.add_rows(m, bias)?;
            let prod = tape.mul(m, p[4])?;
            let r0 = tape.row(prod, 1)?;
            let c = tape.concat(&[a, b, r0])?; // 9
            let s1 = tape.slice(c, 0, 4)?;
            let s2 = tape.slice(c, 4, 4)?;
            let st = tape.stack(&[s1, s2])?;
            let target = tape.constant(Tensor::filled(&[2, 4], 0.3));
            let q = tape.sub(st, target)?;
            let q = tape.square(q)?;
            let s = tape.sum(q)?;
            let d = tape.dot(a, p[2])?;
            tape.add(s, d)
        })
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    fn tape_row_sum(tape: &mut Tape, m: Var) -> Result<Var> {
        let r0 = tape.row(m, 0)?;
        let r1 = tape.row(m, 1)?;
        let s = tape.add(r0, r1)?;
        tape.slice(s, 0, 2)
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(xs));
            let y = tape.softmax(x).unwrap();
            let v = tape.value(y).data();
            prop_assert!(v.iter().all(|&p| p >= 0.0));
            prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn log_softmax_normalizes(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(xs));
            let y = tape.log_softmax(x).unwrap();
            let v = tape.value(y).data();
            prop_assert!(v.iter().all(|&p| p <= 0.0));
            let lse = v.iter().map(|p| p.exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() < 1e-9);
        }
    }
}
