use super::tensor::{argmax, matmul_nn, matmul_nt, matmul_tn, Tensor};
use super::DiffError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    MaxRows {
        input: Var,
        argmax: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    Dot(Var, Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    SquaredError {
        pred: Var,
        target: Tensor,
    },
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::ConcatRows(_) => "concat_rows",
            Op::Dot(..) => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SquaredError { .. } => "squared_error",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Transpose(a)
            | Op::Reshape(a) => vec![*a],
            Op::MaxRows { input, .. } | Op::GatherRows { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SquaredError { pred, .. } => vec![*pred],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run record of a computation. Values are computed eagerly as
/// operations are recorded; [`Tape::backward`] sweeps the record in reverse.
///
/// Nodes can only reference earlier nodes, so the record is always acyclic and
/// its insertion order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`. Nodes the root does not
    /// depend on get a zero tensor.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.adjoints[var.0].as_ref()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), DiffError> {
    if t.rank() == 2 {
        Ok(())
    } else {
        Err(DiffError::Rank {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn is_leaf(&self, var: Var) -> bool {
        matches!(self.nodes[var.0].op, Op::Leaf)
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.name()
    }

    pub fn inputs(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.inputs()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(r, c, matmul_nn(ta.data(), tb.data(), r, k, c))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let out = ta.zip_map(tb, f);
        Ok(self.push(op, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x c` (or length-`c`) row vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (ta, tr) = (self.value(a), self.value(row));
        require_matrix("add_row", ta)?;
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(mismatch("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % c];
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        require_matrix("softmax_rows", ta)?;
        let c = ta.cols();
        let mut out = ta.clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                softmax_in_place(row);
            }
        }
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Column-wise maximum over the rows of an `r x c` matrix, giving `1 x c`.
    /// Ties resolve to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        require_matrix("max_rows", ta)?;
        if ta.rows() == 0 {
            return Err(DiffError::Empty { op: "max_rows" });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut best = vec![0usize; c];
        for i in 1..r {
            for (j, b) in best.iter_mut().enumerate() {
                if ta.get(i, j) > ta.get(*b, j) {
                    *b = i;
                }
            }
        }
        let values = best
            .iter()
            .enumerate()
            .map(|(j, &i)| ta.get(i, j))
            .collect();
        let out = Tensor::row(values);
        Ok(self.push(
            Op::MaxRows {
                input: a,
                argmax: best,
            },
            out,
        ))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        require_matrix("mean_rows", ta)?;
        if ta.rows() == 0 {
            return Err(DiffError::Empty { op: "mean_rows" });
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut acc = vec![0.0; c];
        for i in 0..r {
            for (o, v) in acc.iter_mut().zip(ta.row_slice(i)) {
                *o += v;
            }
        }
        let n = r as f64;
        let out = Tensor::row(acc.into_iter().map(|v| v / n).collect());
        Ok(self.push(Op::MeanRows(a), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts
            .first()
            .ok_or(DiffError::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("dot", ta, tb));
        }
        let v = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(v)))
    }

    /// Fused log-softmax + negative log-likelihood of `target` for a single
    /// row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var, DiffError> {
        let tl = self.value(logits);
        if tl.rows() != 1 || tl.numel() == 0 {
            return Err(DiffError::Rank {
                op: "cross_entropy",
                expected: 1,
                shape: tl.shape().to_vec(),
            });
        }
        if target >= tl.numel() {
            return Err(DiffError::Index {
                op: "cross_entropy",
                index: target,
                len: tl.numel(),
            });
        }
        let x = tl.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - x[target];
        let probs = x.iter().map(|v| (v - lse).exp()).collect();
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Sum of squared differences against a constant target.
    pub fn squared_error(&mut self, pred: Var, target: &Tensor) -> Result<Var, DiffError> {
        let tp = self.value(pred);
        if tp.numel() != target.numel() {
            return Err(mismatch("squared_error", tp, target));
        }
        let v = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Op::SquaredError {
                pred,
                target: target.clone(),
            },
            Tensor::scalar(v),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let ta = self.value(a);
        require_matrix("transpose", ta)?;
        let out = ta.transpose();
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let ta = self.value(a);
        let out = Tensor::new(shape.to_vec(), ta.data().to_vec()).map_err(|_| {
            DiffError::ShapeMismatch {
                op: "reshape",
                lhs: ta.shape().to_vec(),
                rhs: shape.to_vec(),
            }
        })?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Selects rows by index (repeats allowed). The selection itself carries
    /// no gradient; adjoints scatter back into the chosen rows.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let ta = self.value(a);
        require_matrix("gather_rows", ta)?;
        let mut data = Vec::with_capacity(rows.len() * ta.cols());
        for &r in rows {
            if r >= ta.rows() {
                return Err(DiffError::Index {
                    op: "gather_rows",
                    index: r,
                    len: ta.rows(),
                });
            }
            data.extend_from_slice(ta.row_slice(r));
        }
        let out = Tensor::matrix(rows.len(), ta.cols(), data)?;
        Ok(self.push(
            Op::GatherRows {
                input: a,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(DiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(rv.shape()));

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let mut accumulate = |v: Var, t: Tensor| match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                let da = matmul_nt(g.data(), tb.data(), r, c, k);
                let db = matmul_tn(ta.data(), g.data(), r, k, c);
                accumulate(*a, Tensor::matrix(r, k, da).expect("matmul adjoint"));
                accumulate(*b, Tensor::matrix(k, c, db).expect("matmul adjoint"));
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone());
                accumulate(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(*a, g.zip_map(self.value(*b), |x, y| x * y));
                accumulate(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                let c = out.cols();
                let mut dr = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (d, v) in dr.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(*a, g.clone());
                let shape = self.value(*row).shape().to_vec();
                accumulate(*row, Tensor::new(shape, dr).expect("add_row adjoint"));
            }
            Op::Tanh(a) => accumulate(*a, g.zip_map(out, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(*a, g.zip_map(out, |d, y| d * y * (1.0 - y))),
            Op::Relu(a) => accumulate(
                *a,
                g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 }),
            ),
            Op::Exp(a) => accumulate(*a, g.zip_map(out, |d, y| d * y)),
            Op::Scale(a, f) => accumulate(*a, g.map(|d| d * f)),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (grow, yrow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let inner: f64 = grow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    da.extend(grow.iter().zip(yrow).map(|(d, y)| y * (d - inner)));
                }
                accumulate(
                    *a,
                    Tensor::new(out.shape().to_vec(), da).expect("softmax adjoint"),
                );
            }
            Op::MaxRows { input, argmax } => {
                let ti = self.value(*input);
                let c = ti.cols();
                let mut da = Tensor::zeros(ti.shape());
                for (j, &i) in argmax.iter().enumerate() {
                    da.data_mut()[i * c + j] = g.data()[j];
                }
                accumulate(*input, da);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let n = ta.rows() as f64;
                let c = ta.cols();
                let data = (0..ta.numel()).map(|i| g.data()[i % c] / n).collect();
                accumulate(
                    *a,
                    Tensor::new(ta.shape().to_vec(), data).expect("mean adjoint"),
                );
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(*a, Tensor::full(ta.shape(), g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let len = t.numel();
                    let slice = g.data()[offset..offset + len].to_vec();
                    offset += len;
                    accumulate(
                        p,
                        Tensor::new(t.shape().to_vec(), slice).expect("concat adjoint"),
                    );
                }
            }
            Op::Dot(a, b) => {
                let d = g.item();
                accumulate(*a, self.value(*b).map(|y| d * y));
                accumulate(*b, self.value(*a).map(|x| d * x));
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let d = g.item();
                let mut grad: Vec<f64> = probs.iter().map(|p| d * p).collect();
                grad[*target] -= d;
                let shape = self.value(*logits).shape().to_vec();
                accumulate(*logits, Tensor::new(shape, grad).expect("ce adjoint"));
            }
            Op::SquaredError { pred, target } => {
                let d = g.item();
                let tp = self.value(*pred);
                let data = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| 2.0 * d * (p - t))
                    .collect();
                accumulate(
                    *pred,
                    Tensor::new(tp.shape().to_vec(), data).expect("se adjoint"),
                );
            }
            Op::Transpose(a) => accumulate(*a, g.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                accumulate(*a, g.clone().with_shape(shape));
            }
            Op::GatherRows { input, rows } => {
                let ti = self.value(*input);
                let c = ti.cols();
                let mut da = Tensor::zeros(ti.shape());
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        da.data_mut()[r * c + j] += g.data()[k * c + j];
                    }
                }
                accumulate(*input, da);
            }
        }
    }
}

/// Index of the largest value of a tensor, lowest index on ties.
pub fn argmax_of(t: &Tensor) -> usize {
    argmax(t.data())
}
