//! Dynamic reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is rebuilt for every evaluation: leaves are registered with
//! [`Graph::leaf`], each primitive appends one node holding its value, and
//! [`Graph::backward`] walks the nodes in reverse insertion order. Insertion
//! order is a topological order because a node can only reference nodes that
//! already exist.
//!
//! Every primitive checks its output for NaN/Inf and fails with the name of
//! the offending operation.

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
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
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatVec(Var, Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    SqNorm(Var),
    RowSqNorm(Var),
    Concat { a: Var, b: Var, dim: usize },
    Slice { src: Var, dim: usize, start: usize },
    PermuteCols(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus, after [`Graph::backward`], the gradients of
/// every node that depends on a trainable leaf.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    /// Registers an input. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &value)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        self.emit(name, value, op, &[a])
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.emit(name, value, op, &[a, b])
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| Error::dim(op, format!("expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds the vector `row` (length n) to every row of the `[m, n]` matrix `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        if self.shape(row) != [n] {
            return Err(Error::dim("add_row", format!("[{m}, {n}] + {:?}", self.shape(row))));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.emit("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("scale", a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map("add_scalar", a, Op::AddScalar(a), |x| x + c)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        self.emit("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `[m, k] x [k] -> [m]`.
    pub fn matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matvec", a)?;
        if self.shape(v) != [k] {
            return Err(Error::dim("matvec", format!("[{m}, {k}] x {:?}", self.shape(v))));
        }
        let mut out = vec![0.0; m];
        gemm(m, k, 1, self.value(a).data(), false, self.value(v).data(), false, &mut out);
        self.emit("matvec", Tensor::vector(out), Op::MatVec(a, v), &[a, v])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        self.map("ln", a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map("square", a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map("leaky_relu", a, Op::LeakyRelu(a, slope), |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.emit("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Per-row sums of a `[m, n]` matrix, giving `[m]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("sum_cols", a)?;
        let out = self.value(a).rows().map(|r| r.iter().sum()).collect();
        self.emit("sum_cols", Tensor::vector(out), Op::SumCols(a), &[a])
    }

    /// Squared Euclidean norm of all elements, as a scalar.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        self.emit("sq_norm", Tensor::scalar(s), Op::SqNorm(a), &[a])
    }

    /// Per-row squared norms of a `[m, n]` matrix, giving `[m]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        self.matrix_dims("row_sq_norm", a)?;
        let out = self
            .value(a)
            .rows()
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect();
        self.emit("row_sq_norm", Tensor::vector(out), Op::RowSqNorm(a), &[a])
    }

    /// Concatenation along `dim` (0 for vectors and matrix rows, 1 for
    /// matrix columns).
    pub fn concat(&mut self, a: Var, b: Var, dim: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ta, tb) = (self.value(a), self.value(b));
        let value = match (sa.as_slice(), sb.as_slice(), dim) {
            ([n1], [n2], 0) => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::new(vec![n1 + n2], d)?
            }
            ([m1, n], [m2, n2], 0) if n == n2 => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::matrix(m1 + m2, *n, d)?
            }
            ([m, n1], [m2, n2], 1) if m == m2 => {
                let mut d = Vec::with_capacity(m * (n1 + n2));
                for (ra, rb) in ta.rows().zip(tb.rows()) {
                    d.extend_from_slice(ra);
                    d.extend_from_slice(rb);
                }
                Tensor::matrix(*m, n1 + n2, d)?
            }
            _ => return Err(Error::dim("concat", format!("{sa:?} ++ {sb:?} along {dim}"))),
        };
        self.emit("concat", value, Op::Concat { a, b, dim }, &[a, b])
    }

    /// Contiguous range `[start, start + len)` along `dim`.
    pub fn slice(&mut self, src: Var, dim: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(src).to_vec();
        let extent = *shape
            .get(dim)
            .ok_or_else(|| Error::dim("slice", format!("dim {dim} of {shape:?}")))?;
        if len == 0 || start + len > extent || shape.len() > 2 {
            return Err(Error::dim(
                "slice",
                format!("[{start}, {}) of {shape:?} along {dim}", start + len),
            ));
        }
        let t = self.value(src);
        let value = match (shape.as_slice(), dim) {
            ([_], 0) => Tensor::vector(t.data()[start..start + len].to_vec()),
            ([_, n], 0) => Tensor::matrix(len, *n, t.data()[start * n..(start + len) * n].to_vec())?,
            ([m, _], 1) => {
                let mut d = Vec::with_capacity(m * len);
                for r in t.rows() {
                    d.extend_from_slice(&r[start..start + len]);
                }
                Tensor::matrix(*m, len, d)?
            }
            _ => unreachable!(),
        };
        self.emit("slice", value, Op::Slice { src, dim, start }, &[src])
    }

    /// Splits along `dim` into `[0, at)` and `[at, end)`.
    pub fn split(&mut self, src: Var, dim: usize, at: usize) -> Result<(Var, Var)> {
        let extent = *self
            .shape(src)
            .get(dim)
            .ok_or_else(|| Error::dim("split", format!("dim {dim} of {:?}", self.shape(src))))?;
        if at == 0 || at >= extent {
            return Err(Error::dim("split", format!("split point {at} of extent {extent}")));
        }
        let a = self.slice(src, dim, 0, at)?;
        let b = self.slice(src, dim, at, extent - at)?;
        Ok((a, b))
    }

    /// Reorders the columns of a `[m, n]` matrix: output column `j` is input
    /// column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("permute_cols", a)?;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute_cols", format!("{perm:?} is not a permutation of {n}")));
        }
        let mut d = Vec::with_capacity(m * n);
        for r in self.value(a).rows() {
            d.extend(perm.iter().map(|&p| r[p]));
        }
        let value = Tensor::matrix(m, n, d)?;
        self.emit("permute_cols", value, Op::PermuteCols(a, perm.to_vec()), &[a])
    }

    /// Propagates d`root`/d(node) to every node that depends on a trainable
    /// leaf. Gradients are kept until [`Graph::zero_grad`]; a second call
    /// before that is rejected rather than silently accumulated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Usage(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        self.grads = Some(grads);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grads = None;
    }

    /// Gradient of the last backward root with respect to `v`, if `v`
    /// participates in it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.as_ref()?.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("gradient shape"))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if rg(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.to_vec());
                if rg(*row) {
                    let n = val(*row).len();
                    let mut d = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        for (s, x) in d.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    acc(*row, d);
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let (_, n) = self.nodes[b.0].value.dims2().unwrap();
                if rg(*a) {
                    let mut d = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut d);
                    acc(*a, d);
                }
                if rg(*b) {
                    let mut d = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut d);
                    acc(*b, d);
                }
            }
            Op::MatVec(a, v) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                if rg(*a) {
                    let x = val(*v);
                    let mut d = Vec::with_capacity(m * k);
                    for gi in g {
                        d.extend(x.iter().map(|xj| gi * xj));
                    }
                    acc(*a, d);
                }
                if rg(*v) {
                    let mut d = vec![0.0; k];
                    gemm(k, m, 1, val(*a), true, g, false, &mut d);
                    acc(*v, d);
                }
            }
            Op::Exp(a) => acc(
                *a,
                g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect(),
            ),
            Op::Ln(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Square(a) => acc(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect()),
            Op::Tanh(a) => acc(
                *a,
                g.iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            ),
            Op::LeakyRelu(a, slope) => acc(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect(),
            ),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::SumCols(a) => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, n)).collect());
            }
            Op::SqNorm(a) => acc(*a, val(*a).iter().map(|x| 2.0 * g[0] * x).collect()),
            Op::RowSqNorm(a) => {
                let (_, n) = self.nodes[a.0].value.dims2().unwrap();
                let d = val(*a)
                    .chunks(n)
                    .zip(g)
                    .flat_map(|(r, gi)| r.iter().map(move |x| 2.0 * gi * x))
                    .collect();
                acc(*a, d);
            }
            Op::Concat { a, b, dim } => {
                let na = val(*a).len();
                match (*dim, self.nodes[a.0].value.dims2()) {
                    (1, Some((_, n1))) => {
                        let n = node.value.dims2().unwrap().1;
                        let mut da = Vec::with_capacity(na);
                        let mut db = Vec::with_capacity(g.len() - na);
                        for r in g.chunks(n) {
                            da.extend_from_slice(&r[..n1]);
                            db.extend_from_slice(&r[n1..]);
                        }
                        acc(*a, da);
                        acc(*b, db);
                    }
                    _ => {
                        acc(*a, g[..na].to_vec());
                        acc(*b, g[na..].to_vec());
                    }
                }
            }
            Op::Slice { src, dim, start } => {
                let st = &self.nodes[src.0].value;
                let mut d = vec![0.0; st.len()];
                match (*dim, st.dims2()) {
                    (1, Some((_, n))) => {
                        let len = node.value.dims2().unwrap().1;
                        for (row, gr) in d.chunks_mut(n).zip(g.chunks(len)) {
                            row[*start..start + len].copy_from_slice(gr);
                        }
                    }
                    (_, Some((_, n))) => d[start * n..start * n + g.len()].copy_from_slice(g),
                    _ => d[*start..start + g.len()].copy_from_slice(g),
                }
                acc(*src, d);
            }
            Op::PermuteCols(a, perm) => {
                let n = perm.len();
                let mut d = vec![0.0; g.len()];
                for (drow, grow) in d.chunks_mut(n).zip(g.chunks(n)) {
                    for (j, &p) in perm.iter().enumerate() {
                        drow[p] += grow[j];
                    }
                }
                acc(*a, d);
            }
        }
        Ok(())
    }
}
