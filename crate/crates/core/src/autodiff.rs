//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are stored in
//! creation order, which is already a topological order, so the backward
//! sweep is a single reverse pass. Leaf values can be replaced and the whole
//! tape re-evaluated, which is what the finite-difference checks use.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    /// Adds a 1×n row to every row.
    AddRow(Var, Var),
    Scale(Var, T),
    /// Elementwise product with a constant matrix.
    MulConst(Var, Arc<Matrix<T>>),
    Softmax(Var),
    /// Softmax over the mask support only.
    MaskedSoftmax(Var, Arc<Mask>),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    ConcatCols(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    /// Mean token cross-entropy over rows with a label.
    CrossEntropy { logits: Var, labels: Vec<Option<usize>> },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Softmax(a)
            | Op::MaskedSoftmax(a, _)
            | Op::Relu(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar (or seeded) output w.r.t. every node that needs one.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Zero matrix of the right shape if the output does not depend on `v`.
    pub fn wrt_or_zeros(&self, v: Var, tape: &Tape<T>) -> Matrix<T> {
        self.wrt(v).cloned().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Matrix::zeros(r, c)
        })
    }
}

fn layer_norm_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn eval<T: Scalar>(op: &Op<T>, nodes: &[Node<T>]) -> Result<Matrix<T>> {
    let v = |x: &Var| &nodes[x.0].value;
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => v(a).matmul(v(b))?,
        Op::Transpose(a) => v(a).transpose(),
        Op::Add(a, b) => v(a).add(v(b))?,
        Op::AddRow(a, b) => v(a).add_row(v(b))?,
        Op::Scale(a, s) => v(a).scale(*s),
        Op::MulConst(a, m) => v(a).hadamard(m)?,
        Op::Softmax(a) => v(a).softmax_rows(),
        Op::MaskedSoftmax(a, mask) => {
            let x = v(a);
            if x.shape() != (mask.size(), mask.size()) {
                return Err(Error::shape("masked softmax", x.shape(), (mask.size(), mask.size())));
            }
            x.softmax_rows_where(|i, j| mask.get(i, j))
        }
        Op::Relu(a) => v(a).relu(),
        Op::LayerNorm { x, gain, bias, eps } => {
            let (g, b) = (v(gain), v(bias));
            if g.rows() != 1 || b.rows() != 1 {
                return Err(Error::shape("layer norm gain/bias", g.shape(), b.shape()));
            }
            v(x).layer_norm_rows(g.data(), b.data(), *eps)?
        }
        Op::ConcatCols(parts) => {
            let refs: Vec<&Matrix<T>> = parts.iter().map(v).collect();
            Matrix::concat_cols(&refs)?
        }
        Op::Gather { table, rows } => v(table).gather_rows(rows)?,
        Op::CrossEntropy { logits, labels } => {
            let z = v(logits);
            if labels.len() != z.rows() {
                return Err(Error::shape("cross entropy", z.shape(), (labels.len(), 1)));
            }
            let mut total = T::zero();
            let mut count = 0usize;
            for (i, label) in labels.iter().enumerate() {
                let Some(y) = *label else { continue };
                if y >= z.cols() {
                    return Err(Error::Contract(format!("label {y} out of range for {} classes", z.cols())));
                }
                let row = z.row(i);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&r| (r - max).exp()).sum::<T>().ln() + max;
                total += lse - row[y];
                count += 1;
            }
            Matrix::row_vector(vec![if count == 0 { T::zero() } else { total / T::of(count as f64) }])
        }
        Op::Sum(a) => Matrix::row_vector(vec![v(a).sum()]),
    })
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += *d;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = eval(&op, &self.nodes)?;
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn mul_const(&mut self, a: Var, m: Arc<Matrix<T>>) -> Result<Var> {
        self.push(Op::MulConst(a, m))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: Arc<Mask>) -> Result<Var> {
        self.push(Op::MaskedSoftmax(a, mask))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        self.push(Op::Gather { table, rows: rows.to_vec() })
    }

    /// Mean cross-entropy over the rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Replaces a leaf's value; call [`Tape::recompute`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Matrix<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::shape("set_leaf", node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in order from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let value = eval(&self.nodes[idx].op, &self.nodes[..idx])?;
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Values every node would have if re-evaluated from the leaves, without
    /// touching the recorded ones.
    pub fn replay(&self) -> Result<Vec<Matrix<T>>> {
        let mut scratch = self.clone();
        scratch.recompute()?;
        Ok(scratch.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Gradients of a scalar (1×1) `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {shape:?}")));
        }
        self.backward_from(loss, Matrix::filled(1, 1, T::one()))
    }

    /// Vector-Jacobian product: gradients of `⟨seed, output⟩`.
    pub fn backward_from(&self, output: Var, seed: Matrix<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("backward seed", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.needs_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.matmul(&val(*b).transpose())?);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], val(*a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::AddRow(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(*b) {
                    let mut col = vec![T::zero(); g.cols()];
                    for i in 0..g.rows() {
                        for (c, &v) in col.iter_mut().zip(g.row(i)) {
                            *c += v;
                        }
                    }
                    accumulate(&mut grads[b.0], Matrix::row_vector(col));
                }
            }
            Op::Scale(a, s) => accumulate(&mut grads[a.0], g.scale(*s)),
            Op::MulConst(a, m) => accumulate(&mut grads[a.0], g.hadamard(m)?),
            Op::Softmax(a) | Op::MaskedSoftmax(a, _) => {
                let mut dx = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let (y, dy) = (out.row(i), g.row(i));
                    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &dyv) in dx.row_mut(i).iter_mut().zip(y).zip(dy) {
                        *d = yv * (dyv - dot);
                    }
                }
                accumulate(&mut grads[a.0], dx);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let dx = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                    if x.get(i, j) > T::zero() {
                        g.get(i, j)
                    } else {
                        T::zero()
                    }
                });
                accumulate(&mut grads[a.0], dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let gv = val(*gain);
                let (rows, cols) = xv.shape();
                let n = T::of(cols as f64);
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = vec![T::zero(); cols];
                let mut dbias = vec![T::zero(); cols];
                for i in 0..rows {
                    let (mean, rstd) = layer_norm_stats(xv.row(i), *eps);
                    let xhat: Vec<T> = xv.row(i).iter().map(|&v| (v - mean) * rstd).collect();
                    let dy = g.row(i);
                    let dxhat: Vec<T> = dy.iter().zip(gv.data()).map(|(&d, &w)| d * w).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for (c, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = rstd * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        dgain[c] += dy[c] * xhat[c];
                        dbias[c] += dy[c];
                    }
                }
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*gain) {
                    accumulate(&mut grads[gain.0], Matrix::row_vector(dgain));
                }
                if self.wants(*bias) {
                    accumulate(&mut grads[bias.0], Matrix::row_vector(dbias));
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = val(*p).cols();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.0], g.col_block(start, width));
                    }
                    start += width;
                }
            }
            Op::Gather { table, rows } => {
                let t = val(*table);
                let mut dt = Matrix::zeros(t.rows(), t.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (d, &v) in dt.row_mut(r).iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                accumulate(&mut grads[table.0], dt);
            }
            Op::CrossEntropy { logits, labels } => {
                let z = val(*logits);
                let count = labels.iter().filter(|l| l.is_some()).count();
                let mut dz = Matrix::zeros(z.rows(), z.cols());
                if count > 0 {
                    let scale = g.get(0, 0) / T::of(count as f64);
                    let probs = z.softmax_rows();
                    for (i, label) in labels.iter().enumerate() {
                        let Some(y) = *label else { continue };
                        for (c, d) in dz.row_mut(i).iter_mut().enumerate() {
                            let target = if c == y { T::one() } else { T::zero() };
                            *d = (probs.get(i, c) - target) * scale;
                        }
                    }
                }
                accumulate(&mut grads[logits.0], dz);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(&mut grads[a.0], Matrix::filled(r, c, g.get(0, 0)));
            }
        }
        Ok(())
    }
}
