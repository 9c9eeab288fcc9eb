//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a `1 × 1` node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that depends on a
//! parameter. Model-specific fused operations plug in through [`CustomOp`].

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a fused operation defined outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, in input order. `None` means no
    /// contribution (e.g. the input is treated as a constant).
    fn backward(&self, inputs: &[&Matrix<T>], output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    LeakyRelu(Var, T),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    /// Column-wise max over consecutive row groups; stores the winning row per output entry.
    SegmentMax(Var, Vec<usize>),
    TileRows(Var),
    Reshape(Var),
    Sum(Var),
    MeanRowSqNorm(Var),
    GroupMean(Var, Vec<Vec<usize>>),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Forward tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when `v` received none.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix<T> {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let v = va.zip_map(vb, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let v = va.zip_map(vb, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.rows(), 1, "add_row expects a single row");
        assert_eq!(va.cols(), vr.cols(), "add_row width mismatch");
        let mut v = va.clone();
        let r = vr.row(0).to_vec();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// `x·w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select_rows(&idx);
        let rg = self.rg(a);
        self.push(v, Op::GatherRows(a, idx), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hcat(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::vcat(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Column-wise max over consecutive groups of `group` rows. The first
    /// maximal row wins ties.
    pub fn segment_max(&mut self, a: Var, group: usize) -> Var {
        let va = self.value(a);
        assert!(group > 0 && va.rows() % group == 0, "segment_max group must divide row count");
        let n = va.rows() / group;
        let c = va.cols();
        let mut out = Matrix::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for s in 0..n {
            let base = s * group;
            out.row_mut(s).copy_from_slice(va.row(base));
            arg[s * c..(s + 1) * c].fill(base);
            for r in base + 1..base + group {
                let row = va.row(r);
                let orow = out.row_mut(s);
                for j in 0..c {
                    if row[j] > orow[j] {
                        orow[j] = row[j];
                        arg[s * c + j] = r;
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SegmentMax(a, arg), rg)
    }

    /// Column-wise max over all rows, as a `1 × c` row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let rows = self.value(a).rows();
        self.segment_max(a, rows)
    }

    /// Repeats a `1 × c` row `n` times.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "tile_rows expects a single row");
        let row = va.row(0).to_vec();
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let v = Matrix::from_vec(n, row.len(), data);
        let rg = self.rg(a);
        self.push(v, Op::TileRows(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshape(rows, cols);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Sum of every entry, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// Mean of every entry, as `1 × 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_count(n))
    }

    /// Mean over rows of the squared row norm, as `1 × 1`.
    pub fn mean_row_sq_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let total: T = va.as_slice().iter().map(|&x| x * x).sum();
        let v = Matrix::filled(1, 1, total / T::from_count(va.rows()));
        let rg = self.rg(a);
        self.push(v, Op::MeanRowSqNorm(a), rg)
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`.
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut out = Matrix::zeros(groups.len(), c);
        for (g, members) in groups.iter().enumerate() {
            assert!(!members.is_empty(), "group_mean with an empty group");
            let inv = T::one() / T::from_count(members.len());
            let orow = out.row_mut(g);
            for &i in members {
                for (o, &x) in orow.iter_mut().zip(va.row(i)) {
                    *o += x;
                }
            }
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::GroupMean(a, groups), rg)
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: Vec<Var>, value: Matrix<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = inputs.iter().any(|&p| self.rg(p));
        self.push(value, Op::Custom(inputs, op), rg)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        self.backward_with(loss, Matrix::filled(1, 1, T::one()))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&self, out: Var, seed: Matrix<T>) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_t(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).t_matmul(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.col_sums());
                }
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = g.zip_map(self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                if !self.rg(*a) {
                    return;
                }
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.col_range(start, start + w));
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.rg(p) {
                        let idx: Vec<usize> = (start..start + h).collect();
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    start += h;
                }
            }
            Op::SegmentMax(a, arg) => {
                let va = self.value(*a);
                let c = va.cols();
                let mut ga = Matrix::zeros(va.rows(), c);
                for (k, &r) in arg.iter().enumerate() {
                    let s = k / c;
                    let j = k % c;
                    ga[(r, j)] += g[(s, j)];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TileRows(a) => self.accumulate(grads, *a, g.col_sums()),
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, g.reshape(r, c));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g[(0, 0)]));
            }
            Op::MeanRowSqNorm(a) => {
                let va = self.value(*a);
                let k = T::lit(2.0) * g[(0, 0)] / T::from_count(va.rows());
                self.accumulate(grads, *a, va.scale(k));
            }
            Op::GroupMean(a, groups) => {
                let va = self.value(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (gi, members) in groups.iter().enumerate() {
                    let inv = T::one() / T::from_count(members.len());
                    for &i in members {
                        for (o, &x) in ga.row_mut(i).iter_mut().zip(g.row(gi)) {
                            *o += x * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Matrix<T>> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&vals, &node.value, g);
                debug_assert_eq!(gs.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                for (&inp, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accumulate(grads, inp, gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` at `x`.
    fn numeric_grad(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-6;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn composite(g: &mut Graph<f64>, x: Var, w: Var, b: Var) -> Var {
        let h = g.linear(x, w, b);
        let h = g.leaky_relu(h, 0.2);
        let idx = vec![0, 2, 1, 1, 3, 0];
        let gathered = g.gather_rows(h, idx);
        let cat = g.concat_cols(&[gathered, gathered]);
        let pooled = g.segment_max(cat, 2);
        let m = g.col_max(pooled);
        let t = g.tile_rows(m, 3);
        let both = g.concat_rows(&[pooled, t]);
        let sq = g.mul(both, both);
        let r = g.reshape(sq, 4, 12);
        let gm = g.group_mean(r, vec![vec![0, 1], vec![3], vec![1, 2, 3]]);
        let s1 = g.mean(gm);
        let s2 = g.mean_row_sq_norm(h);
        let s = g.add(s1, s2);
        g.scale(s, 0.5)
    }

    #[test]
    fn basic_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Matrix::<f64>::uniform(4, 3, 1.0, &mut rng);
        let w0 = Matrix::<f64>::uniform(3, 4, 1.0, &mut rng);
        let b0 = Matrix::<f64>::uniform(1, 4, 1.0, &mut rng);
        let eval = |x: &Matrix<f64>, w: &Matrix<f64>, b: &Matrix<f64>| {
            let mut g = Graph::new();
            let (x, w, b) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let out = composite(&mut g, x, w, b);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let (x, w, b) = (g.param(x0.clone()), g.param(w0.clone()), g.param(b0.clone()));
        let out = composite(&mut g, x, w, b);
        let grads = g.backward(out);
        let nx = numeric_grad(&x0, |x| eval(x, &w0, &b0));
        let nw = numeric_grad(&w0, |w| eval(&x0, w, &b0));
        let nb = numeric_grad(&b0, |b| eval(&x0, &w0, b));
        assert!(grads.get(x).unwrap().max_abs_diff(&nx) < 1e-7);
        assert!(grads.get(w).unwrap().max_abs_diff(&nw) < 1e-7);
        assert!(grads.get(b).unwrap().max_abs_diff(&nb) < 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Matrix::filled(2, 2, 1.0));
        let p = g.param(Matrix::filled(2, 2, 2.0));
        let s = g.sub(p, c);
        let m = g.mean(s);
        let grads = g.backward(m);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &Matrix::filled(2, 2, 0.25));
    }
}
