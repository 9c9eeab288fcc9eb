//! Transductive label propagation from prototypes to query points.
//!
//! Nodes are the prototypes (class-major) followed by every query point.
//! `W_ij = exp(−‖x_i − x_j‖² / 2σ²)` with a single global `σ`, the standard
//! deviation of all pairwise node distances. With `S = D^{-1/2}(W+Wᵀ)D^{-1/2}`
//! and `D_i = Σ_j (W+Wᵀ)_ij`, the propagated scores solve `(I − γS)F = L`
//! and `H = softmax(F)` row by row.
//!
//! The solve always runs in `f64`, whatever the model precision.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{norm1, Lu};
use crate::prototypes::PrototypeSet;
use crate::scalar::Scalar;
use crate::tensor::{sq_dist, Matrix};

/// Default propagation strength.
pub const GAMMA: f64 = 0.9;
/// Systems with a larger 1-norm condition estimate are rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest accepted residual `‖(I−γS)F − L‖_max`.
pub const MAX_RESIDUAL: f64 = 1e-8;
/// Floor applied to probabilities inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Affinity matrix and the quantities needed to differentiate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinity<T> {
    pub w: Matrix<T>,
    pub sigma: T,
    /// Kept entries after sparsification; `None` means dense.
    pub mask: Option<Vec<bool>>,
}

/// Dense all-pairs Gaussian affinity with optional row-wise top-k.
pub fn affinity<T: Scalar>(x: &Matrix<T>, sparsify_k: Option<usize>) -> Result<Affinity<T>> {
    let z = x.rows();
    if z < 2 {
        return Err(Error::DegenerateGraph(format!("{z} nodes; need at least two")));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput("node features must be finite".into()));
    }
    let mut d2 = Matrix::zeros(z, z);
    for i in 0..z {
        for j in i + 1..z {
            let d = sq_dist(x.row(i), x.row(j));
            d2[(i, j)] = d;
            d2[(j, i)] = d;
        }
    }
    let sigma = pair_std(&d2).0;
    if !(sigma > T::zero()) {
        return Err(Error::DegenerateGraph(
            "all node features coincide (sigma = 0); perturb the features or skip the episode".into(),
        ));
    }
    let denom = T::lit(2.0) * sigma * sigma;
    // Subnormal weights are flushed to zero; they carry no information and
    // make the gradient arithmetic very slow.
    let mut w = d2.map(|d| {
        let v = (-d / denom).exp();
        if v < T::min_positive_value() {
            T::zero()
        } else {
            v
        }
    });
    for i in 0..z {
        w[(i, i)] = T::one();
    }
    let mask = match sparsify_k {
        None => None,
        Some(k) => {
            let mut mask = vec![false; z * z];
            let mut order: Vec<usize> = Vec::with_capacity(z - 1);
            for i in 0..z {
                order.clear();
                order.extend((0..z).filter(|&j| j != i));
                order.sort_by(|&a, &b| w[(i, b)].partial_cmp(&w[(i, a)]).unwrap().then(a.cmp(&b)));
                mask[i * z + i] = true;
                for &j in order.iter().take(k) {
                    mask[i * z + j] = true;
                }
            }
            for (v, &keep) in w.as_mut_slice().iter_mut().zip(&mask) {
                if !keep {
                    *v = T::zero();
                }
            }
            Some(mask)
        }
    };
    Ok(Affinity { w, sigma, mask })
}

/// Population standard deviation and mean of the pairwise distances `i < j`.
fn pair_std<T: Scalar>(d2: &Matrix<T>) -> (T, T) {
    let z = d2.rows();
    let pairs = T::from_count(z * (z - 1) / 2);
    let mut sum = T::zero();
    for i in 0..z {
        for j in i + 1..z {
            sum += d2[(i, j)].sqrt();
        }
    }
    let mean = sum / pairs;
    let mut var = T::zero();
    for i in 0..z {
        for j in i + 1..z {
            let e = d2[(i, j)].sqrt() - mean;
            var += e * e;
        }
    }
    ((var / pairs).sqrt(), mean)
}

struct AffinityOp<T> {
    w: Matrix<T>,
    sigma: T,
}

impl<T: Scalar> CustomOp<T> for AffinityOp<T> {
    fn name(&self) -> &'static str {
        "gaussian_affinity"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let x = inputs[0];
        let z = x.rows();
        let sigma = self.sigma;
        let s2 = sigma * sigma;
        let mut d2 = Matrix::zeros(z, z);
        for i in 0..z {
            for j in i + 1..z {
                let d = sq_dist(x.row(i), x.row(j));
                d2[(i, j)] = d;
                d2[(j, i)] = d;
            }
        }
        // Direct dependence on the squared distances and the sigma sensitivity.
        let mut c = Matrix::zeros(z, z);
        let mut g_sigma = T::zero();
        for i in 0..z {
            for j in 0..z {
                if i == j {
                    continue;
                }
                if self.w[(i, j)] == T::zero() {
                    continue;
                }
                let gw = grad[(i, j)] * self.w[(i, j)];
                c[(i, j)] = -gw / (T::lit(2.0) * s2);
                g_sigma += gw * d2[(i, j)] / (s2 * sigma);
            }
        }
        let (_, mean) = pair_std(&d2);
        let pairs = T::from_count(z * (z - 1) / 2);
        for i in 0..z {
            for j in i + 1..z {
                let d = d2[(i, j)].sqrt();
                if d > T::zero() {
                    let gd = g_sigma * (d - mean) / (pairs * sigma);
                    c[(i, j)] += gd / (T::lit(2.0) * d);
                }
            }
        }
        // gx_i = 2·Σ_j (c_ij + c_ji)(x_i − x_j)
        let sym = Matrix::from_fn(z, z, |i, j| c[(i, j)] + c[(j, i)]);
        let mut gx = sym.matmul(x).scale(-T::lit(2.0));
        for i in 0..z {
            let row_sum: T = sym.row(i).iter().copied().fold(T::zero(), |a, b| a + b);
            let xi = x.row(i);
            for (g, &v) in gx.row_mut(i).iter_mut().zip(xi) {
                *g += T::lit(2.0) * row_sum * v;
            }
        }
        vec![Some(gx)]
    }
}

/// Records the affinity on the graph; the sparsification mask, if any, is
/// held fixed.
pub fn affinity_node<T: Scalar>(g: &mut Graph<T>, x: Var, sparsify_k: Option<usize>) -> Result<(Var, T)> {
    let a = affinity(g.value(x), sparsify_k)?;
    let sigma = a.sigma;
    let w = a.w.clone();
    Ok((g.custom(vec![x], a.w, Box::new(AffinityOp { w, sigma })), sigma))
}

/// Symmetric normalized operator `S` and the degree vector.
fn normalized<T: Scalar>(w: &Matrix<T>) -> Result<(Matrix<f64>, Vec<f64>)> {
    let z = w.rows();
    let w: Matrix<f64> = w.cast();
    let mut b = Matrix::zeros(z, z);
    for i in 0..z {
        for j in 0..z {
            b[(i, j)] = w[(i, j)] + w[(j, i)];
        }
    }
    let degree: Vec<f64> = (0..z).map(|i| b.row(i).iter().sum()).collect();
    if let Some(i) = degree.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::DegenerateGraph(format!("node {i} has zero degree")));
    }
    let r: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    for i in 0..z {
        for j in 0..z {
            b[(i, j)] *= r[i] * r[j];
        }
    }
    Ok((b, degree))
}

/// Factorized system `I − γS` plus the forward products.
struct Solved {
    lu: Lu<f64>,
    s: Matrix<f64>,
    degree: Vec<f64>,
    f: Matrix<f64>,
}

fn solve_system<T: Scalar>(w: &Matrix<T>, reference: &Matrix<T>, gamma: f64) -> Result<Solved> {
    let z = w.rows();
    if w.cols() != z || reference.rows() != z {
        return Err(Error::Shape(format!(
            "affinity is {}x{}, reference has {} rows",
            z,
            w.cols(),
            reference.rows()
        )));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidInput(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    let (s, degree) = normalized(w)?;
    let mut a = s.scale(-gamma);
    for i in 0..z {
        a[(i, i)] += 1.0;
    }
    let lu = Lu::factor(&a)?;
    let condition = norm1(&a) * lu.inverse_norm1_estimate();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Solver(format!(
            "system is ill-conditioned: condition estimate {condition:.3e} exceeds {MAX_CONDITION:.0e} (Z={z}, gamma={gamma})"
        )));
    }
    let l: Matrix<f64> = reference.cast();
    let f = lu.solve(&l);
    let residual = a.matmul(&f).max_abs_diff(&l);
    if !(residual < MAX_RESIDUAL) {
        return Err(Error::Solver(format!(
            "residual {residual:.3e} exceeds {MAX_RESIDUAL:.0e} (Z={z}, condition estimate {condition:.3e})"
        )));
    }
    Ok(Solved { lu, s, degree, f })
}

/// Everything describing one propagation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationGraph<T> {
    /// `Z × D`: prototypes first, then query points.
    pub node_features: Matrix<T>,
    pub w: Matrix<T>,
    pub degree: Vec<T>,
    /// `Z × (N+1)`: one-hot rows for prototypes, zero rows for queries.
    pub reference: Matrix<T>,
    pub gamma: T,
    pub sigma: T,
    pub prototype_nodes: usize,
}

impl<T: Scalar> PropagationGraph<T> {
    pub fn node_count(&self) -> usize {
        self.w.rows()
    }

    pub fn class_count(&self) -> usize {
        self.reference.cols()
    }

    /// Writes `<Z> <N+1>` followed by one `i j w` line per nonzero entry.
    pub fn dump(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let io = |e| Error::io(path, e);
        writeln!(out, "{} {}", self.node_count(), self.class_count()).map_err(io)?;
        for i in 0..self.node_count() {
            for (j, &v) in self.w.row(i).iter().enumerate() {
                if v != T::zero() {
                    writeln!(out, "{i} {j} {v}").map_err(io)?;
                }
            }
        }
        fs::write(path, out).map_err(io)
    }
}

/// One-hot reference rows for `classes · count` class-major prototypes
/// followed by `queries` zero rows.
pub fn reference_matrix<T: Scalar>(classes: usize, count: usize, queries: usize) -> Matrix<T> {
    let mut l = Matrix::zeros(classes * count + queries, classes);
    for n in 0..classes {
        for p in 0..count {
            l[(n * count + p, n)] = T::one();
        }
    }
    l
}

pub fn build_graph<T: Scalar>(
    prototypes: &PrototypeSet<T>,
    query: &Matrix<T>,
    gamma: T,
    sparsify_k: Option<usize>,
) -> Result<PropagationGraph<T>> {
    if query.cols() != prototypes.prototypes.cols() {
        return Err(Error::Shape(format!(
            "query width {} differs from prototype width {}",
            query.cols(),
            prototypes.prototypes.cols()
        )));
    }
    let nodes = Matrix::vcat(&[&prototypes.prototypes, query]);
    let a = affinity(&nodes, sparsify_k)?;
    let (_, degree) = normalized(&a.w)?;
    Ok(PropagationGraph {
        reference: reference_matrix(prototypes.class_count(), prototypes.count, query.rows()),
        node_features: nodes,
        degree: degree.into_iter().map(T::lit).collect(),
        w: a.w,
        gamma,
        sigma: a.sigma,
        prototype_nodes: prototypes.prototypes.rows(),
    })
}

/// Solves `(I − γS)F = L`.
pub fn propagate<T: Scalar>(graph: &PropagationGraph<T>) -> Result<Matrix<T>> {
    propagate_affinity(&graph.w, &graph.reference, graph.gamma.as_f64())
}

pub fn propagate_affinity<T: Scalar>(w: &Matrix<T>, reference: &Matrix<T>, gamma: f64) -> Result<Matrix<T>> {
    Ok(solve_system(w, reference, gamma)?.f.cast())
}

struct PropagateOp {
    solved: Solved,
    gamma: f64,
}

impl<T: Scalar> CustomOp<T> for PropagateOp {
    fn name(&self) -> &'static str {
        "label_propagation"
    }

    fn backward(&self, _inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let Solved { lu, s, degree, f } = &self.solved;
        let z = s.rows();
        let y = lu.solve_transpose(&grad.cast());
        let gs = y.matmul_t(f).scale(self.gamma);
        let mut gd = vec![0.0; z];
        for i in 0..z {
            let mut acc = 0.0;
            for j in 0..z {
                acc += gs[(i, j)] * s[(i, j)] + gs[(j, i)] * s[(j, i)];
            }
            gd[i] = -acc / (2.0 * degree[i]);
        }
        let r: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let gb = Matrix::from_fn(z, z, |i, j| gs[(i, j)] * r[i] * r[j] + gd[i]);
        let gw = Matrix::from_fn(z, z, |i, j| gb[(i, j)] + gb[(j, i)]);
        vec![Some(gw.cast()), None]
    }
}

/// Records `F` on the graph as a function of the affinity `w`.
pub fn propagate_node<T: Scalar>(g: &mut Graph<T>, w: Var, reference: Var, gamma: f64) -> Result<Var> {
    let solved = solve_system(g.value(w), g.value(reference), gamma)?;
    let value = solved.f.cast();
    Ok(g.custom(vec![w, reference], value, Box::new(PropagateOp { solved, gamma })))
}

/// Row-wise softmax.
pub fn softmax_map<T: Scalar>(f: &Matrix<T>) -> Matrix<T> {
    let mut h = f.clone();
    for r in 0..h.rows() {
        let row = h.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    h
}

/// `1` when both labels agree, else `0`.
pub fn delta(a: usize, b: usize) -> f64 {
    if a == b {
        1.0
    } else {
        0.0
    }
}

fn check_labels(h_rows: usize, classes: usize, labels: &[Vec<usize>]) -> Result<()> {
    let total: usize = labels.iter().map(Vec::len).sum();
    if total != h_rows {
        return Err(Error::Shape(format!("{total} labels for {h_rows} prediction rows")));
    }
    if labels.iter().any(Vec::is_empty) {
        return Err(Error::InvalidInput("empty query cloud".into()));
    }
    if let Some(&bad) = labels.iter().flatten().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Cross-entropy over query rows of `H`, averaged per cloud and then over clouds.
/// `labels[q]` holds the labels of query cloud `q`; rows are in the same order.
pub fn ce_loss<T: Scalar>(h: &Matrix<T>, labels: &[Vec<usize>]) -> Result<T> {
    check_labels(h.rows(), h.cols(), labels)?;
    let floor = T::lit(PROB_FLOOR);
    let mut clamped = 0usize;
    let mut total = T::zero();
    let mut row = 0;
    for cloud in labels {
        let mut sum = T::zero();
        for &y in cloud {
            let p = h[(row, y)];
            if p < floor {
                clamped += 1;
            }
            sum -= p.max(floor).ln();
            row += 1;
        }
        total += sum / T::from_count(cloud.len());
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities fell below {PROB_FLOOR:e} and were clamped");
    }
    Ok(total / T::from_count(labels.len()))
}

struct CrossEntropyOp<T> {
    h: Matrix<T>,
    labels: Vec<Vec<usize>>,
    offset: usize,
}

impl<T: Scalar> CustomOp<T> for CrossEntropyOp<T> {
    fn name(&self) -> &'static str {
        "propagation_cross_entropy"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let f = inputs[0];
        let mut gf = Matrix::zeros(f.rows(), f.cols());
        let q = T::from_count(self.labels.len());
        let mut row = 0;
        for cloud in &self.labels {
            let w = grad[(0, 0)] / (q * T::from_count(cloud.len()));
            for &y in cloud {
                let hr = self.h.row(row);
                let gr = gf.row_mut(self.offset + row);
                for (n, (g, &p)) in gr.iter_mut().zip(hr).enumerate() {
                    *g = w * (p - if n == y { T::one() } else { T::zero() });
                }
                row += 1;
            }
        }
        vec![Some(gf)]
    }
}

/// Records the query cross-entropy of `softmax(F)` on the graph. Query rows
/// start at `offset`.
pub fn ce_node<T: Scalar>(g: &mut Graph<T>, f: Var, offset: usize, labels: &[Vec<usize>]) -> Result<Var> {
    let fv = g.value(f);
    let rows: Vec<usize> = (offset..fv.rows()).collect();
    let h = softmax_map(&fv.select_rows(&rows));
    let loss = ce_loss(&h, labels)?;
    Ok(g.custom(
        vec![f],
        Matrix::filled(1, 1, loss),
        Box::new(CrossEntropyOp {
            h,
            labels: labels.to_vec(),
            offset,
        }),
    ))
}

/// Arg-max class per row, ties to the lower class id.
pub fn predict<T: Scalar>(h: &Matrix<T>) -> Vec<usize> {
    (0..h.rows())
        .map(|r| {
            let row = h.row(r);
            let mut best = 0;
            for (n, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = n;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_nodes_have_unit_affinity() {
        let x = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0, 4.0]]);
        let a = affinity(&x, None).unwrap();
        assert_eq!(a.w[(0, 1)], 1.0);
        assert_eq!(a.w[(2, 2)], 1.0);
    }

    #[test]
    fn coincident_nodes_are_degenerate() {
        let x = Matrix::<f64>::filled(4, 3, 0.5);
        assert!(matches!(affinity(&x, None), Err(Error::DegenerateGraph(_))));
    }

    #[test]
    fn zero_gamma_returns_reference() {
        let x = Matrix::from_fn(7, 2, |r, c| (r * r + c) as f64 * 0.3);
        let a = affinity(&x, None).unwrap();
        let l = reference_matrix::<f64>(2, 2, 3);
        assert_eq!(propagate_affinity(&a.w, &l, 0.0).unwrap(), l);
    }

    #[test]
    fn graph_size_formula() {
        let set = PrototypeSet {
            prototypes: Matrix::from_fn(9, 4, |r, c| (r + 2 * c) as f64),
            groups: vec![vec![vec![0]; 3]; 3],
            count: 3,
        };
        let q = Matrix::from_fn(10, 4, |r, c| (r * c) as f64 * 0.1);
        let graph = build_graph(&set, &q, 0.9, None).unwrap();
        assert_eq!(graph.node_count(), 19);
        assert!(graph.degree.iter().all(|&d| d > 0.0));
    }

    #[test]
    fn softmax_and_prediction_rules() {
        let f = Matrix::from_rows(&[vec![0.0, 0.0], vec![800.0, 0.0], vec![1.0, 2.0]]);
        let h = softmax_map(&f);
        assert_eq!(h.row(0), &[0.5, 0.5]);
        assert_eq!(h[(1, 0)], 1.0);
        assert_eq!(predict(&h), vec![0, 0, 1]);
        assert_eq!(delta(3, 3), 1.0);
        assert_eq!(delta(2, 3), 0.0);
    }

    #[test]
    fn uniform_prediction_costs_log_classes() {
        let h = Matrix::<f64>::filled(4, 3, 1.0 / 3.0);
        let l = ce_loss(&h, &[vec![0, 1], vec![2, 2]]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sparsified_rows_keep_diagonal() {
        let x = Matrix::from_fn(6, 2, |r, c| (r as f64).powi(2) + c as f64);
        let a = affinity(&x, Some(1)).unwrap();
        for i in 0..6 {
            assert_eq!(a.w[(i, i)], 1.0);
            assert_eq!(a.w.row(i).iter().filter(|&&v| v > 0.0).count(), 2);
        }
    }
}
