//! Class centers, the center loss and multi-prototype generation.
//!
//! For support features `x` with class `n`, the center loss is
//! `½ Σ ‖x − C_n‖² / (Σ_{j≠n} ‖x − C_j‖² + η)` where `C_j` is the mean
//! feature of class `j` in the same batch.

use crate::autodiff::{CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::fps_rows;
use crate::scalar::Scalar;
use crate::tensor::{sq_dist, Matrix};

/// Default `η` of the center loss.
pub const CENTER_ETA: f64 = 1.0;

/// Per-class mean features. Absent classes keep a zero row and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters<T> {
    pub centers: Matrix<T>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> ClassCenters<T> {
    pub fn compute(features: &Matrix<T>, labels: &[usize], classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Shape(format!("{} labels for {} feature rows", labels.len(), features.rows())));
        }
        let mut centers = Matrix::zeros(classes, features.cols());
        let mut counts = vec![0usize; classes];
        for (i, &n) in labels.iter().enumerate() {
            if n >= classes {
                return Err(Error::InvalidInput(format!("label {n} outside 0..{classes}")));
            }
            counts[n] += 1;
            for (c, &x) in centers.row_mut(n).iter_mut().zip(features.row(i)) {
                *c += x;
            }
        }
        for (n, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = T::one() / T::from_count(count);
                for c in centers.row_mut(n) {
                    *c *= inv;
                }
            }
        }
        Ok(Self { centers, counts })
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.counts.get(class).is_some_and(|&c| c > 0)
    }

    pub fn require_all(&self) -> Result<()> {
        match self.counts.iter().position(|&c| c == 0) {
            Some(class) => Err(Error::EmptyClass { class }),
            None => Ok(()),
        }
    }
}

struct CenterTerms<T> {
    value: T,
    /// Gradient with respect to the features, centers held fixed.
    grad_x: Matrix<T>,
    /// Gradient with respect to the centers.
    grad_c: Matrix<T>,
}

fn center_terms<T: Scalar>(x: &Matrix<T>, labels: &[usize], centers: &ClassCenters<T>, eta: T) -> CenterTerms<T> {
    let classes = centers.counts.len();
    let c = &centers.centers;
    let mut value = T::zero();
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    let mut grad_c = Matrix::zeros(classes, x.cols());
    let half = T::lit(0.5);
    let mut dist = vec![T::zero(); classes];
    for (i, &n) in labels.iter().enumerate() {
        let xi = x.row(i);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = if centers.is_present(j) { sq_dist(xi, c.row(j)) } else { T::zero() };
        }
        let a = dist[n];
        let b = (0..classes).filter(|&j| j != n).map(|j| dist[j]).sum::<T>() + eta;
        value += half * a / b;
        let inv_b = T::one() / b;
        let ab2 = a / (b * b);
        for j in (0..classes).filter(|&j| centers.is_present(j)) {
            let w = if j == n { inv_b } else { -ab2 };
            if w == T::zero() {
                continue;
            }
            let cj = c.row(j).to_vec();
            let gx = grad_x.row_mut(i);
            for ((g, &xv), &cv) in gx.iter_mut().zip(xi).zip(&cj) {
                *g += w * (xv - cv);
            }
            for ((g, &xv), &cv) in grad_c.row_mut(j).iter_mut().zip(xi).zip(&cj) {
                *g -= w * (xv - cv);
            }
        }
    }
    CenterTerms { value, grad_x, grad_c }
}

fn check_inputs<T: Scalar>(x: &Matrix<T>, labels: &[usize], classes: usize, eta: T) -> Result<ClassCenters<T>> {
    if !(eta > T::zero()) {
        return Err(Error::InvalidInput("center loss needs eta > 0".into()));
    }
    let centers = ClassCenters::compute(x, labels, classes)?;
    centers.require_all()?;
    Ok(centers)
}

/// Value of the center loss with centers taken from the same batch.
/// Every class in `0..classes` must have at least one point.
pub fn center_loss<T: Scalar>(x: &Matrix<T>, labels: &[usize], classes: usize, eta: T) -> Result<T> {
    let centers = check_inputs(x, labels, classes, eta)?;
    Ok(center_terms(x, labels, &centers, eta).value)
}

/// Center loss against externally supplied, fixed centers.
pub fn center_loss_with_centers<T: Scalar>(x: &Matrix<T>, labels: &[usize], centers: &ClassCenters<T>, eta: T) -> T {
    center_terms(x, labels, centers, eta).value
}

struct CenterLossOp<T> {
    labels: Vec<usize>,
    centers: ClassCenters<T>,
    eta: T,
    detach: bool,
}

impl<T: Scalar> CustomOp<T> for CenterLossOp<T> {
    fn name(&self) -> &'static str {
        "center_loss"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let x = inputs[0];
        let terms = center_terms(x, &self.labels, &self.centers, self.eta);
        let mut gx = terms.grad_x;
        if !self.detach {
            for (i, &n) in self.labels.iter().enumerate() {
                let inv = T::one() / T::from_count(self.centers.counts[n]);
                for (g, &gc) in gx.row_mut(i).iter_mut().zip(terms.grad_c.row(n)) {
                    *g += gc * inv;
                }
            }
        }
        vec![Some(gx.scale(grad[(0, 0)]))]
    }
}

/// Records the center loss on the graph. With `detach` the centers are
/// treated as constants; otherwise gradients also flow through the means.
pub fn center_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    labels: &[usize],
    classes: usize,
    eta: T,
    detach: bool,
) -> Result<Var> {
    let centers = check_inputs(g.value(x), labels, classes, eta)?;
    let value = center_terms(g.value(x), labels, &centers, eta).value;
    Ok(g.custom(
        vec![x],
        Matrix::filled(1, 1, value),
        Box::new(CenterLossOp {
            labels: labels.to_vec(),
            centers,
            eta,
            detach,
        }),
    ))
}

/// Prototypes grouped by class; `groups[n][p]` lists the support rows averaged
/// into prototype `p` of class `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet<T> {
    /// `(N+1)·count × D`, class-major.
    pub prototypes: Matrix<T>,
    pub groups: Vec<Vec<Vec<usize>>>,
    /// Prototypes per class.
    pub count: usize,
}

impl<T: Scalar> PrototypeSet<T> {
    pub fn class_count(&self) -> usize {
        self.groups.len()
    }

    pub fn class_prototypes(&self, class: usize) -> Matrix<T> {
        let rows: Vec<usize> = (class * self.count..(class + 1) * self.count).collect();
        self.prototypes.select_rows(&rows)
    }

    /// Row groups in class-major order, matching `prototypes`.
    pub fn flat_groups(&self) -> Vec<Vec<usize>> {
        self.groups.iter().flatten().cloned().collect()
    }
}

/// Per class: feature-space farthest point sampling picks the seeds (starting
/// from the lowest-indexed point of the class), every class point joins its
/// nearest seed, and each prototype is the mean of its group.
///
/// The count is clamped to the smallest class size so every class has the same
/// number of prototypes.
pub fn generate_prototypes<T: Scalar>(
    features: &Matrix<T>,
    labels: &[usize],
    classes: usize,
    proto_count: usize,
) -> Result<PrototypeSet<T>> {
    if proto_count == 0 {
        return Err(Error::InvalidInput("proto_count must be positive".into()));
    }
    let centers = ClassCenters::compute(features, labels, classes)?;
    centers.require_all()?;
    let smallest = *centers.counts.iter().min().expect("at least one class");
    let count = proto_count.min(smallest);
    if count < proto_count {
        log::warn!("proto_count {proto_count} clamped to {count}, the smallest class size");
    }
    let mut groups = Vec::with_capacity(classes);
    for n in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == n).collect();
        let sub = features.select_rows(&members);
        let seeds = fps_rows(&sub, count, 0)?;
        let mut seed_of = vec![usize::MAX; members.len()];
        for (s, &local) in seeds.as_slice().iter().enumerate() {
            seed_of[local] = s;
        }
        let mut class_groups = vec![Vec::new(); count];
        for (local, &global) in members.iter().enumerate() {
            let s = if seed_of[local] != usize::MAX {
                seed_of[local]
            } else {
                let row = sub.row(local);
                let mut best = (T::infinity(), 0);
                for (s, &seed) in seeds.as_slice().iter().enumerate() {
                    let d = sq_dist(row, sub.row(seed));
                    if d < best.0 {
                        best = (d, s);
                    }
                }
                best.1
            };
            class_groups[s].push(global);
        }
        groups.push(class_groups);
    }
    let flat: Vec<&Vec<usize>> = groups.iter().flatten().collect();
    let prototypes = Matrix::from_fn(flat.len(), features.cols(), |p, c| {
        let g = flat[p];
        g.iter().map(|&i| features[(i, c)]).sum::<T>() / T::from_count(g.len())
    });
    Ok(PrototypeSet {
        prototypes,
        groups,
        count,
    })
}

/// Records the prototype means on the graph so gradients reach the features.
pub fn prototype_node<T: Scalar>(g: &mut Graph<T>, features: Var, set: &PrototypeSet<T>) -> Var {
    g.group_mean(features, set.flat_groups())
}
