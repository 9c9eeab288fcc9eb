//! Exact k-nearest-neighbour and farthest-point-sampling kernels.
//!
//! Both work on squared Euclidean distances and break ties by the lower
//! point index, so results are fully deterministic.

use std::cmp::Ordering;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sq_dist, Matrix};

/// `M × k` neighbour table; row `i` is sorted by distance to point `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourIndex {
    k: usize,
    indices: Vec<usize>,
}

impl NeighbourIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Row-major flat view.
    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Indices chosen by farthest point sampling, in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeypointIndex(pub Vec<usize>);

impl KeypointIndex {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

#[inline]
fn by_dist_then_index<T: Scalar>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// k nearest neighbours of every point over xyz, excluding the point itself.
pub fn knn<T: Scalar>(cloud: &PointCloud<T>, k: usize) -> Result<NeighbourIndex> {
    knn_rows(&cloud.xyz_matrix(), k)
}

/// k nearest neighbours among the rows of an arbitrary feature matrix.
pub fn knn_rows<T: Scalar>(points: &Matrix<T>, k: usize) -> Result<NeighbourIndex> {
    let m = points.rows();
    if k == 0 || k + 1 > m {
        return Err(Error::InvalidInput(format!("knn needs 1 <= k <= M-1, got k={k} with M={m}")));
    }
    let mut indices = Vec::with_capacity(m * k);
    let mut cand: Vec<(T, usize)> = Vec::with_capacity(m - 1);
    for i in 0..m {
        cand.clear();
        let pi = points.row(i);
        for j in 0..m {
            if j != i {
                cand.push((sq_dist(pi, points.row(j)), j));
            }
        }
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist_then_index);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist_then_index);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighbourIndex { k, indices })
}

/// Greedy max-min sampling over xyz starting from `start`.
pub fn fps<T: Scalar>(cloud: &PointCloud<T>, count: usize, start: usize) -> Result<KeypointIndex> {
    fps_rows(&cloud.xyz_matrix(), count, start)
}

/// Greedy max-min sampling over the rows of a feature matrix.
pub fn fps_rows<T: Scalar>(points: &Matrix<T>, count: usize, start: usize) -> Result<KeypointIndex> {
    let m = points.rows();
    if count == 0 || count > m {
        return Err(Error::InvalidInput(format!("fps needs 1 <= count <= M, got {count} with M={m}")));
    }
    if start >= m {
        return Err(Error::InvalidInput(format!("fps start {start} out of range for M={m}")));
    }
    let mut selected = vec![false; m];
    let mut min_d = vec![T::infinity(); m];
    let mut out = Vec::with_capacity(count);
    let mut current = start;
    loop {
        selected[current] = true;
        out.push(current);
        if out.len() == count {
            break;
        }
        let pc = points.row(current);
        let mut best: Option<(T, usize)> = None;
        for j in 0..m {
            if selected[j] {
                continue;
            }
            let d = sq_dist(pc, points.row(j));
            if d < min_d[j] {
                min_d[j] = d;
            }
            match best {
                Some((bd, _)) if min_d[j] <= bd => {}
                _ => best = Some((min_d[j], j)),
            }
        }
        current = best.expect("unselected points remain").1;
    }
    Ok(KeypointIndex(out))
}

/// Number of keypoints for a sampling ratio: `max(1, round(ratio · M))`.
pub fn fps_count(m: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("fps ratio must lie in (0, 1], got {ratio}")));
    }
    Ok(((ratio * m as f64).round() as usize).clamp(1, m))
}

pub fn fps_ratio<T: Scalar>(cloud: &PointCloud<T>, ratio: f64, start: usize) -> Result<KeypointIndex> {
    let count = fps_count(cloud.len(), ratio)?;
    fps(cloud, count, start)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> PointCloud<f64> {
        let pts: Vec<[f64; 3]> = xs.iter().map(|&x| [x, 0.0, 0.0]).collect();
        PointCloud::from_xyz(&pts).unwrap()
    }

    #[test]
    fn colinear_knn() {
        let nn = knn(&line(&[0.0, 1.0, 2.0, 10.0]), 1).unwrap();
        assert_eq!(nn.as_slice(), &[1, 0, 1, 2]);
    }

    #[test]
    fn full_knn_rows_are_permutations() {
        let c = line(&[0.0, 3.0, 1.0, 7.0, 2.0]);
        let nn = knn(&c, 4).unwrap();
        for i in 0..5 {
            let mut r = nn.row(i).to_vec();
            r.sort_unstable();
            let expect: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(r, expect);
        }
    }

    #[test]
    fn knn_rejects_large_k() {
        assert!(knn(&line(&[0.0, 1.0, 2.0]), 3).is_err());
        assert!(knn(&line(&[0.0, 1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn fps_picks_extremes() {
        let c = line(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(fps(&c, 2, 0).unwrap().as_slice(), &[0, 3]);
        let mut all = fps(&c, 4, 1).unwrap().0;
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(fps(&c, 5, 0).is_err());
        assert!(fps(&c, 2, 4).is_err());
    }

    #[test]
    fn fps_ratio_rounding() {
        assert_eq!(fps_count(10, 0.4).unwrap(), 4);
        assert_eq!(fps_count(1024, 0.4).unwrap(), 410);
        assert_eq!(fps_count(7, 1.0).unwrap(), 7);
        assert_eq!(fps_count(3, 0.01).unwrap(), 1);
        assert!(fps_count(10, 0.0).is_err());
        assert!(fps_count(10, 1.5).is_err());
        let c = line(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(fps_ratio(&c, 0.4, 0).unwrap().len(), 4);
    }

    #[test]
    fn fps_ties_break_to_lower_index() {
        // both ends are equally far from the middle start
        let c = line(&[-1.0, 0.0, 1.0]);
        assert_eq!(fps(&c, 2, 1).unwrap().as_slice(), &[1, 0]);
    }
}
