//! Independent reference implementations: direct loops over the formulas,
//! written without any of the library's numeric helpers.

#![allow(dead_code)]

use fewshot_pc::Matrix;
use rand::Rng;

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

fn dist2(a: &Matrix<f64>, i: usize, b: &Matrix<f64>, j: usize) -> f64 {
    let mut s = 0.0;
    for c in 0..a.cols() {
        let d = a[(i, c)] - b[(j, c)];
        s += d * d;
    }
    s
}

/// All-pairs sort; ties go to the lower index.
pub fn brute_knn(p: &Matrix<f64>, k: usize) -> Vec<Vec<usize>> {
    (0..p.rows())
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..p.rows()).filter(|&j| j != i).map(|j| (dist2(p, i, p, j), j)).collect();
            others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            others.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

/// Greedy max-min selection recomputing every minimum from scratch.
pub fn brute_fps(p: &Matrix<f64>, count: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < count {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for cand in 0..p.rows() {
            if chosen.contains(&cand) {
                continue;
            }
            let nearest = chosen.iter().map(|&s| dist2(p, cand, p, s)).fold(f64::INFINITY, f64::min);
            if nearest > best.0 {
                best = (nearest, cand);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

/// Mean over rows of `−log(exp(o_i·o'_i) / Σ_j exp(o_i·o'_j))`.
pub fn naive_contrastive(o: &Matrix<f64>, o2: &Matrix<f64>) -> f64 {
    let m = o.rows();
    let mut total = 0.0;
    for i in 0..m {
        let dots: Vec<f64> = (0..m)
            .map(|j| (0..o.cols()).map(|c| o[(i, c)] * o2[(j, c)]).sum())
            .collect();
        let denom: f64 = dots.iter().map(|d| d.exp()).sum();
        total -= (dots[i].exp() / denom).ln();
    }
    total / m as f64
}

/// `½ Σ_n Σ_i ‖x_i − C_n‖² / (Σ_{j≠n} ‖x_i − C_j‖² + η)` with batch means.
pub fn naive_center_loss(x: &Matrix<f64>, labels: &[usize], classes: usize, eta: f64) -> f64 {
    let d = x.cols();
    let mut centers = Matrix::zeros(classes, d);
    for n in 0..classes {
        let members: Vec<usize> = (0..x.rows()).filter(|&i| labels[i] == n).collect();
        for c in 0..d {
            centers[(n, c)] = members.iter().map(|&i| x[(i, c)]).sum::<f64>() / members.len() as f64;
        }
    }
    let mut total = 0.0;
    for n in 0..classes {
        for i in (0..x.rows()).filter(|&i| labels[i] == n) {
            let own = dist2(x, i, &centers, n);
            let other: f64 = (0..classes).filter(|&j| j != n).map(|j| dist2(x, i, &centers, j)).sum();
            total += 0.5 * own / (other + eta);
        }
    }
    total
}

/// Gaussian affinity with σ the population standard deviation of all pairwise
/// distances `i < j`.
pub fn naive_affinity(x: &Matrix<f64>) -> Matrix<f64> {
    let z = x.rows();
    let mut dists = Vec::new();
    for i in 0..z {
        for j in i + 1..z {
            dists.push(dist2(x, i, x, j).sqrt());
        }
    }
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let var = dists.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / dists.len() as f64;
    let sigma = var.sqrt();
    Matrix::from_fn(z, z, |i, j| (-dist2(x, i, x, j) / (2.0 * sigma * sigma)).exp())
}

/// Gauss-Jordan inverse with full row pivoting.
pub fn dense_inverse(a: &Matrix<f64>) -> Matrix<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| m[r][col].abs().partial_cmp(&m[s][col].abs()).unwrap()).unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in m[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                for c in 0..2 * n {
                    m[r][c] -= f * m[col][c];
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| m[i][n + j])
}

/// `F = (I − γ D^(−1/2)(W+Wᵀ)D^(−1/2))⁻¹ L` with `D_i = Σ_j (W+Wᵀ)_ij`.
pub fn naive_propagation(w: &Matrix<f64>, l: &Matrix<f64>, gamma: f64) -> Matrix<f64> {
    let z = w.rows();
    let b = Matrix::from_fn(z, z, |i, j| w[(i, j)] + w[(j, i)]);
    let deg: Vec<f64> = (0..z).map(|i| (0..z).map(|j| b[(i, j)]).sum()).collect();
    let a = Matrix::from_fn(z, z, |i, j| {
        let s = b[(i, j)] / (deg[i].sqrt() * deg[j].sqrt());
        if i == j {
            1.0 - gamma * s
        } else {
            -gamma * s
        }
    });
    let inv = dense_inverse(&a);
    Matrix::from_fn(z, l.cols(), |i, c| (0..z).map(|k| inv[(i, k)] * l[(k, c)]).sum())
}

/// Mean over clouds of the mean over points of `−log softmax(F_row)[label]`.
pub fn naive_ce(f: &Matrix<f64>, offset: usize, labels: &[Vec<usize>]) -> f64 {
    let mut row = offset;
    let mut total = 0.0;
    for cloud in labels {
        let mut cloud_sum = 0.0;
        for &y in cloud {
            let denom: f64 = (0..f.cols()).map(|c| f[(row, c)].exp()).sum();
            for n in 0..f.cols() {
                if n == y {
                    cloud_sum -= (f[(row, n)].exp() / denom).ln();
                }
            }
            row += 1;
        }
        total += cloud_sum / cloud.len() as f64;
    }
    total / labels.len() as f64
}
