//! Multi-resolution attention.
//!
//! Every point attends over a short key list: the `N_F` farthest-point
//! samples of the whole cloud followed by its own `N_K` nearest neighbours.
//! The attention output is concatenated with the input features, so the
//! result is `M × 2C`. No `M × M` score matrix is ever formed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Graph, Var};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{fps_count, fps_rows, knn_rows};
use crate::nn::{Bound, Module};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MraConfig {
    /// Nearest neighbours per point `N_K`.
    pub n_k: usize,
    /// Farthest-point sampling ratio; `N_F = max(1, round(ratio · M))`.
    pub fps_ratio: f64,
    pub heads: usize,
    /// Divide scores by `sqrt(C / heads)`.
    pub scaled_attention: bool,
}

impl Default for MraConfig {
    fn default() -> Self {
        Self {
            n_k: 32,
            fps_ratio: 0.4,
            heads: 1,
            scaled_attention: false,
        }
    }
}

/// Query/key/value maps, each `C × C` without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mra<T> {
    pub config: MraConfig,
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
}

pub struct MraVars {
    query: Var,
    key: Var,
    value: Var,
}

impl Bound for MraVars {
    fn vars(&self) -> Vec<Var> {
        vec![self.query, self.key, self.value]
    }
}

/// Key lists for every point of one cloud.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyLayout {
    /// Row-major `M × width` key indices: farthest points first, then neighbours.
    pub indices: Vec<usize>,
    pub width: usize,
    pub farthest: usize,
    pub nearest: usize,
}

impl KeyLayout {
    pub fn build<T: Scalar>(cloud: &PointCloud<T>, n_k: usize, fps_ratio: f64) -> Result<Self> {
        let m = cloud.len();
        if n_k + 1 > m && n_k > 0 {
            return Err(Error::InvalidInput(format!("n_k={n_k} needs at least {} points, cloud has {m}", n_k + 1)));
        }
        let xyz = cloud.xyz_matrix();
        let farthest = fps_count(m, fps_ratio)?;
        if farthest + n_k == 0 {
            return Err(Error::Config("attention needs at least one key".into()));
        }
        let keypoints = fps_rows(&xyz, farthest, 0)?;
        let neighbours = if n_k > 0 { Some(knn_rows(&xyz, n_k)?) } else { None };
        let width = farthest + n_k;
        let mut indices = Vec::with_capacity(m * width);
        for i in 0..m {
            indices.extend_from_slice(keypoints.as_slice());
            if let Some(nn) = &neighbours {
                indices.extend_from_slice(nn.row(i));
            }
        }
        Ok(Self {
            indices,
            width,
            farthest,
            nearest: n_k,
        })
    }

    pub fn keys(&self, i: usize) -> &[usize] {
        &self.indices[i * self.width..(i + 1) * self.width]
    }
}

/// Result of a forward pass plus the attention-size probe.
#[derive(Debug, Clone)]
pub struct MraOutput<T> {
    /// `[Q̂ | X]`, `M × 2C`.
    pub features: Matrix<T>,
    /// Keys scored per point (`N_F + N_K`).
    pub attention_width: usize,
    /// Total query-key scores computed over the cloud.
    pub scores_computed: usize,
}

struct Attention<'a, T> {
    q: &'a Matrix<T>,
    k: &'a Matrix<T>,
    v: &'a Matrix<T>,
    layout: &'a KeyLayout,
    heads: usize,
    scale: T,
}

impl<T: Scalar> Attention<'_, T> {
    /// Returns `(output, probabilities M × heads·width)`.
    fn run(&self) -> (Matrix<T>, Matrix<T>) {
        let (m, c) = self.q.shape();
        let dh = c / self.heads;
        let w = self.layout.width;
        let mut out = Matrix::zeros(m, c);
        let mut probs = Matrix::zeros(m, self.heads * w);
        let mut scores = vec![T::zero(); w];
        for i in 0..m {
            let keys = self.layout.keys(i);
            let qi = self.q.row(i);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &qi[cols.clone()];
                for (s, &j) in scores.iter_mut().zip(keys) {
                    let kj = &self.k.row(j)[cols.clone()];
                    *s = qh.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * self.scale;
                }
                let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    total += *s;
                }
                let prow = &mut probs.row_mut(i)[h * w..(h + 1) * w];
                for (p, &s) in prow.iter_mut().zip(&scores) {
                    *p = s / total;
                }
                let prow = &probs.row(i)[h * w..(h + 1) * w];
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (&p, &j) in prow.iter().zip(keys) {
                    for (o, &vv) in orow.iter_mut().zip(&self.v.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        (out, probs)
    }
}

struct AttentionOp<T> {
    layout: KeyLayout,
    heads: usize,
    scale: T,
    probs: Matrix<T>,
}

impl<T: Scalar> CustomOp<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "multi_resolution_attention"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (m, c) = q.shape();
        let dh = c / self.heads;
        let w = self.layout.width;
        let mut gq = Matrix::zeros(m, c);
        let mut gk = Matrix::zeros(m, c);
        let mut gv = Matrix::zeros(m, c);
        let mut gp = vec![T::zero(); w];
        for i in 0..m {
            let keys = self.layout.keys(i);
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let gi = &grad.row(i)[cols.clone()];
                let p = &self.probs.row(i)[h * w..(h + 1) * w];
                for ((gpj, &pj), &j) in gp.iter_mut().zip(p).zip(keys) {
                    let vj = &v.row(j)[cols.clone()];
                    *gpj = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    for (o, &x) in gv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                        *o += pj * x;
                    }
                }
                let dot: T = p.iter().zip(&gp).map(|(&a, &b)| a * b).sum();
                for ((&pj, &gpj), &j) in p.iter().zip(&gp).zip(keys) {
                    let ga = pj * (gpj - dot) * self.scale;
                    if ga == T::zero() {
                        continue;
                    }
                    let kj = k.row(j)[cols.clone()].to_vec();
                    for (o, &x) in gq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                        *o += ga * x;
                    }
                    let qi = q.row(i)[cols.clone()].to_vec();
                    for (o, &x) in gk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                        *o += ga * x;
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

impl<T: Scalar> Mra<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, config: MraConfig, rng: &mut R) -> Result<Self> {
        if channels == 0 || config.heads == 0 || channels % config.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} must divide the feature width {channels}",
                config.heads
            )));
        }
        let bound = (3.0 / channels as f64).sqrt();
        Ok(Self {
            query: Matrix::uniform(channels, channels, bound, rng),
            key: Matrix::uniform(channels, channels, bound, rng),
            value: Matrix::uniform(channels, channels, bound, rng),
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.query.rows()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> MraVars {
        MraVars {
            query: g.param(self.query.clone()),
            key: g.param(self.key.clone()),
            value: g.param(self.value.clone()),
        }
    }

    fn scale(&self) -> T {
        if self.config.scaled_attention {
            T::one() / T::from_count(self.channels() / self.config.heads).sqrt()
        } else {
            T::one()
        }
    }

    fn check(&self, x: &Matrix<T>, cloud: &PointCloud<T>) -> Result<()> {
        if x.cols() != self.channels() {
            return Err(Error::Config(format!(
                "attention expects width {}, features have {}",
                self.channels(),
                x.cols()
            )));
        }
        if x.rows() != cloud.len() {
            return Err(Error::Shape(format!("{} feature rows for {} points", x.rows(), cloud.len())));
        }
        Ok(())
    }

    pub fn layout(&self, cloud: &PointCloud<T>) -> Result<KeyLayout> {
        KeyLayout::build(cloud, self.config.n_k, self.config.fps_ratio)
    }

    /// Records `[Q̂ | X]` on the graph for features `x` of `cloud`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &MraVars, x: Var, layout: KeyLayout) -> Result<Var> {
        let (m, c) = g.value(x).shape();
        if c != self.channels() || layout.indices.len() != m * layout.width {
            return Err(Error::Shape(format!("attention inputs {m}x{c} do not match the key layout")));
        }
        let q = g.matmul(x, vars.query);
        let k = g.matmul(x, vars.key);
        let v = g.matmul(x, vars.value);
        let scale = self.scale();
        let (out, probs) = Attention {
            q: g.value(q),
            k: g.value(k),
            v: g.value(v),
            layout: &layout,
            heads: self.config.heads,
            scale,
        }
        .run();
        let attended = g.custom(
            vec![q, k, v],
            out,
            Box::new(AttentionOp {
                layout,
                heads: self.config.heads,
                scale,
                probs,
            }),
        );
        Ok(g.concat_cols(&[attended, x]))
    }

    /// `X' = [softmax(Q·Kᵀ)·V | X]` with the probe counters.
    pub fn mra_forward(&self, x: &Matrix<T>, cloud: &PointCloud<T>) -> Result<MraOutput<T>> {
        self.check(x, cloud)?;
        let layout = self.layout(cloud)?;
        let q = x.matmul(&self.query);
        let k = x.matmul(&self.key);
        let v = x.matmul(&self.value);
        let (attended, _) = Attention {
            q: &q,
            k: &k,
            v: &v,
            layout: &layout,
            heads: self.config.heads,
            scale: self.scale(),
        }
        .run();
        Ok(MraOutput {
            features: Matrix::hcat(&[&attended, x]),
            attention_width: layout.width,
            scores_computed: cloud.len() * layout.width * self.config.heads,
        })
    }

    /// Scores `A_i` and their softmax for point `i`, one row per head.
    pub fn attention_map(&self, x: &Matrix<T>, cloud: &PointCloud<T>, i: usize) -> Result<(Matrix<T>, Matrix<T>)> {
        self.check(x, cloud)?;
        if i >= cloud.len() {
            return Err(Error::InvalidInput(format!("point {i} out of range")));
        }
        let layout = self.layout(cloud)?;
        let keys = layout.keys(i);
        let heads = self.config.heads;
        let dh = self.channels() / heads;
        let qi = Matrix::from_vec(1, self.channels(), x.row(i).to_vec()).matmul(&self.query);
        let kx = x.select_rows(keys).matmul(&self.key);
        let scale = self.scale();
        let scores = Matrix::from_fn(heads, keys.len(), |h, j| {
            let cols = h * dh..(h + 1) * dh;
            qi.row(0)[cols.clone()]
                .iter()
                .zip(&kx.row(j)[cols])
                .map(|(&a, &b)| a * b)
                .sum::<T>()
                * scale
        });
        let mut soft = scores.clone();
        for h in 0..heads {
            let row = soft.row_mut(h);
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
        Ok((scores, soft))
    }
}

impl<T: Scalar> Module<T> for Mra<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix<T>)) {
        f("net_q.weight", &self.query);
        f("net_k.weight", &self.key);
        f("net_v.weight", &self.value);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        f("net_q.weight", &mut self.query);
        f("net_k.weight", &mut self.key);
        f("net_v.weight", &mut self.value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(m: usize, c: usize, seed: u64) -> (PointCloud<f64>, Matrix<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cloud = PointCloud::new(Matrix::uniform(m, 3, 1.0, &mut rng)).unwrap();
        let x = Matrix::uniform(m, c, 1.0, &mut rng);
        (cloud, x, rng)
    }

    #[test]
    fn zero_value_map_gives_zero_attention() {
        let (cloud, x, mut rng) = setup(16, 8, 0);
        let cfg = MraConfig {
            n_k: 4,
            fps_ratio: 0.5,
            ..MraConfig::default()
        };
        let mut mra = Mra::new(8, cfg, &mut rng).unwrap();
        mra.value = Matrix::zeros(8, 8);
        let out = mra.mra_forward(&x, &cloud).unwrap();
        assert_eq!(out.features.shape(), (16, 16));
        assert_eq!(out.features.col_range(0, 8).max_abs(), 0.0);
        assert_eq!(out.features.col_range(8, 16), x);
    }

    #[test]
    fn identical_keys_give_uniform_softmax() {
        let (cloud, _, mut rng) = setup(12, 4, 1);
        let x = Matrix::from_fn(12, 4, |_, c| c as f64 * 0.3 - 0.2);
        let cfg = MraConfig {
            n_k: 3,
            fps_ratio: 0.5,
            ..MraConfig::default()
        };
        let mra = Mra::new(4, cfg, &mut rng).unwrap();
        let (_, soft) = mra.attention_map(&x, &cloud, 5).unwrap();
        assert_eq!(soft.cols(), 9);
        for &p in soft.row(0) {
            assert!((p - 1.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (cloud, x, mut rng) = setup(20, 8, 2);
        let cfg = MraConfig {
            n_k: 5,
            fps_ratio: 0.3,
            heads: 2,
            ..MraConfig::default()
        };
        let mra = Mra::new(8, cfg, &mut rng).unwrap();
        for i in 0..20 {
            let (_, soft) = mra.attention_map(&x, &cloud, i).unwrap();
            for h in 0..2 {
                assert!((soft.row(h).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = MraConfig {
            heads: 3,
            ..MraConfig::default()
        };
        assert!(Mra::<f64>::new(8, cfg, &mut rng).is_err());
    }

    #[test]
    fn key_layout_puts_farthest_points_first() {
        let (cloud, _, _) = setup(10, 2, 4);
        let layout = KeyLayout::build(&cloud, 2, 0.3).unwrap();
        assert_eq!((layout.farthest, layout.nearest, layout.width), (3, 2, 5));
        let fps = fps_rows(&cloud.xyz_matrix(), 3, 0).unwrap();
        let nn = knn_rows(&cloud.xyz_matrix(), 2).unwrap();
        for i in 0..10 {
            assert_eq!(&layout.keys(i)[..3], fps.as_slice());
            assert_eq!(&layout.keys(i)[3..], nn.row(i));
        }
        assert!(KeyLayout::build(&cloud, 10, 0.3).is_err());
    }
}
