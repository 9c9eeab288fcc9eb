//! Trainable point-cloud augmentor.
//!
//! Points are embedded per point into `C_a` channels. A max-pooled shape
//! code plus Gaussian noise drives a head producing a `3 × 3` warp `T_s`; the
//! per-point embedding, the tiled shape code and the noise drive a second
//! head producing per-point displacements `N_p`. The augmented view is
//! `P·T_s + N_p` followed by a random global translation and clipped jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_matrix, Bound, Linear, LinearVars, Module, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentorConfig {
    /// Embedding width `C_a`.
    pub embed_dim: usize,
    pub noise_dim: usize,
    /// Per-axis bound of the random translation.
    pub translate_max: f64,
    /// Jitter standard deviation; samples are clipped at three sigma.
    pub jitter_sigma: f64,
}

impl Default for AugmentorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            noise_dim: 16,
            translate_max: 0.1,
            jitter_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentor<T> {
    pub config: AugmentorConfig,
    pub embed: Linear<T>,
    pub shape_head: Linear<T>,
    pub point_head: Linear<T>,
}

pub struct AugmentorVars {
    embed: LinearVars,
    shape_head: LinearVars,
    point_head: LinearVars,
}

impl Bound for AugmentorVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        self.embed.push_vars(&mut v);
        self.shape_head.push_vars(&mut v);
        self.point_head.push_vars(&mut v);
        v
    }
}

/// Original cloud, learned warp before the random layers, and final view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair<T> {
    pub original: PointCloud<T>,
    pub warped: PointCloud<T>,
    pub augmented: PointCloud<T>,
}

/// Random draws for one augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentNoise<T> {
    pub latent: Vec<T>,
    pub translation: [T; 3],
    /// `M × 3` clipped jitter.
    pub jitter: Matrix<T>,
}

/// Graph nodes of one augmentation.
pub struct AugmentForward {
    pub transform: Var,
    pub displacement: Var,
    /// `P·T_s + N_p` (xyz only).
    pub warped: Var,
    /// Final `M × f` view.
    pub augmented: Var,
    /// `mean_i ‖warped_i − P_i‖²`.
    pub penalty: Var,
}

const IDENTITY_FLAT: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

impl<T: Scalar> Augmentor<T> {
    /// Glorot embedding; both heads start at zero weights with the warp bias
    /// set to the flattened identity, so the initial augmentor is the identity.
    pub fn new<R: Rng + ?Sized>(config: AugmentorConfig, rng: &mut R) -> Result<Self> {
        if config.embed_dim == 0 || config.noise_dim == 0 {
            return Err(Error::Config("augmentor widths must be positive".into()));
        }
        if !(config.translate_max >= 0.0) || !(config.jitter_sigma >= 0.0) {
            return Err(Error::Config("augmentor random-layer magnitudes must be non-negative".into()));
        }
        let ca = config.embed_dim;
        let nd = config.noise_dim;
        let mut shape_head = Linear::zeros(ca + nd, 9);
        shape_head.bias = Matrix::from_vec(1, 9, IDENTITY_FLAT.iter().map(|&v| T::lit(v)).collect());
        Ok(Self {
            embed: Linear::glorot(3, ca, rng),
            shape_head,
            point_head: Linear::zeros(2 * ca + nd, 3),
            config,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>) -> AugmentorVars {
        AugmentorVars {
            embed: self.embed.bind(g),
            shape_head: self.shape_head.bind(g),
            point_head: self.point_head.bind(g),
        }
    }

    /// Draws the latent noise, translation and jitter for an `m`-point cloud.
    pub fn draw_noise(&self, m: usize, seed: u64) -> AugmentNoise<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = (0..self.config.noise_dim)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect();
        let t = self.config.translate_max;
        let translation = std::array::from_fn(|_| if t > 0.0 { T::lit(rng.random_range(-t..=t)) } else { T::zero() });
        let sigma = self.config.jitter_sigma;
        let jitter = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            Matrix::from_fn(m, 3, |_, _| T::lit(normal.sample(&mut rng).clamp(-3.0 * sigma, 3.0 * sigma)))
        } else {
            Matrix::zeros(m, 3)
        };
        AugmentNoise {
            latent,
            translation,
            jitter,
        }
    }

    /// `P̃ = lrelu(P·W + b)` over the xyz columns.
    pub fn embed_points(&self, xyz: &Matrix<T>) -> Result<Matrix<T>> {
        if xyz.cols() < 3 {
            return Err(Error::Shape(format!("augmentor needs xyz, got {} channels", xyz.cols())));
        }
        Ok(leaky_relu_matrix(&self.embed.apply(&xyz.col_range(0, 3))))
    }

    /// Max-pooled shape code `F_s` (`1 × C_a`).
    pub fn shape_code(embedded: &Matrix<T>) -> Matrix<T> {
        let mut out = Matrix::filled(1, embedded.cols(), T::neg_infinity());
        for r in 0..embedded.rows() {
            for (o, &v) in out.row_mut(0).iter_mut().zip(embedded.row(r)) {
                if v > *o {
                    *o = v;
                }
            }
        }
        out
    }

    /// `T_s` from the embedding and a latent noise draw.
    pub fn shape_transform(&self, embedded: &Matrix<T>, latent: &[T]) -> Result<Matrix<T>> {
        self.check_embedding(embedded, latent)?;
        let code = Self::shape_code(embedded);
        let noise = Matrix::from_vec(1, latent.len(), latent.to_vec());
        let input = Matrix::hcat(&[&code, &noise]);
        Ok(self.shape_head.apply(&input).reshape(3, 3))
    }

    /// `N_p` from the embedding, the shape code and the latent noise.
    pub fn point_displacement(&self, embedded: &Matrix<T>, code: &Matrix<T>, latent: &[T]) -> Result<Matrix<T>> {
        self.check_embedding(embedded, latent)?;
        if code.shape() != (1, self.config.embed_dim) {
            return Err(Error::Shape(format!("shape code must be 1x{}", self.config.embed_dim)));
        }
        let m = embedded.rows();
        let tile = |row: &Matrix<T>| Matrix::from_fn(m, row.cols(), |_, c| row[(0, c)]);
        let noise = Matrix::from_vec(1, latent.len(), latent.to_vec());
        let input = Matrix::hcat(&[embedded, &tile(code), &tile(&noise)]);
        Ok(self.point_head.apply(&input))
    }

    fn check_embedding(&self, embedded: &Matrix<T>, latent: &[T]) -> Result<()> {
        if embedded.rows() == 0 || embedded.cols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embedding must be non-empty with width {}",
                self.config.embed_dim
            )));
        }
        if latent.len() != self.config.noise_dim {
            return Err(Error::Shape(format!("latent noise must have {} entries", self.config.noise_dim)));
        }
        Ok(())
    }

    /// Records the augmentation of `cloud` on `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        vars: &AugmentorVars,
        cloud: &PointCloud<T>,
        noise: &AugmentNoise<T>,
    ) -> Result<AugmentForward> {
        let m = cloud.len();
        if noise.latent.len() != self.config.noise_dim || noise.jitter.shape() != (m, 3) {
            return Err(Error::Shape("augmentation noise does not match the cloud".into()));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let xyz = g.constant(cloud.xyz_matrix());
        let emb = vars.embed.forward(g, xyz);
        let emb = g.leaky_relu(emb, slope);
        let code = g.col_max(emb);
        let latent = g.constant(Matrix::from_vec(1, noise.latent.len(), noise.latent.clone()));
        let shape_in = g.concat_cols(&[code, latent]);
        let flat = vars.shape_head.forward(g, shape_in);
        let transform = g.reshape(flat, 3, 3);

        let code_tiled = g.tile_rows(code, m);
        let latent_tiled = g.tile_rows(latent, m);
        let point_in = g.concat_cols(&[emb, code_tiled, latent_tiled]);
        let displacement = vars.point_head.forward(g, point_in);

        let rotated = g.matmul(xyz, transform);
        let warped = g.add(rotated, displacement);
        let delta = g.sub(warped, xyz);
        let penalty = g.mean_row_sq_norm(delta);

        let mut offsets = noise.jitter.clone();
        for r in 0..m {
            for (k, v) in offsets.row_mut(r).iter_mut().enumerate() {
                *v += noise.translation[k];
            }
        }
        let offsets = g.constant(offsets);
        let moved = g.add(warped, offsets);
        let augmented = if cloud.channels() > 3 {
            let extra = g.constant(cloud.points().col_range(3, cloud.channels()));
            g.concat_cols(&[moved, extra])
        } else {
            moved
        };
        Ok(AugmentForward {
            transform,
            displacement,
            warped,
            augmented,
            penalty,
        })
    }

    /// Augments a cloud with randomness derived from `seed`.
    pub fn augment(&self, cloud: &PointCloud<T>, seed: u64) -> Result<AugmentedPair<T>> {
        let noise = self.draw_noise(cloud.len(), seed);
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let out = self.forward(&mut g, &vars, cloud, &noise)?;
        Ok(AugmentedPair {
            original: cloud.clone(),
            warped: PointCloud::new(g.value(out.warped).clone())?,
            augmented: PointCloud::new(g.value(out.augmented).clone())?,
        })
    }
}

/// Mean squared xyz displacement of the learned warp (random layers excluded).
pub fn deformation_penalty<T: Scalar>(pair: &AugmentedPair<T>) -> T {
    let m = pair.original.len();
    let mut total = T::zero();
    for i in 0..m {
        let a = pair.original.xyz(i);
        let b = pair.warped.xyz(i);
        for k in 0..3 {
            let d = b[k] - a[k];
            total += d * d;
        }
    }
    total / T::from_count(m)
}

impl<T: Scalar> Module<T> for Augmentor<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix<T>)) {
        self.embed.visit_prefixed("embed", f);
        self.shape_head.visit_prefixed("shape_head", f);
        self.point_head.visit_prefixed("point_head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        self.embed.visit_prefixed_mut("embed", f);
        self.shape_head.visit_prefixed_mut("shape_head", f);
        self.point_head.visit_prefixed_mut("point_head", f);
    }
}
