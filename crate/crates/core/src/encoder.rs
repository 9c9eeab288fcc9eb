//! Edge-convolution point encoder and the per-point classification head.
//!
//! Each layer builds edge features `[h_i, h_j - h_i]` over a fixed xyz
//! neighbour graph, applies two linear maps with leaky rectifiers and takes
//! the column-wise max over the `k` neighbours. The layer outputs are
//! concatenated and projected to `C` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::geometry::{knn, NeighbourIndex};
use crate::nn::{Bound, Linear, LinearVars, Module, LEAKY_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Channels per input point `f`.
    pub input_channels: usize,
    pub hidden: usize,
    /// Number of edge-convolution layers.
    pub layers: usize,
    /// Output width `C`.
    pub output: usize,
    /// Neighbours per point.
    pub k: usize,
    /// First layer sees only `x_j - x_i`, making features translation invariant.
    pub edge_relative_only: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            hidden: 64,
            layers: 2,
            output: 64,
            k: 16,
            edge_relative_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConv<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

/// Parameters of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub layers: Vec<EdgeConv<T>>,
    pub project: Linear<T>,
}

pub struct EncoderVars {
    layers: Vec<(LinearVars, LinearVars)>,
    project: LinearVars,
}

impl Bound for EncoderVars {
    fn vars(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for (a, b) in &self.layers {
            a.push_vars(&mut v);
            b.push_vars(&mut v);
        }
        self.project.push_vars(&mut v);
        v
    }
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.output == 0 || config.input_channels < 3 || config.k == 0 {
            return Err(Error::Config(format!("invalid encoder configuration {config:?}")));
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut width = config.input_channels;
        for l in 0..config.layers {
            let edge_in = if l == 0 && config.edge_relative_only { width } else { 2 * width };
            layers.push(EdgeConv {
                first: Linear::glorot(edge_in, config.hidden, rng),
                second: Linear::glorot(config.hidden, config.hidden, rng),
            });
            width = config.hidden;
        }
        let project = Linear::glorot(config.hidden * config.layers, config.output, rng);
        Ok(Self { config, layers, project })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output
    }

    pub fn bind(&self, g: &mut Graph<T>) -> EncoderVars {
        EncoderVars {
            layers: self.layers.iter().map(|l| (l.first.bind(g), l.second.bind(g))).collect(),
            project: self.project.bind(g),
        }
    }

    fn check_input(&self, channels: usize, points: usize) -> Result<()> {
        if channels != self.config.input_channels {
            return Err(Error::Config(format!(
                "encoder expects {} channels per point, cloud has {channels}",
                self.config.input_channels
            )));
        }
        if self.config.k + 1 > points {
            return Err(Error::InvalidInput(format!(
                "encoder k={} needs at least {} points, cloud has {points}",
                self.config.k,
                self.config.k + 1
            )));
        }
        Ok(())
    }

    /// Records the encoder on `g`. `points` is the `M × f` input node and
    /// `neighbours` the xyz neighbour table of those points.
    pub fn forward(&self, g: &mut Graph<T>, vars: &EncoderVars, points: Var, neighbours: &NeighbourIndex) -> Result<Var> {
        let (m, f) = g.value(points).shape();
        self.check_input(f, m)?;
        if neighbours.len() != m || neighbours.k() != self.config.k {
            return Err(Error::Shape(format!(
                "neighbour table is {}x{}, expected {m}x{}",
                neighbours.len(),
                neighbours.k(),
                self.config.k
            )));
        }
        let k = self.config.k;
        let centre_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = points;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (l, (first, second)) in vars.layers.iter().enumerate() {
            let centre = g.gather_rows(h, centre_idx.clone());
            let nbr = g.gather_rows(h, neighbours.as_slice().to_vec());
            let diff = g.sub(nbr, centre);
            let edge = if l == 0 && self.config.edge_relative_only {
                diff
            } else {
                g.concat_cols(&[centre, diff])
            };
            let z = first.forward(g, edge);
            let z = g.leaky_relu(z, slope);
            let z = second.forward(g, z);
            let z = g.leaky_relu(z, slope);
            h = g.segment_max(z, k);
            outputs.push(h);
        }
        let cat = if outputs.len() == 1 { outputs[0] } else { g.concat_cols(&outputs) };
        Ok(vars.project.forward(g, cat))
    }

    /// `X = E(P)`: the `M × C` feature map of a cloud.
    pub fn encode(&self, cloud: &PointCloud<T>) -> Result<Matrix<T>> {
        self.check_input(cloud.channels(), cloud.len())?;
        let nn = knn(cloud, self.config.k)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let p = g.constant(cloud.points().clone());
        let out = self.forward(&mut g, &vars, p, &nn)?;
        Ok(g.value(out).clone())
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix<T>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.first.visit_prefixed(&format!("edge{l}.first"), f);
            layer.second.visit_prefixed(&format!("edge{l}.second"), f);
        }
        self.project.visit_prefixed("project", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.first.visit_prefixed_mut(&format!("edge{l}.first"), f);
            layer.second.visit_prefixed_mut(&format!("edge{l}.second"), f);
        }
        self.project.visit_prefixed_mut("project", f);
    }
}

/// Per-point linear classifier `C → N_c` used during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub linear: Linear<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::glorot(input, classes, rng),
        }
    }

    pub fn class_count(&self) -> usize {
        self.linear.output_dim()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> LinearVars {
        self.linear.bind(g)
    }

    /// Logits `O = X·W + b`.
    pub fn classify(&self, features: &Matrix<T>) -> Result<Matrix<T>> {
        if features.cols() != self.linear.input_dim() {
            return Err(Error::Config(format!(
                "classifier expects width {}, features have {}",
                self.linear.input_dim(),
                features.cols()
            )));
        }
        Ok(self.linear.apply(features))
    }
}

impl<T: Scalar> Module<T> for ClassifierHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Matrix<T>)) {
        self.linear.visit_prefixed("head", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix<T>)) {
        self.linear.visit_prefixed_mut("head", f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(m: usize, seed: u64) -> PointCloud<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(Matrix::uniform(m, 3, 1.0, &mut rng)).unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            hidden: 16,
            output: 32,
            k: 6,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn output_shape_and_finiteness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f64>::new(small_config(), &mut rng).unwrap();
        let x = enc.encode(&random_cloud(64, 1)).unwrap();
        assert_eq!(x.shape(), (64, 32));
        assert!(x.is_finite());
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f64>::new(small_config(), &mut rng).unwrap();
        let cloud = random_cloud(40, 3);
        let perm: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 40).collect();
        let x = enc.encode(&cloud).unwrap();
        let xp = enc.encode(&cloud.permuted(&perm)).unwrap();
        assert!(xp.max_abs_diff(&x.select_rows(&perm)) < 1e-12);
    }

    #[test]
    fn relative_edges_give_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig {
            edge_relative_only: true,
            ..small_config()
        };
        let enc = Encoder::<f64>::new(cfg, &mut rng).unwrap();
        let cloud = random_cloud(30, 5);
        let a = enc.encode(&cloud).unwrap();
        let b = enc.encode(&cloud.translated([3.0, -1.5, 0.25])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::<f64>::new(small_config(), &mut rng).unwrap();
        let cloud = PointCloud::new(Matrix::zeros(20, 4)).unwrap();
        assert!(matches!(enc.encode(&cloud), Err(Error::Config(_))));
    }

    #[test]
    fn classifier_head_contracts() {
        let zero = ClassifierHead::<f64> {
            linear: Linear::zeros(8, 6),
        };
        let x = Matrix::from_fn(64, 8, |r, c| (r + c) as f64);
        let o = zero.classify(&x).unwrap();
        assert_eq!(o.shape(), (64, 6));
        assert_eq!(o.max_abs(), 0.0);
        let ident = ClassifierHead::<f64> {
            linear: Linear {
                weight: Matrix::identity(8),
                bias: Matrix::zeros(1, 8),
            },
        };
        assert_eq!(ident.classify(&x).unwrap(), x);
        assert!(matches!(zero.classify(&Matrix::zeros(3, 5)), Err(Error::Config(_))));
    }
}
