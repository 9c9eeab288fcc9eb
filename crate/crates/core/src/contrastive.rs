//! Point-wise contrastive objective and the self-supervised pretraining step.
//!
//! For logits `O` of the original view and `O'` of the augmented view,
//! `L_c = mean_i −log( exp(o_i·o'_i) / Σ_j exp(o_i·o'_j) )`: every point must
//! pick out its own counterpart among all points of the other view.

use serde::{Deserialize, Serialize};

use crate::augmentor::Augmentor;
use crate::autodiff::{CustomOp, Graph, Var};
use crate::data::PointCloud;
use crate::encoder::{ClassifierHead, Encoder};
use crate::error::{Error, Result};
use crate::geometry::{knn, knn_rows};
use crate::nn::Bound;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index-aligned outputs of the two views.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch<T> {
    pub original: Matrix<T>,
    pub augmented: Matrix<T>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn new(original: Matrix<T>, augmented: Matrix<T>) -> Result<Self> {
        if original.shape() != augmented.shape() {
            return Err(Error::Shape(format!(
                "views differ in shape: {:?} vs {:?}",
                original.shape(),
                augmented.shape()
            )));
        }
        Ok(Self { original, augmented })
    }
}

/// Row-wise softmax of `O·O'ᵀ / τ` and the loss value.
fn forward<T: Scalar>(o: &Matrix<T>, o2: &Matrix<T>, temperature: T) -> Result<(Matrix<T>, T)> {
    let m = o.rows();
    if m < 2 {
        return Err(Error::InvalidInput(format!("contrastive loss needs at least 2 points, got {m}")));
    }
    if o.shape() != o2.shape() {
        return Err(Error::Shape("contrastive views differ in shape".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::InvalidInput("temperature must be positive".into()));
    }
    let inv_t = T::one() / temperature;
    let mut probs = o.matmul_t(o2);
    let mut total = T::zero();
    for i in 0..m {
        let row = probs.row_mut(i);
        for v in row.iter_mut() {
            *v *= inv_t;
        }
        let diag = row[i];
        let (arg, mx) = row
            .iter()
            .copied()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (j, v)| if v > best.1 { (j, v) } else { best });
        // Sum the non-maximal terms apart so log(1 + tiny) keeps its precision.
        let mut rest = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mx).exp();
            if j != arg {
                rest += *v;
            }
        }
        let s = T::one() + rest;
        for v in row.iter_mut() {
            *v /= s;
        }
        total += (mx - diag) + rest.ln_1p();
    }
    Ok((probs, total / T::from_count(m)))
}

/// Plain evaluation of `L_c` (temperature 1).
pub fn pointwise_contrastive_loss<T: Scalar>(batch: &ContrastiveBatch<T>) -> Result<T> {
    forward(&batch.original, &batch.augmented, T::one()).map(|(_, l)| l)
}

struct ContrastiveOp<T> {
    probs: Matrix<T>,
    inv_t: T,
}

impl<T: Scalar> CustomOp<T> for ContrastiveOp<T> {
    fn name(&self) -> &'static str {
        "pointwise_contrastive"
    }

    fn backward(&self, inputs: &[&Matrix<T>], _output: &Matrix<T>, grad: &Matrix<T>) -> Vec<Option<Matrix<T>>> {
        let (o, o2) = (inputs[0], inputs[1]);
        let m = o.rows();
        let k = grad[(0, 0)] * self.inv_t / T::from_count(m);
        let mut gs = self.probs.clone();
        for i in 0..m {
            gs[(i, i)] -= T::one();
        }
        let gs = gs.scale(k);
        vec![Some(gs.matmul(o2)), Some(gs.t_matmul(o))]
    }
}

/// Records `L_c` on the graph.
pub fn contrastive_node<T: Scalar>(g: &mut Graph<T>, original: Var, augmented: Var, temperature: T) -> Result<Var> {
    let (probs, loss) = forward(g.value(original), g.value(augmented), temperature)?;
    Ok(g.custom(
        vec![original, augmented],
        Matrix::filled(1, 1, loss),
        Box::new(ContrastiveOp {
            probs,
            inv_t: T::one() / temperature,
        }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augmentor_lr: f64,
    /// Weight of the deformation penalty in the augmentor objective.
    pub beta: f64,
    pub freeze_augmentor: bool,
    pub temperature: f64,
    /// Contrast encoder features instead of classifier logits.
    pub feature_space: bool,
    /// Classifier width `N_c`; zero means "train classes + background".
    pub head_classes: usize,
    /// Cap on the number of scenes used per epoch (0 = all).
    pub max_scenes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            epochs: 30,
            lr: 1e-3,
            augmentor_lr: 1e-3,
            beta: 1.0,
            freeze_augmentor: false,
            temperature: 1.0,
            feature_space: false,
            head_classes: 0,
            max_scenes: 0,
        }
    }
}

/// Everything trained during pretraining.
#[derive(Debug, Clone)]
pub struct PretrainState<T: Scalar> {
    pub encoder: Encoder<T>,
    pub head: ClassifierHead<T>,
    pub augmentor: Augmentor<T>,
    pub encoder_opt: Adam<T>,
    pub head_opt: Adam<T>,
    pub augmentor_opt: Adam<T>,
}

impl<T: Scalar> PretrainState<T> {
    pub fn new(encoder: Encoder<T>, head: ClassifierHead<T>, augmentor: Augmentor<T>, config: &PretrainConfig) -> Self {
        Self {
            encoder,
            head,
            augmentor,
            encoder_opt: Adam::new(config.lr),
            head_opt: Adam::new(config.lr),
            augmentor_opt: Adam::new(config.augmentor_lr),
        }
    }
}

/// Losses recorded by one pretraining step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainLosses<T> {
    pub contrastive: T,
    pub penalty: T,
}

/// Builds both views of every cloud on `g` and returns `(L_c, penalty)` nodes,
/// plus the bound parameter handles.
pub fn pretrain_graph<T: Scalar>(
    g: &mut Graph<T>,
    state: &PretrainState<T>,
    clouds: &[&PointCloud<T>],
    seed: u64,
    config: &PretrainConfig,
) -> Result<(Var, Var, [Vec<Var>; 3])> {
    if clouds.is_empty() {
        return Err(Error::InvalidInput("pretraining batch is empty".into()));
    }
    let enc_vars = state.encoder.bind(g);
    let head_vars = state.head.bind(g);
    let aug_vars = state.augmentor.bind(g);
    let k = state.encoder.config.k;
    let temperature = T::lit(config.temperature);
    let mut losses = Vec::with_capacity(clouds.len());
    let mut penalties = Vec::with_capacity(clouds.len());
    for (b, cloud) in clouds.iter().enumerate() {
        let noise = state.augmentor.draw_noise(cloud.len(), seed.wrapping_mul(1_000_003).wrapping_add(b as u64));
        let aug = state.augmentor.forward(g, &aug_vars, cloud, &noise)?;
        let original = g.constant(cloud.points().clone());
        let nn_orig = knn(cloud, k)?;
        let nn_aug = knn_rows(&g.value(aug.augmented).col_range(0, 3), k)?;
        let x = state.encoder.forward(g, &enc_vars, original, &nn_orig)?;
        let x2 = state.encoder.forward(g, &enc_vars, aug.augmented, &nn_aug)?;
        let (o, o2) = if config.feature_space {
            (x, x2)
        } else {
            (head_vars.forward(g, x), head_vars.forward(g, x2))
        };
        losses.push(contrastive_node(g, o, o2, temperature)?);
        penalties.push(aug.penalty);
    }
    let inv_b = T::one() / T::from_count(clouds.len());
    let lc = g.concat_rows(&losses);
    let lc = g.sum(lc);
    let lc = g.scale(lc, inv_b);
    let pen = g.concat_rows(&penalties);
    let pen = g.sum(pen);
    let pen = g.scale(pen, inv_b);
    let mut head_ids = Vec::new();
    head_vars.push_vars(&mut head_ids);
    Ok((lc, pen, [enc_vars.vars(), head_ids, aug_vars.vars()]))
}

/// One alternating update: encoder and head descend `L_c`; the augmentor
/// (unless frozen) descends `−L_c + β·penalty`. Returns the pre-update losses.
pub fn pretrain_step<T: Scalar>(
    state: &mut PretrainState<T>,
    clouds: &[&PointCloud<T>],
    iteration: usize,
    seed: u64,
    config: &PretrainConfig,
) -> Result<PretrainLosses<T>> {
    let mut g = Graph::new();
    let (lc, pen, [enc_ids, head_ids, aug_ids]) = pretrain_graph(&mut g, state, clouds, seed, config)?;
    let contrastive = g.scalar(lc);
    let penalty = g.scalar(pen);
    if !contrastive.is_finite() || !penalty.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            seed,
            loss: contrastive.as_f64(),
        });
    }
    let grads = g.backward(lc);
    state.encoder_opt.step(&mut state.encoder, &grads, &enc_ids);
    if !config.feature_space {
        state.head_opt.step(&mut state.head, &grads, &head_ids);
    }
    if !config.freeze_augmentor {
        let pen_grads = g.backward(pen);
        let beta = T::lit(config.beta);
        let combined: Vec<Matrix<T>> = aug_ids
            .iter()
            .map(|&v| {
                let (r, c) = g.value(v).shape();
                let mut d = pen_grads.get_or_zeros(v, r, c).scale(beta);
                d.axpy(-T::one(), &grads.get_or_zeros(v, r, c));
                d
            })
            .collect();
        state.augmentor_opt.step_with(&mut state.augmentor, &combined);
    }
    Ok(PretrainLosses { contrastive, penalty })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_rows_give_log_m() {
        let o = Matrix::<f64>::filled(5, 3, 0.7);
        let b = ContrastiveBatch::new(o.clone(), o).unwrap();
        assert!((pointwise_contrastive_loss(&b).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn separated_two_point_case() {
        let o = Matrix::<f64>::from_rows(&[vec![10.0, 0.0], vec![0.0, 10.0]]);
        let b = ContrastiveBatch::new(o.clone(), o).unwrap();
        let l = pointwise_contrastive_loss(&b).unwrap();
        // -log(e^100 / (e^100 + 1)) = log1p(e^-100)
        assert!((l - (-100f64).exp().ln_1p()).abs() < 1e-50);
        assert!(l >= 0.0 && l < 1e-40);
    }

    #[test]
    fn too_few_points_rejected() {
        let o = Matrix::<f64>::zeros(1, 3);
        assert!(pointwise_contrastive_loss(&ContrastiveBatch::new(o.clone(), o).unwrap()).is_err());
        assert!(ContrastiveBatch::new(Matrix::<f64>::zeros(2, 3), Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let o = Matrix::<f64>::uniform(6, 4, 1e3, &mut rng);
        let o2 = Matrix::<f64>::uniform(6, 4, 1e3, &mut rng);
        assert!(pointwise_contrastive_loss(&ContrastiveBatch::new(o, o2).unwrap()).unwrap().is_finite());
    }
}
