//! Central finite-difference verification of the analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{FewShotConfig, RunConfig};
use super::model::{episode_forward, FewShotModel};
use crate::augmentor::{Augmentor, AugmentorConfig};
use crate::autodiff::{Graph, Var};
use crate::contrastive::contrastive_node;
use crate::data::{Episode, LabeledCloud, PointCloud, SupportShot};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::geometry::knn;
use crate::labelprop::{affinity_node, ce_node, propagate_node, reference_matrix};
use crate::mra::{Mra, MraConfig};
use crate::nn::{Bound, Module};
use crate::prototypes::{center_loss_node, center_loss_with_centers, ClassCenters};
use crate::tensor::Matrix;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const LINEAR_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Linear,
    Contrastive,
    Center,
    CenterDetached,
    LabelProp,
    Encoder,
    Augmentor,
    Mra,
    EndToEnd,
}

impl Component {
    pub const ALL: [Component; 9] = [
        Component::Linear,
        Component::Contrastive,
        Component::Center,
        Component::CenterDetached,
        Component::LabelProp,
        Component::Encoder,
        Component::Augmentor,
        Component::Mra,
        Component::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Linear => "linear",
            Component::Contrastive => "contrastive",
            Component::Center => "center",
            Component::CenterDetached => "center-detached",
            Component::LabelProp => "labelprop",
            Component::Encoder => "encoder",
            Component::Augmentor => "augmentor",
            Component::Mra => "mra",
            Component::EndToEnd => "end-to-end",
        }
    }

    pub fn default_tolerance(self) -> f64 {
        match self {
            Component::Linear => LINEAR_TOLERANCE,
            _ => DEFAULT_TOLERANCE,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown grad-check component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub component: Component,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)` over all entries of all parameters.
pub fn relative_error(analytic: &[Matrix<f64>], numeric: &[Matrix<f64>]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = f64::MIN_POSITIVE;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max(a.max_abs_diff(n));
        scale = scale.max(a.max_abs()).max(n.max_abs());
    }
    diff / scale
}

/// Central differences of `f` around `params`.
pub fn numeric_gradients(params: &[Matrix<f64>], f: &dyn Fn(&[Matrix<f64>]) -> Result<f64>) -> Result<Vec<Matrix<f64>>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Matrix::zeros(params[p].rows(), params[p].cols());
        for i in 0..params[p].len() {
            let x = params[p].as_slice()[i];
            work[p].as_mut_slice()[i] = x + STEP;
            let up = f(&work)?;
            work[p].as_mut_slice()[i] = x - STEP;
            let down = f(&work)?;
            work[p].as_mut_slice()[i] = x;
            g.as_mut_slice()[i] = (up - down) / (2.0 * STEP);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds the loss graph from parameter values; returns the graph, the loss
/// and the parameter nodes in the same order as the values.
pub type Builder<'a> = dyn Fn(&[Matrix<f64>]) -> Result<(Graph<f64>, Var, Vec<Var>)> + 'a;

/// Compares analytic and numeric gradients. `inject` is added to the first
/// analytic entry to test the harness itself.
pub fn check(component: Component, params: &[Matrix<f64>], build: &Builder<'_>, inject: f64) -> Result<GradCheck> {
    let (g, loss, vars) = build(params)?;
    let grads = g.backward(loss);
    let mut analytic: Vec<Matrix<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.rows(), p.cols()))
        .collect();
    if inject != 0.0 {
        analytic[0].as_mut_slice()[0] += inject;
    }
    let numeric = numeric_gradients(params, &|p| {
        let (g, loss, _) = build(p)?;
        Ok(g.scalar(loss))
    })?;
    Ok(GradCheck {
        component,
        parameters: params.iter().map(Matrix::len).sum(),
        max_rel_error: relative_error(&analytic, &numeric),
        tolerance: component.default_tolerance(),
    })
}

/// Graph with one parameter leaf per value.
fn leaves(params: &[Matrix<f64>]) -> (Graph<f64>, Vec<Var>) {
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p.clone())).collect();
    (g, vars)
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::uniform(rows, cols, 1.0, rng)
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, weights: &Matrix<f64>) -> Var {
    let w = g.constant(weights.clone());
    let p = g.mul(x, w);
    g.sum(p)
}

fn module_params<M: Module<f64>>(m: &M) -> Vec<Matrix<f64>> {
    let mut out = Vec::new();
    m.visit(&mut |_, p| out.push(p.clone()));
    out
}

fn set_module_params<M: Module<f64>>(m: &mut M, params: &[Matrix<f64>]) {
    let mut i = 0;
    m.visit_mut(&mut |_, p| {
        *p = params[i].clone();
        i += 1;
    });
}

/// Random cloud with points spread enough that neighbour sets are unambiguous.
fn cloud(m: usize, rng: &mut ChaCha8Rng) -> PointCloud<f64> {
    PointCloud::new(random(m, 3, rng)).expect("finite points")
}

/// A hand-made 2-way 1-shot episode of 12-point clouds.
pub fn tiny_episode(seed: u64) -> Episode<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 12;
    let support = (1..=2)
        .map(|way| SupportShot {
            cloud: cloud(m, &mut rng),
            mask: (0..m).map(|i| i < 5).collect(),
            way,
            source: way - 1,
        })
        .collect();
    let query = (0..2)
        .map(|_| {
            let labels = (0..m).map(|i| (i % 3) as u32).collect();
            LabeledCloud::new(cloud(m, &mut rng), labels).expect("valid labels")
        })
        .collect();
    Episode {
        support,
        query,
        query_sources: vec![2, 3],
        classes: vec![1, 2],
        way_count: 2,
        shot_count: 1,
    }
}

/// Small configuration shared by the end-to-end check and its tests.
pub fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.encoder = EncoderConfig {
        hidden: 4,
        output: 4,
        k: 3,
        ..EncoderConfig::default()
    };
    c.fewshot = FewShotConfig {
        proto_count: 2,
        detach_centers: false,
        mra: MraConfig {
            n_k: 2,
            fps_ratio: 0.5,
            ..MraConfig::default()
        },
        ..FewShotConfig::default()
    };
    c
}

/// Runs the finite-difference check for one component on a seeded instance.
pub fn grad_check(component: Component, seed: u64) -> Result<GradCheck> {
    grad_check_injected(component, seed, 0.0)
}

pub fn grad_check_injected(component: Component, seed: u64, inject: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match component {
        Component::Linear => {
            let params = vec![random(4, 3, &mut rng), random(3, 2, &mut rng), random(1, 2, &mut rng)];
            let weights = random(4, 2, &mut rng);
            check(
                component,
                &params,
                &|p| {
                    let (mut g, v) = leaves(p);
                    let y = g.linear(v[0], v[1], v[2]);
                    let loss = weighted_sum(&mut g, y, &weights);
                    Ok((g, loss, v))
                },
                inject,
            )
        }
        Component::Contrastive => {
            let params = vec![random(8, 4, &mut rng), random(8, 4, &mut rng)];
            check(
                component,
                &params,
                &|p| {
                    let (mut g, v) = leaves(p);
                    let loss = contrastive_node(&mut g, v[0], v[1], 1.0)?;
                    Ok((g, loss, v))
                },
                inject,
            )
        }
        Component::Center => {
            let params = vec![random(6, 4, &mut rng)];
            let labels = [0, 1, 0, 1, 1, 0];
            check(
                component,
                &params,
                &|p| {
                    let (mut g, v) = leaves(p);
                    let loss = center_loss_node(&mut g, v[0], &labels, 2, 1.0, false)?;
                    Ok((g, loss, v))
                },
                inject,
            )
        }
        Component::CenterDetached => {
            // With detached centers the reference function freezes them at the
            // evaluation point.
            let x = random(6, 4, &mut rng);
            let labels = [0, 1, 0, 1, 1, 0];
            let frozen = ClassCenters::compute(&x, &labels, 2)?;
            let (mut g, v) = leaves(std::slice::from_ref(&x));
            let loss = center_loss_node(&mut g, v[0], &labels, 2, 1.0, true)?;
            let mut analytic = vec![g.backward(loss).get_or_zeros(v[0], 6, 4)];
            analytic[0].as_mut_slice()[0] += inject;
            let numeric = numeric_gradients(&[x], &|p| Ok(center_loss_with_centers(&p[0], &labels, &frozen, 1.0)))?;
            Ok(GradCheck {
                component,
                parameters: 24,
                max_rel_error: relative_error(&analytic, &numeric),
                tolerance: component.default_tolerance(),
            })
        }
        Component::LabelProp => {
            // 2 classes x 2 prototypes followed by two query clouds of 4 and 3 points.
            let params = vec![random(11, 4, &mut rng)];
            let labels = vec![vec![0, 1, 1, 0], vec![1, 0, 0]];
            check(
                component,
                &params,
                &|p| {
                    let (mut g, v) = leaves(p);
                    let (w, _) = affinity_node(&mut g, v[0], None)?;
                    let l = g.constant(reference_matrix(2, 2, 7));
                    let f = propagate_node(&mut g, w, l, 0.9)?;
                    let loss = ce_node(&mut g, f, 4, &labels)?;
                    Ok((g, loss, v))
                },
                inject,
            )
        }
        Component::Encoder => {
            let cfg = EncoderConfig {
                hidden: 5,
                output: 4,
                k: 4,
                ..EncoderConfig::default()
            };
            let enc = Encoder::<f64>::new(cfg, &mut rng)?;
            let pc = cloud(16, &mut rng);
            let nn = knn(&pc, 4)?;
            let weights = random(16, 4, &mut rng);
            check(
                component,
                &module_params(&enc),
                &|p| {
                    let mut e = enc.clone();
                    set_module_params(&mut e, p);
                    let mut g = Graph::new();
                    let vars = e.bind(&mut g);
                    let x = g.constant(pc.points().clone());
                    let y = e.forward(&mut g, &vars, x, &nn)?;
                    let loss = weighted_sum(&mut g, y, &weights);
                    Ok((g, loss, vars.vars()))
                },
                inject,
            )
        }
        Component::Augmentor => {
            let cfg = AugmentorConfig {
                embed_dim: 4,
                noise_dim: 2,
                ..AugmentorConfig::default()
            };
            let mut aug = Augmentor::<f64>::new(cfg, &mut rng)?;
            // Non-zero heads so every parameter carries gradient.
            aug.shape_head.weight = random(6, 9, &mut rng).scale(0.3);
            aug.point_head.weight = random(10, 3, &mut rng).scale(0.3);
            let pc = cloud(8, &mut rng);
            let noise = aug.draw_noise(8, seed);
            let weights = random(8, 3, &mut rng);
            check(
                component,
                &module_params(&aug),
                &|p| {
                    let mut a = aug.clone();
                    set_module_params(&mut a, p);
                    let mut g = Graph::new();
                    let vars = a.bind(&mut g);
                    let out = a.forward(&mut g, &vars, &pc, &noise)?;
                    let s = weighted_sum(&mut g, out.augmented, &weights);
                    let loss = g.add(s, out.penalty);
                    Ok((g, loss, vars.vars()))
                },
                inject,
            )
        }
        Component::Mra => {
            let cfg = MraConfig {
                n_k: 3,
                fps_ratio: 0.5,
                ..MraConfig::default()
            };
            let mra = Mra::<f64>::new(8, cfg, &mut rng)?;
            let pc = cloud(12, &mut rng);
            let layout = mra.layout(&pc)?;
            let weights = random(12, 16, &mut rng);
            let mut params = vec![random(12, 8, &mut rng)];
            params.extend(module_params(&mra));
            check(
                component,
                &params,
                &|p| {
                    let mut m = mra.clone();
                    set_module_params(&mut m, &p[1..]);
                    let mut g = Graph::new();
                    let x = g.param(p[0].clone());
                    let vars = m.bind(&mut g);
                    let out = m.forward(&mut g, &vars, x, layout.clone())?;
                    let loss = weighted_sum(&mut g, out, &weights);
                    let mut ids = vec![x];
                    ids.extend(vars.vars());
                    Ok((g, loss, ids))
                },
                inject,
            )
        }
        Component::EndToEnd => {
            let config = tiny_config();
            let model = FewShotModel::<f64>::new(&config)?;
            let episode = tiny_episode(seed);
            let mut params = module_params(&model.encoder);
            let enc_count = params.len();
            params.extend(module_params(model.mra.as_ref().expect("tiny config enables attention")));
            check(
                component,
                &params,
                &|p| {
                    let mut m = model.clone();
                    set_module_params(&mut m.encoder, &p[..enc_count]);
                    set_module_params(m.mra.as_mut().expect("attention"), &p[enc_count..]);
                    let mut g = Graph::new();
                    let vars = m.bind(&mut g);
                    let nodes = episode_forward(&mut g, &m, &vars, &episode, &config.fewshot)?;
                    let mut ids = vars.encoder.vars();
                    ids.extend(vars.mra.as_ref().expect("attention").vars());
                    Ok((g, nodes.total, ids))
                },
                inject,
            )
        }
    }
}

/// Random perturbation magnitude for mismatch injection.
pub fn injection(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0.5..1.0)
}
