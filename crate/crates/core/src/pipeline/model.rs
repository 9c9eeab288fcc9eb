//! The episodic model: encoder, optional attention block, prototypes and
//! label propagation, trained on `L = L_l + λ·L_r`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{FewShotConfig, RunConfig};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Archive;
use crate::data::{Episode, PointCloud};
use crate::encoder::{Encoder, EncoderVars};
use crate::error::{Error, Result};
use crate::geometry::knn;
use crate::labelprop::{affinity_node, ce_node, predict, propagate_node, reference_matrix, softmax_map};
use crate::mra::{Mra, MraVars};
use crate::nn::{Bound, Module};
use crate::optim::Adam;
use crate::prototypes::{center_loss_node, generate_prototypes, prototype_node};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const ENCODER_PREFIX: &str = "encoder/";
pub const MRA_PREFIX: &str = "mra/";

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotModel<T> {
    pub encoder: Encoder<T>,
    pub mra: Option<Mra<T>>,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub mra: Option<MraVars>,
}

impl<T: Scalar> FewShotModel<T> {
    /// Freshly initialized model seeded from `config.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
        let mra = if config.fewshot.use_mra {
            Some(Mra::new(encoder.output_dim(), config.fewshot.mra.clone(), &mut rng)?)
        } else {
            None
        };
        Ok(Self { encoder, mra })
    }

    /// Width of the features fed to prototypes and the graph.
    pub fn feature_dim(&self) -> usize {
        match self.mra {
            Some(_) => 2 * self.encoder.output_dim(),
            None => self.encoder.output_dim(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g),
            mra: self.mra.as_ref().map(|m| m.bind(g)),
        }
    }

    /// Features of one cloud recorded on `g`.
    pub fn features(&self, g: &mut Graph<T>, vars: &ModelVars, cloud: &PointCloud<T>) -> Result<Var> {
        let p = g.constant(cloud.points().clone());
        let nn = knn(cloud, self.encoder.config.k)?;
        let x = self.encoder.forward(g, &vars.encoder, p, &nn)?;
        match (&self.mra, &vars.mra) {
            (Some(mra), Some(mv)) => {
                let layout = mra.layout(cloud)?;
                mra.forward(g, mv, x, layout)
            }
            _ => Ok(x),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let c = &self.encoder.config;
        let mut a = Archive::new()
            .with_manifest("C", c.output)
            .with_manifest("L_e", c.layers)
            .with_manifest("k_enc", c.k)
            .with_manifest("mra", self.mra.is_some());
        a.add_module(ENCODER_PREFIX, &self.encoder);
        if let Some(m) = &self.mra {
            a.add_module(MRA_PREFIX, m);
        }
        a
    }

    pub fn load_archive(&mut self, archive: &Archive) -> Result<()> {
        load_encoder(&mut self.encoder, archive)?;
        if let Some(m) = &mut self.mra {
            archive.load_module(MRA_PREFIX, m)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }
}

/// Loads encoder weights after checking the manifest matches its configuration.
pub fn load_encoder<T: Scalar>(encoder: &mut Encoder<T>, archive: &Archive) -> Result<()> {
    let c = &encoder.config;
    for (key, want) in [("C", c.output), ("L_e", c.layers), ("k_enc", c.k)] {
        let got = archive.manifest_usize(key)?;
        if got != want {
            return Err(Error::Config(format!("checkpoint has {key}={got}, configuration expects {want}")));
        }
    }
    archive.load_module(ENCODER_PREFIX, encoder)
}

/// Graph nodes of one episode.
pub struct EpisodeNodes {
    pub total: Var,
    pub label: Var,
    pub center: Option<Var>,
    /// Propagated scores `F` over all nodes.
    pub scores: Var,
    /// First query row of `scores`.
    pub query_offset: usize,
}

/// Support features stacked in shot order with their labels in `0..=N`.
fn support_block<T: Scalar>(
    g: &mut Graph<T>,
    model: &FewShotModel<T>,
    vars: &ModelVars,
    episode: &Episode<T>,
) -> Result<(Var, Vec<usize>)> {
    let mut parts = Vec::with_capacity(episode.support.len());
    let mut labels = Vec::new();
    for (s, shot) in episode.support.iter().enumerate() {
        parts.push(model.features(g, vars, &shot.cloud)?);
        labels.extend(episode.support_labels(s));
    }
    let stacked = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
    Ok((stacked, labels))
}

/// Records the full episode: features, center loss, prototypes, propagation
/// and the query cross-entropy.
pub fn episode_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &FewShotModel<T>,
    vars: &ModelVars,
    episode: &Episode<T>,
    config: &FewShotConfig,
) -> Result<EpisodeNodes> {
    let classes = episode.way_count + 1;
    let (support, labels) = support_block(g, model, vars, episode)?;
    let center = if config.use_center {
        Some(center_loss_node(g, support, &labels, classes, T::lit(config.eta), config.detach_centers)?)
    } else {
        None
    };
    let set = generate_prototypes(g.value(support), &labels, classes, config.proto_count)?;
    let protos = prototype_node(g, support, &set);
    let mut parts = vec![protos];
    let mut query_labels = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        parts.push(model.features(g, vars, &q.cloud)?);
        query_labels.push(q.labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
    }
    let nodes = g.concat_rows(&parts);
    let query_offset = set.prototypes.rows();
    let (w, _) = affinity_node(g, nodes, config.sparsify())?;
    let reference = g.constant(reference_matrix(classes, set.count, episode.total_query_points()));
    let scores = propagate_node(g, w, reference, config.gamma)?;
    let label = ce_node(g, scores, query_offset, &query_labels)?;
    let total = match center {
        Some(c) => {
            let weighted = g.scale(c, T::lit(config.lambda));
            g.add(label, weighted)
        }
        None => label,
    };
    Ok(EpisodeNodes {
        total,
        label,
        center,
        scores,
        query_offset,
    })
}

/// Loss values of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeLosses {
    pub label: f64,
    pub center: f64,
    pub total: f64,
}

/// Predicted labels in `0..=N` for every query cloud of the episode.
pub fn predict_episode<T: Scalar>(
    model: &FewShotModel<T>,
    episode: &Episode<T>,
    config: &FewShotConfig,
) -> Result<Vec<Vec<usize>>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let nodes = episode_forward(&mut g, model, &vars, episode, config)?;
    let f = g.value(nodes.scores);
    let mut out = Vec::with_capacity(episode.query.len());
    let mut row = nodes.query_offset;
    for q in &episode.query {
        let rows: Vec<usize> = (row..row + q.cloud.len()).collect();
        out.push(predict(&softmax_map(&f.select_rows(&rows))));
        row += q.cloud.len();
    }
    Ok(out)
}

/// Optimizer state, one Adam per module so each keeps its own learning rate.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub encoder_opt: Adam<T>,
    pub mra_opt: Adam<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: &FewShotConfig) -> Self {
        Self {
            encoder_opt: Adam::new(config.encoder_lr),
            mra_opt: Adam::new(config.lr),
        }
    }

    /// One optimizer step on the episode loss. Returns the pre-update losses.
    pub fn step(
        &mut self,
        model: &mut FewShotModel<T>,
        episode: &Episode<T>,
        config: &FewShotConfig,
    ) -> Result<EpisodeLosses> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let nodes = episode_forward(&mut g, model, &vars, episode, config)?;
        let losses = EpisodeLosses {
            label: g.scalar(nodes.label).as_f64(),
            center: nodes.center.map_or(0.0, |c| g.scalar(c).as_f64()),
            total: g.scalar(nodes.total).as_f64(),
        };
        if !losses.total.is_finite() {
            return Ok(losses);
        }
        let grads = g.backward(nodes.total);
        self.encoder_opt.step(&mut model.encoder, &grads, &vars.encoder.vars());
        if let (Some(m), Some(mv)) = (&mut model.mra, &vars.mra) {
            self.mra_opt.step(m, &grads, &mv.vars());
        }
        Ok(losses)
    }
}

/// Gradient norms per parameter group of one episode, for probing.
pub fn group_gradient_norms<T: Scalar>(
    model: &FewShotModel<T>,
    episode: &Episode<T>,
    config: &FewShotConfig,
) -> Result<Vec<(String, f64)>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let nodes = episode_forward(&mut g, model, &vars, episode, config)?;
    let grads = g.backward(nodes.total);
    let mut names = Vec::new();
    model.encoder.visit(&mut |n, _| names.push(format!("{ENCODER_PREFIX}{n}")));
    let mut ids = vars.encoder.vars();
    if let (Some(m), Some(mv)) = (&model.mra, &vars.mra) {
        m.visit(&mut |n, _| names.push(format!("{MRA_PREFIX}{n}")));
        ids.extend(mv.vars());
    }
    Ok(names
        .into_iter()
        .zip(ids)
        .map(|(n, v)| {
            let norm = grads
                .get(v)
                .map_or(0.0, |m: &Matrix<T>| m.as_slice().iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt());
            (n, norm)
        })
        .collect())
}
