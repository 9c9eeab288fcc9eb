//! Test-split evaluation: per-class IoU over all query points of all episodes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, FewShotConfig};
use super::model::{predict_episode, FewShotModel};
use super::train::{derive_seed, STREAM_EVAL};
use crate::data::{class_name, sample_episode, write_ply, Dataset, Episode, LabeledCloud, SamplingMode, BACKGROUND};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::prototypes::ClassCenters;
use crate::scalar::Scalar;
use crate::tensor::sq_dist;

/// Per-class true positive, false positive and false negative counts, keyed by
/// original class id (0 is background).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Confusion {
    counts: BTreeMap<u32, [u64; 3]>,
}

impl Confusion {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: u32, predicted: u32) {
        if truth == predicted {
            self.counts.entry(truth).or_default()[0] += 1;
        } else {
            self.counts.entry(predicted).or_default()[1] += 1;
            self.counts.entry(truth).or_default()[2] += 1;
        }
    }

    /// Records one query cloud; `truth` and `predicted` are episode labels in
    /// `0..=N`, mapped to original ids through `classes`.
    pub fn record_episode_cloud(&mut self, classes: &[u32], truth: &[u32], predicted: &[usize]) {
        let original = |l: usize| if l == 0 { BACKGROUND } else { classes[l - 1] };
        for (&t, &p) in truth.iter().zip(predicted) {
            self.record(original(t as usize), original(p));
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (&c, v) in &other.counts {
            let e = self.counts.entry(c).or_default();
            for k in 0..3 {
                e[k] += v[k];
            }
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs.
    pub fn iou(&self, class: u32) -> Option<f64> {
        let [tp, fp, fneg] = *self.counts.get(&class)?;
        let denom = tp + fp + fneg;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn classes(&self) -> impl Iterator<Item = u32> + '_ {
        self.counts.keys().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean IoU over foreground classes present in prediction or truth.
    pub foreground_miou: f64,
    pub background_iou: f64,
    pub episodes: usize,
    /// Degenerate episodes left out of the confusion counts.
    pub skipped: usize,
    pub seed: u64,
    pub per_class: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_confusion(confusion: &Confusion, episodes: usize, skipped: usize, seed: u64) -> Self {
        let mut per_class = BTreeMap::new();
        let mut fg = Vec::new();
        for c in confusion.classes().filter(|&c| c != BACKGROUND) {
            if let Some(iou) = confusion.iou(c) {
                per_class.insert(class_name(c), iou);
                fg.push(iou);
            }
        }
        let foreground_miou = if fg.is_empty() {
            0.0
        } else {
            fg.iter().sum::<f64>() / fg.len() as f64
        };
        Self {
            foreground_miou,
            background_iou: confusion.iou(BACKGROUND).unwrap_or(0.0),
            episodes,
            skipped,
            seed,
            per_class,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::ConfigParse(e.to_string()))
    }
}

/// Test episode `index` of an evaluation run.
pub fn evaluation_episode<T: Scalar>(clouds: &[LabeledCloud<T>], dataset: &Dataset, eval: &EvalConfig, index: usize) -> Result<Episode<T>> {
    sample_episode(
        clouds,
        &dataset.split,
        SamplingMode::Test,
        eval.ways,
        eval.shots,
        eval.queries,
        derive_seed(eval.seed, STREAM_EVAL, index as u64),
    )
}

fn degenerate(e: &Error) -> bool {
    matches!(e, Error::EmptyClass { .. } | Error::DegenerateGraph(_) | Error::Solver(_))
}

/// Runs `predict` on every evaluation episode (in parallel) and aggregates the
/// confusion counts in episode order.
fn evaluate_with<T: Scalar>(
    dataset: &Dataset,
    eval: &EvalConfig,
    predict: impl Fn(usize, &Episode<T>) -> Result<Vec<Vec<usize>>> + Sync,
) -> Result<EvalReport> {
    let clouds: Vec<LabeledCloud<T>> = dataset.clouds.iter().map(LabeledCloud::cast).collect();
    let per_episode: Vec<Result<Option<Confusion>>> = (0..eval.episodes)
        .into_par_iter()
        .map(|i| {
            let episode = evaluation_episode(&clouds, dataset, eval, i)?;
            match predict(i, &episode) {
                Ok(pred) => {
                    let mut c = Confusion::new();
                    for (q, p) in episode.query.iter().zip(&pred) {
                        c.record_episode_cloud(&episode.classes, &q.labels, p);
                    }
                    Ok(Some(c))
                }
                Err(e) if degenerate(&e) => {
                    log::warn!("evaluation episode {i} skipped: {e}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut total = Confusion::new();
    let mut skipped = 0;
    for r in per_episode {
        match r? {
            Some(c) => total.merge(&c),
            None => skipped += 1,
        }
    }
    Ok(EvalReport::from_confusion(&total, eval.episodes, skipped, eval.seed))
}

/// Evaluates a trained model on test-split episodes.
pub fn evaluate<T: Scalar>(model: &FewShotModel<T>, dataset: &Dataset, fewshot: &FewShotConfig, eval: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(dataset, eval, |_, ep| predict_episode(model, ep, fewshot))
}

/// Random labels drawn from each episode's query label frequencies.
pub fn chance_baseline(dataset: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    evaluate_with::<f32>(dataset, eval, |i, ep| {
        let classes = ep.way_count + 1;
        let mut freq = vec![0u64; classes];
        for q in &ep.query {
            for &l in &q.labels {
                freq[l as usize] += 1;
            }
        }
        let dist = WeightedIndex::new(&freq).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(eval.seed, STREAM_EVAL + 100, i as u64));
        Ok(ep.query.iter().map(|q| (0..q.cloud.len()).map(|_| dist.sample(&mut rng)).collect()).collect())
    })
}

/// One mean prototype per class from encoder features; every query point takes
/// the class of its nearest mean.
pub fn nearest_prototype_baseline<T: Scalar>(encoder: &Encoder<T>, dataset: &Dataset, eval: &EvalConfig) -> Result<EvalReport> {
    evaluate_with(dataset, eval, |_, ep: &Episode<T>| {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (s, shot) in ep.support.iter().enumerate() {
            feats.push(encoder.encode(&shot.cloud)?);
            labels.extend(ep.support_labels(s));
        }
        let refs: Vec<_> = feats.iter().collect();
        let centers = ClassCenters::compute(&crate::tensor::Matrix::vcat(&refs), &labels, ep.way_count + 1)?;
        centers.require_all()?;
        ep.query
            .iter()
            .map(|q| {
                let x = encoder.encode(&q.cloud)?;
                Ok((0..x.rows())
                    .map(|r| {
                        let mut best = (T::infinity(), 0);
                        for n in 0..ep.way_count + 1 {
                            let d = sq_dist(x.row(r), centers.centers.row(n));
                            if d < best.0 {
                                best = (d, n);
                            }
                        }
                        best.1
                    })
                    .collect())
            })
            .collect()
    })
}

/// Writes the first query cloud of evaluation episode `index` with predicted
/// labels (original class ids) as PLY. Returns the predicted labels.
pub fn export_episode<T: Scalar>(
    model: &FewShotModel<T>,
    dataset: &Dataset,
    fewshot: &FewShotConfig,
    eval: &EvalConfig,
    index: usize,
    out: &Path,
) -> Result<Vec<u32>> {
    let clouds: Vec<LabeledCloud<T>> = dataset.clouds.iter().map(LabeledCloud::cast).collect();
    let episode = evaluation_episode(&clouds, dataset, eval, index)?;
    let pred = predict_episode(model, &episode, fewshot)?;
    let labels: Vec<u32> = pred[0]
        .iter()
        .map(|&l| if l == 0 { BACKGROUND } else { episode.classes[l - 1] })
        .collect();
    write_ply(out, &episode.query[0].cloud, &labels)?;
    Ok(labels)
}
