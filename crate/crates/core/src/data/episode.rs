//! N-way K-shot episode sampling.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{class_name, ClassSplit, LabeledCloud, PointCloud, BACKGROUND};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which side of the class split an episode is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Train,
    Test,
}

/// One labeled support example: the mask marks points of its episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot<T> {
    pub cloud: PointCloud<T>,
    pub mask: Vec<bool>,
    /// Episode class index in `1..=N`.
    pub way: usize,
    /// Index of the source cloud in the dataset.
    pub source: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    /// `N × K` shots, grouped by way.
    pub support: Vec<SupportShot<T>>,
    /// Query clouds with labels remapped to `0..=N`.
    pub query: Vec<LabeledCloud<T>>,
    pub query_sources: Vec<usize>,
    /// Original class id of way `n` at index `n - 1`.
    pub classes: Vec<u32>,
    pub way_count: usize,
    pub shot_count: usize,
}

impl<T: Scalar> Episode<T> {
    /// Support point labels in `0..=N` for a shot (mask → way, else background).
    pub fn support_labels(&self, shot: usize) -> Vec<usize> {
        let s = &self.support[shot];
        s.mask.iter().map(|&m| if m { s.way } else { 0 }).collect()
    }

    pub fn total_query_points(&self) -> usize {
        self.query.iter().map(|q| q.cloud.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Episode<U> {
        Episode {
            support: self
                .support
                .iter()
                .map(|s| SupportShot {
                    cloud: s.cloud.cast(),
                    mask: s.mask.clone(),
                    way: s.way,
                    source: s.source,
                })
                .collect(),
            query: self.query.iter().map(LabeledCloud::cast).collect(),
            query_sources: self.query_sources.clone(),
            classes: self.classes.clone(),
            way_count: self.way_count,
            shot_count: self.shot_count,
        }
    }
}

fn split_sides(split: &ClassSplit, mode: SamplingMode) -> (&BTreeSet<u32>, &BTreeSet<u32>) {
    match mode {
        SamplingMode::Train => (split.train_classes(), split.test_classes()),
        SamplingMode::Test => (split.test_classes(), split.train_classes()),
    }
}

/// Clouds containing no class from the opposite side of the split.
fn eligible<T: Scalar>(dataset: &[LabeledCloud<T>], forbidden: &BTreeSet<u32>) -> Vec<usize> {
    dataset
        .iter()
        .enumerate()
        .filter(|(_, c)| c.labels.iter().all(|l| !forbidden.contains(l)))
        .map(|(i, _)| i)
        .collect()
}

/// Draws an episode with `n` random classes from the chosen split side.
pub fn sample_episode<T: Scalar>(
    dataset: &[LabeledCloud<T>],
    split: &ClassSplit,
    mode: SamplingMode,
    n: usize,
    k: usize,
    query_count: usize,
    seed: u64,
) -> Result<Episode<T>> {
    if n == 0 || k == 0 || query_count == 0 {
        return Err(Error::InvalidInput("ways, shots and query count must be positive".into()));
    }
    let (allowed, forbidden) = split_sides(split, mode);
    let pool = eligible(dataset, forbidden);
    let need = k + query_count;
    let mut usable = Vec::new();
    let mut first_short = None;
    for &c in allowed {
        let count = pool.iter().filter(|&&i| dataset[i].contains_class(c)).count();
        if count >= need {
            usable.push(c);
        } else if first_short.is_none() {
            first_short = Some((c, count));
        }
    }
    if usable.len() < n {
        let (class, count) = first_short.unwrap_or((0, 0));
        return Err(Error::Sampling {
            class: class_name(class),
            reason: format!("only {count} clouds contain it, need {need}; {} of {n} classes usable", usable.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    usable.shuffle(&mut rng);
    usable.truncate(n);
    sample_with_rng(dataset, split, mode, &usable, k, query_count, &mut rng)
}

/// Draws an episode for the given classes (way `i + 1` is `classes[i]`).
pub fn sample_episode_for_classes<T: Scalar>(
    dataset: &[LabeledCloud<T>],
    split: &ClassSplit,
    mode: SamplingMode,
    classes: &[u32],
    k: usize,
    query_count: usize,
    seed: u64,
) -> Result<Episode<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with_rng(dataset, split, mode, classes, k, query_count, &mut rng)
}

fn sample_with_rng<T: Scalar>(
    dataset: &[LabeledCloud<T>],
    split: &ClassSplit,
    mode: SamplingMode,
    classes: &[u32],
    k: usize,
    query_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode<T>> {
    if classes.is_empty() || k == 0 || query_count == 0 {
        return Err(Error::InvalidInput("ways, shots and query count must be positive".into()));
    }
    let (allowed, forbidden) = split_sides(split, mode);
    let mut seen = BTreeSet::new();
    for &c in classes {
        if !allowed.contains(&c) {
            let side = if mode == SamplingMode::Train { "train" } else { "test" };
            return Err(Error::Sampling {
                class: class_name(c),
                reason: format!("class is not in the {side} split"),
            });
        }
        if !seen.insert(c) {
            return Err(Error::Sampling {
                class: class_name(c),
                reason: "class requested twice".into(),
            });
        }
    }

    let pool = eligible(dataset, forbidden);
    let mut used = vec![false; dataset.len()];
    let mut support = Vec::with_capacity(classes.len() * k);
    let mut query_sources = Vec::with_capacity(classes.len() * query_count);
    for (w, &c) in classes.iter().enumerate() {
        let mut cands: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| !used[i] && dataset[i].contains_class(c))
            .collect();
        if cands.len() < k + query_count {
            return Err(Error::Sampling {
                class: class_name(c),
                reason: format!("only {} unused clouds contain it, need {}", cands.len(), k + query_count),
            });
        }
        cands.shuffle(rng);
        for &i in &cands[..k] {
            used[i] = true;
            let src = &dataset[i];
            support.push(SupportShot {
                cloud: src.cloud.clone(),
                mask: src.labels.iter().map(|&l| l == c).collect(),
                way: w + 1,
                source: i,
            });
        }
        for &i in &cands[k..k + query_count] {
            used[i] = true;
            query_sources.push(i);
        }
    }

    let query = query_sources
        .iter()
        .map(|&i| {
            let src = &dataset[i];
            let labels = src
                .labels
                .iter()
                .map(|l| classes.iter().position(|c| c == l).map_or(BACKGROUND, |p| p as u32 + 1))
                .collect();
            LabeledCloud::new(src.cloud.clone(), labels)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Episode {
        support,
        query,
        query_sources,
        classes: classes.to_vec(),
        way_count: classes.len(),
        shot_count: k,
    })
}
