//! Pretraining and episodic training loops.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::model::{load_encoder, EpisodeLosses, FewShotModel, Trainer, ENCODER_PREFIX};
use super::rundir::{RunDir, AUGMENTOR_CKPT, ENCODER_CKPT, HEAD_CKPT, MODEL_CKPT};
use crate::augmentor::Augmentor;
use crate::checkpoint::Archive;
use crate::contrastive::{pretrain_step, PretrainState};
use crate::data::{sample_episode, Dataset, Episode, LabeledCloud, SamplingMode};
use crate::encoder::{ClassifierHead, Encoder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mixes a base seed with a stream id and an index (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_PRETRAIN: u64 = 1;
const STREAM_TRAIN: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Clouds free of every test class.
pub fn train_clouds(dataset: &Dataset) -> Vec<&LabeledCloud<f32>> {
    let test = dataset.split.test_classes();
    dataset
        .clouds
        .iter()
        .filter(|c| c.labels.iter().all(|l| !test.contains(l)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T: Scalar> {
    pub state: PretrainState<T>,
    /// `L_c` per iteration, before each update.
    pub losses: Vec<f64>,
}

/// Contrastive pretraining on the train-split scenes. Writes the loss curve and
/// the encoder, head and augmentor checkpoints into `run`.
pub fn run_pretrain<T: Scalar>(config: &RunConfig, dataset: &Dataset, run: &RunDir) -> Result<PretrainOutcome<T>> {
    config.validate()?;
    config.save(&run.config())?;
    let p = &config.pretrain;
    let mut clouds: Vec<_> = train_clouds(dataset).into_iter().map(|c| c.cloud.cast::<T>()).collect();
    if p.max_scenes > 0 {
        clouds.truncate(p.max_scenes);
    }
    if clouds.is_empty() {
        return Err(Error::InvalidInput("no train-split scenes to pretrain on".into()));
    }
    let classes = if p.head_classes > 0 {
        p.head_classes
    } else {
        dataset.split.train_classes().len() + 1
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PRETRAIN, 0));
    let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
    let head = ClassifierHead::new(encoder.output_dim(), classes, &mut rng);
    let augmentor = Augmentor::new(config.augmentor.clone(), &mut rng)?;
    let mut state = PretrainState::new(encoder, head, augmentor, p);
    let mut curve = String::new();
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..clouds.len()).collect();
    let mut iteration = 0;
    for epoch in 0..p.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PRETRAIN, 1 + epoch as u64));
        order.shuffle(&mut shuffle);
        for batch in order.chunks(p.batch) {
            let refs: Vec<_> = batch.iter().map(|&i| &clouds[i]).collect();
            let seed = derive_seed(config.seed, STREAM_PRETRAIN, 1 << 32 | iteration as u64);
            let l = pretrain_step(&mut state, &refs, iteration, seed, p)?;
            let lc = l.contrastive.as_f64();
            losses.push(lc);
            writeln!(curve, "{iteration} {lc}").expect("string write");
            if iteration % 20 == 0 {
                log::info!("pretrain epoch {epoch} iteration {iteration}: L_c = {lc:.5}");
            }
            iteration += 1;
        }
    }
    write(&run.loss_curve(), &curve)?;
    let manifest = |a: Archive| {
        a.with_manifest("C", config.encoder.output)
            .with_manifest("L_e", config.encoder.layers)
            .with_manifest("k_enc", config.encoder.k)
            .with_manifest("N_c", classes)
    };
    let mut enc = manifest(Archive::new());
    enc.add_module(ENCODER_PREFIX, &state.encoder);
    enc.save(&run.checkpoint(ENCODER_CKPT))?;
    let mut head = manifest(Archive::new());
    head.add_module("head/", &state.head);
    head.save(&run.checkpoint(HEAD_CKPT))?;
    let mut aug = manifest(Archive::new());
    aug.add_module("augmentor/", &state.augmentor);
    aug.save(&run.checkpoint(AUGMENTOR_CKPT))?;
    Ok(PretrainOutcome { state, losses })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: FewShotModel<T>,
    /// Losses per episode; `None` for skipped degenerate episodes.
    pub losses: Vec<Option<EpisodeLosses>>,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn skipped(&self) -> usize {
        self.losses.iter().filter(|l| l.is_none()).count()
    }
}

/// Training episodes must only ever see train-split classes.
fn audit_episode<T: Scalar>(episode: &Episode<T>, dataset: &Dataset, index: usize) -> Result<()> {
    let test = dataset.split.test_classes();
    let leaked = episode.classes.iter().any(|c| test.contains(c))
        || episode
            .support
            .iter()
            .map(|s| s.source)
            .chain(episode.query_sources.iter().copied())
            .any(|src| dataset.clouds[src].labels.iter().any(|l| test.contains(l)));
    if leaked {
        return Err(Error::Config(format!("training episode {index} touches a test-split class")));
    }
    Ok(())
}

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::EmptyClass { .. } | Error::DegenerateGraph(_) | Error::Solver(_))
}

/// Draws training episode `index` of a run.
pub fn training_episode<T: Scalar>(config: &RunConfig, clouds: &[LabeledCloud<T>], dataset: &Dataset, index: usize) -> Result<Episode<T>> {
    let f = &config.fewshot;
    sample_episode(
        clouds,
        &dataset.split,
        SamplingMode::Train,
        f.ways,
        f.shots,
        f.queries,
        derive_seed(config.seed, STREAM_TRAIN, index as u64),
    )
}

/// Episodic training. Writes `metrics` and the final model checkpoint into `run`.
/// Degenerate episodes are skipped, logged and recorded as `NaN` lines.
pub fn run_fewshot_train<T: Scalar>(
    config: &RunConfig,
    dataset: &Dataset,
    run: &RunDir,
    encoder_checkpoint: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    config.save(&run.config())?;
    let f = &config.fewshot;
    let mut model = FewShotModel::<T>::new(config)?;
    if let Some(path) = encoder_checkpoint {
        load_encoder(&mut model.encoder, &Archive::load(path)?)?;
    }
    let clouds: Vec<LabeledCloud<T>> = dataset.clouds.iter().map(LabeledCloud::cast).collect();
    let mut trainer = Trainer::new(f);
    let mut metrics = String::new();
    let mut losses = Vec::with_capacity(f.episodes);
    for e in 0..f.episodes {
        let episode = training_episode(config, &clouds, dataset, e)?;
        audit_episode(&episode, dataset, e)?;
        match trainer.step(&mut model, &episode, f) {
            Ok(l) if !l.total.is_finite() => {
                return Err(Error::NonFiniteLoss {
                    iteration: e,
                    seed: config.seed,
                    loss: l.total,
                });
            }
            Ok(l) => {
                writeln!(metrics, "{e} {} {} {}", l.label, l.center, l.total).expect("string write");
                if e % 50 == 0 {
                    log::info!("episode {e}: L_l = {:.5} L_r = {:.5} L = {:.5}", l.label, l.center, l.total);
                }
                losses.push(Some(l));
            }
            Err(err) if is_degenerate(&err) => {
                log::warn!("episode {e} skipped: {err}");
                writeln!(metrics, "{e} NaN NaN NaN").expect("string write");
                losses.push(None);
            }
            Err(err) => return Err(err),
        }
    }
    write(&run.metrics(), &metrics)?;
    model.save(&run.checkpoint(MODEL_CKPT))?;
    let outcome = TrainOutcome { model, losses };
    if outcome.skipped() > 0 {
        log::warn!("{} of {} training episodes were skipped", outcome.skipped(), f.episodes);
    }
    Ok(outcome)
}

/// Loads the trained model of a run.
pub fn load_model<T: Scalar>(run: &RunDir) -> Result<(RunConfig, FewShotModel<T>)> {
    let config = RunConfig::load(&run.config())?;
    let mut model = FewShotModel::new(&config)?;
    model.load_archive(&Archive::load(&run.checkpoint(MODEL_CKPT))?)?;
    Ok((config, model))
}
