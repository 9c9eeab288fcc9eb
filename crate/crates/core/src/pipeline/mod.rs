//! Orchestration: pretraining, episodic training, evaluation and gradient
//! verification.

pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rundir;
pub mod train;

pub use config::{EvalConfig, FewShotConfig, RunConfig};
pub use eval::{chance_baseline, evaluate, export_episode, nearest_prototype_baseline, Confusion, EvalReport};
pub use gradcheck::{grad_check, Component, GradCheck};
pub use model::{episode_forward, predict_episode, EpisodeLosses, FewShotModel, Trainer};
pub use rundir::RunDir;
pub use train::{derive_seed, load_model, run_fewshot_train, run_pretrain, PretrainOutcome, TrainOutcome};
