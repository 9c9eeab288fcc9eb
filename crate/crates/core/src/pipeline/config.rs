//! Run configuration, stored as TOML in every run directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augmentor::AugmentorConfig;
use crate::contrastive::PretrainConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::mra::MraConfig;

/// Episodic training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FewShotConfig {
    pub ways: usize,
    pub shots: usize,
    /// Query clouds per way.
    pub queries: usize,
    /// Training episodes; one episode is one optimizer step.
    pub episodes: usize,
    pub encoder_lr: f64,
    /// Learning rate of every module other than the encoder.
    pub lr: f64,
    /// Weight of the center loss in the total loss.
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub proto_count: usize,
    pub use_mra: bool,
    pub use_center: bool,
    /// Treat class centers as constants when differentiating the center loss.
    pub detach_centers: bool,
    /// Row-wise top-k affinity sparsification; 0 keeps the dense graph.
    pub sparsify_k: usize,
    pub mra: MraConfig,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self {
            ways: 2,
            shots: 1,
            queries: 1,
            episodes: 2000,
            encoder_lr: 5e-4,
            lr: 1e-3,
            lambda: 0.1,
            gamma: 0.9,
            eta: 1.0,
            proto_count: 100,
            use_mra: true,
            use_center: true,
            detach_centers: true,
            sparsify_k: 0,
            mra: MraConfig::default(),
        }
    }
}

impl FewShotConfig {
    pub fn sparsify(&self) -> Option<usize> {
        (self.sparsify_k > 0).then_some(self.sparsify_k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            ways: 2,
            shots: 1,
            queries: 1,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: parameter initialization and episode order derive from it.
    pub seed: u64,
    /// Dataset directory the run was trained on.
    pub data: String,
    /// Pretrained encoder checkpoint, if any.
    pub encoder_checkpoint: String,
    pub encoder: EncoderConfig,
    pub augmentor: AugmentorConfig,
    pub pretrain: PretrainConfig,
    pub fewshot: FewShotConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Desk-scale defaults.
    /// The encoder sees only relative offsets in its first layer, since
    /// absolute coordinates of normalized scenes carry little class signal.
    pub fn desk() -> Self {
        let mut c = Self {
            seed: 1,
            data: String::new(),
            encoder_checkpoint: String::new(),
            encoder: EncoderConfig::default(),
            augmentor: AugmentorConfig::default(),
            pretrain: PretrainConfig::default(),
            fewshot: FewShotConfig::default(),
            eval: EvalConfig::default(),
        };
        c.encoder.hidden = 32;
        c.encoder.output = 32;
        c.encoder.k = 12;
        c.encoder.edge_relative_only = true;
        c.fewshot.proto_count = 10;
        c.fewshot.mra.n_k = 16;
        c.pretrain.temperature = 0.1;
        c
    }

    /// Published-scale hyperparameters (far beyond a desk CPU budget).
    pub fn published() -> Self {
        let mut c = Self::desk();
        c.encoder = EncoderConfig::default();
        c.encoder.k = 200;
        c.fewshot.proto_count = 100;
        c.pretrain = PretrainConfig::default();
        c.pretrain.epochs = 120;
        c.fewshot.episodes = 40_000;
        c.fewshot.mra.n_k = 250;
        c
    }

    /// Checks every field against its documented range.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let non_negative = |x: f64| x.is_finite() && x >= 0.0;
        let f = &self.fewshot;
        let p = &self.pretrain;
        let e = &self.encoder;
        if e.layers == 0 || e.hidden == 0 || e.output == 0 || e.k == 0 || e.input_channels < 3 {
            return bad("encoder widths, depth and k must be positive with at least 3 input channels");
        }
        if self.augmentor.embed_dim == 0 || self.augmentor.noise_dim == 0 {
            return bad("augmentor widths must be positive");
        }
        if !non_negative(self.augmentor.translate_max) || !non_negative(self.augmentor.jitter_sigma) {
            return bad("augmentor random-layer magnitudes must be finite and non-negative");
        }
        if p.batch == 0 || !non_negative(p.lr) || !non_negative(p.augmentor_lr) {
            return bad("pretrain batch must be positive and learning rates non-negative");
        }
        if !non_negative(p.beta) || !positive(p.temperature) {
            return bad("pretrain beta must be non-negative and temperature positive");
        }
        if f.ways == 0 || f.shots == 0 || f.queries == 0 || f.proto_count == 0 {
            return bad("ways, shots, queries and proto_count must be positive");
        }
        if !non_negative(f.encoder_lr) || !non_negative(f.lr) || !non_negative(f.lambda) {
            return bad("learning rates and lambda must be finite and non-negative");
        }
        if !(f.gamma.is_finite() && (0.0..1.0).contains(&f.gamma)) {
            return bad("gamma must lie in [0, 1)");
        }
        if !positive(f.eta) {
            return bad("eta must be positive");
        }
        if !(f.mra.fps_ratio > 0.0 && f.mra.fps_ratio <= 1.0) {
            return bad("fps ratio must lie in (0, 1]");
        }
        if f.mra.heads == 0 || e.output % f.mra.heads != 0 {
            return bad("attention heads must divide the encoder output width");
        }
        let ev = &self.eval;
        if ev.ways == 0 || ev.shots == 0 || ev.queries == 0 {
            return bad("evaluation ways, shots and queries must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}
