use rgalign_core::align::{AlignConfig, AlignMode};
use rgalign_core::bestofn::{Strategy, V4Preference};
use rgalign_core::qerec::QERecConfig;
use rgalign_core::synthgen::GeneratorConfig;
use rgalign_core::verbalizer::DEFAULT_VOCAB;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Everything a run depends on. `apply_seed` copies the top-level seed into
/// every component so one flag controls all randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub qerec: QERecConfig,
    pub align: AlignConfig,
    pub strategy: Strategy,
    pub v4_preference: V4Preference,
    /// Cut-off of the NDCG reward.
    pub reward_k: usize,
    pub vocab: usize,
    /// Teacher qualities in priority order (CompassMax, Gemini, GPT5).
    pub teacher_qualities: Vec<f64>,
    /// Noise added to the latent need before it becomes the reward model's
    /// query embedding.
    pub oracle_query_noise: f64,
    /// Training samples used in Stage 2; 0 means all clicked impressions.
    pub stage2_samples: usize,
    /// Alignment modes to run. The configured `align.mode` must be one of
    /// them; it feeds the recalibrated "Full" row and later iterations.
    pub modes: Vec<AlignMode>,
    /// Closed-loop rounds of Stages 2 and 3.
    pub iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            qerec: QERecConfig::default(),
            align: AlignConfig::default(),
            strategy: Strategy::V1,
            v4_preference: V4Preference::Cosine,
            reward_k: 3,
            vocab: DEFAULT_VOCAB,
            teacher_qualities: vec![0.9, 0.85, 0.8],
            oracle_query_noise: 0.3,
            stage2_samples: 4000,
            modes: vec![AlignMode::SftCl, AlignMode::SftDpo],
            iterations: 1,
        };
        cfg.apply_seed(0);
        cfg
    }
}

impl PipelineConfig {
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.generator.seed = seed;
        self.qerec.seed = seed;
        self.align.seed = seed;
    }

    pub fn validate(&self) -> AppResult<()> {
        self.generator.validate()?;
        self.qerec.validate()?;
        self.align.validate()?;
        let bad = |m: String| Err(AppError::Invalid(m));
        if self.qerec.dim != self.generator.dim {
            return bad(format!("qerec.dim {} differs from generator.dim {}", self.qerec.dim, self.generator.dim));
        }
        if self.teacher_qualities.len() != 3 || self.teacher_qualities.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return bad("teacher_qualities needs three values in [0, 1]".into());
        }
        if self.reward_k == 0 || self.vocab < 4 || self.iterations == 0 {
            return bad("reward_k, iterations must be positive and vocab at least 4".into());
        }
        if !(self.oracle_query_noise >= 0.0) {
            return bad("oracle_query_noise must be non-negative".into());
        }
        if !self.modes.contains(&self.align.mode) {
            return bad(format!("align.mode {} is not among modes", self.align.mode.as_str()));
        }
        if self.qerec.omega >= 1.0 {
            return bad("qerec.omega must be below 1 so the query tower is used".into());
        }
        Ok(())
    }
}
