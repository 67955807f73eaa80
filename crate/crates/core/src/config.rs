//! Training and architecture configuration.

use serde::{Deserialize, Serialize};

use crate::cer::{GeneratorBlock, MaskingPolicy, ReconstructionNorm};
use crate::error::{CerdError, Result};

/// How gaps in a subject's token set are filled before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    #[default]
    Cer,
    StaticFill,
    ZeroFill,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    EvidenceDecomposition,
    PlainLinear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Moe,
    SharedFfn,
}

/// Meaning of the warm-up epochs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupMode {
    /// Reconstruction-only training of tokenizers and generators on fully observed subjects.
    #[default]
    Reconstruction,
    /// Linear learning-rate ramp on the full objective.
    LearningRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub warmup_mode: WarmupMode,
    pub dropout: f64,
    pub hidden: usize,
    pub tokens: usize,
    pub experts: usize,
    pub top_k: usize,
    pub heads: usize,
    pub routing_temperature: f64,
    pub attribution_temperature: f64,
    pub rec_weight: f64,
    pub load_balance_weight: f64,
    pub encoder_depth: usize,
    pub generator_depth: usize,
    pub generator_block: GeneratorBlock,
    pub completion: Completion,
    pub head: HeadKind,
    pub backbone: Backbone,
    pub rec_norm: ReconstructionNorm,
    pub masking: MaskingPolicy,
    pub sequential_completion: bool,
    /// Classification loss does not reach the generators through reconstructed tokens.
    pub detach_completion: bool,
    /// Masked reconstruction also trains on partially observed subjects with at
    /// least two observed modalities, masking one and conditioning on the rest.
    pub partial_reconstruction: bool,
    pub literal_sum: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 50,
            warmup_epochs: 5,
            warmup_mode: WarmupMode::Reconstruction,
            dropout: 0.5,
            hidden: 128,
            tokens: 16,
            experts: 16,
            top_k: 4,
            heads: 4,
            routing_temperature: 1.0,
            attribution_temperature: 1.0,
            rec_weight: 1.0,
            load_balance_weight: 0.0,
            encoder_depth: 2,
            generator_depth: 2,
            generator_block: GeneratorBlock::Decoder,
            completion: Completion::Cer,
            head: HeadKind::EvidenceDecomposition,
            backbone: Backbone::Moe,
            rec_norm: ReconstructionNorm::Mse,
            masking: MaskingPolicy::Uniform,
            sequential_completion: false,
            detach_completion: false,
            partial_reconstruction: false,
            literal_sum: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale widths (D=16, P=4), a faster learning rate and detached completion.
    pub fn desk() -> Self {
        TrainConfig {
            hidden: 16,
            tokens: 4,
            learning_rate: 5e-4,
            detach_completion: true,
            partial_reconstruction: true,
            ..TrainConfig::default()
        }
    }

    /// The smallest configuration exercising every component, used for gradient checks.
    pub fn tiny() -> Self {
        TrainConfig {
            hidden: 8,
            tokens: 2,
            experts: 4,
            top_k: 2,
            batch_size: 2,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("tokens", self.tokens),
            ("experts", self.experts),
            ("heads", self.heads),
            ("generator_depth", self.generator_depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CerdError::Parameter(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CerdError::Parameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CerdError::Parameter(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        for (name, t) in [
            ("routing_temperature", self.routing_temperature),
            ("attribution_temperature", self.attribution_temperature),
        ] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(CerdError::Parameter(format!("{name} must be positive, got {t}")));
            }
        }
        if !(self.rec_weight >= 0.0) || !(self.load_balance_weight >= 0.0) {
            return Err(CerdError::Parameter("loss weights must be non-negative".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(CerdError::Parameter(format!(
                "top_k must lie in 1..={}, got {}",
                self.experts, self.top_k
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(CerdError::Configuration(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}
