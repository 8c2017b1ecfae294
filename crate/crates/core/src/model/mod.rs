//! The anchor-propagation network and its configuration.

mod agreement;
mod anchors;
mod network;
mod params;

pub use agreement::{binary_jsd, mutual_agreement, AgreementTrace, LOG_CLAMP};
pub use anchors::{identify_global_anchors, identify_local_anchors, window_bounds};
pub use network::{
    classify, encode_unimodal, forward, fuse_anchors, predict_modality_probs, project_features,
    infer, propagate_anchors, sinusoidal_positions, AnchorSet, AnchorVars, FeatureSequence, ForwardOutput, Inference,
    ModelInput, PredictionOutputs, PredictionVars,
};
pub use params::{ModelParameters, ParamVars};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

/// How the divergence between modality predictions is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JsdVariant {
    /// `½ KL(P_a ‖ P̄) + ½ KL(P_v ‖ P̄)`
    #[default]
    Standard,
    /// `½ KL(P̄ ‖ P_a) + ½ KL(P̄ ‖ P_v)`, clipped to `[0, 1]`.
    AsWritten,
}

/// Temporal aggregation of per-timestep probabilities into a video score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MilPool {
    #[default]
    Mean,
    Max,
}

/// Which modality's anchors feed the fused anchor features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorModality {
    #[default]
    Both,
    Audio,
    Visual,
}

/// Features the agreement score is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AgreementSource {
    /// Projected features, before the unimodal transformers.
    #[default]
    Projected,
    /// Outputs of the unimodal transformers.
    Encoded,
}

/// Switches that remove parts of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub global_anchors: bool,
    pub local_anchors: bool,
    /// Skip cross-attention to anchors entirely.
    pub anchor_bypass: bool,
    pub anchor_modality: AnchorModality,
    pub agreement_source: AgreementSource,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            global_anchors: true,
            local_anchors: true,
            anchor_bypass: false,
            anchor_modality: AnchorModality::Both,
            agreement_source: AgreementSource::Projected,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// Padded sequence length `T`.
    pub max_len: usize,
    /// Raw audio feature width.
    pub audio_dim: usize,
    /// Raw visual feature width.
    pub visual_dim: usize,
    /// Shared channel width `d`.
    pub dim: usize,
    pub num_classes: usize,
    /// Global anchor count `K`.
    pub global_anchors: usize,
    /// Anchors per window `k`.
    pub local_anchors: usize,
    /// Window count `M`.
    pub windows: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub proj_bias: bool,
    /// Biases on both layers of the per-modality probability heads.
    pub meae_bias: bool,
    pub leaky_slope: f64,
    pub jsd_variant: JsdVariant,
    pub mil_pool: MilPool,
    pub ablation: Ablation,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            max_len: 224,
            audio_dim: 128,
            visual_dim: 2048,
            dim: 256,
            num_classes: 100,
            global_anchors: 10,
            local_anchors: 4,
            windows: 14,
            heads: 4,
            conv_kernel: 3,
            proj_bias: true,
            meae_bias: true,
            leaky_slope: 0.01,
            jsd_variant: JsdVariant::Standard,
            mil_pool: MilPool::Mean,
            ablation: Ablation::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError(m));
        if self.max_len == 0 || self.dim == 0 || self.num_classes == 0 {
            return fail("max_len, dim and num_classes must be positive".into());
        }
        if self.audio_dim == 0 || self.visual_dim == 0 {
            return fail("raw feature dims must be positive".into());
        }
        if self.global_anchors == 0 || self.global_anchors > self.max_len {
            return fail(format!(
                "global anchor count {} must lie in [1, {}]",
                self.global_anchors, self.max_len
            ));
        }
        if self.windows == 0 {
            return fail("window count must be at least 1".into());
        }
        let per_window = self.max_len / self.windows;
        if self.local_anchors == 0 || self.local_anchors > per_window {
            return fail(format!(
                "local anchor count {} must lie in [1, floor(T/M) = {}]",
                self.local_anchors, per_window
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv kernel {} must be odd", self.conv_kernel));
        }
        let a = &self.ablation;
        if !a.global_anchors && !a.local_anchors && !a.anchor_bypass {
            return fail("disabling both anchor mechanisms requires anchor bypass".into());
        }
        Ok(())
    }

    pub fn local_anchor_total(&self) -> usize {
        self.windows * self.local_anchors
    }

    /// Whether anchors are selected and fused at all.
    pub fn uses_anchors(&self) -> bool {
        !self.ablation.anchor_bypass
    }
}
