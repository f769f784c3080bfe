//! The four mask families and the pruners that drive them.

pub mod head;
pub mod layer;
pub mod token;
pub mod weight;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};
use crate::tensor::TensorError;

pub use head::{head_importance, prune_heads, regrow_heads, HeadMask, HeadScoreBoard};
pub use layer::{
    apply_layer_mask, exhaustive_layer_prune, finalize_layer_prune, sample_layer_mask, LayerMask,
    LayerMode,
};
pub use token::{
    apply_token_mask, keep_count, perturb_scores, sample_gumbel, score_tokens, select_topk,
    Selection, TokenMask, TokenPruneConfig,
};
pub use weight::{
    magnitude_prune, prune_count, regrow_weights, schedule_sparsity, PruneSchedule, WeightMasks,
};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sparsity {0} outside [0, 1)")]
    Sparsity(f64),
    #[error("cannot deactivate {wanted} heads while keeping one active head per layer (at most {allowed})")]
    TooManyHeads { wanted: usize, allowed: usize },
    #[error("cannot drop {wanted} of {available} prunable sublayers")]
    TooManyLayers { wanted: usize, available: usize },
    #[error("regrow count {wanted} exceeds {available} inactive units")]
    Regrow { wanted: usize, available: usize },
    #[error("no graphs to score")]
    NoGraphs,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PruneError>;

/// Everything that changes the forward pass away from the dense model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneState {
    pub heads: HeadMask,
    pub layers: LayerMask,
    pub weights: Option<WeightMasks>,
    pub tokens: Option<TokenPruneConfig>,
}

impl PruneState {
    /// All heads and sublayers active, no weight masks, no token pruning.
    pub fn identity(config: &ModelConfig) -> Self {
        Self {
            heads: HeadMask::all_active(config.num_transformer_layers, config.num_heads),
            layers: LayerMask::identity(config),
            weights: None,
            tokens: None,
        }
    }
}

/// `⌈x⌉` with a small tolerance so `0.25 * 16` lands on 4, not 5.
pub fn ceil_count(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r.max(0.0) as usize
    } else {
        x.ceil().max(0.0) as usize
    }
}

pub(crate) fn check_sparsity(s: f64) -> Result<()> {
    if (0.0..1.0).contains(&s) {
        Ok(())
    } else {
        Err(PruneError::Sparsity(s))
    }
}
