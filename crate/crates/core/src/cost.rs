//! Analytical FLOPs and activation-memory formulas.
//!
//! Attention work grows with the square of the context while the projections,
//! FFN and norms grow linearly: a document of `l` tokens costs `alpha * l^2`
//! attention FLOPs plus `beta * l` context-independent FLOPs per layer, and
//! holds `gamma * l` bytes of activations.

use serde::{Deserialize, Serialize};

use crate::model::{Bytes, Chunk, ClusterConfig, Flops, Item, ModelConfig, Tokens};

/// Per-layer FLOPs of the context-independent layers for one token:
/// Q and O projections (h x h each), K and V projections (h x h_kv each) and
/// a gated MLP (three h x i matrices), two FLOPs per multiply-add.
pub fn linear_flops_per_token(config: &ModelConfig) -> u64 {
    let h = config.hidden;
    2 * h * (2 * h + config.kv_hidden + 3 * config.ffn_intermediate)
}

/// Split of [`linear_flops_per_token`] into the part before core attention
/// (QKV projections) and the part after it (O projection and MLP).
pub fn linear_flops_split(config: &ModelConfig) -> (u64, u64) {
    let h = config.hidden;
    let pre = 2 * h * (h + config.kv_hidden);
    let post = 2 * h * (h + 3 * config.ffn_intermediate);
    (pre, post)
}

/// Coefficients of `FLOPs(l) = alpha l^2 + beta l` and `M(l) = gamma l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostCoefficients {
    /// Attention FLOPs per unit of causal work, per layer.
    pub alpha_ca: u64,
    /// Context-independent FLOPs per token, per layer.
    pub beta_linear: u64,
    /// Activation bytes per token across all layers.
    pub gamma_mem: u64,
}

impl CostCoefficients {
    pub fn new(alpha_ca: u64, beta_linear: u64, gamma_mem: u64) -> Self {
        Self {
            alpha_ca,
            beta_linear,
            gamma_mem,
        }
    }

    /// Derives per-layer coefficients from the architecture. `alpha` counts
    /// the score and PV matmuls (2 x 2 x hidden); `gamma` uses the common
    /// 34 x hidden bytes-per-token-per-layer estimate for 16-bit activations
    /// with selective recomputation.
    pub fn from_model(config: &ModelConfig) -> Self {
        Self {
            alpha_ca: 4 * config.hidden,
            beta_linear: linear_flops_per_token(config),
            gamma_mem: 34 * config.hidden * config.num_layers * config.bytes_per_element / 2,
        }
    }
}

/// Attention FLOPs of one item: `alpha * n_q (2 n_kv - n_q)` summed over its
/// query ranges.
pub fn ca_flops(item: &Item, coeff: &CostCoefficients) -> Flops {
    coeff.alpha_ca as u128 * item.work()
}

/// Attention FLOPs of a whole document of length `l`: `alpha * l^2`.
pub fn doc_ca_flops(length: Tokens, coeff: &CostCoefficients) -> Flops {
    coeff.alpha_ca as u128 * (length as u128) * (length as u128)
}

/// Evaluates `sum l = sum l'` and `sum l^2 = sum l'^2` exactly.
pub fn balance_conditions(chunk_a: &[Tokens], chunk_b: &[Tokens]) -> (bool, bool) {
    let sum = |c: &[Tokens]| c.iter().map(|&l| l as u128).sum::<u128>();
    let sq = |c: &[Tokens]| c.iter().map(|&l| (l as u128) * (l as u128)).sum::<u128>();
    (sum(chunk_a) == sum(chunk_b), sq(chunk_a) == sq(chunk_b))
}

pub fn activation_memory(chunk: &Chunk, coeff: &CostCoefficients) -> Bytes {
    coeff.gamma_mem * chunk.total_tokens()
}

/// Seconds of context-independent compute per token per layer on one logical device.
pub fn linear_time_per_token(coeff: &CostCoefficients, cluster: &ClusterConfig) -> f64 {
    coeff.beta_linear as f64 / (cluster.mfu_linear * cluster.device_peak_flops())
}
