//! Two-phase single-path search with a latency-gated loss.
//!
//! Phase 1 trains the shared weights while every superkernel samples one
//! of its choices uniformly per step. Phase 2 trains weights and thresholds
//! jointly under `CE + λ₁·ln(1 + λ₂·relu(ΣL − T))`, where ΣL is the
//! table-driven latency expected under the current threshold decisions.

mod baseline;
mod engine;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, BlockConfig, BlockDecision, Expansion};
use crate::autodiff::{AutodiffError, Graph, Var};
use crate::latency::LatencyError;
use crate::network::NetworkError;
use crate::superkernel::{SuperBlock, SuperkernelNodes};

pub use self::baseline::{
    latency_percentile, random_architecture, random_search, sample_latency_matched, Candidate, CandidateRow, RandomSearchResult, MAX_DRAWS,
};
pub use self::engine::{
    extract_architecture, greedy_repair, metrics_csv, phase1_train, phase2_train, run_search, sample_decisions,
    supernet_latency, MetricsRow,
    RepairStep, SearchOutcome, SearchSummary,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid search config: {0}")]
    Config(String),
}

impl From<AutodiffError> for SearchError {
    fn from(e: AutodiffError) -> Self {
        SearchError::Network(NetworkError::Autodiff(e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Target latency in milliseconds.
    pub target_latency_ms: f64,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub grad_clip: Option<f64>,
    pub bn_momentum: f64,
    /// Learning-rate multiplier for thresholds in phase 2.
    pub threshold_lr_scale: f64,
    /// At the start of phase 2 each threshold is set to its shell's squared
    /// norm minus this margin, so every shell starts selected and close to
    /// its decision boundary.
    pub threshold_margin: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lambda1: 15.0,
            lambda2: 100.0,
            target_latency_ms: 1.0,
            phase1_epochs: 8,
            phase2_epochs: 2,
            lr: 0.05,
            lr_decay: 0.97,
            lr_decay_epochs: 2.4,
            momentum: 0.9,
            batch_size: 32,
            grad_clip: Some(5.0),
            bn_momentum: 0.1,
            threshold_lr_scale: 1.0,
            threshold_margin: 5.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be >= 0");
        }
        if !(self.target_latency_ms > 0.0) {
            return bad("target_latency_ms must be > 0");
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("batch_size >= 1, lr > 0 and momentum in [0, 1) required");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay_epochs > 0.0) {
            return bad("lr_decay and lr_decay_epochs must be > 0");
        }
        Ok(())
    }
}

/// Weight of one superkernel choice: `F_k·G_e`, or `G_0` for the zero
/// expansion (where the kernel size does not matter and `Σ_k F_k = 1`).
fn choice_weights(
    g: &mut Graph,
    block: &SuperBlock,
    nodes: &[SuperkernelNodes],
) -> Result<Vec<Vec<((u32, Expansion), Var)>>, AutodiffError> {
    let mut out = Vec::with_capacity(nodes.len());
    for (sk, n) in block.superkernels.iter().zip(nodes) {
        let mut ws = Vec::new();
        for (ei, &e) in sk.spec.expansions().iter().enumerate() {
            if e.is_zero() {
                ws.push(((sk.spec.kernel_sizes()[0], e), n.g[ei]));
            } else {
                for (ki, &k) in sk.spec.kernel_sizes().iter().enumerate() {
                    ws.push(((k, e), g.mul(n.f[ki], n.g[ei])?));
                }
            }
        }
        out.push(ws);
    }
    Ok(out)
}

/// `L = Σ_d P(canonicalize(d)) · Π_j F_{j,k_j}·G_{j,e_j}` over every raw
/// decision `d` of the block.
pub fn differentiable_block_latency(
    g: &mut Graph,
    block: &SuperBlock,
    nodes: &[SuperkernelNodes],
    table: &BTreeMap<BlockConfig, f64>,
    block_index: usize,
) -> Result<Var, SearchError> {
    let weights = choice_weights(g, block, nodes)?;
    let mut terms = Vec::new();
    let mut idx = vec![0usize; weights.len()];
    loop {
        let mut kernels = Vec::with_capacity(idx.len());
        let mut exps = Vec::with_capacity(idx.len());
        let mut prod = weights[0][idx[0]].1;
        for (j, &i) in idx.iter().enumerate() {
            let ((k, e), w) = weights[j][i];
            kernels.push(k);
            exps.push(e);
            if j > 0 {
                prod = g.mul(prod, w)?;
            }
        }
        let decision = BlockDecision::new(kernels, exps);
        match block.spec.canonical_config(&decision) {
            Ok(cfg) => {
                let p = *table.get(&cfg).ok_or_else(|| LatencyError::MissingKey { block: block_index, config: cfg.to_string() })?;
                terms.push(g.affine(prod, p, 0.0)?);
            }
            // a skip decision on a block that cannot be skipped has F·G = 0
            Err(ArchError::InvalidDecision(_)) => {}
            Err(e) => return Err(e.into()),
        }
        // odometer increment
        let mut j = idx.len();
        loop {
            if j == 0 {
                return Ok(g.add_n(&terms)?);
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < weights[j].len() {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Loss node and the latency term's value.
pub struct GatedLoss {
    pub loss: Var,
    pub latency_term: Var,
}

/// `CE + λ₁·ln(1 + λ₂·relu(ΣL − T))`.
pub fn latency_gated_loss(
    g: &mut Graph,
    ce: Var,
    total_latency: Var,
    cfg: &SearchConfig,
) -> Result<GatedLoss, AutodiffError> {
    let over = g.affine(total_latency, 1.0, -cfg.target_latency_ms)?;
    let over = g.relu_scalar(over)?;
    let inner = g.affine(over, cfg.lambda2, 1.0)?;
    let log = g.log_scalar(inner)?;
    let latency_term = g.affine(log, cfg.lambda1, 0.0)?;
    let loss = g.add(ce, latency_term)?;
    Ok(GatedLoss { loss, latency_term })
}
