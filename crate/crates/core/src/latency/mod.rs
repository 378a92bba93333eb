//! Block latency for an adder-tree NPU with dedicated depthwise, SE and
//! pooling units.
//!
//! Two models share one layer decomposition ([`workload`]): a closed-form
//! [`Analytical`] estimate and an event-driven [`Simulator`] that replays
//! tiles through a double-buffered DMA/compute pipeline with a single
//! shared DRAM queue. Either one (or a CSV file) fills a [`LatencyTable`],
//! which is what the search consumes.

mod analytical;
mod simulator;
mod table;
mod workload;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{BlockConfig, BlockGeometry, BlockKind, Topology};

pub use self::analytical::{analytical_block_latency, analytical_breakdown, Analytical, Breakdown};
pub use self::simulator::{simulate_block_latency, Simulator};
pub use self::table::{build_latency_table, estimate_network_latency, LatencyTable, DEFAULT_SE_REDUCTION};
pub use self::workload::{block_layers, se_layers, LayerWork, Unit};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid cost model parameters: {0}")]
    InvalidParams(String),
    #[error("latency table is missing entries: {}", .0.join(", "))]
    MissingEntries(Vec<String>),
    #[error("no latency entry for block {block} config {config}")]
    MissingKey { block: usize, config: String },
    #[error("config id `{0}` is not canonical")]
    NonCanonicalKey(String),
    #[error("table covers {table} blocks, architecture has {arch}")]
    BlockCountMismatch { table: usize, arch: usize },
    #[error("latency table file: {0}")]
    File(String),
}

/// NPU cost-model knobs. The defaults are calibration values, not
/// measurements of any particular chip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    pub mac_units: usize,
    pub clock_hz: f64,
    /// bytes per second
    pub dram_bandwidth: f64,
    /// seconds per DRAM transaction
    pub dram_latency: f64,
    /// on-chip weight buffer in bytes; larger layers re-stream weights per tile
    pub weight_buffer: usize,
    pub double_buffered: bool,
    pub dwconv_native: bool,
    pub se_native: bool,
    pub pooling_native: bool,
    pub bytes_per_element: usize,
    /// Lanes of the adder tree; ops without a dedicated unit use one lane.
    pub adder_tree_lanes: usize,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            mac_units: 256,
            clock_hz: 1e9,
            dram_bandwidth: 25.6e9,
            dram_latency: 100e-9,
            weight_buffer: 512 * 1024,
            double_buffered: true,
            dwconv_native: true,
            se_native: true,
            pooling_native: true,
            bytes_per_element: 1,
            adder_tree_lanes: 16,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<(), LatencyError> {
        let ok = self.mac_units > 0
            && self.clock_hz > 0.0
            && self.dram_bandwidth > 0.0
            && self.dram_latency >= 0.0
            && self.weight_buffer > 0
            && self.bytes_per_element > 0
            && self.adder_tree_lanes > 0
            && self.clock_hz.is_finite();
        if ok {
            Ok(())
        } else {
            Err(LatencyError::InvalidParams(format!("{self:?}")))
        }
    }
}

/// Source of per-block latencies in milliseconds.
pub trait LatencyModel {
    fn block_ms(&self, geom: &BlockGeometry, kind: BlockKind, config: &BlockConfig) -> Result<f64, LatencyError>;
    fn stem_ms(&self, topology: &Topology) -> Result<f64, LatencyError>;
    fn head_ms(&self, topology: &Topology) -> Result<f64, LatencyError>;
    /// Cost of an SE block on the output of a block with geometry `geom`.
    fn se_ms(&self, geom: &BlockGeometry, se_reduction: f64) -> Result<f64, LatencyError>;
}

/// Mean absolute percentage error of `estimate` against `reference`.
pub fn mape(estimate: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(estimate.len(), reference.len());
    let total: f64 = estimate.iter().zip(reference).map(|(e, r)| ((e - r) / r).abs()).sum();
    100.0 * total / estimate.len() as f64
}

pub(crate) fn check_geometry(geom: &BlockGeometry) -> Result<(), LatencyError> {
    if geom.height == 0 || geom.width == 0 || geom.in_channels == 0 || geom.out_channels == 0 || geom.stride == 0 {
        return Err(LatencyError::InvalidGeometry(format!("{geom:?}")));
    }
    Ok(())
}
