use crate::arch::{BlockConfig, BlockGeometry, BlockKind, Topology};

use super::workload::{block_layers, head_layers, se_layers, stem_layers, LayerWork};
use super::{check_geometry, CostModelParams, LatencyError, LatencyModel};

/// Per-layer totals, in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Breakdown {
    /// Σ MACs / (rate · clock)
    pub compute_ms: f64,
    /// Σ DRAM time (transaction latency plus bytes / bandwidth)
    pub memory_ms: f64,
    /// Pipelined total.
    pub latency_ms: f64,
}

/// Closed form of the tile pipeline: with double buffering a layer costs
/// `max(compute, memory)` plus one tile of fill, without it the two add up.
pub(crate) fn layer_breakdown(l: &LayerWork, p: &CostModelParams) -> Breakdown {
    let n = l.tiles as f64;
    let compute = l.macs as f64 / l.unit.rate(p) / p.clock_hz;
    let c_tile = compute / n;
    let resident = l.weight_bytes as usize <= p.weight_buffer;
    let preload = if resident && l.weight_bytes > 0 { p.dram_latency + l.weight_bytes as f64 / p.dram_bandwidth } else { 0.0 };
    let streamed = if resident { 0.0 } else { l.weight_bytes as f64 };
    // one read and one write transaction per tile
    let m_tile = 2.0 * p.dram_latency + ((l.input_bytes + l.output_bytes) as f64 / n + streamed) / p.dram_bandwidth;
    let memory = preload + n * m_tile;
    let total = if p.double_buffered {
        preload + m_tile + (n - 1.0) * c_tile.max(m_tile) + c_tile
    } else {
        preload + n * (m_tile + c_tile)
    };
    Breakdown { compute_ms: compute * 1e3, memory_ms: memory * 1e3, latency_ms: total * 1e3 }
}

fn sum_layers(layers: &[LayerWork], p: &CostModelParams) -> Breakdown {
    layers.iter().map(|l| layer_breakdown(l, p)).fold(Breakdown::default(), |a, b| Breakdown {
        compute_ms: a.compute_ms + b.compute_ms,
        memory_ms: a.memory_ms + b.memory_ms,
        latency_ms: a.latency_ms + b.latency_ms,
    })
}

/// Latency of passing a feature map through a skip connection.
pub(crate) fn passthrough_ms(p: &CostModelParams) -> f64 {
    p.dram_latency * 1e3
}

pub fn analytical_breakdown(
    geom: &BlockGeometry,
    kind: BlockKind,
    config: &BlockConfig,
    params: &CostModelParams,
) -> Result<Breakdown, LatencyError> {
    params.validate()?;
    check_geometry(geom)?;
    if config.is_skip() {
        let t = passthrough_ms(params);
        return Ok(Breakdown { compute_ms: 0.0, memory_ms: t, latency_ms: t });
    }
    Ok(sum_layers(&block_layers(geom, kind, config, params)?, params))
}

pub fn analytical_block_latency(
    geom: &BlockGeometry,
    config: &BlockConfig,
    params: &CostModelParams,
) -> Result<f64, LatencyError> {
    Ok(analytical_breakdown(geom, BlockKind::MixconvMbconv, config, params)?.latency_ms)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Analytical(pub CostModelParams);

impl LatencyModel for Analytical {
    fn block_ms(&self, geom: &BlockGeometry, kind: BlockKind, config: &BlockConfig) -> Result<f64, LatencyError> {
        Ok(analytical_breakdown(geom, kind, config, &self.0)?.latency_ms)
    }

    fn stem_ms(&self, topology: &Topology) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(sum_layers(&stem_layers(topology, &self.0), &self.0).latency_ms)
    }

    fn head_ms(&self, topology: &Topology) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(sum_layers(&head_layers(topology, &self.0), &self.0).latency_ms)
    }

    fn se_ms(&self, geom: &BlockGeometry, se_reduction: f64) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(sum_layers(&se_layers(geom, se_reduction, &self.0)?, &self.0).latency_ms)
    }
}
