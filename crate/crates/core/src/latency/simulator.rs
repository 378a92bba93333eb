use std::collections::VecDeque;

use crate::arch::{BlockConfig, BlockGeometry, BlockKind, Topology};

use super::analytical::passthrough_ms;
use super::workload::{block_layers, head_layers, se_layers, stem_layers, LayerWork};
use super::{check_geometry, CostModelParams, LatencyError, LatencyModel};

/// Event-driven replay of the tile pipeline in whole clock cycles.
///
/// One DMA engine serves reads and writes in request order. A tile's read
/// is requested as soon as one of the input buffers frees up, its write as
/// soon as its compute finishes. Compute is in order on one unit. Layers
/// run back to back, each starting when the previous one has fully drained.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Simulator(pub CostModelParams);

struct Clock<'a> {
    p: &'a CostModelParams,
    latency_cycles: u64,
}

impl<'a> Clock<'a> {
    fn new(p: &'a CostModelParams) -> Self {
        Self { p, latency_cycles: (p.dram_latency * p.clock_hz).round() as u64 }
    }

    fn transfer(&self, bytes: u64) -> u64 {
        if bytes == 0 {
            return 0;
        }
        self.latency_cycles + (bytes as f64 * self.p.clock_hz / self.p.dram_bandwidth).ceil() as u64
    }

    fn compute(&self, macs: u64, rate: f64) -> u64 {
        (macs as f64 / rate).ceil() as u64
    }
}

fn share(total: u64, i: usize, n: usize) -> u64 {
    let n = n as u128;
    let t = total as u128;
    ((t * (i as u128 + 1)) / n - (t * i as u128) / n) as u64
}

fn simulate_layer(l: &LayerWork, start: u64, clock: &Clock) -> u64 {
    let p = clock.p;
    let n = l.tiles;
    let buffers = if p.double_buffered { 2 } else { 1 };
    let rate = l.unit.rate(p);
    let resident = l.weight_bytes as usize <= p.weight_buffer;
    let mut dma_free = start;
    if resident {
        dma_free += clock.transfer(l.weight_bytes);
    }
    let streamed = if resident { 0 } else { l.weight_bytes };

    let mut compute_free = start;
    let mut compute_end = Vec::with_capacity(n);
    let mut writes: VecDeque<(u64, u64)> = VecDeque::new();
    let mut next = 0;
    while next < n || !writes.is_empty() {
        let load_req = if next < n {
            if next < buffers {
                start
            } else {
                compute_end[next - buffers]
            }
        } else {
            u64::MAX
        };
        let write_req = writes.front().map_or(u64::MAX, |w| w.0);
        if write_req <= load_req {
            let (ready, bytes) = writes.pop_front().expect("pending write");
            dma_free = dma_free.max(ready) + clock.transfer(bytes);
        } else {
            let bytes = share(l.input_bytes, next, n) + streamed;
            let loaded = dma_free.max(load_req) + clock.transfer(bytes);
            dma_free = loaded;
            let done = loaded.max(compute_free) + clock.compute(share(l.macs, next, n), rate);
            compute_free = done;
            compute_end.push(done);
            writes.push_back((done, share(l.output_bytes, next, n)));
            next += 1;
        }
    }
    dma_free.max(compute_free)
}

fn simulate_layers(layers: &[LayerWork], p: &CostModelParams) -> f64 {
    let clock = Clock::new(p);
    let mut t = 0;
    for l in layers {
        t = simulate_layer(l, t, &clock);
    }
    t as f64 / p.clock_hz * 1e3
}

/// Simulated latency of one block, in milliseconds.
pub fn simulate_block_latency(
    geom: &BlockGeometry,
    kind: BlockKind,
    config: &BlockConfig,
    params: &CostModelParams,
) -> Result<f64, LatencyError> {
    params.validate()?;
    check_geometry(geom)?;
    if config.is_skip() {
        return Ok(passthrough_ms(params));
    }
    Ok(simulate_layers(&block_layers(geom, kind, config, params)?, params))
}

impl LatencyModel for Simulator {
    fn block_ms(&self, geom: &BlockGeometry, kind: BlockKind, config: &BlockConfig) -> Result<f64, LatencyError> {
        simulate_block_latency(geom, kind, config, &self.0)
    }

    fn stem_ms(&self, topology: &Topology) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(simulate_layers(&stem_layers(topology, &self.0), &self.0))
    }

    fn head_ms(&self, topology: &Topology) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(simulate_layers(&head_layers(topology, &self.0), &self.0))
    }

    fn se_ms(&self, geom: &BlockGeometry, se_reduction: f64) -> Result<f64, LatencyError> {
        self.0.validate()?;
        Ok(simulate_layers(&se_layers(geom, se_reduction, &self.0)?, &self.0))
    }
}
