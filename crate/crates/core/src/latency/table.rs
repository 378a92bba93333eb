use std::collections::BTreeMap;
use std::str::FromStr;

use crate::arch::{enumerate_configs, BlockConfig, BlockSpec, ConcreteArchitecture, SupernetSpec, Topology};

use super::{LatencyError, LatencyModel};

pub const DEFAULT_SE_REDUCTION: f64 = 0.25;

/// Per-position latency of every canonical config, plus fixed costs.
/// All values in milliseconds.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub blocks: Vec<BTreeMap<BlockConfig, f64>>,
    pub stem: f64,
    pub head: f64,
    /// SE cost on the output of each block position.
    pub se: Vec<f64>,
}

fn arch_err(e: crate::arch::ArchError) -> LatencyError {
    LatencyError::InvalidGeometry(e.to_string())
}

impl LatencyTable {
    /// Fills a table for `blocks` laid out on `topology` using `model`.
    pub fn build(
        topology: &Topology,
        blocks: &[BlockSpec],
        model: &dyn LatencyModel,
        se_reduction: f64,
    ) -> Result<Self, LatencyError> {
        let geoms = topology.block_geometries();
        if geoms.len() != blocks.len() {
            return Err(LatencyError::BlockCountMismatch { table: blocks.len(), arch: geoms.len() });
        }
        let mut maps = Vec::with_capacity(blocks.len());
        let mut se = Vec::with_capacity(blocks.len());
        for (geom, spec) in geoms.iter().zip(blocks) {
            let mut map = BTreeMap::new();
            for config in enumerate_configs(spec).map_err(arch_err)? {
                let ms = model.block_ms(geom, spec.kind, &config)?;
                map.insert(config, ms);
            }
            maps.push(map);
            se.push(model.se_ms(geom, se_reduction)?);
        }
        Ok(Self { blocks: maps, stem: model.stem_ms(topology)?, head: model.head_ms(topology)?, se })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_entries(&self) -> usize {
        self.blocks.iter().map(BTreeMap::len).sum()
    }

    pub fn lookup(&self, block: usize, config: &BlockConfig) -> Result<f64, LatencyError> {
        self.blocks
            .get(block)
            .and_then(|m| m.get(config))
            .copied()
            .ok_or_else(|| LatencyError::MissingKey { block, config: config.to_string() })
    }

    /// Lookup by serialized config id. Ids that are not in canonical form
    /// are rejected rather than silently canonicalized.
    pub fn lookup_id(&self, block: usize, config_id: &str) -> Result<f64, LatencyError> {
        let config =
            BlockConfig::from_str(config_id).map_err(|_| LatencyError::NonCanonicalKey(config_id.to_string()))?;
        self.lookup(block, &config)
    }

    /// Smallest latency achievable at each position.
    pub fn min_block_sum(&self) -> f64 {
        self.blocks.iter().map(|m| m.values().copied().fold(f64::INFINITY, f64::min)).sum()
    }

    /// Returns a copy with every block entry multiplied by `c`.
    pub fn scaled_blocks(&self, c: f64) -> Self {
        let mut t = self.clone();
        for m in &mut t.blocks {
            for v in m.values_mut() {
                *v *= c;
            }
        }
        t
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["block_index", "config_id", "latency_ms"]).expect("in-memory csv");
        for (i, m) in self.blocks.iter().enumerate() {
            for (cfg, ms) in m {
                w.write_record([i.to_string(), cfg.to_string(), ms.to_string()]).expect("in-memory csv");
            }
        }
        w.write_record(["stem".to_string(), String::new(), self.stem.to_string()]).expect("in-memory csv");
        w.write_record(["head".to_string(), String::new(), self.head.to_string()]).expect("in-memory csv");
        for (i, ms) in self.se.iter().enumerate() {
            w.write_record(["se".to_string(), i.to_string(), ms.to_string()]).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    /// Parses a table file and checks it covers exactly the canonical
    /// configs of `blocks`.
    pub fn from_csv(text: &str, blocks: &[BlockSpec]) -> Result<Self, LatencyError> {
        let file_err = |m: String| LatencyError::File(m);
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| file_err(e.to_string()))?.clone();
        if header.iter().collect::<Vec<_>>() != ["block_index", "config_id", "latency_ms"] {
            return Err(file_err(format!("unexpected header {header:?}")));
        }
        let mut maps: Vec<BTreeMap<BlockConfig, f64>> = vec![BTreeMap::new(); blocks.len()];
        let mut se: Vec<Option<f64>> = vec![None; blocks.len()];
        let (mut stem, mut head) = (None, None);
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| file_err(e.to_string()))?;
            if rec.len() != 3 {
                return Err(file_err(format!("row {}: expected 3 fields", line + 2)));
            }
            let ms: f64 = rec[2].parse().map_err(|_| file_err(format!("row {}: bad latency `{}`", line + 2, &rec[2])))?;
            if !ms.is_finite() || ms < 0.0 {
                return Err(file_err(format!("row {}: latency must be finite and non-negative", line + 2)));
            }
            let index = |s: &str| -> Result<usize, LatencyError> {
                let i: usize = s.parse().map_err(|_| file_err(format!("row {}: bad block index `{s}`", line + 2)))?;
                if i >= blocks.len() {
                    return Err(LatencyError::BlockCountMismatch { table: i + 1, arch: blocks.len() });
                }
                Ok(i)
            };
            match &rec[0] {
                "stem" => stem = Some(ms),
                "head" => head = Some(ms),
                "se" => se[index(&rec[1])?] = Some(ms),
                other => {
                    let i = index(other)?;
                    let cfg = BlockConfig::from_str(&rec[1])
                        .map_err(|_| LatencyError::NonCanonicalKey(rec[1].to_string()))?;
                    if maps[i].insert(cfg, ms).is_some() {
                        return Err(file_err(format!("duplicate entry {i},{}", &rec[1])));
                    }
                }
            }
        }
        let mut missing = Vec::new();
        if stem.is_none() {
            missing.push("stem".to_string());
        }
        if head.is_none() {
            missing.push("head".to_string());
        }
        for (i, spec) in blocks.iter().enumerate() {
            let expected = enumerate_configs(spec).map_err(arch_err)?;
            for cfg in &expected {
                if !maps[i].contains_key(cfg) {
                    missing.push(format!("{i},{cfg}"));
                }
            }
            if let Some(extra) = maps[i].keys().find(|k| !expected.contains(k)) {
                return Err(file_err(format!("block {i}: config {extra} is not in the search space")));
            }
            if se[i].is_none() {
                missing.push(format!("se,{i}"));
            }
        }
        if !missing.is_empty() {
            return Err(LatencyError::MissingEntries(missing));
        }
        Ok(Self {
            blocks: maps,
            stem: stem.unwrap_or_default(),
            head: head.unwrap_or_default(),
            se: se.into_iter().map(Option::unwrap_or_default).collect(),
        })
    }
}

/// Table for every position and canonical config of `supernet`.
pub fn build_latency_table(supernet: &SupernetSpec, model: &dyn LatencyModel) -> Result<LatencyTable, LatencyError> {
    supernet.validate().map_err(arch_err)?;
    let blocks: Vec<BlockSpec> = supernet.blocks().cloned().collect();
    LatencyTable::build(&supernet.topology(), &blocks, model, DEFAULT_SE_REDUCTION)
}

/// Σ block latencies + stem + head + SE cost of every SE-enabled block.
pub fn estimate_network_latency(arch: &ConcreteArchitecture, table: &LatencyTable) -> Result<f64, LatencyError> {
    if arch.num_blocks() != table.num_blocks() {
        return Err(LatencyError::BlockCountMismatch { table: table.num_blocks(), arch: arch.num_blocks() });
    }
    let mut total = table.stem + table.head;
    for (i, block) in arch.blocks().enumerate() {
        total += table.lookup(i, &block.config())?;
        if block.se {
            total += table.se[i];
        }
    }
    Ok(total)
}
