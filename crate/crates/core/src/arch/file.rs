//! Versioned TOML architecture files.
//!
//! ```toml
//! version = 1
//! input_resolution = 224
//! activation = "relu"
//!
//! [stem]
//! kernel = 7
//! stride = 2
//! width = 32
//! in_channels = 3
//!
//! [[stages]]
//! width = 32
//! stride = 2
//!
//! [[stages.blocks]]
//! kernels = [3, 5, 7]
//! expansions = [2.0, 0.0, 2.0]
//! se = false
//!
//! [head]
//! hidden = 1280
//! num_classes = 1000
//! ```

use serde::{Deserialize, Serialize};

use super::{
    Activation, ArchError, BlockDecision, CandidateSets, ConcreteArchitecture, ConcreteBlock, ConcreteStage,
    Expansion, HeadSpec, StemSpec,
};

pub const ARCH_FILE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchFile {
    version: u32,
    input_resolution: usize,
    activation: Activation,
    stem: StemSpec,
    stages: Vec<StageEntry>,
    head: HeadSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageEntry {
    width: usize,
    stride: usize,
    blocks: Vec<BlockEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockEntry {
    kernels: Vec<u32>,
    expansions: Vec<f64>,
    se: bool,
}

pub fn serialize_architecture(arch: &ConcreteArchitecture) -> String {
    let file = ArchFile {
        version: ARCH_FILE_VERSION,
        input_resolution: arch.input_resolution,
        activation: arch.activation,
        stem: arch.stem,
        stages: arch
            .stages
            .iter()
            .map(|s| StageEntry {
                width: s.width,
                stride: s.stride,
                blocks: s
                    .blocks
                    .iter()
                    .map(|b| BlockEntry {
                        kernels: b.decision.kernels.clone(),
                        expansions: b.decision.expansions.iter().map(|e| e.as_f64()).collect(),
                        se: b.se,
                    })
                    .collect(),
            })
            .collect(),
        head: arch.head,
    };
    toml::to_string(&file).expect("architecture serializes")
}

/// Parses and validates an architecture file against `candidates`.
pub fn deserialize_architecture(text: &str, candidates: &CandidateSets) -> Result<ConcreteArchitecture, ArchError> {
    let raw: toml::Value = text.parse().map_err(|e: toml::de::Error| ArchError::Malformed(e.message().to_string()))?;
    match raw.get("version").and_then(toml::Value::as_integer) {
        Some(v) if v == i64::from(ARCH_FILE_VERSION) => {}
        Some(v) => return Err(ArchError::UnknownVersion(v.try_into().unwrap_or(u32::MAX))),
        None => return Err(ArchError::Malformed("missing integer `version`".into())),
    }
    let file: ArchFile = toml::from_str(text).map_err(|e| ArchError::Malformed(e.message().to_string()))?;
    let mut stages = Vec::with_capacity(file.stages.len());
    for stage in file.stages {
        let mut blocks = Vec::with_capacity(stage.blocks.len());
        for b in stage.blocks {
            let expansions = b.expansions.into_iter().map(Expansion::from_f64).collect::<Result<Vec<_>, _>>()?;
            blocks.push(ConcreteBlock { decision: BlockDecision::new(b.kernels, expansions), se: b.se });
        }
        stages.push(ConcreteStage { width: stage.width, stride: stage.stride, blocks });
    }
    let arch = ConcreteArchitecture {
        input_resolution: file.input_resolution,
        activation: file.activation,
        stem: file.stem,
        stages,
        head: file.head,
    };
    arch.validate(candidates)?;
    Ok(arch)
}
