//! Compound scaling of a searched architecture under a latency budget.
//!
//! Depth and width share one coefficient. Depths round half-up, widths
//! round up to a multiple of 16 and the input resolution rounds to a
//! multiple of the network's total stride. When the scaled network misses
//! the budget the resolution is walked back first, then the added blocks
//! are removed starting from the one with the fewest parameters.

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{ArchError, BlockKind, CandidateSets, ConcreteArchitecture, ConcreteBlock};
use crate::latency::{LatencyError, LatencyModel, DEFAULT_SE_REDUCTION};

pub const WIDTH_MULTIPLE: usize = 16;

/// Absorbs floating-point noise in products such as `40 · 1.2`.
const ROUND_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScaleError {
    #[error("invalid scaling coefficients: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCoefficients {
    /// Shared by stage depths and widths.
    pub depth_width_coef: f64,
    pub resolution_coef: f64,
}

impl Default for ScalingCoefficients {
    fn default() -> Self {
        Self { depth_width_coef: 1.0, resolution_coef: 1.0 }
    }
}

impl ScalingCoefficients {
    pub fn validate(&self) -> Result<(), ScaleError> {
        if !(self.depth_width_coef >= 1.0 && self.depth_width_coef.is_finite())
            || !(self.resolution_coef >= 1.0 && self.resolution_coef.is_finite())
        {
            return Err(ScaleError::Config("coefficients must be finite and >= 1".into()));
        }
        Ok(())
    }
}

/// `round(d · coef)` with halves rounded up.
pub fn scale_depth(depth: usize, coef: f64) -> usize {
    (depth as f64 * coef + 0.5 + ROUND_EPS).floor() as usize
}

/// `w · coef` rounded up to a multiple of 16; `coef = 1` keeps `w` as is.
pub fn scale_width(width: usize, coef: f64) -> usize {
    if coef == 1.0 {
        return width;
    }
    let units = (width as f64 * coef / WIDTH_MULTIPLE as f64 - ROUND_EPS).ceil().max(1.0);
    units as usize * WIDTH_MULTIPLE
}

/// `r · coef` rounded to the nearest multiple of `stride`, never below
/// `stride`; `coef = 1` keeps `r` as is.
pub fn scale_resolution(resolution: usize, coef: f64, stride: usize) -> usize {
    if coef == 1.0 {
        return resolution;
    }
    let units = (resolution as f64 * coef / stride as f64 + 0.5 + ROUND_EPS).floor().max(1.0);
    units as usize * stride
}

/// Direct latency estimate through `model`, no table needed.
pub fn model_latency(arch: &ConcreteArchitecture, model: &dyn LatencyModel) -> Result<f64, LatencyError> {
    let topology = arch.topology();
    let mut total = model.stem_ms(&topology)? + model.head_ms(&topology)?;
    for (geom, block) in topology.block_geometries().iter().zip(arch.blocks()) {
        total += model.block_ms(geom, BlockKind::MixconvMbconv, &block.config())?;
        if block.se {
            total += model.se_ms(geom, DEFAULT_SE_REDUCTION)?;
        }
    }
    Ok(total)
}

/// A block appended to a stage by depth scaling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AddedBlock {
    pub stage: usize,
    /// Index within the original stage of the replicated block.
    pub source: usize,
    pub parameters: usize,
    pub max_kernel: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Rollback {
    Resolution { from: usize, to: usize, latency_ms: f64 },
    RemoveBlock { stage: usize, source: usize, latency_ms: f64 },
    RestoreWidths { latency_ms: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOutcome {
    pub architecture: ConcreteArchitecture,
    pub latency_ms: f64,
    pub added: Vec<AddedBlock>,
    pub rollbacks: Vec<Rollback>,
}

/// Scaling order of a stage's blocks: most parameters first, then larger
/// kernel, then lower index.
fn replication_order(arch: &ConcreteArchitecture, stage: usize, width: usize) -> Vec<(usize, usize, u32)> {
    let mut ranked: Vec<(usize, usize, u32)> = arch.stages[stage]
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let cfg = b.config();
            (i, cfg.parameter_count(width, width), cfg.max_kernel())
        })
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    ranked
}

fn assemble(
    base: &ConcreteArchitecture,
    widths: &[usize],
    stem_width: usize,
    resolution: usize,
    added: &[AddedBlock],
) -> ConcreteArchitecture {
    let mut arch = base.clone();
    arch.stem.width = stem_width;
    arch.input_resolution = resolution;
    for (s, stage) in arch.stages.iter_mut().enumerate() {
        stage.width = widths[s];
        for a in added.iter().filter(|a| a.stage == s) {
            let src = &base.stages[s].blocks[a.source];
            stage.blocks.push(ConcreteBlock { decision: src.decision.clone(), se: src.se });
        }
    }
    arch
}

/// Scales `arch` by `coefs` and rolls the scaling back until the model
/// estimate is within `target_ms`.
pub fn compound_scale(
    arch: &ConcreteArchitecture,
    coefs: ScalingCoefficients,
    model: &dyn LatencyModel,
    target_ms: f64,
    candidates: &CandidateSets,
) -> Result<ScaleOutcome, ScaleError> {
    coefs.validate()?;
    arch.validate(candidates)?;
    let base_latency = model_latency(arch, model)?;
    if base_latency > target_ms {
        return Err(ScaleError::Infeasible(format!(
            "unscaled architecture needs {base_latency} ms, above the {target_ms} ms target"
        )));
    }
    let c = coefs.depth_width_coef;
    let base_widths: Vec<usize> = arch.stages.iter().map(|s| s.width).collect();
    let widths: Vec<usize> = base_widths.iter().map(|&w| scale_width(w, c)).collect();
    let stem_width = scale_width(arch.stem.width, c);
    let stride = arch.topology().total_stride();
    let mut resolution = scale_resolution(arch.input_resolution, coefs.resolution_coef, stride);

    let mut added = Vec::new();
    for (s, stage) in arch.stages.iter().enumerate() {
        let extra = scale_depth(stage.blocks.len(), c).saturating_sub(stage.blocks.len());
        let order = replication_order(arch, s, widths[s]);
        for i in 0..extra {
            let (source, parameters, max_kernel) = order[i % order.len()];
            added.push(AddedBlock { stage: s, source, parameters, max_kernel });
        }
    }

    let mut rollbacks = Vec::new();
    let mut current = assemble(arch, &widths, stem_width, resolution, &added);
    current.validate(candidates)?;
    let mut latency = model_latency(&current, model)?;

    // shrink the resolution one stride step at a time, down to the original
    while latency > target_ms && resolution > arch.input_resolution {
        let to = resolution.saturating_sub(stride).max(arch.input_resolution);
        current.input_resolution = to;
        latency = model_latency(&current, model)?;
        rollbacks.push(Rollback::Resolution { from: resolution, to, latency_ms: latency });
        resolution = to;
    }

    // then drop added blocks, fewest parameters first
    let mut removal: Vec<usize> = (0..added.len()).collect();
    removal.sort_by(|&a, &b| {
        let (x, y) = (&added[a], &added[b]);
        x.parameters.cmp(&y.parameters).then(x.max_kernel.cmp(&y.max_kernel)).then(b.cmp(&a))
    });
    let mut kept = vec![true; added.len()];
    for &i in &removal {
        if latency <= target_ms {
            break;
        }
        kept[i] = false;
        let remaining: Vec<AddedBlock> =
            added.iter().zip(&kept).filter(|(_, &k)| k).map(|(a, _)| a.clone()).collect();
        current = assemble(arch, &widths, stem_width, resolution, &remaining);
        latency = model_latency(&current, model)?;
        rollbacks.push(Rollback::RemoveBlock { stage: added[i].stage, source: added[i].source, latency_ms: latency });
    }
    let added: Vec<AddedBlock> = added.into_iter().zip(&kept).filter(|(_, &k)| k).map(|(a, _)| a).collect();

    if latency > target_ms {
        current = assemble(arch, &base_widths, arch.stem.width, resolution, &added);
        latency = model_latency(&current, model)?;
        rollbacks.push(Rollback::RestoreWidths { latency_ms: latency });
    }
    if latency > target_ms {
        return Err(ScaleError::Infeasible(format!("scaled architecture needs {latency} ms after rollback")));
    }
    current.validate(candidates)?;
    info!("scaled to {} blocks at {} px: {latency} ms", current.num_blocks(), current.input_resolution);
    Ok(ScaleOutcome { architecture: current, latency_ms: latency, added, rollbacks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_default_supernet, validate_linear_depth, BlockDecision};
    use crate::latency::{Analytical, CostModelParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_arch() -> ConcreteArchitecture {
        let net = build_default_supernet();
        let decisions = net
            .blocks()
            .map(|b| {
                let mut d = BlockDecision::with_whole(&[3, 5, 7], &[2, 0, 2]);
                d.kernels.truncate(b.len());
                d.expansions.truncate(b.len());
                d
            })
            .collect::<Vec<_>>();
        ConcreteArchitecture::from_supernet(&net, &decisions).unwrap()
    }

    #[test]
    fn rounding_rules() {
        let depths: Vec<usize> = [3, 4, 7, 4, 11].iter().map(|&d| scale_depth(d, 1.2)).collect();
        assert_eq!(depths, [4, 5, 8, 5, 13]);
        assert_eq!(scale_depth(5, 1.5), 8);
        assert_eq!(scale_width(32, 1.2), 48);
        assert_eq!(scale_width(40, 1.2), 48);
        assert_eq!(scale_width(24, 1.0), 24);
        assert_eq!(scale_resolution(224, 1.15, 32), 256);
    }

    #[test]
    fn unit_coefficients_are_identity() {
        let arch = default_arch();
        let model = Analytical(CostModelParams::default());
        let out = compound_scale(&arch, ScalingCoefficients::default(), &model, f64::INFINITY, &CandidateSets::default())
            .unwrap();
        assert_eq!(out.architecture, arch);
        assert!(out.added.is_empty() && out.rollbacks.is_empty());
    }

    #[test]
    fn scaling_grows_and_respects_budget() {
        let arch = default_arch();
        let model = Analytical(CostModelParams::default());
        let cands = CandidateSets::default();
        let coefs = ScalingCoefficients { depth_width_coef: 1.2, resolution_coef: 1.15 };
        let base = model_latency(&arch, &model).unwrap();
        let free = compound_scale(&arch, coefs, &model, f64::INFINITY, &cands).unwrap();
        let depths: Vec<usize> = free.architecture.stages.iter().map(|s| s.blocks.len()).collect();
        assert_eq!(depths, [4, 5, 8, 5, 13]);
        assert!(free.architecture.stages.iter().all(|s| s.width % WIDTH_MULTIPLE == 0));
        assert!(free.latency_ms >= base);

        let target = 0.5 * (base + free.latency_ms);
        let tight = compound_scale(&arch, coefs, &model, target, &cands).unwrap();
        assert!(tight.latency_ms <= target);
        assert!(matches!(tight.rollbacks[0], Rollback::Resolution { .. }));
        assert!(matches!(
            compound_scale(&arch, coefs, &model, base * 0.9, &cands),
            Err(ScaleError::Infeasible(_))
        ));
    }

    #[test]
    fn added_blocks_follow_parameter_order() {
        let mut arch = default_arch();
        // stage 1: make block 2 the heaviest, block 3 a skip
        arch.stages[1].blocks[2].decision = BlockDecision::with_whole(&[5, 5, 7], &[2, 2, 2]);
        arch.stages[1].blocks[3].decision = BlockDecision::with_whole(&[3, 3, 3], &[0, 0, 0]);
        let model = Analytical(CostModelParams::default());
        let coefs = ScalingCoefficients { depth_width_coef: 1.5, resolution_coef: 1.0 };
        let out = compound_scale(&arch, coefs, &model, f64::INFINITY, &CandidateSets::default()).unwrap();
        let stage1: Vec<usize> = out.added.iter().filter(|a| a.stage == 1).map(|a| a.source).collect();
        assert_eq!(stage1[0], 2);
        assert!(!stage1.contains(&3));
    }

    #[test]
    fn linear_depth_monotonicity_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = Analytical(CostModelParams::default());
        let cands = CandidateSets::default();
        let base = default_arch();
        for _ in 0..100 {
            let mut arch = base.clone();
            for stage in &mut arch.stages {
                let keep = rng.gen_range(1..=stage.blocks.len());
                stage.blocks.truncate(keep);
            }
            if !validate_linear_depth(&arch.topology()).is_monotone {
                continue;
            }
            let coef = rng.gen_range(1.0..2.0);
            let out = compound_scale(
                &arch,
                ScalingCoefficients { depth_width_coef: coef, resolution_coef: 1.0 },
                &model,
                f64::INFINITY,
                &cands,
            )
            .unwrap();
            assert!(validate_linear_depth(&out.architecture.topology()).is_monotone);
            for (a, b) in out.architecture.stages.iter().zip(&arch.stages) {
                assert!(a.width >= b.width && a.blocks.len() >= b.blocks.len());
            }
        }
    }
}
