//! Search-space description: supernets, stages, blocks and superkernel
//! candidate sets, plus the decided [`ConcreteArchitecture`].
//!
//! A block decision is a pair of vectors `(k, e)` with one entry per
//! superkernel. Two decisions that describe the same function (e.g. two
//! 3×3 branches of expansion 2 versus one 3×3 branch of expansion 4) share
//! a single [`BlockConfig`], obtained with [`canonicalize`]. Latency tables
//! are keyed by `BlockConfig` only.

mod file;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::file::{deserialize_architecture, serialize_architecture, ARCH_FILE_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchError {
    #[error("invalid superkernel spec: {0}")]
    InvalidSuperkernel(String),
    #[error("invalid block spec: {0}")]
    InvalidBlock(String),
    #[error("invalid supernet: {0}")]
    InvalidSupernet(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("merged expansion {merged} exceeds block maximum {max}")]
    ExpansionOverflow { merged: Expansion, max: Expansion },
    #[error("invalid expansion literal `{0}`")]
    BadExpansion(String),
    #[error("invalid config id `{0}`")]
    BadConfigId(String),
    #[error("unknown architecture file version {0}")]
    UnknownVersion(u32),
    #[error("malformed architecture file: {0}")]
    Malformed(String),
    #[error("architecture invariant violated: {0}")]
    Invariant(String),
}

/// Expansion ratio stored in thousandths so that merging and table lookups
/// are exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Expansion(u32);

impl Expansion {
    pub const ZERO: Expansion = Expansion(0);

    pub const fn from_milli(milli: u32) -> Self {
        Expansion(milli)
    }

    pub const fn whole(ratio: u32) -> Self {
        Expansion(ratio * 1000)
    }

    pub fn milli(self) -> u32 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 1000.0
    }

    /// Channel count `e · c_in`, or `None` when it is not an integer.
    pub fn channels(self, c_in: usize) -> Option<usize> {
        let scaled = self.0 as usize * c_in;
        (scaled % 1000 == 0).then_some(scaled / 1000)
    }

    pub fn from_f64(value: f64) -> Result<Self, ArchError> {
        let milli = (value * 1000.0).round();
        if !value.is_finite() || value < 0.0 || (value * 1000.0 - milli).abs() > 1e-6 || milli > f64::from(u32::MAX) {
            return Err(ArchError::BadExpansion(value.to_string()));
        }
        Ok(Expansion(milli as u32))
    }

    pub fn checked_add(self, other: Expansion) -> Option<Expansion> {
        self.0.checked_add(other.0).map(Expansion)
    }
}

impl fmt::Display for Expansion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let whole = self.0 / 1000;
        let frac = self.0 % 1000;
        if frac == 0 {
            write!(f, "{whole}")
        } else {
            let digits = format!("{frac:03}");
            write!(f, "{whole}.{}", digits.trim_end_matches('0'))
        }
    }
}

impl FromStr for Expansion {
    type Err = ArchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ArchError::BadExpansion(s.to_string());
        let (whole, frac) = match s.split_once('.') {
            Some((w, f)) => (w, f),
            None => (s, ""),
        };
        if whole.is_empty() || frac.len() > 3 || !whole.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: u32 = whole.parse().map_err(|_| bad())?;
        let frac: u32 = if frac.is_empty() { 0 } else { format!("{frac:0<3}").parse().map_err(|_| bad())? };
        whole.checked_mul(1000).and_then(|w| w.checked_add(frac)).map(Expansion).ok_or_else(bad)
    }
}

/// Candidate kernel sizes and expansion ratios of one searchable superkernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperkernelSpec {
    kernel_sizes: Vec<u32>,
    expansions: Vec<Expansion>,
}

impl SuperkernelSpec {
    pub fn new(kernel_sizes: Vec<u32>, expansions: Vec<Expansion>) -> Result<Self, ArchError> {
        if kernel_sizes.is_empty() || expansions.is_empty() {
            return Err(ArchError::InvalidSuperkernel("empty candidate set".into()));
        }
        if kernel_sizes.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(ArchError::InvalidSuperkernel(format!("kernel sizes must be odd and >= 1: {kernel_sizes:?}")));
        }
        if kernel_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ArchError::InvalidSuperkernel(format!("kernel sizes not strictly increasing: {kernel_sizes:?}")));
        }
        if expansions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ArchError::InvalidSuperkernel("expansion ratios not strictly increasing".into()));
        }
        Ok(Self { kernel_sizes, expansions })
    }

    /// Convenience constructor for whole-number expansion ratios.
    pub fn with_whole(kernel_sizes: &[u32], expansions: &[u32]) -> Result<Self, ArchError> {
        Self::new(kernel_sizes.to_vec(), expansions.iter().map(|&e| Expansion::whole(e)).collect())
    }

    pub fn kernel_sizes(&self) -> &[u32] {
        &self.kernel_sizes
    }

    pub fn expansions(&self) -> &[Expansion] {
        &self.expansions
    }

    pub fn max_kernel(&self) -> u32 {
        *self.kernel_sizes.last().unwrap()
    }

    pub fn max_expansion(&self) -> Expansion {
        *self.expansions.last().unwrap()
    }

    pub fn allows_zero(&self) -> bool {
        self.expansions[0].is_zero()
    }

    /// Functionally distinct `(k, e)` choices; all zero-expansion choices
    /// collapse into one entry reported with the smallest kernel.
    pub fn choices(&self) -> Vec<(u32, Expansion)> {
        let mut out = Vec::new();
        for &e in &self.expansions {
            if e.is_zero() {
                out.push((self.kernel_sizes[0], e));
            } else {
                out.extend(self.kernel_sizes.iter().map(|&k| (k, e)));
            }
        }
        out
    }

    pub fn contains(&self, kernel: u32, expansion: Expansion) -> bool {
        self.kernel_sizes.contains(&kernel) && self.expansions.contains(&expansion)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    MixconvMbconv,
    FusedConv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub superkernels: Vec<SuperkernelSpec>,
    pub input_width: usize,
    pub output_width: usize,
    pub stride: usize,
    pub kind: BlockKind,
}

impl BlockSpec {
    pub fn new(
        superkernels: Vec<SuperkernelSpec>,
        input_width: usize,
        output_width: usize,
        stride: usize,
    ) -> Result<Self, ArchError> {
        let block = Self { superkernels, input_width, output_width, stride, kind: BlockKind::MixconvMbconv };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        if self.superkernels.is_empty() {
            return Err(ArchError::InvalidBlock("a block needs at least one superkernel".into()));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(ArchError::InvalidBlock(format!("stride must be 1 or 2, got {}", self.stride)));
        }
        if self.input_width == 0 || self.output_width == 0 {
            return Err(ArchError::InvalidBlock("zero channel width".into()));
        }
        let sevens = self.superkernels.iter().filter(|s| s.kernel_sizes.contains(&7)).count();
        if sevens > 1 {
            return Err(ArchError::InvalidBlock("at most one superkernel may list kernel size 7".into()));
        }
        for sk in &self.superkernels {
            for &e in &sk.expansions {
                if e.channels(self.input_width).is_none() {
                    return Err(ArchError::InvalidBlock(format!(
                        "expansion {e} gives a fractional channel count for width {}",
                        self.input_width
                    )));
                }
            }
        }
        if !self.allows_identity() && self.superkernels.iter().all(SuperkernelSpec::allows_zero) {
            return Err(ArchError::InvalidBlock(
                "block can collapse to a skip connection but stride/width change forbid it".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.superkernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superkernels.is_empty()
    }

    /// Whether an identity (skip) mapping is shape-compatible.
    pub fn allows_identity(&self) -> bool {
        self.stride == 1 && self.input_width == self.output_width
    }

    pub fn max_total_expansion(&self) -> Expansion {
        Expansion(self.superkernels.iter().map(|s| s.max_expansion().0).sum())
    }

    /// Checks membership of every `(k_j, e_j)` and merges it.
    pub fn canonical_config(&self, decision: &BlockDecision) -> Result<BlockConfig, ArchError> {
        if decision.len() != self.superkernels.len() {
            return Err(ArchError::InvalidDecision(format!(
                "decision has {} entries, block has {} superkernels",
                decision.len(),
                self.superkernels.len()
            )));
        }
        for (j, (sk, (k, e))) in self.superkernels.iter().zip(decision.pairs()).enumerate() {
            if !sk.contains(k, e) {
                return Err(ArchError::InvalidDecision(format!("superkernel {j}: ({k}, {e}) not a candidate")));
            }
        }
        let config = canonicalize(decision)?;
        let merged = Expansion(config.branches.iter().map(|b| b.expansion.0).sum());
        let max = self.max_total_expansion();
        if merged > max {
            return Err(ArchError::ExpansionOverflow { merged, max });
        }
        if config.is_skip() && !self.allows_identity() {
            return Err(ArchError::InvalidDecision("skip decision on a block that changes shape".into()));
        }
        Ok(config)
    }

    /// Every raw decision vector (the cartesian product of candidate sets).
    pub fn raw_decisions(&self) -> Vec<BlockDecision> {
        let mut out = vec![BlockDecision::default()];
        for sk in &self.superkernels {
            let mut next = Vec::with_capacity(out.len() * sk.kernel_sizes.len() * sk.expansions.len());
            for prefix in &out {
                for &k in &sk.kernel_sizes {
                    for &e in &sk.expansions {
                        let mut d = prefix.clone();
                        d.kernels.push(k);
                        d.expansions.push(e);
                        next.push(d);
                    }
                }
            }
            out = next;
        }
        out
    }

    pub fn parameter_count(&self, config: &BlockConfig) -> usize {
        config.parameter_count(self.input_width, self.output_width)
    }
}

/// Raw per-superkernel decisions `(k_1..k_N, e_1..e_N)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockDecision {
    pub kernels: Vec<u32>,
    pub expansions: Vec<Expansion>,
}

impl BlockDecision {
    pub fn new(kernels: Vec<u32>, expansions: Vec<Expansion>) -> Self {
        Self { kernels, expansions }
    }

    pub fn with_whole(kernels: &[u32], expansions: &[u32]) -> Self {
        Self::new(kernels.to_vec(), expansions.iter().map(|&e| Expansion::whole(e)).collect())
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u32, Expansion)> + '_ {
        self.kernels.iter().copied().zip(self.expansions.iter().copied())
    }

    pub fn is_skip(&self) -> bool {
        self.expansions.iter().all(|e| e.is_zero())
    }
}

/// One depthwise branch of a canonical block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Branch {
    pub kernel: u32,
    pub expansion: Expansion,
}

/// Canonical block configuration: one branch per distinct kernel size,
/// ascending, zero-expansion branches dropped. The empty config is the skip
/// connection.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockConfig {
    branches: Vec<Branch>,
}

impl BlockConfig {
    pub fn skip() -> Self {
        Self::default()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn is_skip(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn total_expansion(&self) -> Expansion {
        Expansion(self.branches.iter().map(|b| b.expansion.0).sum())
    }

    /// The config viewed as a raw decision with one superkernel per branch.
    pub fn as_decision(&self) -> BlockDecision {
        BlockDecision {
            kernels: self.branches.iter().map(|b| b.kernel).collect(),
            expansions: self.branches.iter().map(|b| b.expansion).collect(),
        }
    }

    /// Expansion + depthwise + projection weight count (batch-norm excluded).
    pub fn parameter_count(&self, c_in: usize, c_out: usize) -> usize {
        self.branches
            .iter()
            .map(|b| {
                let ch = b.expansion.channels(c_in).unwrap_or(0);
                ch * c_in + ch * (b.kernel as usize).pow(2) + ch * c_out
            })
            .sum()
    }

    pub fn max_kernel(&self) -> u32 {
        self.branches.iter().map(|b| b.kernel).max().unwrap_or(0)
    }
}

impl fmt::Display for BlockConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.branches.is_empty() {
            return f.write_str("skip");
        }
        for (i, b) in self.branches.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{}:{}", b.kernel, b.expansion)?;
        }
        Ok(())
    }
}

impl FromStr for BlockConfig {
    type Err = ArchError;

    /// Parses `k1:e1+k2:e2+...` (or `skip`); only canonical ids are accepted.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "skip" {
            return Ok(Self::skip());
        }
        let bad = || ArchError::BadConfigId(s.to_string());
        let mut branches = Vec::new();
        for part in s.split('+') {
            let (k, e) = part.split_once(':').ok_or_else(bad)?;
            let kernel: u32 = k.parse().map_err(|_| bad())?;
            let expansion: Expansion = e.parse().map_err(|_| bad())?;
            branches.push(Branch { kernel, expansion });
        }
        let config = Self { branches };
        if canonicalize(&config.as_decision()).as_ref() != Ok(&config) {
            return Err(bad());
        }
        Ok(config)
    }
}

/// Merges superkernels that share a kernel size (summing expansions),
/// drops zero-expansion entries and sorts by kernel size.
pub fn canonicalize(decision: &BlockDecision) -> Result<BlockConfig, ArchError> {
    if decision.kernels.len() != decision.expansions.len() {
        return Err(ArchError::InvalidDecision("kernel and expansion vectors differ in length".into()));
    }
    let mut branches: Vec<Branch> = Vec::new();
    for (k, e) in decision.pairs() {
        if k == 0 || k % 2 == 0 {
            return Err(ArchError::InvalidDecision(format!("kernel size {k} is not odd")));
        }
        if e.is_zero() {
            continue;
        }
        match branches.iter_mut().find(|b| b.kernel == k) {
            Some(b) => {
                b.expansion = b.expansion.checked_add(e).ok_or(ArchError::ExpansionOverflow {
                    merged: Expansion(u32::MAX),
                    max: Expansion(u32::MAX),
                })?
            }
            None => branches.push(Branch { kernel: k, expansion: e }),
        }
    }
    branches.sort();
    Ok(BlockConfig { branches })
}

/// Deduplicated canonical configs reachable from `block`, in lexicographic
/// order (skip first when allowed).
pub fn enumerate_configs(block: &BlockSpec) -> Result<Vec<BlockConfig>, ArchError> {
    block.validate()?;
    let mut set = BTreeSet::new();
    for decision in block.raw_decisions() {
        let config = canonicalize(&decision)?;
        if config.is_skip() && !block.allows_identity() {
            continue;
        }
        set.insert(config);
    }
    Ok(set.into_iter().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub width: usize,
    pub in_channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Width of the 1×1 conv ahead of pooling.
    pub hidden: usize,
    pub num_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub width: usize,
    pub stride: usize,
    pub blocks: Vec<BlockSpec>,
}

impl StageSpec {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

/// Spatial and channel geometry of one block position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl BlockGeometry {
    pub fn out_height(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_width(&self) -> usize {
        self.width.div_ceil(self.stride)
    }
}

/// Stage-level shape shared by supernets and concrete architectures.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub input_resolution: usize,
    pub stem: StemSpec,
    /// `(width, stride, depth)` per stage.
    pub stages: Vec<(usize, usize, usize)>,
    pub head: HeadSpec,
}

impl Topology {
    pub fn stem_output_resolution(&self) -> usize {
        self.input_resolution.div_ceil(self.stem.stride)
    }

    pub fn block_geometries(&self) -> Vec<BlockGeometry> {
        let mut res = self.stem_output_resolution();
        let mut channels = self.stem.width;
        let mut out = Vec::new();
        for &(width, stride, depth) in &self.stages {
            for b in 0..depth {
                let s = if b == 0 { stride } else { 1 };
                out.push(BlockGeometry { height: res, width: res, in_channels: channels, out_channels: width, stride: s });
                res = res.div_ceil(s);
                channels = width;
            }
        }
        out
    }

    pub fn final_resolution(&self) -> usize {
        self.stages.iter().fold(self.stem_output_resolution(), |r, &(_, s, d)| if d > 0 { r.div_ceil(s) } else { r })
    }

    pub fn final_width(&self) -> usize {
        self.stages.iter().rev().find(|s| s.2 > 0).map(|s| s.0).unwrap_or(self.stem.width)
    }

    /// Product of all strides between input and the last feature map.
    pub fn total_stride(&self) -> usize {
        self.stem.stride * self.stages.iter().filter(|s| s.2 > 0).map(|s| s.1).product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupernetSpec {
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head: HeadSpec,
    pub input_resolution: usize,
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.stages.is_empty() {
            return Err(ArchError::InvalidSupernet("no stages".into()));
        }
        if self.input_resolution == 0 || self.stem.width == 0 || self.stem.kernel % 2 == 0 {
            return Err(ArchError::InvalidSupernet("bad stem or input resolution".into()));
        }
        let mut channels = self.stem.width;
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.blocks.is_empty() {
                return Err(ArchError::InvalidSupernet(format!("stage {s} has no blocks")));
            }
            for (b, block) in stage.blocks.iter().enumerate() {
                block.validate().map_err(|e| ArchError::InvalidSupernet(format!("stage {s} block {b}: {e}")))?;
                let stride = if b == 0 { stage.stride } else { 1 };
                if block.stride != stride || block.input_width != channels || block.output_width != stage.width {
                    return Err(ArchError::InvalidSupernet(format!("stage {s} block {b}: inconsistent geometry")));
                }
                channels = stage.width;
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_resolution: self.input_resolution,
            stem: self.stem,
            stages: self.stages.iter().map(|s| (s.width, s.stride, s.depth())).collect(),
            head: self.head,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(StageSpec::depth).sum()
    }

    /// Candidate template (per superkernel index) used to validate
    /// architectures derived from this supernet.
    pub fn candidate_sets(&self) -> CandidateSets {
        let mut template: Vec<SuperkernelSpec> = Vec::new();
        for block in self.blocks() {
            for (j, sk) in block.superkernels.iter().enumerate() {
                if j >= template.len() {
                    template.push(sk.clone());
                    continue;
                }
                let t = &mut template[j];
                let mut ks: Vec<u32> = t.kernel_sizes.iter().chain(&sk.kernel_sizes).copied().collect();
                ks.sort_unstable();
                ks.dedup();
                let mut es: Vec<Expansion> = t.expansions.iter().chain(&sk.expansions).copied().collect();
                es.sort_unstable();
                es.dedup();
                *t = SuperkernelSpec { kernel_sizes: ks, expansions: es };
            }
        }
        CandidateSets { superkernels: template }
    }

    /// Builds a supernet from a stage list, sharing one superkernel template
    /// across all blocks. Blocks that cannot be identities get their first
    /// superkernel's zero expansion removed.
    pub fn from_template(
        stem: StemSpec,
        stages: &[(usize, usize, usize)],
        head: HeadSpec,
        input_resolution: usize,
        template: &[SuperkernelSpec],
    ) -> Result<Self, ArchError> {
        let mut out = Vec::new();
        let mut channels = stem.width;
        for &(width, stride, depth) in stages {
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let s = if b == 0 { stride } else { 1 };
                let mut sks = template.to_vec();
                if (s != 1 || channels != width) && sks.iter().all(SuperkernelSpec::allows_zero) {
                    let first = &mut sks[0];
                    if first.expansions.len() < 2 {
                        return Err(ArchError::InvalidSupernet("cannot make first block non-skippable".into()));
                    }
                    first.expansions.remove(0);
                }
                blocks.push(BlockSpec::new(sks, channels, width, s)?);
                channels = width;
            }
            out.push(StageSpec { width, stride, blocks });
        }
        let net = Self { stem, stages: out, head, input_resolution };
        net.validate()?;
        Ok(net)
    }
}

/// The default MixConv supernet: 5 stages of widths (32, 64, 128, 160, 256),
/// strides (2, 2, 2, 1, 2), depths (3, 4, 7, 4, 11); three superkernels per
/// block with expansions {0, 2}, kernels {3, 5} and one of them also 7.
pub fn build_default_supernet() -> SupernetSpec {
    let stem = StemSpec { kernel: 7, stride: 2, width: 32, in_channels: 3 };
    let head = HeadSpec { hidden: 1280, num_classes: 1000 };
    let stages = [(32, 2, 3), (64, 2, 4), (128, 2, 7), (160, 1, 4), (256, 2, 11)];
    SupernetSpec::from_template(stem, &stages, head, 224, &default_superkernels())
        .expect("default supernet is well-formed")
}

pub fn default_superkernels() -> Vec<SuperkernelSpec> {
    vec![
        SuperkernelSpec::with_whole(&[3, 5], &[0, 2]).unwrap(),
        SuperkernelSpec::with_whole(&[3, 5], &[0, 2]).unwrap(),
        SuperkernelSpec::with_whole(&[3, 5, 7], &[0, 2]).unwrap(),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageDepth {
    pub width: usize,
    pub cumulative_depth: usize,
    /// cumulative depth / width
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDepthReport {
    pub stages: Vec<StageDepth>,
    pub is_monotone: bool,
}

/// Cumulative depth per stage and whether it is non-decreasing in width.
pub fn validate_linear_depth(topology: &Topology) -> LinearDepthReport {
    let mut cumulative = 0;
    let stages: Vec<StageDepth> = topology
        .stages
        .iter()
        .map(|&(width, _, depth)| {
            cumulative += depth;
            StageDepth { width, cumulative_depth: cumulative, ratio: cumulative as f64 / width as f64 }
        })
        .collect();
    let is_monotone = stages.iter().all(|a| {
        stages.iter().all(|b| a.width >= b.width || a.cumulative_depth <= b.cumulative_depth)
    });
    LinearDepthReport { stages, is_monotone }
}

/// Per-superkernel-index candidate sets that decisions are checked against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSets {
    pub superkernels: Vec<SuperkernelSpec>,
}

impl Default for CandidateSets {
    fn default() -> Self {
        Self { superkernels: default_superkernels() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "h-swish")]
    HSwish,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteBlock {
    pub decision: BlockDecision,
    pub se: bool,
}

impl ConcreteBlock {
    pub fn config(&self) -> BlockConfig {
        canonicalize(&self.decision).expect("validated decision")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteStage {
    pub width: usize,
    pub stride: usize,
    pub blocks: Vec<ConcreteBlock>,
}

/// A fully decided network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConcreteArchitecture {
    pub input_resolution: usize,
    pub activation: Activation,
    pub stem: StemSpec,
    pub stages: Vec<ConcreteStage>,
    pub head: HeadSpec,
}

impl ConcreteArchitecture {
    /// Materializes `decisions` (one per block, in order) on `supernet`.
    pub fn from_supernet(supernet: &SupernetSpec, decisions: &[BlockDecision]) -> Result<Self, ArchError> {
        if decisions.len() != supernet.num_blocks() {
            return Err(ArchError::InvalidDecision(format!(
                "{} decisions for {} blocks",
                decisions.len(),
                supernet.num_blocks()
            )));
        }
        let mut it = decisions.iter();
        let mut stages = Vec::new();
        for stage in &supernet.stages {
            let mut blocks = Vec::new();
            for spec in &stage.blocks {
                let d = it.next().unwrap();
                spec.canonical_config(d)?;
                blocks.push(ConcreteBlock { decision: d.clone(), se: false });
            }
            stages.push(ConcreteStage { width: stage.width, stride: stage.stride, blocks });
        }
        Ok(Self {
            input_resolution: supernet.input_resolution,
            activation: Activation::Relu,
            stem: supernet.stem,
            stages,
            head: supernet.head,
        })
    }

    pub fn topology(&self) -> Topology {
        Topology {
            input_resolution: self.input_resolution,
            stem: self.stem,
            stages: self.stages.iter().map(|s| (s.width, s.stride, s.blocks.len())).collect(),
            head: self.head,
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConcreteBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConcreteBlock> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks.len()).sum()
    }

    pub fn configs(&self) -> Vec<BlockConfig> {
        self.blocks().map(ConcreteBlock::config).collect()
    }

    pub fn decisions(&self) -> Vec<BlockDecision> {
        self.blocks().map(|b| b.decision.clone()).collect()
    }

    /// Block specs carrying this architecture's geometry and `candidates`.
    pub fn block_specs(&self, candidates: &CandidateSets) -> Vec<BlockSpec> {
        self.topology()
            .block_geometries()
            .into_iter()
            .zip(self.blocks())
            .map(|(g, block)| {
                let mut sks: Vec<SuperkernelSpec> =
                    (0..block.decision.len()).map(|j| candidates.superkernel(j).clone()).collect();
                if (g.stride != 1 || g.in_channels != g.out_channels) && sks.iter().all(SuperkernelSpec::allows_zero) && sks[0].expansions.len() > 1 {
                    sks[0].expansions.remove(0);
                }
                BlockSpec {
                    superkernels: sks,
                    input_width: g.in_channels,
                    output_width: g.out_channels,
                    stride: g.stride,
                    kind: BlockKind::MixconvMbconv,
                }
            })
            .collect()
    }

    pub fn validate(&self, candidates: &CandidateSets) -> Result<(), ArchError> {
        if self.stages.is_empty() {
            return Err(ArchError::Invariant("no stages".into()));
        }
        if self.input_resolution == 0 || self.stem.width == 0 || self.head.num_classes == 0 {
            return Err(ArchError::Invariant("zero-sized stem, head or resolution".into()));
        }
        for stage in &self.stages {
            if stage.stride != 1 && stage.stride != 2 {
                return Err(ArchError::Invariant(format!("stage stride {} not in {{1, 2}}", stage.stride)));
            }
            if stage.width == 0 {
                return Err(ArchError::Invariant("zero stage width".into()));
            }
        }
        let geoms = self.topology().block_geometries();
        for (i, (block, g)) in self.blocks().zip(&geoms).enumerate() {
            let d = &block.decision;
            if d.kernels.len() != d.expansions.len() || d.is_empty() {
                return Err(ArchError::Invariant(format!("block {i}: malformed decision")));
            }
            for (j, (k, e)) in d.pairs().enumerate() {
                let sk = candidates.superkernel(j);
                if !sk.contains(k, e) {
                    return Err(ArchError::Invariant(format!("block {i} superkernel {j}: ({k}, {e}) not a candidate")));
                }
                if e.channels(g.in_channels).is_none() {
                    return Err(ArchError::Invariant(format!("block {i}: fractional channel count")));
                }
            }
            if d.is_skip() && (g.stride != 1 || g.in_channels != g.out_channels) {
                return Err(ArchError::Invariant(format!(
                    "block {i}: skip connection requires stride 1 and equal widths"
                )));
            }
            if block.se && d.is_skip() {
                return Err(ArchError::Invariant(format!("block {i}: SE on a skip connection")));
            }
        }
        Ok(())
    }
}

impl CandidateSets {
    /// Template for superkernel index `j`; indices past the template reuse
    /// the last entry.
    pub fn superkernel(&self, j: usize) -> &SuperkernelSpec {
        &self.superkernels[j.min(self.superkernels.len() - 1)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(v: u32) -> Expansion {
        Expansion::whole(v)
    }

    #[test]
    fn default_supernet_matches_table() {
        let net = build_default_supernet();
        let widths: Vec<_> = net.stages.iter().map(|s| s.width).collect();
        let strides: Vec<_> = net.stages.iter().map(|s| s.stride).collect();
        let depths: Vec<_> = net.stages.iter().map(StageSpec::depth).collect();
        assert_eq!(widths, [32, 64, 128, 160, 256]);
        assert_eq!(strides, [2, 2, 2, 1, 2]);
        assert_eq!(depths, [3, 4, 7, 4, 11]);
        assert_eq!(net.stem, StemSpec { kernel: 7, stride: 2, width: 32, in_channels: 3 });
        assert_eq!(net.head.hidden, 1280);
        assert_eq!(net.input_resolution, 224);
        let cum: Vec<_> = validate_linear_depth(&net.topology()).stages.iter().map(|s| s.cumulative_depth).collect();
        assert_eq!(cum, [3, 7, 14, 18, 29]);
        for block in net.blocks() {
            assert_eq!(block.len(), 3);
            assert_eq!(block.superkernels.iter().filter(|s| s.kernel_sizes().contains(&7)).count(), 1);
        }
        // skippable blocks keep {0, 2} everywhere
        let b = &net.stages[2].blocks[3];
        assert!(b.superkernels.iter().all(|s| s.expansions() == [e(0), e(2)]));
    }

    #[test]
    fn linear_depth_examples() {
        assert!(validate_linear_depth(&build_default_supernet().topology()).is_monotone);
        let topo = |stages: Vec<(usize, usize, usize)>| Topology {
            input_resolution: 32,
            stem: StemSpec { kernel: 3, stride: 1, width: 8, in_channels: 3 },
            stages,
            head: HeadSpec { hidden: 16, num_classes: 4 },
        };
        assert!(validate_linear_depth(&topo(vec![(32, 1, 2)])).is_monotone);
        let r = validate_linear_depth(&topo(vec![(32, 2, 4), (64, 2, 4), (128, 2, 4), (160, 1, 4), (256, 2, 4)]));
        assert!(r.is_monotone);
        let cum: Vec<_> = r.stages.iter().map(|s| s.cumulative_depth).collect();
        assert_eq!(cum, [4, 8, 12, 16, 20]);
        let ratios: Vec<_> = r.stages.iter().map(|s| s.ratio).collect();
        assert_eq!(ratios, [4.0 / 32.0, 8.0 / 64.0, 12.0 / 128.0, 16.0 / 160.0, 20.0 / 256.0]);
        assert!(ratios.windows(2).any(|w| w[0] != w[1]));
        // a wide stage before a narrow one breaks monotonicity
        assert!(!validate_linear_depth(&topo(vec![(64, 1, 2), (32, 1, 2)])).is_monotone);
    }

    #[test]
    fn canonicalize_examples() {
        let c = canonicalize(&BlockDecision::with_whole(&[3, 3, 5], &[2, 2, 2])).unwrap();
        assert_eq!(c.as_decision(), BlockDecision::with_whole(&[3, 5], &[4, 2]));
        let c = canonicalize(&BlockDecision::with_whole(&[3, 5, 7], &[2, 0, 2])).unwrap();
        assert_eq!(c.as_decision(), BlockDecision::with_whole(&[3, 7], &[2, 2]));
        assert_eq!(c.to_string(), "3:2+7:2");
        assert!(canonicalize(&BlockDecision::with_whole(&[3, 5], &[0, 0])).unwrap().is_skip());
    }

    #[test]
    fn canonicalize_is_idempotent_on_default_block() {
        let block = &build_default_supernet().stages[0].blocks[1];
        for d in block.raw_decisions() {
            let c = canonicalize(&d).unwrap();
            assert_eq!(canonicalize(&c.as_decision()).unwrap(), c);
        }
    }

    #[test]
    fn enumerate_examples() {
        let sk = SuperkernelSpec::with_whole(&[3, 5], &[0, 2]).unwrap();
        let block = BlockSpec::new(vec![sk], 8, 8, 1).unwrap();
        let ids: Vec<_> = enumerate_configs(&block).unwrap().iter().map(ToString::to_string).collect();
        assert_eq!(ids, ["skip", "3:2", "5:2"]);

        let sk = SuperkernelSpec::with_whole(&[3], &[0, 2]).unwrap();
        let block = BlockSpec::new(vec![sk.clone(), sk], 8, 8, 1).unwrap();
        let ids: Vec<_> = enumerate_configs(&block).unwrap().iter().map(ToString::to_string).collect();
        assert_eq!(ids, ["skip", "3:2", "3:4"]);

        let empty = BlockSpec { superkernels: vec![], input_width: 8, output_width: 8, stride: 1, kind: BlockKind::MixconvMbconv };
        assert!(enumerate_configs(&empty).is_err());
    }

    #[test]
    fn shape_changing_block_never_enumerates_skip() {
        let net = build_default_supernet();
        let first = &net.stages[1].blocks[0];
        assert!(!first.allows_identity());
        let configs = enumerate_configs(first).unwrap();
        assert!(configs.iter().all(|c| !c.is_skip()));
        let sk = SuperkernelSpec::with_whole(&[3], &[0, 2]).unwrap();
        assert!(BlockSpec::new(vec![sk], 8, 16, 1).is_err());
    }

    #[test]
    fn block_invariants() {
        let seven = SuperkernelSpec::with_whole(&[3, 7], &[0, 2]).unwrap();
        assert!(BlockSpec::new(vec![seven.clone(), seven], 8, 8, 1).is_err());
        assert!(SuperkernelSpec::with_whole(&[3, 4], &[0, 2]).is_err());
        assert!(SuperkernelSpec::with_whole(&[5, 3], &[0, 2]).is_err());
        assert!(SuperkernelSpec::with_whole(&[3], &[2, 2]).is_err());
    }

    #[test]
    fn overflow_and_membership() {
        let block = &build_default_supernet().stages[0].blocks[1];
        assert!(block.canonical_config(&BlockDecision::with_whole(&[3, 5, 7], &[2, 2, 2])).is_ok());
        assert!(block.canonical_config(&BlockDecision::with_whole(&[3, 5, 7], &[4, 2, 2])).is_err());
        assert!(block.canonical_config(&BlockDecision::with_whole(&[7, 5, 3], &[2, 2, 2])).is_err());
    }

    #[test]
    fn config_id_rejects_non_canonical() {
        assert_eq!("3:2+5:4".parse::<BlockConfig>().unwrap().to_string(), "3:2+5:4");
        assert!("5:2+3:2".parse::<BlockConfig>().is_err());
        assert!("3:2+3:2".parse::<BlockConfig>().is_err());
        assert!("3:0".parse::<BlockConfig>().is_err());
        assert!("skip".parse::<BlockConfig>().unwrap().is_skip());
    }

    #[test]
    fn expansion_literals() {
        assert_eq!("2".parse::<Expansion>().unwrap(), e(2));
        assert_eq!("0.5".parse::<Expansion>().unwrap().to_string(), "0.5");
        assert_eq!(Expansion::from_milli(1250).to_string(), "1.25");
        assert!("-1".parse::<Expansion>().is_err());
        assert!("1.2345".parse::<Expansion>().is_err());
        assert_eq!(Expansion::from_f64(2.0).unwrap(), e(2));
        assert_eq!(e(2).channels(8), Some(16));
        assert_eq!(Expansion::from_milli(500).channels(3), None);
    }
}
