use crate::arch::{BlockConfig, BlockGeometry, BlockKind, Topology};

use super::{check_geometry, CostModelParams, LatencyError};

/// Hardware module a layer runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    /// Adder-tree MAC array (regular and 1×1 convolutions, FC).
    MacArray,
    Depthwise,
    Se,
    Pool,
}

impl Unit {
    /// Sustained MACs per cycle.
    pub fn rate(self, p: &CostModelParams) -> f64 {
        let native = match self {
            Unit::MacArray => true,
            Unit::Depthwise => p.dwconv_native,
            Unit::Se => p.se_native,
            Unit::Pool => p.pooling_native,
        };
        if native {
            p.mac_units as f64
        } else {
            (p.mac_units as f64 / p.adder_tree_lanes as f64).max(1.0)
        }
    }
}

/// One layer's work, processed as `tiles` equal output-row tiles.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWork {
    pub name: &'static str,
    pub unit: Unit,
    pub macs: u64,
    pub weight_bytes: u64,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub tiles: usize,
}

fn layer(
    name: &'static str,
    unit: Unit,
    macs: usize,
    weights: usize,
    input: usize,
    output: usize,
    tiles: usize,
    p: &CostModelParams,
) -> LayerWork {
    let b = p.bytes_per_element as u64;
    LayerWork {
        name,
        unit,
        macs: macs as u64,
        weight_bytes: weights as u64 * b,
        input_bytes: input as u64 * b,
        output_bytes: output as u64 * b,
        tiles: tiles.max(1),
    }
}

/// Layer decomposition of a block: one expansion 1×1 conv, one depthwise
/// conv per branch, one projection 1×1 conv. A skip config has no layers.
pub fn block_layers(
    geom: &BlockGeometry,
    kind: BlockKind,
    config: &BlockConfig,
    p: &CostModelParams,
) -> Result<Vec<LayerWork>, LatencyError> {
    check_geometry(geom)?;
    let (h, w, ci, co) = (geom.height, geom.width, geom.in_channels, geom.out_channels);
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let mut branch_channels = Vec::with_capacity(config.branches().len());
    for b in config.branches() {
        let ch = b.expansion.channels(ci).ok_or_else(|| {
            LatencyError::InvalidGeometry(format!("expansion {} on {ci} channels is fractional", b.expansion))
        })?;
        branch_channels.push((b.kernel as usize, ch));
    }
    let expanded: usize = branch_channels.iter().map(|b| b.1).sum();
    if expanded == 0 {
        return Ok(Vec::new());
    }
    let mut layers = Vec::new();
    match kind {
        BlockKind::MixconvMbconv => {
            layers.push(layer("expand", Unit::MacArray, h * w * ci * expanded, ci * expanded, h * w * ci, h * w * expanded, h, p));
            for &(k, ch) in &branch_channels {
                layers.push(layer(
                    "dwconv",
                    Unit::Depthwise,
                    ho * wo * ch * k * k,
                    ch * k * k,
                    h * w * ch,
                    ho * wo * ch,
                    ho,
                    p,
                ));
            }
        }
        BlockKind::FusedConv => {
            for &(k, ch) in &branch_channels {
                layers.push(layer(
                    "fused",
                    Unit::MacArray,
                    ho * wo * ci * ch * k * k,
                    ci * ch * k * k,
                    h * w * ci,
                    ho * wo * ch,
                    ho,
                    p,
                ));
            }
        }
    }
    layers.push(layer("project", Unit::MacArray, ho * wo * expanded * co, expanded * co, ho * wo * expanded, ho * wo * co, ho, p));
    Ok(layers)
}

/// SE on a block output: pool, two FC layers, channel-wise multiply.
pub fn se_layers(geom: &BlockGeometry, se_reduction: f64, p: &CostModelParams) -> Result<Vec<LayerWork>, LatencyError> {
    check_geometry(geom)?;
    let (ho, wo, c) = (geom.out_height(), geom.out_width(), geom.out_channels);
    let reduced = se_channels(c, se_reduction);
    Ok(vec![
        layer("se_pool", Unit::Pool, ho * wo * c, 0, ho * wo * c, c, ho, p),
        layer("se_fc", Unit::Se, 2 * c * reduced, 2 * c * reduced + c + reduced, c, c, 1, p),
        layer("se_scale", Unit::Se, ho * wo * c, 0, ho * wo * c, ho * wo * c, ho, p),
    ])
}

pub(crate) fn se_channels(c: usize, se_reduction: f64) -> usize {
    ((c as f64 * se_reduction).ceil() as usize).max(1)
}

pub(crate) fn stem_layers(topo: &Topology, p: &CostModelParams) -> Vec<LayerWork> {
    let r = topo.input_resolution;
    let ro = topo.stem_output_resolution();
    let s = &topo.stem;
    vec![layer(
        "stem",
        Unit::MacArray,
        ro * ro * s.in_channels * s.width * s.kernel * s.kernel,
        s.in_channels * s.width * s.kernel * s.kernel,
        r * r * s.in_channels,
        ro * ro * s.width,
        ro,
        p,
    )]
}

pub(crate) fn head_layers(topo: &Topology, p: &CostModelParams) -> Vec<LayerWork> {
    let r = topo.final_resolution();
    let c = topo.final_width();
    let hd = &topo.head;
    vec![
        layer("head_conv", Unit::MacArray, r * r * c * hd.hidden, c * hd.hidden, r * r * c, r * r * hd.hidden, r, p),
        layer("head_pool", Unit::Pool, r * r * hd.hidden, 0, r * r * hd.hidden, hd.hidden, r, p),
        layer(
            "classifier",
            Unit::MacArray,
            hd.hidden * hd.num_classes,
            hd.hidden * hd.num_classes + hd.num_classes,
            hd.hidden,
            hd.num_classes,
            1,
            p,
        ),
    ]
}
