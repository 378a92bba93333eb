//! Layers shared by the supernet and concrete networks.

use rand::Rng;

use crate::arch::{Activation, HeadSpec, StemSpec};
use crate::autodiff::{AutodiffError, BatchNormParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Uniform He initialization for a layer with `fan_in` inputs per output.
pub fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var, AutodiffError> {
    match act {
        Activation::Relu => g.relu(x),
        Activation::HSwish => g.h_swish(x),
    }
}

/// Full convolution, batch norm, activation.
#[derive(Clone, Debug)]
pub struct Stem {
    pub spec: StemSpec,
    pub weight: ParamId,
    pub bn: BatchNormParams,
}

impl Stem {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, spec: StemSpec) -> Self {
        let k = spec.kernel;
        let weight = store.add(
            "stem.weight",
            kaiming_uniform(rng, &[spec.width, spec.in_channels, k, k], spec.in_channels * k * k),
            true,
        );
        let bn = store.add_batch_norm("stem.bn", spec.width);
        Self { spec, weight, bn }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        act: Activation,
        training: bool,
    ) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.weight)?;
        let y = g.conv2d(x, w, self.spec.stride)?;
        let y = g.batch_norm(store, &self.bn, y, training)?;
        activate(g, y, act)
    }
}

/// 1×1 conv to `hidden` channels, batch norm, activation, global pooling
/// and the classifier.
#[derive(Clone, Debug)]
pub struct Head {
    pub spec: HeadSpec,
    pub conv: ParamId,
    pub bn: BatchNormParams,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl Head {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, in_channels: usize, spec: HeadSpec) -> Self {
        let conv = store.add("head.conv", kaiming_uniform(rng, &[spec.hidden, in_channels], in_channels), true);
        let bn = store.add_batch_norm("head.bn", spec.hidden);
        let fc_weight =
            store.add("head.fc.weight", kaiming_uniform(rng, &[spec.num_classes, spec.hidden], spec.hidden), true);
        let fc_bias = store.add("head.fc.bias", Tensor::zeros(&[spec.num_classes]), true);
        Self { spec, conv, bn, fc_weight, fc_bias }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        act: Activation,
        training: bool,
    ) -> Result<Var, AutodiffError> {
        let w = g.param(store, self.conv)?;
        let y = g.pointwise(x, w)?;
        let y = g.batch_norm(store, &self.bn, y, training)?;
        let y = activate(g, y, act)?;
        let pooled = g.global_avg_pool(y)?;
        let fw = g.param(store, self.fc_weight)?;
        let fb = g.param(store, self.fc_bias)?;
        g.linear(pooled, fw, Some(fb))
    }
}
