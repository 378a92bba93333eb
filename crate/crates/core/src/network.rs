//! Trainable networks: the weight-sharing supernet and plain networks built
//! from a concrete architecture, plus a minibatch trainer.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{Activation, ArchError, BlockConfig, BlockDecision, ConcreteArchitecture, SupernetSpec};
use crate::autodiff::{AutodiffError, BatchNormParams, Graph, ParamId, ParamStore, Sgd, Tensor, Var};
use crate::latency::DEFAULT_SE_REDUCTION;
use crate::nn::{activate, kaiming_uniform, Head, Stem};
use crate::superkernel::{BlockOutput, IndicatorMode, SuperBlock, SuperkernelError};
use crate::synth::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("{0}")]
    Config(String),
}

impl From<SuperkernelError> for NetworkError {
    fn from(e: SuperkernelError) -> Self {
        match e {
            SuperkernelError::Arch(a) => NetworkError::Arch(a),
            SuperkernelError::Autodiff(a) => NetworkError::Autodiff(a),
        }
    }
}

/// Anything that maps an image batch to logits through a parameter store.
pub trait Model {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn logits(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var, NetworkError>;
}

/// Indicator source for every block of a supernet forward.
#[derive(Clone, Copy, Debug)]
pub enum NetMode<'a> {
    Learned,
    Forced(&'a [BlockDecision]),
}

pub struct SupernetModel {
    pub spec: SupernetSpec,
    pub store: ParamStore,
    pub stem: Stem,
    pub blocks: Vec<SuperBlock>,
    pub head: Head,
}

impl SupernetModel {
    pub fn new(spec: SupernetSpec, seed: u64) -> Result<Self, NetworkError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, &mut rng, spec.stem);
        let mut blocks = Vec::with_capacity(spec.num_blocks());
        for (i, b) in spec.blocks().enumerate() {
            blocks.push(SuperBlock::new(&mut store, &mut rng, &format!("b{i}"), b.clone())?);
        }
        let head = Head::new(&mut store, &mut rng, spec.topology().final_width(), spec.head);
        Ok(Self { spec, store, stem, blocks, head })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: NetMode,
        training: bool,
    ) -> Result<(Var, Vec<BlockOutput>), NetworkError> {
        let act = Activation::Relu;
        let mut h = self.stem.forward(g, &self.store, x, act, training)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let modes = match mode {
                NetMode::Learned => vec![IndicatorMode::Learned; block.superkernels.len()],
                NetMode::Forced(d) => block.forced_modes(&d[i])?,
            };
            let out = block.forward(g, &self.store, h, &modes, act, training)?;
            h = out.output;
            outs.push(out);
        }
        let logits = self.head.forward(g, &self.store, h, act, training)?;
        Ok((logits, outs))
    }

    pub fn extract_decisions(&self) -> Result<Vec<BlockDecision>, NetworkError> {
        self.blocks.iter().map(|b| b.extract_decision(&self.store).map_err(NetworkError::from)).collect()
    }

    /// Marks every threshold trainable or frozen.
    pub fn set_thresholds_trainable(&mut self, trainable: bool, lr_scale: f64) {
        for b in &self.blocks {
            for sk in &b.superkernels {
                for &t in sk.kernel_thresholds.iter().chain(&sk.expansion_thresholds) {
                    let p = self.store.get_mut(t);
                    p.trainable = trainable;
                    p.lr_scale = lr_scale;
                }
            }
        }
    }

    pub fn threshold_ids(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .flat_map(|b| b.superkernels.iter())
            .flat_map(|sk| sk.kernel_thresholds.iter().chain(&sk.expansion_thresholds).copied())
            .collect()
    }
}

impl Model for SupernetModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn logits(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var, NetworkError> {
        Ok(self.forward(g, x, NetMode::Learned, training)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct SeParams {
    /// Gated channels (the block's output width).
    pub channels: usize,
    pub reduced: usize,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub kernel: usize,
    pub channels: usize,
    pub dw: ParamId,
    pub bn: BatchNormParams,
}

/// A fixed MixConv block, or an identity when its config is skip.
#[derive(Clone, Debug)]
pub struct PlainBlock {
    pub config: BlockConfig,
    pub stride: usize,
    pub residual: bool,
    pub expand: Option<(ParamId, BatchNormParams)>,
    pub branches: Vec<BranchParams>,
    pub project: Option<(ParamId, BatchNormParams)>,
    pub se: Option<SeParams>,
}

/// Graph nodes produced by one plain-block forward.
pub struct PlainBlockOutput {
    pub output: Var,
    /// SE gate values `[n, c]` when SE is enabled.
    pub excitation: Option<Var>,
}

impl PlainBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        prefix: &str,
        config: BlockConfig,
        c_in: usize,
        c_out: usize,
        stride: usize,
        se: bool,
        se_reduction: f64,
    ) -> Result<Self, NetworkError> {
        let residual = stride == 1 && c_in == c_out;
        if config.is_skip() {
            if !residual {
                return Err(ArchError::Invariant("skip block must keep stride 1 and width".into()).into());
            }
            return Ok(Self { config, stride, residual, expand: None, branches: Vec::new(), project: None, se: None });
        }
        let mut branches = Vec::new();
        for (j, b) in config.branches().iter().enumerate() {
            let ch = b.expansion.channels(c_in).ok_or_else(|| {
                ArchError::InvalidBlock(format!("expansion {} on {c_in} channels is fractional", b.expansion))
            })?;
            let k = b.kernel as usize;
            let dw = store.add(format!("{prefix}.br{j}.dw"), kaiming_uniform(rng, &[ch, k, k], k * k), true);
            let bn = store.add_batch_norm(&format!("{prefix}.br{j}.bn"), ch);
            branches.push(BranchParams { kernel: k, channels: ch, dw, bn });
        }
        let total: usize = branches.iter().map(|b| b.channels).sum();
        let expand = (
            store.add(format!("{prefix}.expand"), kaiming_uniform(rng, &[total, c_in], c_in), true),
            store.add_batch_norm(&format!("{prefix}.expand_bn"), total),
        );
        let project = (
            store.add(format!("{prefix}.project"), kaiming_uniform(rng, &[c_out, total], total), true),
            store.add_batch_norm(&format!("{prefix}.project_bn"), c_out),
        );
        let se = se.then(|| {
            let reduced = ((c_out as f64 * se_reduction).ceil() as usize).max(1);
            SeParams {
                channels: c_out,
                reduced,
                fc1_w: store.add(format!("{prefix}.se.fc1.weight"), kaiming_uniform(rng, &[reduced, c_out], c_out), true),
                fc1_b: store.add(format!("{prefix}.se.fc1.bias"), Tensor::zeros(&[reduced]), true),
                fc2_w: store.add(format!("{prefix}.se.fc2.weight"), kaiming_uniform(rng, &[c_out, reduced], reduced), true),
                fc2_b: store.add(format!("{prefix}.se.fc2.bias"), Tensor::zeros(&[c_out]), true),
            }
        });
        Ok(Self { config, stride, residual, expand: Some(expand), branches, project: Some(project), se })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        act: Activation,
        training: bool,
    ) -> Result<PlainBlockOutput, NetworkError> {
        let (Some((we, bne)), Some((wp, bnp))) = (&self.expand, &self.project) else {
            return Ok(PlainBlockOutput { output: x, excitation: None });
        };
        let w = g.param(store, *we)?;
        let h = g.pointwise(x, w)?;
        let h = g.batch_norm(store, bne, h, training)?;
        let h = activate(g, h, act)?;
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut offset = 0;
        for b in &self.branches {
            let part = if self.branches.len() == 1 { h } else { g.slice_channels(h, offset, b.channels)? };
            offset += b.channels;
            let w = g.param(store, b.dw)?;
            let y = g.dwconv2d(part, w, self.stride)?;
            let y = g.batch_norm(store, &b.bn, y, training)?;
            outs.push(activate(g, y, act)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_channels(&outs)? };
        let w = g.param(store, *wp)?;
        let y = g.pointwise(cat, w)?;
        let mut y = g.batch_norm(store, bnp, y, training)?;
        let mut excitation = None;
        if let Some(se) = &self.se {
            let pooled = g.global_avg_pool(y)?;
            let (w1, b1) = (g.param(store, se.fc1_w)?, g.param(store, se.fc1_b)?);
            let z = g.linear(pooled, w1, Some(b1))?;
            let z = activate(g, z, act)?;
            let (w2, b2) = (g.param(store, se.fc2_w)?, g.param(store, se.fc2_b)?);
            let z = g.linear(z, w2, Some(b2))?;
            let gate = g.sigmoid(z)?;
            y = g.channelwise_mul(y, gate)?;
            excitation = Some(gate);
        }
        if self.residual {
            y = g.add(y, x)?;
        }
        Ok(PlainBlockOutput { output: y, excitation })
    }
}

/// A standalone network for one concrete architecture.
pub struct ConcreteNet {
    pub arch: ConcreteArchitecture,
    pub store: ParamStore,
    pub stem: Stem,
    pub blocks: Vec<PlainBlock>,
    pub head: Head,
}

impl ConcreteNet {
    pub fn new(arch: &ConcreteArchitecture, seed: u64) -> Result<Self, NetworkError> {
        Self::with_se_reduction(arch, seed, DEFAULT_SE_REDUCTION)
    }

    pub fn with_se_reduction(arch: &ConcreteArchitecture, seed: u64, se_reduction: f64) -> Result<Self, NetworkError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = Stem::new(&mut store, &mut rng, arch.stem);
        let geoms = arch.topology().block_geometries();
        let mut blocks = Vec::with_capacity(geoms.len());
        for (i, (block, geom)) in arch.blocks().zip(&geoms).enumerate() {
            blocks.push(PlainBlock::new(
                &mut store,
                &mut rng,
                &format!("b{i}"),
                block.config(),
                geom.in_channels,
                geom.out_channels,
                geom.stride,
                block.se,
                se_reduction,
            )?);
        }
        let head = Head::new(&mut store, &mut rng, arch.topology().final_width(), arch.head);
        Ok(Self { arch: arch.clone(), store, stem, blocks, head })
    }

    /// Logits plus each block's SE excitation node.
    pub fn forward(&self, g: &mut Graph, x: Var, training: bool) -> Result<(Var, Vec<Option<Var>>), NetworkError> {
        let act = self.arch.activation;
        let mut h = self.stem.forward(g, &self.store, x, act, training)?;
        let mut exc = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let out = b.forward(g, &self.store, h, act, training)?;
            h = out.output;
            exc.push(out.excitation);
        }
        Ok((self.head.forward(g, &self.store, h, act, training)?, exc))
    }
}

impl Model for ConcreteNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn logits(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var, NetworkError> {
        Ok(self.forward(g, x, training)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply by `factor` every `interval_epochs` (may be fractional).
    Step { factor: f64, interval_epochs: f64 },
    /// Cosine decay to zero over the run.
    Cosine,
    Constant,
}

impl LrSchedule {
    pub fn lr(&self, base: f64, step: usize, steps_per_epoch: usize, total_steps: usize) -> f64 {
        match *self {
            LrSchedule::Step { factor, interval_epochs } => {
                let interval = (interval_epochs * steps_per_epoch as f64).max(1.0);
                base * factor.powi((step as f64 / interval).floor() as i32)
            }
            LrSchedule::Cosine => {
                let t = step as f64 / total_steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
            LrSchedule::Constant => base,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub schedule: LrSchedule,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            grad_clip: Some(5.0),
            schedule: LrSchedule::Cosine,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(NetworkError::Config("batch_size >= 1, lr > 0 and momentum in [0, 1) required".into()));
        }
        Ok(())
    }
}

/// Shuffled minibatches for `epoch`, deterministic in (`seed`, `epoch`).
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Cross-entropy training of `model` on `train` indices.
pub fn train(
    model: &mut dyn Model,
    data: &Dataset,
    train: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, NetworkError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(NetworkError::Config("empty training set".into()));
    }
    let mut opt = Sgd::new(cfg.momentum, cfg.grad_clip);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut lr = cfg.lr;
        for batch in epoch_batches(train, cfg.batch_size, cfg.seed, epoch) {
            lr = cfg.schedule.lr(cfg.lr, step, steps_per_epoch, total);
            let (x, labels) = data.batch(&batch);
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let loss = model
                .logits(&mut g, xv, true)
                .and_then(|l| g.softmax_cross_entropy(l, &labels).map_err(NetworkError::from))
                .map_err(|e| diverged(step, e))?;
            sum += g.value(loss).item();
            let grads = g.backward(loss).map_err(|e| diverged(step, e.into()))?;
            let store = model.store_mut();
            store.zero_grad();
            g.accumulate_param_grads(&grads, store);
            opt.step(store, lr);
            g.update_running_stats(store, cfg.bn_momentum);
            step += 1;
        }
        stats.push(EpochStats { epoch, loss: sum / steps_per_epoch as f64, lr });
    }
    Ok(stats)
}

pub(crate) fn diverged(step: usize, e: NetworkError) -> NetworkError {
    match e {
        NetworkError::Autodiff(AutodiffError::NonFinite { op }) => {
            NetworkError::Diverged { step, detail: format!("non-finite value in {op}") }
        }
        other => other,
    }
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(model: &dyn Model, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64, NetworkError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x)?;
        let logits = model.logits(&mut g, xv, false)?;
        correct += argmax_rows(g.value(logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
        })
        .collect()
}
