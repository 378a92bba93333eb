//! Threshold-gated superkernels and the searchable MixConv block.
//!
//! A superkernel holds the depthwise weights of its largest choice. Kernel
//! sizes are nested square rings around the centre tap and expansion ratios
//! are nested channel prefixes, so every (kernel, expansion) choice is a
//! sub-tensor. Each outer ring and each outer channel slice has a threshold:
//! the shell stays when its squared norm is strictly above the threshold.
//! Expansion shells are measured after kernel masking.

use rand::Rng;

use crate::arch::{Activation, ArchError, BlockDecision, BlockSpec, Expansion, SuperkernelSpec};
use crate::autodiff::{AutodiffError, BatchNormParams, Graph, ParamId, ParamStore, Tensor, Var};
use crate::nn::{activate, kaiming_uniform};

/// How indicators are produced during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IndicatorMode {
    /// Hard threshold tests on shell norms, with surrogate gradients.
    Learned,
    /// Constant indicators selecting the given `(kernel, expansion)`.
    Forced(u32, Expansion),
}

#[derive(Clone, Debug)]
pub struct Superkernel {
    pub spec: SuperkernelSpec,
    /// Block input channels; expansion `e` keeps the first `e * c_in` channels.
    pub c_in: usize,
    /// Depthwise weights `[channels, κ_K, κ_K]`.
    pub weights: ParamId,
    /// One scalar threshold per kernel size after the smallest.
    pub kernel_thresholds: Vec<ParamId>,
    /// One scalar threshold per expansion ratio after the smallest.
    pub expansion_thresholds: Vec<ParamId>,
    pub bn: BatchNormParams,
    /// Channel prefix end of each expansion ratio.
    bounds: Vec<usize>,
}

/// Graph nodes of one superkernel evaluation.
#[derive(Clone, Debug)]
pub struct SuperkernelNodes {
    pub kernel_indicators: Vec<Var>,
    pub expansion_indicators: Vec<Var>,
    /// `F` per kernel size, in candidate order.
    pub f: Vec<Var>,
    /// `G` per expansion ratio, in candidate order.
    pub g: Vec<Var>,
    pub masked: Var,
    /// Per-channel gate `[channels]`, 1 on selected channels.
    pub channel_gate: Var,
    /// Product of the expansion indicators up to the first non-zero ratio;
    /// 0 exactly when the superkernel is switched off. `None` when it can
    /// never be switched off.
    pub active: Option<Var>,
}

fn centre_window(k_max: usize, k: usize, r: usize, c: usize) -> bool {
    let lo = (k_max - k) / 2;
    (lo..lo + k).contains(&r) && (lo..lo + k).contains(&c)
}

impl Superkernel {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        spec: SuperkernelSpec,
        c_in: usize,
    ) -> Result<Self, ArchError> {
        let mut bounds = Vec::with_capacity(spec.expansions().len());
        for &e in spec.expansions() {
            bounds.push(e.channels(c_in).ok_or_else(|| {
                ArchError::InvalidBlock(format!("expansion {e} on {c_in} channels is fractional"))
            })?);
        }
        let channels = *bounds.last().expect("spec has expansions");
        if channels == 0 {
            return Err(ArchError::InvalidBlock("superkernel has no channels at its largest expansion".into()));
        }
        let k = spec.max_kernel() as usize;
        let weights = store.add(format!("{prefix}.dw"), kaiming_uniform(rng, &[channels, k, k], k * k), true);
        let bn = store.add_batch_norm(&format!("{prefix}.bn"), channels);
        let mut sk = Self {
            spec,
            c_in,
            weights,
            kernel_thresholds: Vec::new(),
            expansion_thresholds: Vec::new(),
            bn,
            bounds,
        };
        let (kt, et) = sk.expected_norms();
        sk.kernel_thresholds = kt
            .iter()
            .enumerate()
            .map(|(i, &v)| store.add(format!("{prefix}.t_k{}", sk.spec.kernel_sizes()[i + 1]), Tensor::scalar(v), true))
            .collect();
        sk.expansion_thresholds = et
            .iter()
            .enumerate()
            .map(|(d, &v)| store.add(format!("{prefix}.t_e{}", sk.spec.expansions()[d + 1]), Tensor::scalar(v), true))
            .collect();
        Ok(sk)
    }

    pub fn channels(&self) -> usize {
        *self.bounds.last().expect("non-empty")
    }

    pub fn max_kernel(&self) -> usize {
        self.spec.max_kernel() as usize
    }

    /// Channel range of expansion shell `d`.
    pub fn shell_channels(&self, d: usize) -> std::ops::Range<usize> {
        let lo = if d == 0 { 0 } else { self.bounds[d - 1] };
        lo..self.bounds[d]
    }

    /// 0/1 mask `[channels, κ_K, κ_K]` of kernel ring `i` over all channels.
    pub fn ring_mask(&self, i: usize) -> Tensor {
        let ks = self.spec.kernel_sizes();
        let km = self.max_kernel();
        let inner = if i == 0 { 0 } else { ks[i - 1] as usize };
        let outer = ks[i] as usize;
        Tensor::from_fn(&[self.channels(), km, km], |idx| {
            let (r, c) = ((idx / km) % km, idx % km);
            (centre_window(km, outer, r, c) && !(inner > 0 && centre_window(km, inner, r, c))) as u8 as f64
        })
    }

    /// 0/1 mask `[channels, κ_K, κ_K]` of expansion shell `d`.
    pub fn slice_mask(&self, d: usize) -> Tensor {
        let kk = self.max_kernel() * self.max_kernel();
        let range = self.shell_channels(d);
        Tensor::from_fn(&[self.channels(), self.max_kernel(), self.max_kernel()], |idx| {
            range.contains(&(idx / kk)) as u8 as f64
        })
    }

    fn slice_gate(&self, d: usize) -> Tensor {
        let range = self.shell_channels(d);
        Tensor::from_fn(&[self.channels()], |c| range.contains(&c) as u8 as f64)
    }

    /// Expected squared norm of each thresholded shell under the
    /// initialization distribution (uniform He: variance bound² / 3).
    fn expected_norms(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.max_kernel();
        let var = 6.0 / (k * k) as f64 / 3.0;
        let kt = (1..self.spec.kernel_sizes().len())
            .map(|i| self.ring_mask(i).data().iter().sum::<f64>() * var)
            .collect();
        let et = (1..self.spec.expansions().len()).map(|d| (self.shell_channels(d).len() * k * k) as f64 * var).collect();
        (kt, et)
    }

    /// Squared norms of the thresholded shells with every shell selected:
    /// kernel rings over all channels, then expansion slices.
    pub fn shell_norms(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let w = store.value(self.weights);
        let norm = |m: Tensor| -> f64 { w.data().iter().zip(m.data()).map(|(a, b)| a * a * b).sum() };
        let kn = (1..self.spec.kernel_sizes().len()).map(|i| norm(self.ring_mask(i))).collect();
        let en = (1..self.spec.expansions().len()).map(|d| norm(self.slice_mask(d))).collect();
        (kn, en)
    }

    /// Puts every threshold `margin` below its shell's current squared norm,
    /// so the largest choice is selected and every indicator sits close to
    /// its decision boundary.
    pub fn recenter_thresholds(&self, store: &mut ParamStore, margin: f64) {
        let (kn, en) = self.shell_norms(store);
        for (&t, n) in self.kernel_thresholds.iter().zip(kn) {
            *store.value_mut(t) = Tensor::scalar(n - margin);
        }
        for (&t, n) in self.expansion_thresholds.iter().zip(en) {
            *store.value_mut(t) = Tensor::scalar(n - margin);
        }
    }

    fn forced_indicators(&self, kernel: u32, expansion: Expansion) -> Result<(Vec<f64>, Vec<f64>), ArchError> {
        let ks = self.spec.kernel_sizes();
        let es = self.spec.expansions();
        let ki = ks.iter().position(|&k| k == kernel);
        let ei = es.iter().position(|&e| e == expansion);
        let (ki, ei) = match (ki, ei) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(ArchError::InvalidDecision(format!("({kernel}, {expansion}) is not a candidate"))),
        };
        let kv = (1..ks.len()).map(|i| (i <= ki) as u8 as f64).collect();
        let ev = (1..es.len()).map(|d| (d <= ei) as u8 as f64).collect();
        Ok((kv, ev))
    }

    /// Builds indicators, masked weights, condition variables and the
    /// channel gate.
    pub fn evaluate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mode: IndicatorMode,
    ) -> Result<SuperkernelNodes, SuperkernelError> {
        let w = g.param(store, self.weights)?;
        let nk = self.spec.kernel_sizes().len();
        let ne = self.spec.expansions().len();
        let forced = match mode {
            IndicatorMode::Learned => None,
            IndicatorMode::Forced(k, e) => Some(self.forced_indicators(k, e)?),
        };

        let mut kernel_indicators = Vec::with_capacity(nk - 1);
        for i in 1..nk {
            let ind = match &forced {
                Some((kv, _)) => g.scalar(kv[i - 1])?,
                None => {
                    let shell = g.mul_const(w, self.ring_mask(i))?;
                    let norm = g.squared_norm(shell)?;
                    let t = g.param(store, self.kernel_thresholds[i - 1])?;
                    g.hard_indicator_st(norm, t)?
                }
            };
            kernel_indicators.push(ind);
        }
        let one = g.scalar(1.0)?;
        let kernel_prefix = prefix_products(g, one, &kernel_indicators)?;
        let kernel_masked = if nk == 1 {
            w
        } else {
            let mut parts = Vec::with_capacity(nk);
            for (i, &p) in kernel_prefix.iter().enumerate() {
                let ring = g.mul_const(w, self.ring_mask(i))?;
                parts.push(g.scale(ring, p)?);
            }
            g.add_n(&parts)?
        };

        let mut expansion_indicators = Vec::with_capacity(ne - 1);
        for d in 1..ne {
            let ind = match &forced {
                Some((_, ev)) => g.scalar(ev[d - 1])?,
                None => {
                    let shell = g.mul_const(kernel_masked, self.slice_mask(d))?;
                    let norm = g.squared_norm(shell)?;
                    let t = g.param(store, self.expansion_thresholds[d - 1])?;
                    g.hard_indicator_st(norm, t)?
                }
            };
            expansion_indicators.push(ind);
        }
        let expansion_prefix = prefix_products(g, one, &expansion_indicators)?;

        let mut parts = Vec::with_capacity(ne);
        let mut gates = Vec::with_capacity(ne);
        for (d, &p) in expansion_prefix.iter().enumerate() {
            if self.shell_channels(d).is_empty() {
                continue;
            }
            let shell = g.mul_const(kernel_masked, self.slice_mask(d))?;
            parts.push(g.scale(shell, p)?);
            let gate = g.constant(self.slice_gate(d))?;
            gates.push(g.scale(gate, p)?);
        }
        let masked = g.add_n(&parts)?;
        let channel_gate = g.add_n(&gates)?;

        let f = condition_vars(g, &kernel_prefix, &kernel_indicators)?;
        let gv = condition_vars(g, &expansion_prefix, &expansion_indicators)?;
        let active = if self.spec.allows_zero() { Some(expansion_prefix[1]) } else { None };
        Ok(SuperkernelNodes { kernel_indicators, expansion_indicators, f, g: gv, masked, channel_gate, active })
    }

    /// Hard decision currently encoded by the thresholds.
    pub fn extract_decision(&self, store: &ParamStore) -> Result<(u32, Expansion), SuperkernelError> {
        let mut g = Graph::new();
        let nodes = self.evaluate(&mut g, store, IndicatorMode::Learned)?;
        Ok(decision_from_nodes(&g, &nodes, &self.spec))
    }

    /// Squared norm of the shell that a one-step downgrade of `current`
    /// would switch off, together with the downgraded choice.
    pub fn downgrades(&self, store: &ParamStore, current: (u32, Expansion)) -> Vec<((u32, Expansion), f64)> {
        let ks = self.spec.kernel_sizes();
        let es = self.spec.expansions();
        let w = store.value(self.weights);
        let ki = ks.iter().position(|&k| k == current.0).unwrap_or(0);
        let ei = es.iter().position(|&e| e == current.1).unwrap_or(0);
        let kk = self.max_kernel() * self.max_kernel();
        let norm_over = |ring: usize, chans: std::ops::Range<usize>| -> f64 {
            let m = self.ring_mask(ring);
            chans.map(|c| (0..kk).map(|j| m.data()[c * kk + j] * w.data()[c * kk + j].powi(2)).sum::<f64>()).sum()
        };
        let mut out = Vec::new();
        if current.1.is_zero() {
            return out;
        }
        let live = 0..self.bounds[ei];
        if ki > 0 {
            out.push(((ks[ki - 1], current.1), norm_over(ki, live.clone())));
        }
        if ei > 0 {
            let chans = self.shell_channels(ei);
            let n: f64 = (0..=ki).map(|r| norm_over(r, chans.clone())).sum();
            let k = if es[ei - 1].is_zero() { ks[0] } else { current.0 };
            out.push(((k, es[ei - 1]), n));
        }
        out
    }
}

/// `[1, a0, a0·a1, …]`.
fn prefix_products(g: &mut Graph, one: Var, xs: &[Var]) -> Result<Vec<Var>, AutodiffError> {
    let mut out = vec![one];
    for &x in xs {
        let last = *out.last().expect("non-empty");
        out.push(if last == one { x } else { g.mul(last, x)? });
    }
    Ok(out)
}

/// `F_c = prefix_c · (1 − ind_{c+1})`, with the complement omitted for the
/// last candidate.
fn condition_vars(g: &mut Graph, prefix: &[Var], indicators: &[Var]) -> Result<Vec<Var>, AutodiffError> {
    let mut out = Vec::with_capacity(prefix.len());
    for c in 0..prefix.len() {
        if c + 1 < prefix.len() {
            let off = g.one_minus(indicators[c])?;
            out.push(g.mul(prefix[c], off)?);
        } else {
            out.push(prefix[c]);
        }
    }
    Ok(out)
}

pub fn decision_from_nodes(g: &Graph, nodes: &SuperkernelNodes, spec: &SuperkernelSpec) -> (u32, Expansion) {
    let pick = |vars: &[Var]| vars.iter().position(|&v| g.value(v).item() == 1.0).unwrap_or(0);
    let e = spec.expansions()[pick(&nodes.g)];
    let k = if e.is_zero() { spec.kernel_sizes()[0] } else { spec.kernel_sizes()[pick(&nodes.f)] };
    (k, e)
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SuperkernelError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Searchable block: 1×1 expansion, one masked depthwise branch per
/// superkernel, 1×1 projection, residual when shapes allow.
#[derive(Clone, Debug)]
pub struct SuperBlock {
    pub spec: BlockSpec,
    pub expand: ParamId,
    pub bn_expand: BatchNormParams,
    pub superkernels: Vec<Superkernel>,
    pub project: ParamId,
    pub bn_project: BatchNormParams,
}

/// Output of a block forward plus the per-superkernel nodes.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    pub superkernels: Vec<SuperkernelNodes>,
}

impl SuperBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, spec: BlockSpec) -> Result<Self, ArchError> {
        spec.validate()?;
        let ci = spec.input_width;
        let mut superkernels = Vec::with_capacity(spec.superkernels.len());
        for (j, sk) in spec.superkernels.iter().enumerate() {
            superkernels.push(Superkernel::new(store, rng, &format!("{prefix}.sk{j}"), sk.clone(), ci)?);
        }
        let total: usize = superkernels.iter().map(Superkernel::channels).sum();
        let expand = store.add(format!("{prefix}.expand"), kaiming_uniform(rng, &[total, ci], ci), true);
        let bn_expand = store.add_batch_norm(&format!("{prefix}.expand_bn"), total);
        let project =
            store.add(format!("{prefix}.project"), kaiming_uniform(rng, &[spec.output_width, total], total), true);
        let bn_project = store.add_batch_norm(&format!("{prefix}.project_bn"), spec.output_width);
        Ok(Self { spec, expand, bn_expand, superkernels, project, bn_project })
    }

    pub fn has_residual(&self) -> bool {
        self.spec.stride == 1 && self.spec.input_width == self.spec.output_width
    }

    /// Forward pass. `modes` holds one indicator mode per superkernel.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        modes: &[IndicatorMode],
        act: Activation,
        training: bool,
    ) -> Result<BlockOutput, SuperkernelError> {
        if modes.len() != self.superkernels.len() {
            return Err(ArchError::InvalidDecision(format!(
                "{} modes for {} superkernels",
                modes.len(),
                self.superkernels.len()
            ))
            .into());
        }
        let we = g.param(store, self.expand)?;
        let h = g.pointwise(x, we)?;
        let h = g.batch_norm(store, &self.bn_expand, h, training)?;
        let h = activate(g, h, act)?;
        let mut branches = Vec::with_capacity(self.superkernels.len());
        let mut nodes = Vec::with_capacity(self.superkernels.len());
        let mut offset = 0;
        for (sk, &mode) in self.superkernels.iter().zip(modes) {
            let n = sk.evaluate(g, store, mode)?;
            let part = g.slice_channels(h, offset, sk.channels())?;
            offset += sk.channels();
            let y = g.dwconv2d(part, n.masked, self.spec.stride)?;
            let y = g.batch_norm(store, &sk.bn, y, training)?;
            let y = activate(g, y, act)?;
            branches.push(g.channel_scale(y, n.channel_gate)?);
            nodes.push(n);
        }
        let cat = if branches.len() == 1 { branches[0] } else { g.concat_channels(&branches)? };
        let wp = g.param(store, self.project)?;
        let y = g.pointwise(cat, wp)?;
        let mut y = g.batch_norm(store, &self.bn_project, y, training)?;
        if self.has_residual() {
            let actives: Option<Vec<Var>> = nodes.iter().map(|n| n.active).collect();
            if let Some(actives) = actives {
                // 1 − Π_j (1 − active_j): zero exactly when every branch is off
                let mut all_off = g.one_minus(actives[0])?;
                for &a in &actives[1..] {
                    let off = g.one_minus(a)?;
                    all_off = g.mul(all_off, off)?;
                }
                let any_on = g.one_minus(all_off)?;
                y = g.scale(y, any_on)?;
            }
            y = g.add(y, x)?;
        }
        Ok(BlockOutput { output: y, superkernels: nodes })
    }

    pub fn forced_modes(&self, decision: &BlockDecision) -> Result<Vec<IndicatorMode>, ArchError> {
        if decision.len() != self.superkernels.len() {
            return Err(ArchError::InvalidDecision(format!(
                "{} entries for {} superkernels",
                decision.len(),
                self.superkernels.len()
            )));
        }
        Ok(decision.pairs().map(|(k, e)| IndicatorMode::Forced(k, e)).collect())
    }

    pub fn extract_decision(&self, store: &ParamStore) -> Result<BlockDecision, SuperkernelError> {
        let mut kernels = Vec::new();
        let mut expansions = Vec::new();
        for sk in &self.superkernels {
            let (k, e) = sk.extract_decision(store)?;
            kernels.push(k);
            expansions.push(e);
        }
        Ok(BlockDecision::new(kernels, expansions))
    }

    /// Sets thresholds so that a learned forward selects `decision`.
    pub fn force_thresholds(&self, store: &mut ParamStore, decision: &BlockDecision) -> Result<(), ArchError> {
        for (sk, (k, e)) in self.superkernels.iter().zip(decision.pairs()) {
            let (kv, ev) = sk.forced_indicators(k, e)?;
            for (&t, &on) in sk.kernel_thresholds.iter().zip(&kv) {
                *store.value_mut(t) = Tensor::scalar(if on == 1.0 { f64::MIN } else { f64::MAX });
            }
            for (&t, &on) in sk.expansion_thresholds.iter().zip(&ev) {
                *store.value_mut(t) = Tensor::scalar(if on == 1.0 { f64::MIN } else { f64::MAX });
            }
        }
        Ok(())
    }
}
