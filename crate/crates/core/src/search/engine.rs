use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{Activation, BlockDecision, ConcreteArchitecture, SupernetSpec};
use crate::autodiff::{Graph, Sgd};
use crate::latency::{estimate_network_latency, LatencyTable};
use crate::network::{diverged, epoch_batches, evaluate, LrSchedule, NetMode, NetworkError, SupernetModel};
use crate::superkernel::IndicatorMode;
use crate::synth::Dataset;

use super::{differentiable_block_latency, latency_gated_loss, SearchConfig, SearchError};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub phase: u8,
    pub step: usize,
    pub ce: f64,
    pub latency_ms: f64,
    pub gated_term: f64,
    pub lr: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["phase", "step", "ce", "latency_ms", "gated_term", "lr"]).expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.phase.to_string(),
            r.step.to_string(),
            r.ce.to_string(),
            r.latency_ms.to_string(),
            r.gated_term.to_string(),
            r.lr.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

/// One greedy downgrade applied after extraction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RepairStep {
    pub block: usize,
    pub superkernel: usize,
    pub from: String,
    pub to: String,
    pub saving_ms: f64,
    pub shell_norm: f64,
    pub latency_after_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchSummary {
    pub seed: u64,
    pub target_latency_ms: f64,
    pub phase2_run: bool,
    pub extracted_configs: Vec<String>,
    /// ΣL evaluated from the thresholds at extraction time.
    pub latency_at_extraction_ms: f64,
    pub extracted_latency_ms: f64,
    pub repair_steps: Vec<RepairStep>,
    pub final_configs: Vec<String>,
    pub final_latency_ms: f64,
    pub feasible: bool,
    pub supernet_val_accuracy: f64,
}

impl SearchSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub struct SearchOutcome {
    pub architecture: ConcreteArchitecture,
    pub summary: SearchSummary,
    pub metrics: Vec<MetricsRow>,
    pub model: SupernetModel,
}

impl SearchOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

/// Independently draws one choice per superkernel, uniformly over its
/// distinct choices.
pub fn sample_decisions(spec: &SupernetSpec, rng: &mut impl rand::Rng) -> Vec<BlockDecision> {
    spec.blocks()
        .map(|b| {
            let (kernels, exps) = b
                .superkernels
                .iter()
                .map(|sk| *sk.choices().choose(rng).expect("non-empty candidate set"))
                .unzip();
            BlockDecision::new(kernels, exps)
        })
        .collect()
}

fn step_schedule(cfg: &SearchConfig) -> LrSchedule {
    LrSchedule::Step { factor: cfg.lr_decay, interval_epochs: cfg.lr_decay_epochs }
}

fn check_split(train: &[usize]) -> Result<(), SearchError> {
    if train.is_empty() {
        return Err(SearchError::Config("empty training split".into()));
    }
    Ok(())
}

/// Uniform single-path training of the shared weights. Thresholds are
/// frozen and bypassed. Returns the next global step.
pub fn phase1_train(
    model: &mut SupernetModel,
    data: &Dataset,
    train: &[usize],
    table: &LatencyTable,
    cfg: &SearchConfig,
    metrics: &mut Vec<MetricsRow>,
) -> Result<usize, SearchError> {
    check_split(train)?;
    model.set_thresholds_trainable(false, 1.0);
    let mut opt = Sgd::new(cfg.momentum, cfg.grad_clip);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler.set_stream(0xA11);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = step_schedule(cfg);
    let mut step = 0;
    for epoch in 0..cfg.phase1_epochs {
        for batch in epoch_batches(train, cfg.batch_size, cfg.seed, epoch) {
            let lr = schedule.lr(cfg.lr, step, steps_per_epoch, 0);
            let decisions = sample_decisions(&model.spec, &mut sampler);
            let arch = ConcreteArchitecture::from_supernet(&model.spec, &decisions)?;
            let latency = estimate_network_latency(&arch, table)?;
            let (x, labels) = data.batch(&batch);
            let mut g = Graph::new();
            let xv = g.constant(x)?;
            let ce = model
                .forward(&mut g, xv, NetMode::Forced(&decisions), true)
                .and_then(|(l, _)| g.softmax_cross_entropy(l, &labels).map_err(NetworkError::from))
                .map_err(|e| diverged(step, e))?;
            let grads = g.backward(ce).map_err(|e| diverged(step, e.into()))?;
            model.store.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.store);
            opt.step(&mut model.store, lr);
            g.update_running_stats(&mut model.store, cfg.bn_momentum);
            metrics.push(MetricsRow { phase: 1, step, ce: g.value(ce).item(), latency_ms: latency, gated_term: 0.0, lr });
            step += 1;
        }
        info!("phase 1 epoch {epoch} done");
    }
    Ok(step)
}

/// ΣL (stem, head and the threshold-selected block latencies).
pub fn supernet_latency(model: &SupernetModel, table: &LatencyTable) -> Result<f64, SearchError> {
    let mut g = Graph::new();
    let mut parts = Vec::with_capacity(model.blocks.len());
    for (i, block) in model.blocks.iter().enumerate() {
        let nodes = block
            .superkernels
            .iter()
            .map(|sk| sk.evaluate(&mut g, &model.store, IndicatorMode::Learned))
            .collect::<Result<Vec<_>, _>>()
            .map_err(NetworkError::from)?;
        parts.push(differentiable_block_latency(&mut g, block, &nodes, &table.blocks[i], i)?);
    }
    let sum = g.add_n(&parts)?;
    Ok(g.value(sum).item() + table.stem + table.head)
}

/// Joint training of weights and thresholds under the gated loss.
pub fn phase2_train(
    model: &mut SupernetModel,
    data: &Dataset,
    train: &[usize],
    table: &LatencyTable,
    cfg: &SearchConfig,
    first_step: usize,
    metrics: &mut Vec<MetricsRow>,
) -> Result<(), SearchError> {
    check_split(train)?;
    if table.num_blocks() != model.blocks.len() {
        return Err(crate::latency::LatencyError::BlockCountMismatch {
            table: table.num_blocks(),
            arch: model.blocks.len(),
        }
        .into());
    }
    for block in &model.blocks {
        for sk in &block.superkernels {
            sk.recenter_thresholds(&mut model.store, cfg.threshold_margin);
        }
    }
    model.set_thresholds_trainable(true, cfg.threshold_lr_scale);
    let mut opt = Sgd::new(cfg.momentum, cfg.grad_clip);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = step_schedule(cfg);
    let fixed = table.stem + table.head;
    let mut step = first_step;
    for epoch in 0..cfg.phase2_epochs {
        for batch in epoch_batches(train, cfg.batch_size, cfg.seed, cfg.phase1_epochs + epoch) {
            let lr = schedule.lr(cfg.lr, step, steps_per_epoch, 0);
            let (x, labels) = data.batch(&batch);
            let mut g = Graph::new();
            let run = |g: &mut Graph| -> Result<_, SearchError> {
                let xv = g.constant(x)?;
                let (logits, outs) = model.forward(g, xv, NetMode::Learned, true)?;
                let ce = g.softmax_cross_entropy(logits, &labels)?;
                let mut parts = Vec::with_capacity(outs.len());
                for (i, (block, out)) in model.blocks.iter().zip(&outs).enumerate() {
                    parts.push(differentiable_block_latency(g, block, &out.superkernels, &table.blocks[i], i)?);
                }
                let blocks = g.add_n(&parts)?;
                let total = g.affine(blocks, 1.0, fixed)?;
                let gl = latency_gated_loss(g, ce, total, cfg)?;
                Ok((ce, total, gl))
            };
            let (ce, total, gl) = run(&mut g).map_err(|e| match e {
                SearchError::Network(n) => SearchError::Network(diverged(step, n)),
                other => other,
            })?;
            let grads = g.backward(gl.loss).map_err(|e| diverged(step, e.into()))?;
            model.store.zero_grad();
            g.accumulate_param_grads(&grads, &mut model.store);
            opt.step(&mut model.store, lr);
            g.update_running_stats(&mut model.store, cfg.bn_momentum);
            metrics.push(MetricsRow {
                phase: 2,
                step,
                ce: g.value(ce).item(),
                latency_ms: g.value(total).item(),
                gated_term: g.value(gl.latency_term).item(),
                lr,
            });
            step += 1;
        }
        info!("phase 2 epoch {epoch} done");
    }
    Ok(())
}

/// Hard decisions from the thresholds, as a ReLU network without SE.
pub fn extract_architecture(model: &SupernetModel) -> Result<ConcreteArchitecture, SearchError> {
    let decisions = model.extract_decisions()?;
    let mut arch = ConcreteArchitecture::from_supernet(&model.spec, &decisions)?;
    arch.activation = Activation::Relu;
    Ok(arch)
}

/// Repeatedly applies the single-step downgrade (one kernel ring or one
/// expansion slice switched off) with the largest latency saving per unit
/// of removed squared weight norm, until the estimate is within `target`.
pub fn greedy_repair(
    model: &SupernetModel,
    arch: &mut ConcreteArchitecture,
    table: &LatencyTable,
    target: f64,
) -> Result<Vec<RepairStep>, SearchError> {
    let mut steps = Vec::new();
    let mut current = estimate_network_latency(arch, table)?;
    while current > target {
        let decisions = arch.decisions();
        let mut best: Option<(f64, f64, usize, usize, BlockDecision, f64)> = None;
        for (bi, (block, dec)) in model.blocks.iter().zip(&decisions).enumerate() {
            let here = table.lookup(bi, &block.spec.canonical_config(dec)?)?;
            for (j, sk) in block.superkernels.iter().enumerate() {
                let pair = (dec.kernels[j], dec.expansions[j]);
                for ((k, e), norm) in sk.downgrades(&model.store, pair) {
                    let mut next = dec.clone();
                    next.kernels[j] = k;
                    next.expansions[j] = e;
                    let Ok(cfg) = block.spec.canonical_config(&next) else { continue };
                    let saving = here - table.lookup(bi, &cfg)?;
                    if saving < 0.0 {
                        continue;
                    }
                    let ratio = saving / norm.max(1e-12);
                    let better = match &best {
                        None => true,
                        Some((r, s, ..)) => ratio > *r || (ratio == *r && saving > *s),
                    };
                    if better {
                        best = Some((ratio, saving, bi, j, next, norm));
                    }
                }
            }
        }
        let Some((_, saving, bi, j, next, norm)) = best else {
            return Err(SearchError::Infeasible(format!(
                "latency {current} ms still above target {target} ms with no downgrade left"
            )));
        };
        let from = decisions[bi].clone();
        let block = arch.blocks_mut().nth(bi).expect("index in range");
        block.decision = next.clone();
        current = estimate_network_latency(arch, table)?;
        steps.push(RepairStep {
            block: bi,
            superkernel: j,
            from: format!("{}:{}", from.kernels[j], from.expansions[j]),
            to: format!("{}:{}", next.kernels[j], next.expansions[j]),
            saving_ms: saving,
            shell_norm: norm,
            latency_after_ms: current,
        });
        info!("repair: block {bi} superkernel {j} -> {current} ms");
    }
    Ok(steps)
}

/// Full search: phase 1, phase 2 (skipped when λ₁ = 0), extraction and
/// repair.
pub fn run_search(
    spec: &SupernetSpec,
    data: &Dataset,
    train: &[usize],
    val: &[usize],
    table: &LatencyTable,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    cfg.validate()?;
    let mut model = SupernetModel::new(spec.clone(), cfg.seed)?;
    let mut metrics = Vec::new();
    let next = phase1_train(&mut model, data, train, table, cfg, &mut metrics)?;
    let phase2_run = cfg.lambda1 > 0.0 && cfg.phase2_epochs > 0;
    if phase2_run {
        phase2_train(&mut model, data, train, table, cfg, next, &mut metrics)?;
    } else {
        info!("lambda1 = 0: phase 2 skipped, thresholds keep their initial values");
    }
    let latency_at_extraction = supernet_latency(&model, table)?;
    let mut arch = extract_architecture(&model)?;
    let extracted_configs = arch.configs().iter().map(ToString::to_string).collect();
    let extracted_latency = estimate_network_latency(&arch, table)?;
    let repair = greedy_repair(&model, &mut arch, table, cfg.target_latency_ms);
    let (repair_steps, feasible) = match repair {
        Ok(steps) => (steps, true),
        Err(SearchError::Infeasible(msg)) => {
            info!("{msg}");
            (Vec::new(), false)
        }
        Err(e) => return Err(e),
    };
    let final_latency = estimate_network_latency(&arch, table)?;
    let supernet_val_accuracy = evaluate(&model, data, val, cfg.batch_size.max(64))?;
    let summary = SearchSummary {
        seed: cfg.seed,
        target_latency_ms: cfg.target_latency_ms,
        phase2_run,
        extracted_configs,
        latency_at_extraction_ms: latency_at_extraction,
        extracted_latency_ms: extracted_latency,
        repair_steps,
        final_configs: arch.configs().iter().map(ToString::to_string).collect(),
        final_latency_ms: final_latency,
        feasible: feasible && final_latency <= cfg.target_latency_ms,
        supernet_val_accuracy,
    };
    Ok(SearchOutcome { architecture: arch, summary, metrics, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{build_latency_table, Analytical, CostModelParams};
    use crate::network::tests::tiny_supernet;
    use crate::synth::{split, SynthTaskSpec};

    fn table(spec: &SupernetSpec) -> LatencyTable {
        build_latency_table(spec, &Analytical(CostModelParams::default())).unwrap()
    }

    #[test]
    fn soft_latency_matches_table_at_extraction() {
        let spec = tiny_supernet();
        let table = table(&spec);
        let mut model = SupernetModel::new(spec.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let decisions = sample_decisions(&spec, &mut rng);
            for (block, d) in model.blocks.iter().zip(&decisions) {
                block.force_thresholds(&mut model.store, d).unwrap();
            }
            let arch = extract_architecture(&model).unwrap();
            assert_eq!(arch.decisions(), decisions);
            let hard = estimate_network_latency(&arch, &table).unwrap();
            let soft = supernet_latency(&model, &table).unwrap();
            assert!((hard - soft).abs() <= 1e-9 * hard, "{hard} vs {soft}");
        }
    }

    #[test]
    fn repair_reaches_reachable_target() {
        let spec = tiny_supernet();
        let table = table(&spec);
        let model = SupernetModel::new(spec.clone(), 2).unwrap();
        let mut arch = extract_architecture(&model).unwrap();
        let start = estimate_network_latency(&arch, &table).unwrap();
        let floor = table.stem + table.head + table.min_block_sum();
        let target = floor + 0.5 * (start - floor);
        let steps = greedy_repair(&model, &mut arch, &table, target).unwrap();
        assert!(!steps.is_empty());
        assert!(estimate_network_latency(&arch, &table).unwrap() <= target);
        assert!(steps.windows(2).all(|w| w[1].latency_after_ms <= w[0].latency_after_ms));
        let err = greedy_repair(&model, &mut arch, &table, floor * 0.5).unwrap_err();
        assert!(matches!(err, SearchError::Infeasible(_)));
    }

    #[test]
    fn short_search_runs_end_to_end() {
        let spec = tiny_supernet();
        let table = table(&spec);
        let task = SynthTaskSpec { image_size: 12, samples_per_class: 12, ..Default::default() };
        let data = Dataset::generate(&task).unwrap();
        let (train, val) = split(&task);
        let floor = table.stem + table.head + table.min_block_sum();
        let cfg = SearchConfig {
            phase1_epochs: 1,
            phase2_epochs: 1,
            batch_size: 16,
            target_latency_ms: floor * 1.2,
            ..Default::default()
        };
        let out = run_search(&spec, &data, &train, &val, &table, &cfg).unwrap();
        assert!(out.summary.phase2_run);
        assert_eq!(out.metrics.len(), 2 * train.len().div_ceil(16));
        assert!(out.metrics.iter().all(|r| r.ce.is_finite() && r.latency_ms > 0.0));
        assert!(out.summary.feasible);
        assert!(out.summary.final_latency_ms <= cfg.target_latency_ms);
        let csv = out.metrics_csv();
        assert!(csv.starts_with("phase,step,ce,latency_ms,gated_term,lr\n"));
        let json: serde_json::Value = serde_json::from_str(&out.summary.to_json()).unwrap();
        assert_eq!(json["seed"], 0);
    }
}
