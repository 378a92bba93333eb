use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{ConcreteArchitecture, SupernetSpec};
use crate::latency::{estimate_network_latency, LatencyTable};
use crate::network::{evaluate, train, ConcreteNet, TrainConfig};
use crate::synth::Dataset;

use super::engine::sample_decisions;
use super::SearchError;

/// Rejection-sampling budget for latency-matched draws.
pub const MAX_DRAWS: usize = 100_000;

/// Uniformly sampled architecture (one choice per superkernel).
pub fn random_architecture(spec: &SupernetSpec, rng: &mut impl rand::Rng) -> Result<ConcreteArchitecture, SearchError> {
    let decisions = sample_decisions(spec, rng);
    Ok(ConcreteArchitecture::from_supernet(spec, &decisions)?)
}

/// Draws random architectures until one lands in `[lo, hi]` milliseconds.
pub fn sample_latency_matched(
    spec: &SupernetSpec,
    table: &LatencyTable,
    lo: f64,
    hi: f64,
    rng: &mut impl rand::Rng,
) -> Result<(ConcreteArchitecture, f64), SearchError> {
    if !(lo <= hi) {
        return Err(SearchError::Config(format!("empty latency band [{lo}, {hi}]")));
    }
    for _ in 0..MAX_DRAWS {
        let arch = random_architecture(spec, rng)?;
        let latency = estimate_network_latency(&arch, table)?;
        if (lo..=hi).contains(&latency) {
            return Ok((arch, latency));
        }
    }
    Err(SearchError::Infeasible(format!("no random architecture within [{lo}, {hi}] ms after {MAX_DRAWS} draws")))
}

/// The `p`-th percentile (0..=100) of estimated latency over `samples`
/// uniformly drawn architectures.
pub fn latency_percentile(
    spec: &SupernetSpec,
    table: &LatencyTable,
    p: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, SearchError> {
    if !(0.0..=100.0).contains(&p) || samples == 0 {
        return Err(SearchError::Config(format!("percentile {p} over {samples} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x9E7);
    let mut lats = (0..samples)
        .map(|_| Ok(estimate_network_latency(&random_architecture(spec, &mut rng)?, table)?))
        .collect::<Result<Vec<f64>, SearchError>>()?;
    lats.sort_by(f64::total_cmp);
    let rank = (p / 100.0 * (samples - 1) as f64).round() as usize;
    Ok(lats[rank])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub architecture: ConcreteArchitecture,
    pub latency_ms: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateRow {
    pub index: usize,
    pub configs: Vec<String>,
    pub latency_ms: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomSearchResult {
    pub candidates: Vec<Candidate>,
    pub best: usize,
}

impl RandomSearchResult {
    pub fn best(&self) -> &Candidate {
        &self.candidates[self.best]
    }

    pub fn rows(&self) -> Vec<CandidateRow> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(index, c)| CandidateRow {
                index,
                configs: c.architecture.configs().iter().map(ToString::to_string).collect(),
                latency_ms: c.latency_ms,
                val_accuracy: c.val_accuracy,
            })
            .collect()
    }
}

fn config_ids(arch: &ConcreteArchitecture) -> Vec<String> {
    arch.configs().iter().map(ToString::to_string).collect()
}

/// Samples `count` architectures in `[0.95·target, target]`, proxy-trains
/// each from scratch and keeps the most accurate one. Ties go to the lower
/// latency, then to the lexicographically smaller config ids.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    spec: &SupernetSpec,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    table: &LatencyTable,
    target_ms: f64,
    count: usize,
    train_cfg: &TrainConfig,
) -> Result<RandomSearchResult, SearchError> {
    if count == 0 {
        return Err(SearchError::Config("random search needs at least one candidate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(0xBA5E);
    let mut candidates = Vec::with_capacity(count);
    for i in 0..count {
        let (arch, latency_ms) = sample_latency_matched(spec, table, 0.95 * target_ms, target_ms, &mut rng)?;
        let mut net = ConcreteNet::new(&arch, train_cfg.seed.wrapping_add(i as u64))?;
        train(&mut net, data, train_idx, train_cfg)?;
        let val_accuracy = evaluate(&net, data, val_idx, train_cfg.batch_size.max(64))?;
        info!("random candidate {i}: {latency_ms:.4} ms, accuracy {val_accuracy:.4}");
        candidates.push(Candidate { architecture: arch, latency_ms, val_accuracy });
    }
    let best = (0..count)
        .max_by(|&a, &b| {
            let (ca, cb) = (&candidates[a], &candidates[b]);
            ca.val_accuracy
                .total_cmp(&cb.val_accuracy)
                .then(cb.latency_ms.total_cmp(&ca.latency_ms))
                .then_with(|| config_ids(&cb.architecture).cmp(&config_ids(&ca.architecture)))
        })
        .expect("count >= 1");
    Ok(RandomSearchResult { candidates, best })
}
