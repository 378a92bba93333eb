//! Post-processing of a searched network: SE and h-swish insertion, the
//! SE dispersion metric and selective SE removal.
//!
//! The dispersion of an SE block is the mean over channels of the
//! cross-image standard deviation of its excitation. A block whose gates
//! barely move between images acts like a fixed channel scale, so it is the
//! first candidate for removal.

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::arch::{Activation, ConcreteArchitecture};
use crate::autodiff::{Graph, Tensor};
use crate::network::{ConcreteNet, NetworkError};
use crate::synth::Dataset;

pub const DEFAULT_KEEP_FRACTION: f64 = 0.6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PostprocessError {
    #[error("dispersion needs at least 2 images, got {0}")]
    TooFewImages(usize),
    #[error("architecture has no SE blocks")]
    NoSeBlocks,
    #[error("dispersion report does not match the SE blocks: {0}")]
    ReportMismatch(String),
    #[error("keep fraction {0} outside [0, 1]")]
    BadKeepFraction(f64),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Enables SE on every non-skip block and switches the activation to
/// h-swish. The SE reduction ratio is a property of the network built from
/// the architecture, not of the architecture itself.
pub fn add_se_hswish(arch: &ConcreteArchitecture) -> ConcreteArchitecture {
    let mut out = arch.clone();
    out.activation = Activation::HSwish;
    for b in out.blocks_mut() {
        b.se = !b.decision.is_skip();
    }
    out
}

/// Running per-channel mean and variance, mergeable across batches.
#[derive(Clone, Debug, PartialEq)]
pub struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(channels: usize) -> Self {
        Self { count: 0, mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(row) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn merge(&mut self, other: &Welford) {
        assert_eq!(other.mean.len(), self.mean.len());
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            self.clone_from(other);
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
    }

    /// Population standard deviation of each channel.
    pub fn std(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|&s| (s.max(0.0) / n).sqrt()).collect()
    }

    /// Mean over channels of the per-channel standard deviation.
    pub fn mean_std(&self) -> f64 {
        let s = self.std();
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeDispersion {
    pub block_index: usize,
    pub metric: f64,
    pub channels: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeDispersionReport {
    pub blocks: Vec<SeDispersion>,
}

impl SeDispersionReport {
    /// Builds the report from finished accumulators, keyed by block index.
    pub fn from_accumulators(acc: &[(usize, Welford)]) -> Result<Self, PostprocessError> {
        if acc.is_empty() {
            return Err(PostprocessError::NoSeBlocks);
        }
        let mut blocks = Vec::with_capacity(acc.len());
        for (i, w) in acc {
            if w.count() < 2 {
                return Err(PostprocessError::TooFewImages(w.count()));
            }
            blocks.push(SeDispersion { block_index: *i, metric: w.mean_std(), channels: w.channels(), samples: w.count() });
        }
        Ok(Self { blocks })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for b in &self.blocks {
            w.serialize(b).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self, PostprocessError> {
        #[derive(serde::Deserialize)]
        struct Row {
            block_index: usize,
            metric: f64,
            channels: usize,
            samples: usize,
        }
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut blocks = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let r = row.map_err(|e| PostprocessError::ReportMismatch(e.to_string()))?;
            blocks.push(SeDispersion { block_index: r.block_index, metric: r.metric, channels: r.channels, samples: r.samples });
        }
        Ok(Self { blocks })
    }
}

fn push_rows(acc: &mut Welford, t: &Tensor) {
    let c = acc.channels();
    for row in t.data().chunks(c) {
        acc.push(row);
    }
}

/// Runs `net` in eval mode over `indices` and measures every SE block's
/// excitation dispersion.
pub fn se_dispersion(
    net: &ConcreteNet,
    data: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<SeDispersionReport, PostprocessError> {
    if indices.len() < 2 {
        return Err(PostprocessError::TooFewImages(indices.len()));
    }
    let se_blocks: Vec<(usize, usize)> = net
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| b.se.as_ref().map(|se| (i, se.channels)))
        .collect();
    if se_blocks.is_empty() {
        return Err(PostprocessError::NoSeBlocks);
    }
    let mut acc: Vec<(usize, Welford)> = se_blocks.iter().map(|&(i, c)| (i, Welford::new(c))).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk);
        let mut g = Graph::new();
        let xv = g.constant(x).map_err(NetworkError::from)?;
        let (_, exc) = net.forward(&mut g, xv, false)?;
        let mut batch: Vec<(usize, Welford)> = se_blocks.iter().map(|&(i, c)| (i, Welford::new(c))).collect();
        for (i, w) in &mut batch {
            let v = exc[*i].expect("SE block yields an excitation");
            push_rows(w, g.value(v));
        }
        for ((_, total), (_, part)) in acc.iter_mut().zip(&batch) {
            total.merge(part);
        }
    }
    SeDispersionReport::from_accumulators(&acc)
}

/// Block indices whose SE is dropped: the lowest-metric `(1 − keep)` share,
/// earlier blocks first among equal metrics.
pub fn se_removal_set(report: &SeDispersionReport, keep_fraction: f64) -> Result<BTreeSet<usize>, PostprocessError> {
    if !(0.0..=1.0).contains(&keep_fraction) {
        return Err(PostprocessError::BadKeepFraction(keep_fraction));
    }
    let n = report.blocks.len();
    let keep = (n as f64 * keep_fraction + 0.5 + 1e-9).floor() as usize;
    let mut order: Vec<&SeDispersion> = report.blocks.iter().collect();
    order.sort_by(|a, b| a.metric.total_cmp(&b.metric).then(a.block_index.cmp(&b.block_index)));
    Ok(order.iter().take(n - keep.min(n)).map(|b| b.block_index).collect())
}

/// Disables SE on the lowest-dispersion blocks. Only the SE flags change.
pub fn remove_se(
    arch: &ConcreteArchitecture,
    report: &SeDispersionReport,
    keep_fraction: f64,
) -> Result<ConcreteArchitecture, PostprocessError> {
    let with_se: BTreeSet<usize> = arch.blocks().enumerate().filter(|(_, b)| b.se).map(|(i, _)| i).collect();
    let covered: BTreeSet<usize> = report.blocks.iter().map(|b| b.block_index).collect();
    if with_se != covered {
        return Err(PostprocessError::ReportMismatch(format!(
            "SE blocks {with_se:?}, report covers {covered:?}"
        )));
    }
    let drop = se_removal_set(report, keep_fraction)?;
    let mut out = arch.clone();
    for (i, b) in out.blocks_mut().enumerate() {
        if drop.contains(&i) {
            b.se = false;
        }
    }
    Ok(out)
}

/// Applies an SE removal to a trained network in place, keeping every
/// weight of the remaining layers.
pub fn remove_se_from_net(net: &mut ConcreteNet, pruned: &ConcreteArchitecture) -> Result<(), PostprocessError> {
    if pruned.num_blocks() != net.blocks.len() {
        return Err(PostprocessError::ReportMismatch("block count differs".into()));
    }
    for (i, (block, target)) in net.blocks.iter_mut().zip(pruned.blocks()).enumerate() {
        if target.se && block.se.is_none() {
            return Err(PostprocessError::ReportMismatch(format!("block {i} has no SE weights to keep")));
        }
        if !target.se {
            block.se = None;
        }
    }
    net.arch = pruned.clone();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn report(metrics: &[f64]) -> SeDispersionReport {
        SeDispersionReport {
            blocks: metrics
                .iter()
                .enumerate()
                .map(|(i, &m)| SeDispersion { block_index: i, metric: m, channels: 4, samples: 10 })
                .collect(),
        }
    }

    #[test]
    fn welford_merge_matches_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.3, 0.7).unwrap();
        let rows: Vec<Vec<f64>> = (0..101).map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect()).collect();
        let mut whole = Welford::new(3);
        rows.iter().for_each(|r| whole.push(r));
        let (mut a, mut b) = (Welford::new(3), Welford::new(3));
        rows[..40].iter().for_each(|r| a.push(r));
        rows[40..].iter().for_each(|r| b.push(r));
        a.merge(&b);
        for (x, y) in a.std().iter().zip(whole.std()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_rows_have_zero_dispersion() {
        let mut w = Welford::new(5);
        for _ in 0..20 {
            w.push(&[0.1, 0.2, 0.3, 0.4, 0.5]);
        }
        assert_eq!(w.mean_std(), 0.0);
    }

    #[test]
    fn lowest_metric_is_removed_first() {
        let r = report(&[0.118, 0.021]);
        let drop = se_removal_set(&r, 0.5).unwrap();
        assert_eq!(drop.into_iter().collect::<Vec<_>>(), [1]);
        let tie = report(&[0.05, 0.05, 0.05]);
        assert_eq!(se_removal_set(&tie, 1.0 / 3.0).unwrap().into_iter().collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn csv_round_trip() {
        let r = report(&[0.5, 0.25]);
        let text = r.to_csv();
        assert!(text.starts_with("block_index,metric,channels,samples\n"));
        assert_eq!(SeDispersionReport::from_csv(&text).unwrap(), r);
    }
}
