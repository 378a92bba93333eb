//! A plain 4-layer CNN must separate the synthetic classes.

use npunas::autodiff::{BatchNormParams, Graph, ParamId, ParamStore, Var};
use npunas::network::{evaluate, train, LrSchedule, Model, NetworkError, TrainConfig};
use npunas::nn::kaiming_uniform;
use npunas::synth::{split, Dataset, SynthTaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct ReferenceCnn {
    store: ParamStore,
    convs: Vec<(ParamId, BatchNormParams, usize)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl ReferenceCnn {
    fn new(in_ch: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let plan = [(in_ch, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)];
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| {
                let w = store.add(format!("conv{i}"), kaiming_uniform(&mut rng, &[co, ci, 3, 3], ci * 9), true);
                (w, store.add_batch_norm(&format!("bn{i}"), co), s)
            })
            .collect();
        let fc_w = store.add("fc.w", kaiming_uniform(&mut rng, &[classes, 64], 64), true);
        let fc_b = store.add("fc.b", npunas::autodiff::Tensor::zeros(&[classes]), true);
        Self { store, convs, fc_w, fc_b }
    }
}

impl Model for ReferenceCnn {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn logits(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var, NetworkError> {
        let mut h = x;
        for (w, bn, s) in &self.convs {
            let wv = g.param(&self.store, *w)?;
            h = g.conv2d(h, wv, *s)?;
            h = g.batch_norm(&self.store, bn, h, training)?;
            h = g.relu(h)?;
        }
        let p = g.global_avg_pool(h)?;
        let (w, b) = (g.param(&self.store, self.fc_w)?, g.param(&self.store, self.fc_b)?);
        Ok(g.linear(p, w, Some(b))?)
    }
}

#[test]
fn reference_cnn_reaches_ninety_percent() {
    let spec = SynthTaskSpec { image_size: 16, samples_per_class: 300, ..Default::default() };
    let data = Dataset::generate(&spec).unwrap();
    let (tr, va) = split(&spec);
    let mut net = ReferenceCnn::new(spec.channels, spec.num_classes);
    let cfg = TrainConfig { epochs: 5, schedule: LrSchedule::Cosine, ..Default::default() };
    train(&mut net, &data, &tr, &cfg).unwrap();
    let acc = evaluate(&net, &data, &va, 256).unwrap();
    println!("reference accuracy {acc}");
    assert!(acc >= 0.9, "accuracy {acc}");
}
