//! Property checks shared by the core integration tests and the CLI
//! acceptance suite. Every check returns a one-line summary on success and
//! the first violation on failure. Expected values come from oracles written
//! here from scratch: naive loops, finite differences, sorting and sampling.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use npunas::arch::{
    build_default_supernet, default_superkernels, validate_linear_depth, Activation, BlockConfig, BlockDecision,
    BlockSpec, CandidateSets, ConcreteArchitecture, HeadSpec, StemSpec, SuperkernelSpec, SupernetSpec,
};
use npunas::autodiff::{sigmoid_prime, AutodiffError, BatchNormParams, Graph, ParamStore, Tensor, Var};
use npunas::latency::{Analytical, CostModelParams, LatencyModel, Simulator, DEFAULT_SE_REDUCTION};
use npunas::network::ConcreteNet;
use npunas::postprocess::{add_se_hswish, remove_se, se_dispersion, SeDispersion, SeDispersionReport, Welford};
use npunas::scale::{compound_scale, model_latency, ScalingCoefficients};
use npunas::search::{differentiable_block_latency, latency_gated_loss, random_architecture, SearchConfig};
use npunas::superkernel::{IndicatorMode, SuperBlock};
use npunas::synth::Dataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Check = Result<String, String>;

fn fail<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> String + '_ {
    move |e| format!("{context}: {e}")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// The searchable block used by the superkernel checks: 8 input channels,
/// three superkernels with kernels {3, 5} or {3, 5, 7} and expansions {0, 2}.
/// A shape-changing variant keeps the first superkernel always on.
pub fn toy_block_spec(output_width: usize, stride: usize) -> BlockSpec {
    let mut sks = default_superkernels();
    if stride != 1 || output_width != 8 {
        sks[0] = SuperkernelSpec::with_whole(&[3, 5], &[2]).expect("valid superkernel");
    }
    BlockSpec::new(sks, 8, output_width, stride).expect("toy block is valid")
}

fn randomize_batch_norms(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let (lo, hi) = if name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if name.ends_with(".beta") || name.ends_with(".running_mean") {
            (-0.5, 0.5)
        } else if name.ends_with(".running_var") {
            (0.5, 2.0)
        } else {
            continue;
        };
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = random_tensor(rng, &shape, lo, hi);
    }
}

fn bn_eval(store: &ParamStore, bn: &BatchNormParams, c: usize, v: f64) -> f64 {
    let at = |id| store.value(id).data()[c];
    (v - at(bn.running_mean)) / (at(bn.running_var) + 1e-5).sqrt() * at(bn.gamma) + at(bn.beta)
}

/// Depthwise convolution of one `h × w` plane with "same" padding.
fn naive_dw(plane: &[f64], h: usize, w: usize, kernel: &[f64], k: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let pad = k / 2;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += kernel[ky * k + kx] * plane[iy as usize * w + ix as usize];
                    }
                }
            }
            out[oy * wo + ox] = acc;
        }
    }
    (out, ho, wo)
}

/// Eval-mode output of the plain block that `decision` selects, computed
/// with loops over the sub-tensors of the supernet weights.
fn plain_block_oracle(block: &SuperBlock, store: &ParamStore, x: &Tensor, decision: &BlockDecision) -> Vec<f64> {
    let [n, ci, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let co = block.spec.output_width;
    let stride = block.spec.stride;
    let we = store.value(block.expand).data();
    let wp = store.value(block.project).data();
    let total: usize = block.superkernels.iter().map(|s| s.channels()).sum();
    let residual = stride == 1 && ci == co;
    let mut out_hw = (0, 0);
    // (expanded channel index, activated depthwise output per image)
    let mut branch_out: Vec<(usize, Vec<Vec<f64>>)> = Vec::new();
    let mut offset = 0;
    for (sk, (k, e)) in block.superkernels.iter().zip(decision.pairs()) {
        let live = e.channels(ci).expect("whole expansion");
        let kmax = sk.max_kernel();
        let lo = (kmax - k as usize) / 2;
        for c in 0..live {
            let gc = offset + c;
            let full = &store.value(sk.weights).data()[c * kmax * kmax..][..kmax * kmax];
            let crop: Vec<f64> = (0..k as usize * k as usize)
                .map(|i| full[(lo + i / k as usize) * kmax + lo + i % k as usize])
                .collect();
            let mut per_image = Vec::with_capacity(n);
            for b in 0..n {
                let plane: Vec<f64> = (0..h * w)
                    .map(|p| {
                        let v: f64 = (0..ci).map(|i| we[gc * ci + i] * x.data()[(b * ci + i) * h * w + p]).sum();
                        bn_eval(store, &block.bn_expand, gc, v).max(0.0)
                    })
                    .collect();
                let (y, ho, wo) = naive_dw(&plane, h, w, &crop, k as usize, stride);
                out_hw = (ho, wo);
                per_image.push(y.into_iter().map(|v| bn_eval(store, &sk.bn, c, v).max(0.0)).collect());
            }
            branch_out.push((gc, per_image));
        }
        offset += sk.channels();
    }
    debug_assert_eq!(offset, total);
    if branch_out.is_empty() {
        return x.data().to_vec();
    }
    let (ho, wo) = out_hw;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for p in 0..ho * wo {
                let v: f64 = branch_out.iter().map(|(gc, ys)| wp[o * total + gc] * ys[b][p]).sum();
                let mut v = bn_eval(store, &block.bn_project, o, v);
                if residual {
                    v += x.data()[(b * ci + o) * h * w + p];
                }
                out[(b * co + o) * ho * wo + p] = v;
            }
        }
    }
    out
}

/// Forced-threshold block forward against the plain-block oracle for every
/// valid raw decision of the toy block (plus a stride-2 variant).
pub fn masking_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut configs = BTreeSet::new();
    for (co, stride) in [(8, 1), (16, 2)] {
        let spec = toy_block_spec(co, stride);
        let mut store = ParamStore::new();
        let block = SuperBlock::new(&mut store, &mut rng, "toy", spec.clone()).map_err(fail("build"))?;
        randomize_batch_norms(&mut store, &mut rng);
        let x = random_tensor(&mut rng, &[2, 8, 7, 7], -1.0, 1.0);
        for d in spec.raw_decisions() {
            let Ok(cfg) = spec.canonical_config(&d) else { continue };
            configs.insert((co, cfg.to_string()));
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).map_err(fail("input"))?;
            let modes = block.forced_modes(&d).map_err(fail("modes"))?;
            let out = block.forward(&mut g, &store, xv, &modes, Activation::Relu, false).map_err(fail("forward"))?;
            let got = g.value(out.output).data();
            let want = plain_block_oracle(&block, &store, &x, &d);
            if got.len() != want.len() {
                return Err(format!("{cfg}: {} outputs, oracle {}", got.len(), want.len()));
            }
            for (a, b) in got.iter().zip(&want) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
                worst = worst.max(rel);
                if rel > 1e-6 {
                    return Err(format!("{cfg} (stride {stride}): {a} vs oracle {b}"));
                }
            }
        }
    }
    Ok(format!("{} canonical configs, max relative error {worst:.2e}", configs.len()))
}

/// Random weights and thresholds around the current shell norms, so
/// learned indicators land on many different decisions.
fn randomize_superkernel_state(block: &SuperBlock, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for sk in &block.superkernels {
        let shape = store.value(sk.weights).shape().to_vec();
        let scale = rng.gen_range(0.2..2.0);
        *store.value_mut(sk.weights) = random_tensor(rng, &shape, -scale, scale);
        let (kn, en) = sk.shell_norms(store);
        for (&t, n) in sk.kernel_thresholds.iter().zip(kn) {
            *store.value_mut(t) = Tensor::scalar(n * rng.gen_range(0.0..2.0));
        }
        for (&t, n) in sk.expansion_thresholds.iter().zip(en) {
            *store.value_mut(t) = Tensor::scalar(n * rng.gen_range(0.0..2.0));
        }
    }
}

fn random_latency_map(spec: &BlockSpec, rng: &mut ChaCha8Rng) -> BTreeMap<BlockConfig, f64> {
    npunas::arch::enumerate_configs(spec)
        .expect("toy block enumerates")
        .into_iter()
        .map(|c| (c, rng.gen_range(0.1..1.0)))
        .collect()
}

/// Hard-indicator soft latency against a direct table lookup of the
/// extracted decision (first check) and the partition of unity over all
/// choice combinations (second check), on `trials` random states.
pub fn latency_oracle(trials: usize) -> (Check, Check) {
    let run = || -> Result<(usize, Option<String>), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        let spec = toy_block_spec(8, 1);
        let mut store = ParamStore::new();
        let block = SuperBlock::new(&mut store, &mut rng, "toy", spec.clone()).map_err(fail("build"))?;
        let table = random_latency_map(&spec, &mut rng);
        let mut seen = BTreeSet::new();
        let mut partition_failure = None;
        for trial in 0..trials {
            randomize_superkernel_state(&block, &mut store, &mut rng);
            let mut g = Graph::new();
            let nodes = block
                .superkernels
                .iter()
                .map(|sk| sk.evaluate(&mut g, &store, IndicatorMode::Learned))
                .collect::<Result<Vec<_>, _>>()
                .map_err(fail("evaluate"))?;
            let l = differentiable_block_latency(&mut g, &block, &nodes, &table, 0).map_err(fail("latency"))?;
            let decision = block.extract_decision(&store).map_err(fail("extract"))?;
            let cfg = spec.canonical_config(&decision).map_err(fail("canonical"))?;
            let want = table[&cfg];
            let got = g.value(l).item();
            if got != want {
                return Err(format!("trial {trial}: soft latency {got} != table[{cfg}] = {want}"));
            }
            seen.insert(cfg.to_string());

            // one product per combination of superkernel choices
            let mut products = vec![1.0f64];
            for (sk, n) in block.superkernels.iter().zip(&nodes) {
                let mut per_choice = Vec::new();
                for (ei, e) in sk.spec.expansions().iter().enumerate() {
                    let ge = g.value(n.g[ei]).item();
                    if e.is_zero() {
                        per_choice.push(ge);
                    } else {
                        per_choice.extend(n.f.iter().map(|fk| g.value(*fk).item() * ge));
                    }
                }
                products = products.iter().flat_map(|w| per_choice.iter().map(move |p| w * p)).collect();
            }
            let ones = products.iter().filter(|&&w| w == 1.0).count();
            let zeros = products.iter().filter(|&&w| w == 0.0).count();
            if (ones != 1 || ones + zeros != products.len()) && partition_failure.is_none() {
                partition_failure = Some(format!("trial {trial}: {ones} unit and {zeros} zero products of {}", products.len()));
            }
        }
        Ok((seen.len(), partition_failure))
    };
    match run() {
        Err(e) => (Err(e.clone()), Err(format!("not evaluated: {e}"))),
        Ok((distinct, partition)) => (
            Ok(format!("{trials} random states, {distinct} distinct decisions, all exact")),
            partition.map_or_else(|| Ok(format!("{trials} trials, exactly one unit product each")), Err),
        ),
    }
}

/// Builds the graph for one gradient check. Returns the output and the leaf
/// of every input tensor, in order.
type Builder<'a> = dyn Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>), AutodiffError> + 'a;

fn projected_loss(g: &mut Graph, out: Var, proj: &Tensor) -> Result<Var, AutodiffError> {
    let p = g.mul_const(out, proj.clone())?;
    g.squared_norm(p)
}

fn loss_value(build: &Builder, inputs: &[Tensor], proj: &Tensor) -> Result<f64, AutodiffError> {
    let mut g = Graph::new();
    let (out, _) = build(&mut g, inputs)?;
    let l = projected_loss(&mut g, out, proj)?;
    Ok(g.value(l).item())
}

/// Central differences against the reverse pass on `points` random inputs.
fn gradient_check(
    name: &str,
    shapes: &[(&[usize], f64, f64)],
    points: usize,
    rng: &mut ChaCha8Rng,
    build: &Builder,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for point in 0..points {
        let inputs: Vec<Tensor> = shapes.iter().map(|(s, lo, hi)| random_tensor(rng, s, *lo, *hi)).collect();
        let mut g = Graph::new();
        let (out, leaves) = build(&mut g, &inputs).map_err(fail(name))?;
        let proj = random_tensor(rng, g.shape(out), -1.0, 1.0);
        let loss = projected_loss(&mut g, out, &proj).map_err(fail(name))?;
        let grads = g.backward(loss).map_err(fail(name))?;
        for (i, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get_or_zeros(&g, *leaf);
            for j in 0..inputs[i].len() {
                let x0 = inputs[i].data()[j];
                let h = 1e-5 * x0.abs().max(1.0);
                let mut shifted = inputs.clone();
                shifted[i].data_mut()[j] = x0 + h;
                let up = loss_value(build, &shifted, &proj).map_err(fail(name))?;
                shifted[i].data_mut()[j] = x0 - h;
                let down = loss_value(build, &shifted, &proj).map_err(fail(name))?;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                if rel > 1e-4 {
                    return Err(format!("{name}: point {point}, input {i}[{j}]: analytic {a}, numeric {numeric}"));
                }
            }
        }
    }
    Ok(worst)
}

fn leaves(g: &mut Graph, inputs: &[Tensor]) -> Result<Vec<Var>, AutodiffError> {
    inputs.iter().map(|t| g.constant(t.clone())).collect()
}

fn batch_norm_builder(training: bool) -> Box<Builder<'static>> {
    Box::new(move |g, t| {
        let mut store = ParamStore::new();
        let bn = store.add_batch_norm("bn", 3);
        *store.value_mut(bn.gamma) = t[1].clone();
        *store.value_mut(bn.beta) = t[2].clone();
        *store.value_mut(bn.running_mean) = Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap();
        *store.value_mut(bn.running_var) = Tensor::new(vec![3], vec![0.8, 1.3, 2.0]).unwrap();
        let x = g.constant(t[0].clone())?;
        let gamma = g.param(&store, bn.gamma)?;
        let beta = g.param(&store, bn.beta)?;
        Ok((g.batch_norm(&store, &bn, x, training)?, vec![x, gamma, beta]))
    })
}

/// Every differentiable operator against central finite differences, and
/// the straight-through indicator against the analytic logistic slope.
pub fn gradient_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let img: &[usize] = &[2, 3, 5, 5];
    let u = (-2.0, 2.0);
    let mut cases: Vec<(&str, Vec<(&[usize], f64, f64)>, Box<Builder>)> = Vec::new();
    macro_rules! case {
        ($name:expr, [$($shape:expr => $range:expr),*], $f:expr) => {
            cases.push(($name, vec![$(($shape, $range.0, $range.1)),*], Box::new($f)));
        };
    }
    case!("conv2d", [img => u, &[4, 3, 3, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.conv2d(v[0], v[1], 1)?, v))
    });
    case!("conv2d_stride2", [img => u, &[2, 3, 3, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.conv2d(v[0], v[1], 2)?, v))
    });
    case!("dwconv2d", [&[2, 3, 6, 6] => u, &[3, 5, 5] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.dwconv2d(v[0], v[1], 1)?, v))
    });
    case!("dwconv2d_stride2", [&[1, 2, 7, 7] => u, &[2, 3, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.dwconv2d(v[0], v[1], 2)?, v))
    });
    case!("pointwise", [img => u, &[4, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.pointwise(v[0], v[1])?, v))
    });
    case!("linear", [&[3, 4] => u, &[5, 4] => u, &[5] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.linear(v[0], v[1], Some(v[2]))?, v))
    });
    case!("linear_no_bias", [&[3, 4] => u, &[2, 4] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.linear(v[0], v[1], None)?, v))
    });
    case!("relu", [img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.relu(v[0])?, v))
    });
    case!("relu6", [img => (-2.0, 8.0)], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.relu6(v[0])?, v))
    });
    case!("h_swish", [img => (-5.0, 5.0)], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.h_swish(v[0])?, v))
    });
    case!("sigmoid", [img => (-4.0, 4.0)], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.sigmoid(v[0])?, v))
    });
    case!("relu_scalar", [&[] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.relu_scalar(v[0])?, v))
    });
    case!("log_scalar", [&[] => (0.2, 5.0)], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.log_scalar(v[0])?, v))
    });
    case!("global_avg_pool", [img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.global_avg_pool(v[0])?, v))
    });
    case!("channelwise_mul", [img => u, &[2, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.channelwise_mul(v[0], v[1])?, v))
    });
    case!("channel_scale", [img => u, &[3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.channel_scale(v[0], v[1])?, v))
    });
    case!("add", [img => u, img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.add(v[0], v[1])?, v))
    });
    case!("sub", [img => u, img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.sub(v[0], v[1])?, v))
    });
    case!("mul", [img => u, img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.mul(v[0], v[1])?, v))
    });
    case!("add_n", [img => u, img => u, img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.add_n(&v)?, v))
    });
    case!("scale", [img => u, &[] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.scale(v[0], v[1])?, v))
    });
    case!("mul_const", [img => u], |g, t| {
        let v = leaves(g, t)?;
        let c = Tensor::from_fn(img, |i| (i % 7) as f64 * 0.3 - 1.0);
        Ok((g.mul_const(v[0], c)?, v))
    });
    case!("affine", [img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.affine(v[0], -1.7, 0.4)?, v))
    });
    case!("one_minus", [img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.one_minus(v[0])?, v))
    });
    case!("squared_norm", [img => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.squared_norm(v[0])?, v))
    });
    case!("softmax_cross_entropy", [&[4, 5] => (-3.0, 3.0)], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.softmax_cross_entropy(v[0], &[0, 3, 4, 1])?, v))
    });
    case!("concat_channels", [img => u, &[2, 2, 5, 5] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.concat_channels(&v)?, v))
    });
    case!("slice_channels", [&[2, 5, 3, 3] => u], |g, t| {
        let v = leaves(g, t)?;
        Ok((g.slice_channels(v[0], 1, 3)?, v))
    });
    cases.push(("batch_norm_train", vec![(img, -2.0, 2.0), (&[3], 0.5, 1.5), (&[3], -1.0, 1.0)], batch_norm_builder(true)));
    cases.push(("batch_norm_eval", vec![(img, -2.0, 2.0), (&[3], 0.5, 1.5), (&[3], -1.0, 1.0)], batch_norm_builder(false)));

    let mut worst = 0.0f64;
    for (name, shapes, build) in &cases {
        worst = worst.max(gradient_check(name, shapes, 10, &mut rng, build.as_ref())?);
    }

    let mut st_worst = 0.0f64;
    for _ in 0..10 {
        let (xv, tv) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let mut g = Graph::new();
        let x = g.scalar(xv).map_err(fail("indicator"))?;
        let t = g.scalar(tv).map_err(fail("indicator"))?;
        let ind = g.hard_indicator_st(x, t).map_err(fail("indicator"))?;
        if g.value(ind).item() != if xv > tv { 1.0 } else { 0.0 } {
            return Err(format!("hard_indicator_st forward at ({xv}, {tv})"));
        }
        let grads = g.backward(ind).map_err(fail("indicator"))?;
        let slope = sigmoid_prime(xv - tv);
        let gx = grads.get_or_zeros(&g, x).item();
        let gt = grads.get_or_zeros(&g, t).item();
        let err = (gx - slope).abs().max((gt + slope).abs());
        st_worst = st_worst.max(err);
        if err > 1e-10 {
            return Err(format!("hard_indicator_st at ({xv}, {tv}): grads ({gx}, {gt}), slope {slope}"));
        }
    }
    Ok(format!(
        "{} operators x 10 points, max relative error {worst:.2e}; indicator slope error {st_worst:.1e}",
        cases.len()
    ))
}

/// Latency term of the gated loss: zero gradient below target, and the
/// closed-form value just above it.
pub fn gated_loss_property() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let spec = toy_block_spec(8, 1);
    let mut store = ParamStore::new();
    let block = SuperBlock::new(&mut store, &mut rng, "toy", spec.clone()).map_err(fail("build"))?;
    let table = random_latency_map(&spec, &mut rng);
    let thresholds: Vec<_> =
        block.superkernels.iter().flat_map(|sk| sk.kernel_thresholds.iter().chain(&sk.expansion_thresholds)).copied().collect();

    // returns (latency term, ΣL, max |∂/∂threshold|)
    let eval = |store: &ParamStore, target_from: &dyn Fn(f64) -> f64| -> Result<(f64, f64, f64), String> {
        let mut g = Graph::new();
        let nodes = block
            .superkernels
            .iter()
            .map(|sk| sk.evaluate(&mut g, store, IndicatorMode::Learned))
            .collect::<Result<Vec<_>, _>>()
            .map_err(fail("evaluate"))?;
        let l = differentiable_block_latency(&mut g, &block, &nodes, &table, 0).map_err(fail("latency"))?;
        let lv = g.value(l).item();
        let cfg = SearchConfig { lambda1: 15.0, lambda2: 100.0, target_latency_ms: target_from(lv), ..Default::default() };
        let ce = g.scalar(0.7).map_err(fail("ce"))?;
        let out = latency_gated_loss(&mut g, ce, l, &cfg).map_err(fail("loss"))?;
        let grads = g.backward(out.loss).map_err(fail("backward"))?;
        let mut max_grad = 0.0f64;
        for &t in &thresholds {
            let v = g.param(store, t).map_err(fail("param"))?;
            max_grad = max_grad.max(grads.get_or_zeros(&g, v).item().abs());
        }
        Ok((g.value(out.latency_term).item(), lv, max_grad))
    };

    let mut trials = 0;
    for _ in 0..20 {
        randomize_superkernel_state(&block, &mut store, &mut rng);
        for slack in [0.0, 0.05, 1.0] {
            let (term, lv, grad) = eval(&store, &|l| l + slack)?;
            if grad != 0.0 || term != 0.0 {
                return Err(format!("ΣL = {lv}, T = ΣL + {slack}: term {term}, threshold gradient {grad}"));
            }
            trials += 1;
        }
        let (term, lv, _) = eval(&store, &|l| l - 0.1)?;
        let want = 15.0 * 11f64.ln();
        if (term - want).abs() > 1e-9 {
            return Err(format!("ΣL = {lv}, T = ΣL - 0.1: term {term}, expected {want}"));
        }
    }
    Ok(format!("{trials} under-target states with zero gradient; over-target term = 15 ln 11 to 1e-9"))
}

/// MAPE of the analytical model against the simulator over `samples`
/// random architectures from the default space.
pub fn latency_model_consistency(samples: usize) -> Result<f64, String> {
    let net = build_default_supernet();
    let params = CostModelParams::default();
    let (analytical, simulator) = (Analytical(params.clone()), Simulator(params));
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut total = 0.0;
    for _ in 0..samples {
        let arch = random_architecture(&net, &mut rng).map_err(fail("sample"))?;
        let a = model_latency(&arch, &analytical).map_err(fail("analytical"))?;
        let s = model_latency(&arch, &simulator).map_err(fail("simulator"))?;
        total += ((a - s) / s).abs();
    }
    Ok(100.0 * total / samples as f64)
}

fn default_arch(rng: &mut ChaCha8Rng) -> ConcreteArchitecture {
    random_architecture(&build_default_supernet(), rng).expect("default space samples")
}

/// Depth rounding example, width multiples, identity at unit coefficients
/// and preserved linear-depth monotonicity.
pub fn scaling_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let model = Analytical(CostModelParams::default());
    let cands = CandidateSets::default();
    let base = default_arch(&mut rng);
    let depths: Vec<usize> = base.stages.iter().map(|s| s.blocks.len()).collect();
    if depths != [3, 4, 7, 4, 11] {
        return Err(format!("default depths {depths:?}"));
    }
    let half_up: Vec<usize> = depths.iter().map(|&d| (d as f64 * 1.2 + 0.5).floor() as usize).collect();
    let coefs = ScalingCoefficients { depth_width_coef: 1.2, resolution_coef: 1.0 };
    let scaled = compound_scale(&base, coefs, &model, f64::INFINITY, &cands).map_err(fail("scale"))?;
    let got: Vec<usize> = scaled.architecture.stages.iter().map(|s| s.blocks.len()).collect();
    if got != half_up || got != [4, 5, 8, 5, 13] {
        return Err(format!("coef 1.2 depths {got:?}, expected {half_up:?}"));
    }
    for coef in [1.1, 1.2, 1.35, 1.5, 2.0] {
        let c = ScalingCoefficients { depth_width_coef: coef, resolution_coef: 1.0 };
        let out = compound_scale(&base, c, &model, f64::INFINITY, &cands).map_err(fail("scale"))?;
        if let Some(s) = out.architecture.stages.iter().find(|s| s.width % 16 != 0) {
            return Err(format!("coef {coef}: stage width {} not a multiple of 16", s.width));
        }
    }
    let same = compound_scale(&base, ScalingCoefficients::default(), &model, f64::INFINITY, &cands)
        .map_err(fail("identity"))?;
    if same.architecture != base {
        return Err("coefficient 1.0 changed the architecture".into());
    }
    let mut checked = 0;
    let mut draws = 0;
    while checked < 100 {
        draws += 1;
        if draws > 100_000 {
            return Err(format!("only {checked} monotone random architectures found"));
        }
        let mut arch = default_arch(&mut rng);
        for stage in &mut arch.stages {
            let keep = rng.gen_range(1..=stage.blocks.len());
            stage.blocks.truncate(keep);
        }
        if !validate_linear_depth(&arch.topology()).is_monotone {
            continue;
        }
        let coef = rng.gen_range(1.0..2.0);
        let c = ScalingCoefficients { depth_width_coef: coef, resolution_coef: 1.0 };
        let out = compound_scale(&arch, c, &model, f64::INFINITY, &cands).map_err(fail("scale"))?;
        if !validate_linear_depth(&out.architecture.topology()).is_monotone {
            return Err(format!("coef {coef} broke linear-depth monotonicity"));
        }
        checked += 1;
    }
    Ok(format!("depths {got:?}; widths multiples of 16; identity at 1.0; {checked} monotone archs stay monotone"))
}

/// Ten-block supernet used by the SE checks.
pub fn ten_block_supernet() -> SupernetSpec {
    let stem = StemSpec { kernel: 3, stride: 2, width: 16, in_channels: 3 };
    let head = HeadSpec { hidden: 32, num_classes: 6 };
    let stages = [(16, 1, 2), (24, 2, 3), (32, 2, 3), (48, 1, 2)];
    SupernetSpec::from_template(stem, &stages, head, 16, &default_superkernels()).expect("ten-block supernet")
}

fn all_branches_on(net: &SupernetSpec) -> ConcreteArchitecture {
    let decisions: Vec<BlockDecision> = net
        .blocks()
        .map(|b| {
            BlockDecision::new(
                b.superkernels.iter().map(|s| s.kernel_sizes()[0]).collect(),
                b.superkernels.iter().map(SuperkernelSpec::max_expansion).collect(),
            )
        })
        .collect();
    ConcreteArchitecture::from_supernet(net, &decisions).expect("max-expansion decisions are valid")
}

/// Zero dispersion on identical images, Monte-Carlo recovery of known
/// standard deviations, and SE removal by metric rank.
pub fn se_pipeline() -> Check {
    let net = ten_block_supernet();
    let arch = add_se_hswish(&all_branches_on(&net));
    let se_count = arch.blocks().filter(|b| b.se).count();
    if se_count != 10 {
        return Err(format!("expected 10 SE blocks, got {se_count}"));
    }

    let model = ConcreteNet::new(&arch, 9).map_err(fail("net"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let image: Vec<f64> = (0..3 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let copies = 24;
    let data = Dataset {
        channels: 3,
        size: 16,
        images: image.iter().cycle().take(copies * image.len()).copied().collect(),
        labels: vec![0; copies],
        num_classes: 6,
    };
    let indices: Vec<usize> = (0..copies).collect();
    let report = se_dispersion(&model, &data, &indices, 7).map_err(fail("dispersion"))?;
    if let Some(b) = report.blocks.iter().find(|b| b.metric != 0.0) {
        return Err(format!("block {} has dispersion {} on identical images", b.block_index, b.metric));
    }
    let mut constant = Welford::new(5);
    for _ in 0..4 {
        let mut part = Welford::new(5);
        for _ in 0..25 {
            part.push(&[0.13, 0.5, 0.77, 0.01, 0.999]);
        }
        constant.merge(&part);
    }
    if constant.mean_std() != 0.0 {
        return Err(format!("constant excitations give dispersion {}", constant.mean_std()));
    }

    let channels = 16;
    let stds: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.05..0.5)).collect();
    let means: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.2..0.8)).collect();
    let normals: Vec<Normal<f64>> = means.iter().zip(&stds).map(|(&m, &s)| Normal::new(m, s).unwrap()).collect();
    let mut acc = Welford::new(channels);
    for _ in 0..100 {
        let mut part = Welford::new(channels);
        for _ in 0..100 {
            let row: Vec<f64> = normals.iter().map(|n| n.sample(&mut rng)).collect();
            part.push(&row);
        }
        acc.merge(&part);
    }
    for (c, (est, want)) in acc.std().iter().zip(&stds).enumerate() {
        if ((est - want) / want).abs() > 0.05 {
            return Err(format!("channel {c}: estimated std {est}, generator std {want}"));
        }
    }
    let mean_std = stds.iter().sum::<f64>() / channels as f64;
    if ((acc.mean_std() - mean_std) / mean_std).abs() > 0.05 {
        return Err(format!("metric {} vs mean generator std {mean_std}", acc.mean_std()));
    }

    let metrics: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
    let synthetic = SeDispersionReport {
        blocks: metrics
            .iter()
            .enumerate()
            .map(|(i, &m)| SeDispersion { block_index: i, metric: m, channels: 8, samples: 100 })
            .collect(),
    };
    let pruned = remove_se(&arch, &synthetic, 0.6).map_err(fail("remove_se"))?;
    let kept: BTreeSet<usize> = pruned.blocks().enumerate().filter(|(_, b)| b.se).map(|(i, _)| i).collect();
    let mut ranked: Vec<usize> = (0..10).collect();
    ranked.sort_by(|&a, &b| metrics[b].total_cmp(&metrics[a]));
    let top6: BTreeSet<usize> = ranked[..6].iter().copied().collect();
    if kept != top6 {
        return Err(format!("kept {kept:?}, top-6 metrics at {top6:?}"));
    }
    let cost = Analytical(CostModelParams::default());
    let before = model_latency(&arch, &cost).map_err(fail("latency"))?;
    let after = model_latency(&pruned, &cost).map_err(fail("latency"))?;
    let geoms = arch.topology().block_geometries();
    let removed: f64 = ranked[6..]
        .iter()
        .map(|&i| cost.se_ms(&geoms[i], DEFAULT_SE_REDUCTION))
        .sum::<Result<f64, _>>()
        .map_err(fail("se cost"))?;
    let delta = before - after;
    if (delta - removed).abs() > 1e-12 * before {
        return Err(format!("latency drop {delta} ms, removed SE cost {removed} ms"));
    }
    Ok(format!("constant excitations give 0; 16-channel std recovered within 5%; kept top-6, drop {delta:.6} ms"))
}
