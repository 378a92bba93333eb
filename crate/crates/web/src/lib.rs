//! Browser bindings for three interactive views: per-block latency under
//! both cost providers, compound scaling of a sampled architecture, and the
//! masks a superkernel's thresholds select. Every export returns JSON.

use npunas::arch::{build_default_supernet, BlockConfig, BlockGeometry, BlockKind, SuperkernelSpec};
use npunas::autodiff::{Graph, ParamStore, Tensor};
use npunas::latency::{analytical_breakdown, simulate_block_latency, Analytical, CostModelParams};
use npunas::scale::{compound_scale, model_latency, ScalingCoefficients};
use npunas::search::random_architecture;
use npunas::superkernel::{IndicatorMode, Superkernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Analytical and simulated latency of one block, with the analytical
/// compute/memory split.
#[wasm_bindgen]
pub fn block_latency(
    height: usize,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    config_id: &str,
) -> Result<String, JsError> {
    let config: BlockConfig = config_id.parse().map_err(js)?;
    let geom = BlockGeometry { height, width: height, in_channels, out_channels, stride };
    let params = CostModelParams::default();
    let a = analytical_breakdown(&geom, BlockKind::MixconvMbconv, &config, &params).map_err(js)?;
    let s = simulate_block_latency(&geom, BlockKind::MixconvMbconv, &config, &params).map_err(js)?;
    Ok(json!({
        "config": config.to_string(),
        "analytical_ms": a.latency_ms,
        "compute_ms": a.compute_ms,
        "memory_ms": a.memory_ms,
        "simulator_ms": s,
        "relative_gap": (a.latency_ms - s) / s,
    })
    .to_string())
}

/// Scales a random default-space architecture and reports both shapes.
#[wasm_bindgen]
pub fn scale_random(seed: u64, depth_width_coef: f64, resolution_coef: f64, target_ms: f64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = build_default_supernet();
    let arch = random_architecture(&net, &mut rng).map_err(js)?;
    let model = Analytical(CostModelParams::default());
    let coefs = ScalingCoefficients { depth_width_coef, resolution_coef };
    coefs.validate().map_err(js)?;
    let target = if target_ms > 0.0 { target_ms } else { f64::INFINITY };
    let out = compound_scale(&arch, coefs, &model, target, &net.candidate_sets()).map_err(js)?;
    let shape = |a: &npunas::arch::ConcreteArchitecture| {
        json!({
            "resolution": a.input_resolution,
            "stages": a.stages.iter().map(|s| json!({"width": s.width, "depth": s.blocks.len()})).collect::<Vec<_>>(),
        })
    };
    Ok(json!({
        "base": shape(&arch),
        "base_latency_ms": model_latency(&arch, &model).map_err(js)?,
        "scaled": shape(&out.architecture),
        "scaled_latency_ms": out.latency_ms,
        "added_blocks": out.added.len(),
        "rollbacks": out.rollbacks,
    })
    .to_string())
}

/// A {3, 5, 7} × {0, 2} superkernel on one input channel. Each threshold is
/// given as a fraction of its shell's squared norm, so 1.0 sits on the
/// boundary; the reply holds the selected choice and the masked weights.
#[wasm_bindgen]
pub fn superkernel_view(seed: u64, k5_fraction: f64, k7_fraction: f64, expansion_fraction: f64) -> Result<String, JsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let spec = SuperkernelSpec::with_whole(&[3, 5, 7], &[0, 2]).map_err(js)?;
    let sk = Superkernel::new(&mut store, &mut rng, "sk", spec, 1).map_err(js)?;
    let (kn, en) = sk.shell_norms(&store);
    let fractions = [k5_fraction, k7_fraction];
    for ((&t, n), f) in sk.kernel_thresholds.iter().zip(&kn).zip(fractions) {
        *store.value_mut(t) = Tensor::scalar(n * f);
    }
    *store.value_mut(sk.expansion_thresholds[0]) = Tensor::scalar(en[0] * expansion_fraction);
    let mut g = Graph::new();
    let nodes = sk.evaluate(&mut g, &store, IndicatorMode::Learned).map_err(js)?;
    let (kernel, expansion) = sk.extract_decision(&store).map_err(js)?;
    let k = sk.max_kernel();
    let masked = g.value(nodes.masked).data();
    let channels: Vec<Vec<Vec<f64>>> =
        masked.chunks(k * k).map(|ch| ch.chunks(k).map(|row| row.to_vec()).collect()).collect();
    Ok(json!({
        "kernel": kernel,
        "expansion": expansion.to_string(),
        "kernel_shell_norms": kn,
        "expansion_shell_norms": en,
        "masked": channels,
    })
    .to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: Result<String, JsError>) -> serde_json::Value {
        serde_json::from_str(&s.unwrap_or_else(|_| panic!("export failed"))).unwrap()
    }

    #[test]
    fn block_latency_reports_both_providers() {
        let v = parse(block_latency(28, 64, 64, 1, "3:2+5:2"));
        assert!(v["analytical_ms"].as_f64().unwrap() > 0.0);
        assert!(v["relative_gap"].as_f64().unwrap().abs() < 0.05);
    }

    #[test]
    fn unit_scaling_keeps_the_shape() {
        let v = parse(scale_random(3, 1.0, 1.0, 0.0));
        assert_eq!(v["base"], v["scaled"]);
    }

    #[test]
    fn thresholds_pick_the_choice() {
        let all = parse(superkernel_view(1, 0.5, 0.5, 0.5));
        assert_eq!(all["kernel"], 7);
        let small = parse(superkernel_view(1, 1.5, 0.5, 0.5));
        assert_eq!(small["kernel"], 3);
        let off = parse(superkernel_view(1, 0.5, 0.5, 1.5));
        assert_eq!(off["expansion"], "0");
        assert!(off["masked"][0].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).all(|x| x == 0.0));
    }
}
