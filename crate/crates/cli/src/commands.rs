use std::path::{Path, PathBuf};

use log::info;
use npunas::arch::{deserialize_architecture, serialize_architecture, validate_linear_depth, ConcreteArchitecture, SupernetSpec};
use npunas::autodiff::ParamStore;
use npunas::latency::{
    estimate_network_latency, mape, Analytical, LatencyModel, LatencyTable, Simulator, DEFAULT_SE_REDUCTION,
};
use npunas::network::{evaluate, train, ConcreteNet, SupernetModel};
use npunas::postprocess::{add_se_hswish, remove_se, se_dispersion, SeDispersionReport};
use npunas::scale::{compound_scale, model_latency};
use npunas::search::{
    extract_architecture, greedy_repair, latency_percentile, random_architecture, random_search, run_search,
    sample_latency_matched,
};
use npunas::synth::{split, Dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{CliError, ErrorKind};
use crate::io;

/// Random architectures drawn when a target is given as a percentile.
pub const PERCENTILE_SAMPLES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Provider {
    Analytical,
    Simulator,
}

pub struct Ctx {
    pub cfg: Config,
    pub spec: SupernetSpec,
}

impl Ctx {
    pub fn new(cfg: Config) -> Result<Self, CliError> {
        cfg.validate()?;
        let spec = cfg.supernet.build()?;
        Ok(Self { cfg, spec })
    }

    fn model(&self, provider: Provider) -> Box<dyn LatencyModel> {
        match provider {
            Provider::Analytical => Box::new(Analytical(self.cfg.cost_model.clone())),
            Provider::Simulator => Box::new(Simulator(self.cfg.cost_model.clone())),
        }
    }

    fn table(&self, provider: Provider, file: Option<&Path>) -> Result<LatencyTable, CliError> {
        match file {
            Some(path) => {
                let blocks: Vec<_> = self.spec.blocks().cloned().collect();
                Ok(LatencyTable::from_csv(&io::read(path)?, &blocks)?)
            }
            None => {
                let blocks: Vec<_> = self.spec.blocks().cloned().collect();
                Ok(LatencyTable::build(&self.spec.topology(), &blocks, self.model(provider).as_ref(), DEFAULT_SE_REDUCTION)?)
            }
        }
    }

    fn read_arch(&self, path: &Path) -> Result<ConcreteArchitecture, CliError> {
        Ok(deserialize_architecture(&io::read(path)?, &self.spec.candidate_sets())?)
    }

    fn task(&self) -> Result<(Dataset, Vec<usize>, Vec<usize>), CliError> {
        self.cfg.validate_task()?;
        let data = Dataset::generate(&self.cfg.task)?;
        let (tr, va) = split(&self.cfg.task);
        Ok((data, tr, va))
    }
}

/// Latency target from an explicit value, a percentile of the space, or
/// the config, in that order.
#[derive(Clone, Copy, Debug, Default, clap::Args)]
pub struct TargetArgs {
    /// Target latency in milliseconds
    #[arg(long)]
    pub target_ms: Option<f64>,
    /// Target as a percentile (0-100) of random-architecture latency
    #[arg(long, conflicts_with = "target_ms")]
    pub target_percentile: Option<f64>,
}

fn resolve_target(ctx: &Ctx, table: &LatencyTable, t: TargetArgs) -> Result<f64, CliError> {
    if let Some(ms) = t.target_ms {
        return Ok(ms);
    }
    if let Some(p) = t.target_percentile {
        let ms = latency_percentile(&ctx.spec, table, p, PERCENTILE_SAMPLES, ctx.cfg.seed)?;
        info!("target at percentile {p}: {ms} ms");
        return Ok(ms);
    }
    Ok(ctx.cfg.search.target_latency_ms)
}

fn write_arch(path: &Path, arch: &ConcreteArchitecture) -> Result<(), CliError> {
    io::write(path, &serialize_architecture(arch))
}

/// Accuracy and latency of one trained architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub kind: String,
    pub latency_ms: f64,
    pub val_accuracy: f64,
}

fn train_and_evaluate(ctx: &Ctx, arch: &ConcreteArchitecture) -> Result<f64, CliError> {
    let (data, tr, va) = ctx.task()?;
    let mut net = ConcreteNet::with_se_reduction(arch, ctx.cfg.train.seed, ctx.cfg.postprocess.se_reduction)?;
    train(&mut net, &data, &tr, &ctx.cfg.train)?;
    Ok(evaluate(&net, &data, &va, 256)?)
}

fn write_evaluation(dir: &Path, eval: &Evaluation) -> Result<(), CliError> {
    io::write(&dir.join("eval.json"), &(serde_json::to_string_pretty(eval).expect("serializes") + "\n"))
}

pub fn supernet_init(out: &Path, preset: &str) -> Result<(), CliError> {
    let cfg = Config::preset(preset)?;
    io::write(out, &cfg.to_toml())?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn supernet_validate(ctx: &Ctx, arch: Option<&Path>) -> Result<(), CliError> {
    match arch {
        Some(path) => {
            let arch = ctx.read_arch(path)?;
            println!("ok blocks={} resolution={}", arch.num_blocks(), arch.input_resolution);
        }
        None => {
            let report = validate_linear_depth(&ctx.spec.topology());
            for (i, s) in report.stages.iter().enumerate() {
                println!("stage={i} width={} cumulative_depth={} ratio={:.6}", s.width, s.cumulative_depth, s.ratio);
            }
            println!("ok blocks={} is_monotone={}", ctx.spec.num_blocks(), report.is_monotone);
            if !report.is_monotone {
                return Err(CliError::new(ErrorKind::Invariant, "cumulative depth is not monotone in width"));
            }
        }
    }
    Ok(())
}

pub fn latency_table(ctx: &Ctx, out: &Path, provider: Provider) -> Result<(), CliError> {
    let table = ctx.table(provider, None)?;
    io::write(out, &table.to_csv())?;
    println!("entries={} blocks={}", table.num_entries(), table.num_blocks());
    Ok(())
}

pub fn latency_estimate(ctx: &Ctx, arch: &Path, table: Option<&Path>, provider: Provider) -> Result<(), CliError> {
    let arch = ctx.read_arch(arch)?;
    let ms = match table {
        Some(_) => estimate_network_latency(&arch, &ctx.table(provider, table)?)?,
        None => model_latency(&arch, ctx.model(provider).as_ref())?,
    };
    println!("latency_ms={ms}");
    Ok(())
}

pub fn latency_validate_model(ctx: &Ctx, samples: usize) -> Result<(), CliError> {
    if samples == 0 {
        return Err(CliError::config("--samples must be >= 1"));
    }
    let analytical = ctx.table(Provider::Analytical, None)?;
    let simulated = ctx.table(Provider::Simulator, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    let (mut est, mut sim) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
    for _ in 0..samples {
        let arch = random_architecture(&ctx.spec, &mut rng)?;
        est.push(estimate_network_latency(&arch, &analytical)?);
        sim.push(estimate_network_latency(&arch, &simulated)?);
    }
    println!("mape_percent={:.6} samples={samples}", mape(&est, &sim));
    Ok(())
}

pub fn search_run(ctx: &Ctx, out: &Path, table_file: Option<&Path>, target: TargetArgs, eval: bool) -> Result<(), CliError> {
    let table = ctx.table(Provider::Analytical, table_file)?;
    let mut cfg = ctx.cfg.search.clone();
    cfg.target_latency_ms = resolve_target(ctx, &table, target)?;
    if cfg.lambda1 == 0.0 {
        log::warn!("lambda1 = 0: phase 2 skipped, running phase 1 only");
    }
    let (data, tr, va) = ctx.task()?;
    let outcome = run_search(&ctx.spec, &data, &tr, &va, &table, &cfg)?;
    write_arch(&out.join("arch.toml"), &outcome.architecture)?;
    io::write(&out.join("metrics.csv"), &outcome.metrics_csv())?;
    io::write(&out.join("summary.json"), &(outcome.summary.to_json() + "\n"))?;
    io::write(&out.join("supernet.ckpt.json"), &outcome.model.store.to_checkpoint())?;
    let s = &outcome.summary;
    println!(
        "latency_ms={} target_ms={} repair_steps={} feasible={} phase2={}",
        s.final_latency_ms,
        s.target_latency_ms,
        s.repair_steps.len(),
        s.feasible,
        s.phase2_run
    );
    if !s.feasible {
        return Err(CliError::new(
            ErrorKind::Infeasible,
            format!("no architecture within {} ms (best {} ms)", s.target_latency_ms, s.final_latency_ms),
        ));
    }
    if eval {
        let acc = train_and_evaluate(ctx, &outcome.architecture)?;
        write_evaluation(out, &Evaluation { kind: "search".into(), latency_ms: s.final_latency_ms, val_accuracy: acc })?;
        println!("val_accuracy={acc}");
    }
    Ok(())
}

pub fn baseline_random_search(ctx: &Ctx, out: &Path, table_file: Option<&Path>, target: TargetArgs) -> Result<(), CliError> {
    let table = ctx.table(Provider::Analytical, table_file)?;
    let t = resolve_target(ctx, &table, target)?;
    let (data, tr, va) = ctx.task()?;
    let result = random_search(&ctx.spec, &data, &tr, &va, &table, t, ctx.cfg.baseline.count, &ctx.cfg.train)?;
    let best = result.best();
    write_arch(&out.join("arch.toml"), &best.architecture)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "configs", "latency_ms", "val_accuracy"]).expect("in-memory csv");
    for r in result.rows() {
        w.write_record([r.index.to_string(), r.configs.join(" "), r.latency_ms.to_string(), r.val_accuracy.to_string()])
            .expect("in-memory csv");
    }
    io::write(&out.join("candidates.csv"), &String::from_utf8(w.into_inner().expect("csv")).expect("utf-8"))?;
    write_evaluation(
        out,
        &Evaluation { kind: "random-search".into(), latency_ms: best.latency_ms, val_accuracy: best.val_accuracy },
    )?;
    println!("best={} latency_ms={} val_accuracy={}", result.best, best.latency_ms, best.val_accuracy);
    Ok(())
}

pub fn baseline_random_selection(
    ctx: &Ctx,
    out: &Path,
    table_file: Option<&Path>,
    target: TargetArgs,
    eval: bool,
) -> Result<(), CliError> {
    let table = ctx.table(Provider::Analytical, table_file)?;
    let t = resolve_target(ctx, &table, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cfg.seed);
    rng.set_stream(0x5E1);
    let (arch, ms) = sample_latency_matched(&ctx.spec, &table, 0.95 * t, t, &mut rng)?;
    write_arch(&out.join("arch.toml"), &arch)?;
    println!("latency_ms={ms}");
    if eval {
        let acc = train_and_evaluate(ctx, &arch)?;
        write_evaluation(out, &Evaluation { kind: "random-selection".into(), latency_ms: ms, val_accuracy: acc })?;
        println!("val_accuracy={acc}");
    }
    Ok(())
}

pub fn scale(ctx: &Ctx, arch: &Path, out: &Path, target: Option<f64>) -> Result<(), CliError> {
    let arch = ctx.read_arch(arch)?;
    let target = target.unwrap_or(ctx.cfg.scale.target_latency_ms);
    let model = Analytical(ctx.cfg.cost_model.clone());
    let outcome = compound_scale(&arch, ctx.cfg.scale.coefficients, &model, target, &ctx.spec.candidate_sets())?;
    for r in &outcome.rollbacks {
        info!("rollback {}", serde_json::to_string(r).expect("serializes"));
    }
    write_arch(out, &outcome.architecture)?;
    println!(
        "latency_ms={} blocks={} resolution={} rollbacks={}",
        outcome.latency_ms,
        outcome.architecture.num_blocks(),
        outcome.architecture.input_resolution,
        outcome.rollbacks.len()
    );
    Ok(())
}

pub fn postprocess_add_se(ctx: &Ctx, arch: &Path, out: &Path) -> Result<(), CliError> {
    let arch = add_se_hswish(&ctx.read_arch(arch)?);
    write_arch(out, &arch)?;
    println!("se_blocks={}", arch.blocks().filter(|b| b.se).count());
    Ok(())
}

pub fn postprocess_dispersion(
    ctx: &Ctx,
    arch: &Path,
    out: &Path,
    checkpoint: Option<&Path>,
    save_checkpoint: Option<&Path>,
) -> Result<(), CliError> {
    let arch = ctx.read_arch(arch)?;
    let (data, tr, va) = ctx.task()?;
    let mut net = ConcreteNet::with_se_reduction(&arch, ctx.cfg.train.seed, ctx.cfg.postprocess.se_reduction)?;
    match checkpoint {
        Some(path) => load_all(&mut net.store, path)?,
        None => {
            train(&mut net, &data, &tr, &ctx.cfg.train)?;
        }
    }
    if let Some(path) = save_checkpoint {
        io::write(path, &net.store.to_checkpoint())?;
    }
    let n = ctx.cfg.postprocess.dispersion_samples.min(va.len());
    let report = se_dispersion(&net, &data, &va[..n], 64)?;
    io::write(out, &report.to_csv())?;
    println!("se_blocks={} samples={n}", report.blocks.len());
    Ok(())
}

pub fn postprocess_remove_se(ctx: &Ctx, arch: &Path, report: &Path, out: &Path) -> Result<(), CliError> {
    let arch = ctx.read_arch(arch)?;
    let report = SeDispersionReport::from_csv(&io::read(report)?)?;
    let pruned = remove_se(&arch, &report, ctx.cfg.postprocess.keep_fraction)?;
    write_arch(out, &pruned)?;
    println!("se_blocks={}", pruned.blocks().filter(|b| b.se).count());
    Ok(())
}

fn load_all(store: &mut ParamStore, path: &Path) -> Result<(), CliError> {
    let saved = ParamStore::from_checkpoint(&io::read(path)?)?;
    let copied = store.load_matching(&saved);
    if copied != store.len() {
        return Err(CliError::config(format!(
            "checkpoint {} matches {copied} of {} tensors",
            path.display(),
            store.len()
        )));
    }
    Ok(())
}

/// Re-extracts the architecture from a saved supernet checkpoint and
/// repairs it to the target.
pub fn export(ctx: &Ctx, checkpoint: &Path, out: &Path, table_file: Option<&Path>, target: TargetArgs) -> Result<(), CliError> {
    let table = ctx.table(Provider::Analytical, table_file)?;
    let t = resolve_target(ctx, &table, target)?;
    let mut model = SupernetModel::new(ctx.spec.clone(), ctx.cfg.search.seed)?;
    load_all(&mut model.store, checkpoint)?;
    let mut arch = extract_architecture(&model)?;
    let steps = greedy_repair(&model, &mut arch, &table, t)?;
    write_arch(out, &arch)?;
    println!("latency_ms={} repair_steps={}", estimate_network_latency(&arch, &table)?, steps.len());
    Ok(())
}

#[derive(Deserialize)]
struct SummaryView {
    final_latency_ms: f64,
}

/// Collects `eval.json`, `summary.json` and `candidates.csv` from run
/// directories into one accuracy-vs-latency table.
pub fn report(out: &Path, runs: &[PathBuf]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["source", "kind", "latency_ms", "val_accuracy"]).expect("in-memory csv");
    let mut rows = 0;
    for dir in runs {
        let src = dir.display().to_string();
        let eval_path = dir.join("eval.json");
        let summary_path = dir.join("summary.json");
        let cand_path = dir.join("candidates.csv");
        if cand_path.exists() {
            let text = io::read(&cand_path)?;
            let mut rdr = csv::Reader::from_reader(text.as_bytes());
            for rec in rdr.records() {
                let rec = rec.map_err(|e| CliError::config(format!("{}: {e}", cand_path.display())))?;
                w.write_record([src.as_str(), "random-candidate", &rec[2], &rec[3]]).expect("in-memory csv");
                rows += 1;
            }
        }
        if eval_path.exists() {
            let e: Evaluation = serde_json::from_str(&io::read(&eval_path)?)
                .map_err(|e| CliError::config(format!("{}: {e}", eval_path.display())))?;
            w.write_record([src.clone(), e.kind, e.latency_ms.to_string(), e.val_accuracy.to_string()])
                .expect("in-memory csv");
            rows += 1;
        } else if summary_path.exists() {
            let s: SummaryView = serde_json::from_str(&io::read(&summary_path)?)
                .map_err(|e| CliError::config(format!("{}: {e}", summary_path.display())))?;
            w.write_record([src.clone(), "search".into(), s.final_latency_ms.to_string(), String::new()])
                .expect("in-memory csv");
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(CliError::config("no eval.json, summary.json or candidates.csv found in the given directories"));
    }
    io::write(out, &String::from_utf8(w.into_inner().expect("csv")).expect("utf-8"))?;
    println!("rows={rows}");
    Ok(())
}
