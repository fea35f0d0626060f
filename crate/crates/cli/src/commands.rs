use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use intq_core::intexec::{
    dequant_float_mults, estimate_cost, exec_plan, op_census, quantize_input, verify, IntTensor,
};
use intq_core::lowering::{lower_model, IntegerPlan};
use intq_core::pyramidlab::{
    build_fpn_model, collect_stats, gen_dataset, run_experiment, to_dataset, with_identical_levels, Precision,
};
use intq_core::traingraph::{
    evaluate, init_quantized_from_fp, train, write_loss_csv, Checkpoint, Dataset, QuantMode,
};
use intq_core::{Error, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{stream, RunConfig};
use crate::tensor_file::TensorData;
use crate::{Cli, Command, Outcome};

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes `bytes` to `path` and a `.meta` side file holding everything that
/// is not reproducible byte for byte, such as wall time.
struct Artifacts<'a> {
    command: &'static str,
    config: &'a RunConfig,
    inputs: Vec<(&'static str, String)>,
    start: Instant,
}

impl<'a> Artifacts<'a> {
    fn new(command: &'static str, config: &'a RunConfig) -> Self {
        Self {
            command,
            config,
            inputs: Vec::new(),
            start: Instant::now(),
        }
    }

    fn input(&mut self, name: &'static str, path: &Path) -> Result<()> {
        self.inputs.push((name, sha256_file(path)?));
        Ok(())
    }

    fn write(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        fs::write(path, bytes)?;
        let inputs: serde_json::Map<String, serde_json::Value> = self
            .inputs
            .iter()
            .map(|(k, v)| (k.to_string(), json!(v)))
            .collect();
        let meta = json!({
            "command": self.command,
            "config": self.config.to_json(),
            "inputs_sha256": inputs,
            "output_sha256": hex::encode(Sha256::digest(bytes)),
            "wall_ms": self.start.elapsed().as_millis() as u64,
        });
        let mut meta_path = path.as_os_str().to_owned();
        meta_path.push(".meta");
        fs::write(PathBuf::from(meta_path), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
        Ok(())
    }
}

fn datasets(cfg: &RunConfig, n_train: usize) -> Result<(Dataset, Dataset)> {
    let d = cfg.data.dataset();
    let tr = gen_dataset(cfg.component_seed(stream::TRAIN_DATA), n_train, &d)?;
    let te = gen_dataset(cfg.component_seed(stream::TEST_DATA), cfg.data.n_test, &d)?;
    Ok((to_dataset(&tr, d.image)?, to_dataset(&te, d.image)?))
}

fn print_eval(g: &intq_core::ModelGraph, test: &Dataset) -> Result<()> {
    let ev = evaluate(g, test, 256)?;
    println!("test_loss={:.6}", ev.loss);
    println!("test_accuracy={:.6}", ev.accuracy);
    for (l, a) in ev.per_level.iter().enumerate() {
        println!("test_accuracy_level{l}={a:.6}");
    }
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Train(a) => {
            if let Some(v) = a.bn_mode {
                cfg.model.bn_mode = v;
            }
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.n_train {
                cfg.data.n_train = v;
            }
            let cfg = cfg.resolve()?;
            let art = Artifacts::new("train", &cfg);
            let (tr, te) = datasets(&cfg, cfg.data.n_train)?;
            let mut g = build_fpn_model(cfg.model.bn_mode, Precision::Fp, &cfg.fpn())?;
            g.init_params(cfg.component_seed(stream::INIT));
            let records = train(&mut g, &tr, Some(&te), &cfg.train)?;
            let ckpt = Checkpoint::new(g, cfg.seed, cfg.to_json());
            art.write(&a.out, &ckpt.to_bytes())?;
            if let Some(p) = &a.loss_csv {
                let mut buf = Vec::new();
                write_loss_csv(&records, &mut buf)?;
                art.write(p, &buf)?;
            }
            println!("checkpoint={}", a.out.display());
            println!("hash={}", ckpt.hash());
            print_eval(&ckpt.graph, &te)?;
        }
        Command::Quantize(a) => {
            if let Some(v) = a.bits {
                cfg.quantize.bits = v;
            }
            if let Some(v) = a.epochs {
                cfg.quantize.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.quantize.train.lr = v;
            }
            if let Some(v) = a.n_train {
                cfg.data.n_train = v;
            }
            let cfg = cfg.resolve()?;
            let mut art = Artifacts::new("quantize", &cfg);
            art.input("checkpoint", &a.checkpoint)?;
            let fp = Checkpoint::load(&a.checkpoint)?.graph;
            if fp.mode != QuantMode::Fp {
                return Err(Error::InvalidGraph("quantize expects a full-precision checkpoint".into()));
            }
            let (tr, te) = datasets(&cfg, cfg.data.n_train)?;
            let template = fp.with_bits(cfg.quantize.bits)?;
            let calib: Vec<usize> = (0..cfg.quantize.calib.min(tr.len())).collect();
            let mut g = init_quantized_from_fp(&template, &fp, &tr.subset(&calib).images)?;
            let records = train(&mut g, &tr, Some(&te), &cfg.quantize.train)?;
            let ckpt = Checkpoint::new(g, cfg.seed, cfg.to_json());
            art.write(&a.out, &ckpt.to_bytes())?;
            if let Some(p) = &a.loss_csv {
                let mut buf = Vec::new();
                write_loss_csv(&records, &mut buf)?;
                art.write(p, &buf)?;
            }
            println!("checkpoint={}", a.out.display());
            println!("hash={}", ckpt.hash());
            print_eval(&ckpt.graph, &te)?;
        }
        Command::Lower(a) => {
            if let Some(v) = a.d_max {
                cfg.lower.d_max = v;
            }
            if let Some(v) = a.mode {
                cfg.lower.mode = v;
            }
            let cfg = cfg.resolve()?;
            let mut art = Artifacts::new("lower", &cfg);
            art.input("checkpoint", &a.checkpoint)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let mut plan = lower_model(&ckpt.graph, &cfg.lower)?;
            plan.config = cfg.to_json();
            art.write(&a.out, plan.to_text().as_bytes())?;
            println!("plan={}", a.out.display());
            println!("ops={}", plan.ops.len());
            println!("source_hash={}", plan.source_hash);
        }
        Command::Run(a) => {
            let cfg = cfg.resolve()?;
            let mut art = Artifacts::new("run", &cfg);
            art.input("plan", &a.plan)?;
            art.input("input", &a.input)?;
            let plan = IntegerPlan::load(&a.plan)?;
            let eta = match TensorData::load(&a.input)? {
                TensorData::F64(t) => quantize_input(&plan, &t)?,
                TensorData::U8 { shape, codes } => IntTensor::from_vec(shape, codes.into_iter().map(i32::from).collect())?,
            };
            let out = exec_plan(&plan, &eta, false)?;
            let mut report = out.report.clone();
            report.wall_ns = 0;
            println!("samples={}", report.samples);
            println!("max_accumulator={}", report.max_accumulator);
            println!("float_ops_before_dequant={}", report.float_ops_before_dequant);
            println!("dequant_mults={}", report.dequant_mults);
            for (p, n) in &report.census.counts {
                println!("census.{}={n}", serde_json::to_value(p).unwrap().as_str().unwrap());
            }
            for (i, t) in report.ops.iter().enumerate() {
                println!("op.{i}={} {} max_abs={} checksum={}", t.name, t.op, t.max_abs, t.checksum);
            }
            if let Some(path) = &a.out {
                let body = json!({
                    "eta": out.eta.iter().map(|t| json!({"shape": t.shape, "data": t.data})).collect::<Vec<_>>(),
                    "real": out.real.as_ref().map(|r| r.iter().map(|t| json!({"shape": t.shape, "data": t.data})).collect::<Vec<_>>()),
                    "report": report,
                    "config": cfg.to_json(),
                });
                art.write(path, serde_json::to_string_pretty(&body).expect("serializes").as_bytes())?;
            }
        }
        Command::Verify(a) => {
            if let Some(v) = a.n {
                cfg.verify.n = v;
            }
            if let Some(v) = a.drift_tol {
                cfg.verify.drift_tol = v;
            }
            let cfg = cfg.resolve()?;
            let mut art = Artifacts::new("verify", &cfg);
            art.input("plan", &a.plan)?;
            art.input("checkpoint", &a.checkpoint)?;
            let plan = IntegerPlan::load(&a.plan)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let x = match &a.input {
                Some(p) => {
                    art.input("input", p)?;
                    match TensorData::load(p)? {
                        TensorData::F64(t) => t,
                        TensorData::U8 { .. } => {
                            return Err(Error::InvalidConfig("verify needs real-valued inputs (dtype f64)".into()))
                        }
                    }
                }
                None => {
                    let d = cfg.data.dataset();
                    let s = gen_dataset(cfg.component_seed(stream::VERIFY_DATA), cfg.verify.n, &d)?;
                    to_dataset(&s, d.image)?.images
                }
            };
            let report = verify(&plan, &ckpt.graph, &x, &cfg.verify.config())?;
            let kv = report.to_kv();
            print!("{kv}");
            if let Some(p) = &a.report {
                art.write(p, kv.as_bytes())?;
            }
            if !report.passed {
                return Ok(Outcome::VerifyFailed);
            }
        }
        Command::Stats(a) => {
            if let Some(v) = a.n {
                cfg.stats.n = v;
            }
            if let Some(v) = a.epoch {
                cfg.stats.epoch = v;
            }
            let cfg = cfg.resolve()?;
            let mut art = Artifacts::new("stats", &cfg);
            art.input("checkpoint", &a.checkpoint)?;
            let mut g = Checkpoint::load(&a.checkpoint)?.graph;
            if let Some(l) = a.identical_levels {
                g = with_identical_levels(&g, l)?;
            }
            let d = cfg.data.dataset();
            let s = gen_dataset(cfg.component_seed(stream::STATS_DATA), cfg.stats.n, &d)?;
            let report = collect_stats(&g, &to_dataset(&s, d.image)?, cfg.stats.epoch, 256)?;
            for l in &report.layers {
                println!(
                    "layer={} max_gap={:.6e} max_z={:.3} divergent={}",
                    l.layer, l.max_gap, l.max_z, l.flag
                );
            }
            println!("divergent={}", report.any_flag());
            if let Some(p) = &a.out {
                let mut buf = Vec::new();
                report.write_csv(&mut buf)?;
                art.write(p, &buf)?;
            }
        }
        Command::Cost(a) => {
            let cfg = cfg.resolve()?;
            let plan = IntegerPlan::load(&a.plan)?;
            let census = op_census(&plan)?;
            let int_pj = estimate_cost(&census, &cfg.cost)?;
            let float_pj = estimate_cost(&census.as_float32(), &cfg.cost)?;
            for (p, n) in &census.counts {
                println!("census.{}={n}", serde_json::to_value(p).unwrap().as_str().unwrap());
            }
            println!("dequant_mults={}", dequant_float_mults(&plan)?);
            println!("integer_pj={int_pj}");
            println!("float32_pj={float_pj}");
        }
        Command::Experiment(a) => {
            if let Some(v) = a.seeds {
                cfg.experiment.seeds = v;
            }
            let cfg = cfg.resolve()?;
            let art = Artifacts::new("experiment", &cfg);
            let results = run_experiment(&cfg.experiment)?;
            let table = results.table();
            print!("{table}");
            if let Some(p) = &a.out {
                let mut buf = Vec::new();
                results.write_csv(&mut buf)?;
                art.write(p, &buf)?;
            }
            if let Some(p) = &a.table {
                art.write(p, table.as_bytes())?;
            }
        }
        Command::GenInput(a) => {
            let cfg = cfg.resolve()?;
            let art = Artifacts::new("gen-input", &cfg);
            let d = cfg.data.dataset();
            let s = gen_dataset(cfg.component_seed(stream::GEN_INPUT), a.n, &d)?;
            let t = to_dataset(&s, d.image)?.images;
            art.write(&a.out, &TensorData::F64(t).to_bytes())?;
            println!("tensor={}", a.out.display());
        }
    }
    Ok(Outcome::Ok)
}
