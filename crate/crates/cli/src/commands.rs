use std::fs;

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use toml::{Table, Value};
use unimem::attention::{
    build_bigbird_mask, build_causal_mask, build_knn_mask, build_rmt_mask, build_window_global_mask, build_xl_mask,
};
use unimem::checkpoint;
use unimem::config::{parse_layer_list, parse_table, RunConfig};
use unimem::eval::{
    evaluate_workload, injection_sweep, run_comparison, sweep_grid, train_workload, EvalReport, Experiment,
    RecallSpec, RunResult, Workload,
};
use unimem::memory::{read_similarity, MemoryCache, MemoryEntry, MemoryLayers, OverflowPolicy};
use unimem::model::{Model, ModelConfig};
use unimem::presets::{preset_table, PRESET_NAMES};
use unimem::train::log_to_csv;
use unimem::{MaskMatrix, Tensor};

use crate::output::Artifacts;
use crate::{Command, ConfigArgs, DataArgs, MaskDims};

/// Size of the byte vocabulary; the pad token sits just above it.
const BYTE_VOCAB: usize = 256;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out } => finish(train(&config, &data)?, &out),
        Command::Eval {
            config,
            data,
            checkpoint,
            out,
        } => finish(eval(&config, &data, checkpoint.as_deref())?, &out),
        Command::Compare {
            config,
            data,
            presets,
            out,
        } => finish(compare(&config, &data, &presets)?, &out),
        Command::Sweep { config, data, out } => finish(sweep(&config, &data)?, &out),
        Command::MaskDump { dims, out } => finish(mask_dump(&dims)?, &out),
        Command::PresetList { config, out } => {
            let model = match config {
                Some(path) => RunConfig::load(&path).with_context(|| format!("loading {}", path.display()))?.model,
                None => ModelConfig::default(),
            };
            let table = preset_table(&model)?;
            print!("{table}");
            if let Some(out) = out {
                let mut a = Artifacts::default();
                a.add("presets.csv", table);
                a.write_to(&out)?;
            }
            Ok(())
        }
    }
}

fn finish(artifacts: Artifacts, out: &std::path::Path) -> Result<()> {
    for path in artifacts.write_to(out)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// Loads `--config` (if any) and applies the flag overrides on top of it.
/// `fallback` names the preset used when neither the file nor the flags
/// choose one.
fn run_config(args: &ConfigArgs, preset: Option<&str>, fallback: Option<&str>) -> Result<RunConfig> {
    let mut doc = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            parse_table(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Table::new(),
    };
    if let Some(p) = preset.or(args.preset.as_deref()) {
        doc.insert("preset".into(), Value::String(p.into()));
    } else if let (Some(p), false) = (fallback, doc.contains_key("preset")) {
        doc.insert("preset".into(), Value::String(p.into()));
    }

    let int = |n: usize| Value::Integer(n as i64);
    let mut memory = Vec::new();
    let numeric = [
        ("topk", args.topk),
        ("window", args.window),
        ("globals", args.globals),
        ("capacity", args.capacity),
        ("compressed_tokens", args.compressed_tokens),
    ];
    for (key, v) in numeric {
        if let Some(v) = v {
            memory.push((key, int(v)));
        }
    }
    if let Some(o) = &args.overflow {
        memory.push(("overflow", Value::String(o.clone())));
    }
    if let Some(w) = &args.write_mode {
        let modes = w.split(',').map(|s| Value::String(s.trim().to_string())).collect();
        memory.push(("write", Value::Array(modes)));
    }
    if let Some(l) = &args.mem_layers {
        let v = match parse_layer_list(l)? {
            MemoryLayers::All => Value::String("all".into()),
            MemoryLayers::Certain(set) if set.is_empty() => Value::String("none".into()),
            MemoryLayers::Certain(set) => Value::Array(set.into_iter().map(int).collect()),
        };
        memory.push(("memory_layers", v));
    }
    let mut train = Vec::new();
    if let Some(seed) = args.seed {
        let seed = i64::try_from(seed).context("--seed must fit in a signed 64-bit integer")?;
        train.push(("seed", Value::Integer(seed)));
    }
    if let Some(steps) = args.steps {
        train.push(("steps", int(steps)));
    }
    for (name, entries) in [("memory", memory), ("train", train)] {
        if entries.is_empty() {
            continue;
        }
        let section = doc.entry(name).or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(section) = section else {
            bail!("`{name}` must be a table");
        };
        for (k, v) in entries {
            section.insert(k.into(), v);
        }
    }
    Ok(RunConfig::from_table(&doc)?)
}

fn workload(data: &DataArgs, cfg: &RunConfig) -> Result<Workload> {
    if data.recall {
        return Ok(Workload::recall(RecallSpec::new(cfg.model.segment_len), data.eval_samples));
    }
    let path = data.corpus.as_ref().expect("clap requires a data source");
    if cfg.model.vocab < BYTE_VOCAB {
        bail!("byte-level corpora need model.vocab >= {BYTE_VOCAB}, found {}", cfg.model.vocab);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let held_out = (bytes.len() / 10).max(2);
    if bytes.len() < held_out + 2 {
        bail!("corpus {} is too short ({} bytes)", path.display(), bytes.len());
    }
    let tokens: Vec<usize> = bytes.into_iter().map(usize::from).collect();
    let (train, eval) = tokens.split_at(tokens.len() - held_out);
    Ok(Workload::Corpus {
        train: train.to_vec(),
        eval: eval.to_vec(),
    })
}

fn threads() -> Result<usize> {
    match std::env::var("UNIMEM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("UNIMEM_THREADS must be a positive integer, found `{v}`"),
        },
        Err(_) => Ok(1),
    }
}

fn experiment(data: &DataArgs, cfg: &RunConfig) -> Result<Experiment> {
    Ok(Experiment {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        workload: workload(data, cfg)?,
        threads: threads()?,
    })
}

fn run_name(cfg: &RunConfig) -> String {
    cfg.preset.clone().unwrap_or_else(|| "vanilla".into())
}

fn report_artifacts(report: &EvalReport) -> Artifacts {
    let mut a = Artifacts::default();
    let comparison = report.comparison_csv();
    print!("{comparison}");
    a.add("comparison.csv", comparison);
    a.add("nll_series.csv", report.nll_series_csv());
    a
}

fn train(args: &ConfigArgs, data: &DataArgs) -> Result<Artifacts> {
    let cfg = run_config(args, None, None)?;
    let exp = experiment(data, &cfg)?;
    let mut model = Model::new(cfg.model.clone(), cfg.memory.clone(), cfg.train.seed)?;
    let log = train_workload(&mut model, &exp.workload, &cfg.train)?;
    if let Some(last) = log.last() {
        println!("step {} loss {:.6}", last.step, last.loss);
    }
    let mut ck = Vec::new();
    checkpoint::write_params(model.params(), &mut ck)?;
    let mut a = Artifacts::default();
    a.add("checkpoint.bin", ck);
    a.add("config.toml", cfg.to_toml()?);
    a.add("train_log.csv", log_to_csv(&log));
    Ok(a)
}

fn eval(args: &ConfigArgs, data: &DataArgs, ck: Option<&std::path::Path>) -> Result<Artifacts> {
    let cfg = run_config(args, None, None)?;
    let exp = experiment(data, &cfg)?;
    let name = run_name(&cfg);
    let report = match ck {
        Some(path) => {
            let params = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let model = Model::with_params(cfg.model.clone(), cfg.memory.clone(), params)
                .context("checkpoint does not match the configured model")?;
            let eval = evaluate_workload(&model, &exp.workload, cfg.train.stream_segments, cfg.train.seed)?;
            EvalReport {
                runs: vec![RunResult::new(&name, eval, Vec::new())?],
            }
        }
        None => run_comparison(&[(name, cfg.memory)], &exp)?,
    };
    Ok(report_artifacts(&report))
}

fn compare(args: &ConfigArgs, data: &DataArgs, presets: &[String]) -> Result<Artifacts> {
    if args.preset.is_some() {
        bail!("compare takes --presets, not --preset");
    }
    let names: Vec<String> = if presets.is_empty() {
        PRESET_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        presets.to_vec()
    };
    let mut jobs = Vec::new();
    let mut base = None;
    for name in &names {
        let cfg = run_config(args, Some(name), None).with_context(|| format!("preset `{name}`"))?;
        jobs.push((name.clone(), cfg.memory.clone()));
        base.get_or_insert(cfg);
    }
    let base = base.context("no presets given")?;
    let exp = experiment(data, &base)?;
    let report = run_comparison(&jobs, &exp)?;
    let mut a = report_artifacts(&report);
    for run in &report.runs {
        a.add(format!("train_log_{}.csv", run.name), log_to_csv(&run.log));
    }
    Ok(a)
}

fn sweep(args: &ConfigArgs, data: &DataArgs) -> Result<Artifacts> {
    let cfg = run_config(args, None, Some("unimix"))?;
    let exp = experiment(data, &cfg)?;
    let report = injection_sweep(&cfg.memory, &sweep_grid(cfg.model.layers), &exp)?;
    let sweep = report.sweep_csv();
    print!("{sweep}");
    let mut a = Artifacts::default();
    a.add("sweep.csv", sweep);
    a.add("sweep_summary.csv", report.summary_csv());
    Ok(a)
}

fn mask_dump(d: &MaskDims) -> Result<Artifacts> {
    let (l, m) = (d.segment_len, d.memory_len);
    let window = d.window.unwrap_or(l);
    let masks: Vec<(&str, MaskMatrix)> = vec![
        ("causal", build_causal_mask(l)?),
        ("xl", build_xl_mask(l, m)?),
        ("rmt", build_rmt_mask(l, d.memory_tokens)?),
        ("window_global", build_window_global_mask(l, m, window, d.globals)?),
        ("bigbird", build_bigbird_mask(l, m, window, d.globals, d.random, d.seed)?),
        ("knn", knn_mask(l, m, d.topk, d.seed)?),
    ];
    let mut a = Artifacts::default();
    for (name, mask) in masks {
        a.add(format!("{name}.csv"), mask.to_csv());
        a.add(format!("{name}.pgm"), mask.to_pgm());
    }
    Ok(a)
}

/// kNN mask for seeded random queries against a seeded random cache.
fn knn_mask(l: usize, m: usize, topk: usize, seed: u64) -> Result<MaskMatrix> {
    const DIM: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let mut cache = MemoryCache::new(m.max(1), OverflowPolicy::Fifo);
    let entries = (0..m).map(|j| MemoryEntry::new(draw(DIM), vec![0.0], 0, j)).collect();
    cache.write(entries)?;
    let queries = Tensor::matrix(l, DIM, draw(l * DIM));
    let selected = read_similarity(&queries, &cache, topk)?;
    Ok(build_knn_mask(&selected, m, l)?)
}
