//! Run configuration files.
//!
//! A config is a TOML document with an optional top-level `preset` and three
//! flat sections, `[model]`, `[memory]` and `[train]`. The preset supplies
//! the starting memory configuration (default `vanilla`); each `[memory]` key
//! then overrides one aspect of it. Unknown keys are rejected.
//!
//! ```toml
//! preset = "unimix"
//!
//! [model]
//! layers = 4
//! segment_len = 32
//!
//! [memory]
//! topk = 4
//! memory_layers = [1, 2]
//!
//! [train]
//! steps = 500
//! ```
//!
//! Memory keys:
//!
//! | key | values |
//! |---|---|
//! | `memory_size` | `"single"` or a segment count |
//! | `capacity` | cache capacity in entries |
//! | `overflow` | `"fifo"`, `"clear_all"` |
//! | `write` | list of `"direct"`, `"pooling"`, `"model_forward"` |
//! | `pooling_ratio`, `compressed_tokens` | integers |
//! | `read` | list of `"similarity"`, `"position"`, `"all"`, `"random"` |
//! | `topk`, `window`, `globals`, `random_count` | integers |
//! | `memory_layers` | `"all"`, `"none"` or a list of layer indices |
//! | `gate` | `"concat"`, `"learned_gate"`, `"derived_gate"` |
//! | `cache_flow`, `compressed_flow` | `"stop_gradient"`, `"bptt"` |
//! | `cache_horizon`, `compressed_horizon` | integers |
//! | `seed` | integer |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::memory::{
    CacheWrite, GateMode, GradFlow, MemoryLayers, MemorySize, OverflowPolicy, ReadMode, UniMemConfig,
};
use crate::model::ModelConfig;
use crate::presets::{self, DEFAULT_COMPRESSED_TOKENS, DEFAULT_RANDOM, DEFAULT_TOPK};
use crate::train::{Optimizer, TrainConfig};

pub const DEFAULT_POOLING_RATIO: usize = 2;

const MODEL_KEYS: [&str; 6] = ["layers", "d_model", "heads", "vocab", "segment_len", "max_position"];
const MEMORY_KEYS: [&str; 18] = [
    "memory_size",
    "capacity",
    "overflow",
    "write",
    "pooling_ratio",
    "compressed_tokens",
    "read",
    "topk",
    "window",
    "globals",
    "random_count",
    "memory_layers",
    "gate",
    "cache_flow",
    "cache_horizon",
    "compressed_flow",
    "compressed_horizon",
    "seed",
];
const TRAIN_KEYS: [&str; 11] = [
    "learning_rate",
    "steps",
    "batch",
    "optimizer",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "seed",
    "stream_segments",
    "record_wall_clock",
];

/// Everything a training or evaluation run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Preset the memory section started from, if one was named.
    pub preset: Option<String>,
    pub model: ModelConfig,
    pub memory: UniMemConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            model: ModelConfig::default(),
            memory: UniMemConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_table(&parse_table(text)?)
    }

    /// Builds a config from an already-parsed document.
    pub fn from_table(doc: &Table) -> Result<Self> {
        for key in doc.keys() {
            if !matches!(key.as_str(), "preset" | "model" | "memory" | "train") {
                return Err(unknown(key));
            }
        }
        let model_t = section(doc, "model")?;
        let memory_t = section(doc, "memory")?;
        let train_t = section(doc, "train")?;

        let mut model = ModelConfig::default();
        if let Some(t) = model_t {
            check_keys(t, "model", &MODEL_KEYS)?;
            let f = Fields::new(t, "model");
            f.usize_into("layers", &mut model.layers)?;
            f.usize_into("d_model", &mut model.d_model)?;
            f.usize_into("heads", &mut model.heads)?;
            f.usize_into("vocab", &mut model.vocab)?;
            f.usize_into("segment_len", &mut model.segment_len)?;
            f.usize_into("max_position", &mut model.max_position)?;
        }
        model.validate()?;

        let preset = match doc.get("preset") {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(v) => return Err(type_err("preset", "a string", v)),
        };
        let mut memory = presets::preset(preset.as_deref().unwrap_or("vanilla"), &model)?;
        if let Some(t) = memory_t {
            check_keys(t, "memory", &MEMORY_KEYS)?;
            apply_memory(&mut memory, t, &model)?;
        }
        memory.validate(model.layers, model.segment_len)?;

        let mut train = TrainConfig::default();
        if let Some(t) = train_t {
            check_keys(t, "train", &TRAIN_KEYS)?;
            apply_train(&mut train, t)?;
        }
        train.validate()?;

        Ok(Self {
            preset,
            model,
            memory,
            train,
        })
    }

    /// Serializes every field explicitly; parsing the result yields `self`.
    pub fn to_toml(&self) -> Result<String> {
        let mut out = String::new();
        if let Some(p) = &self.preset {
            let _ = writeln!(out, "preset = {}\n", quote(p));
        }
        let m = &self.model;
        out.push_str("[model]\n");
        for (k, v) in [
            ("layers", m.layers),
            ("d_model", m.d_model),
            ("heads", m.heads),
            ("vocab", m.vocab),
            ("segment_len", m.segment_len),
            ("max_position", m.max_position),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }

        let u = &self.memory;
        out.push_str("\n[memory]\n");
        match u.memory_size {
            MemorySize::Single => out.push_str("memory_size = \"single\"\n"),
            MemorySize::Multi(n) => {
                let _ = writeln!(out, "memory_size = {n}");
            }
        }
        if let Some(c) = u.capacity_tokens {
            let _ = writeln!(out, "capacity = {c}");
        }
        let overflow = match u.overflow {
            OverflowPolicy::Fifo => "fifo",
            OverflowPolicy::ClearAll => "clear_all",
        };
        let _ = writeln!(out, "overflow = \"{overflow}\"");
        let mut write = Vec::new();
        match u.write.cache {
            Some(CacheWrite::Direct) => write.push("direct"),
            Some(CacheWrite::Pooling { .. }) => write.push("pooling"),
            None => {}
        }
        if u.write.compressed_tokens > 0 {
            write.push("model_forward");
        }
        let _ = writeln!(out, "write = {}", string_list(&write));
        if let Some(CacheWrite::Pooling { ratio }) = u.write.cache {
            let _ = writeln!(out, "pooling_ratio = {ratio}");
        }
        if u.write.compressed_tokens > 0 {
            let _ = writeln!(out, "compressed_tokens = {}", u.write.compressed_tokens);
        }
        let read: Vec<&str> = u.read.iter().map(read_name).collect();
        let _ = writeln!(out, "read = {}", string_list(&read));
        for r in &u.read {
            match *r {
                ReadMode::Similarity { topk } => {
                    let _ = writeln!(out, "topk = {topk}");
                }
                ReadMode::Position { window, globals } => {
                    let _ = writeln!(out, "window = {window}\nglobals = {globals}");
                }
                ReadMode::Random { count } => {
                    let _ = writeln!(out, "random_count = {count}");
                }
                ReadMode::All => {}
            }
        }
        match &u.memory_layers {
            MemoryLayers::All => out.push_str("memory_layers = \"all\"\n"),
            MemoryLayers::Certain(set) => {
                let v: Vec<String> = set.iter().map(usize::to_string).collect();
                let _ = writeln!(out, "memory_layers = [{}]", v.join(", "));
            }
        }
        let gate = match u.gate {
            GateMode::Concat => "concat",
            GateMode::LearnedGate => "learned_gate",
            GateMode::DerivedGate => "derived_gate",
        };
        let _ = writeln!(out, "gate = \"{gate}\"");
        for (name, flow) in [("cache", u.cache_flow), ("compressed", u.compressed_flow)] {
            match flow {
                GradFlow::StopGradient => {
                    let _ = writeln!(out, "{name}_flow = \"stop_gradient\"");
                }
                GradFlow::Bptt { horizon } => {
                    let _ = writeln!(out, "{name}_flow = \"bptt\"\n{name}_horizon = {horizon}");
                }
            }
        }
        let _ = writeln!(out, "seed = {}", seed_literal("memory.seed", u.seed)?);

        let t = &self.train;
        out.push_str("\n[train]\n");
        let _ = writeln!(out, "learning_rate = {}", float_literal(t.learning_rate));
        let _ = writeln!(out, "steps = {}\nbatch = {}", t.steps, t.batch);
        match t.optimizer {
            Optimizer::Sgd => out.push_str("optimizer = \"sgd\"\n"),
            Optimizer::Adam { beta1, beta2, eps } => {
                let _ = writeln!(
                    out,
                    "optimizer = \"adam\"\nbeta1 = {}\nbeta2 = {}\neps = {}",
                    float_literal(beta1),
                    float_literal(beta2),
                    float_literal(eps)
                );
            }
        }
        let _ = writeln!(out, "clip_norm = {}", float_literal(t.clip_norm.unwrap_or(0.0)));
        let _ = writeln!(out, "seed = {}", seed_literal("train.seed", t.seed)?);
        let _ = writeln!(out, "stream_segments = {}", t.stream_segments);
        let _ = writeln!(out, "record_wall_clock = {}", t.record_wall_clock);
        Ok(out)
    }
}

/// Parses TOML text into a table, mapping syntax errors to [`Error::Parse`].
pub fn parse_table(text: &str) -> Result<Table> {
    text.parse::<Table>().map_err(|e| Error::Parse(e.to_string().trim_end().to_string()))
}

/// Parses a `memory_layers` value given as text: `all`, `none`, or
/// comma-separated indices such as `0,2`.
pub fn parse_layer_list(text: &str) -> Result<MemoryLayers> {
    match text.trim() {
        "all" => Ok(MemoryLayers::All),
        "none" | "" => Ok(MemoryLayers::Certain(BTreeSet::new())),
        list => {
            let mut set = BTreeSet::new();
            for part in list.split([',', ';']) {
                let n = part.trim().parse::<usize>().map_err(|_| {
                    Error::config(
                        "memory.memory_layers",
                        format!("expected `all`, `none` or layer indices, found `{text}`"),
                    )
                })?;
                set.insert(n);
            }
            Ok(MemoryLayers::Certain(set))
        }
    }
}

fn apply_memory(u: &mut UniMemConfig, t: &Table, model: &ModelConfig) -> Result<()> {
    let f = Fields::new(t, "memory");
    if let Some(v) = t.get("memory_size") {
        u.memory_size = match v {
            Value::String(s) if s == "single" => MemorySize::Single,
            Value::Integer(n) if *n >= 0 => MemorySize::Multi(*n as usize),
            _ => return Err(type_err("memory.memory_size", "\"single\" or a segment count", v)),
        };
    }
    if let Some(c) = f.usize("capacity")? {
        u.capacity_tokens = Some(c);
    }
    if let Some(s) = f.choice("overflow", &["fifo", "clear_all"])? {
        u.overflow = if s == "fifo" {
            OverflowPolicy::Fifo
        } else {
            OverflowPolicy::ClearAll
        };
    }

    if let Some(list) = f.choice_list("write", &["direct", "pooling", "model_forward"])? {
        let has = |name: &str| list.iter().any(|s| s == name);
        if has("direct") && has("pooling") {
            return Err(Error::config("memory.write", "`direct` and `pooling` are exclusive"));
        }
        u.write.cache = if has("direct") {
            Some(CacheWrite::Direct)
        } else if has("pooling") {
            let ratio = match u.write.cache {
                Some(CacheWrite::Pooling { ratio }) => ratio,
                _ => DEFAULT_POOLING_RATIO,
            };
            Some(CacheWrite::Pooling { ratio })
        } else {
            None
        };
        u.write.compressed_tokens = match (has("model_forward"), u.write.compressed_tokens) {
            (false, _) => 0,
            (true, 0) => DEFAULT_COMPRESSED_TOKENS,
            (true, m) => m,
        };
    }
    if let Some(r) = f.usize("pooling_ratio")? {
        match &mut u.write.cache {
            Some(CacheWrite::Pooling { ratio }) => *ratio = r,
            _ => return Err(requires("memory.pooling_ratio", "`pooling` in memory.write")),
        }
    }
    if let Some(m) = f.usize("compressed_tokens")? {
        u.write.compressed_tokens = m;
    }

    if let Some(list) = f.choice_list("read", &["similarity", "position", "all", "random"])? {
        let mut read = Vec::new();
        for name in &list {
            let existing = u.read.iter().find(|r| read_name(r) == name).copied();
            let mode = existing.unwrap_or(match name.as_str() {
                "similarity" => ReadMode::Similarity { topk: DEFAULT_TOPK },
                "position" => ReadMode::Position {
                    window: model.segment_len,
                    globals: 0,
                },
                "all" => ReadMode::All,
                _ => ReadMode::Random { count: DEFAULT_RANDOM },
            });
            if read.contains(&mode) {
                return Err(Error::config("memory.read", format!("`{name}` listed twice")));
            }
            read.push(mode);
        }
        u.read = read;
    }
    let mut set_param = |key: &str, mode: &str, value: Option<usize>| -> Result<()> {
        let Some(value) = value else { return Ok(()) };
        let target = u.read.iter_mut().find(|r| read_name(r) == mode);
        let Some(target) = target else {
            return Err(requires(&format!("memory.{key}"), &format!("`{mode}` in memory.read")));
        };
        match (key, target) {
            ("topk", ReadMode::Similarity { topk }) => *topk = value,
            ("window", ReadMode::Position { window, .. }) => *window = value,
            ("globals", ReadMode::Position { globals, .. }) => *globals = value,
            ("random_count", ReadMode::Random { count }) => *count = value,
            _ => unreachable!("key and mode are paired above"),
        }
        Ok(())
    };
    set_param("topk", "similarity", f.usize("topk")?)?;
    set_param("window", "position", f.usize("window")?)?;
    set_param("globals", "position", f.usize("globals")?)?;
    set_param("random_count", "random", f.usize("random_count")?)?;

    if let Some(v) = t.get("memory_layers") {
        u.memory_layers = match v {
            Value::String(s) if s == "all" || s == "none" => parse_layer_list(s)?,
            Value::Array(items) => {
                let mut set = BTreeSet::new();
                for item in items {
                    match item {
                        Value::Integer(n) if *n >= 0 => {
                            set.insert(*n as usize);
                        }
                        _ => {
                            return Err(type_err(
                                "memory.memory_layers",
                                "\"all\", \"none\" or a list of layer indices",
                                v,
                            ))
                        }
                    }
                }
                MemoryLayers::Certain(set)
            }
            _ => {
                return Err(type_err(
                    "memory.memory_layers",
                    "\"all\", \"none\" or a list of layer indices",
                    v,
                ))
            }
        };
    }
    if let Some(s) = f.choice("gate", &["concat", "learned_gate", "derived_gate"])? {
        u.gate = match s.as_str() {
            "concat" => GateMode::Concat,
            "learned_gate" => GateMode::LearnedGate,
            _ => GateMode::DerivedGate,
        };
    }
    apply_flow(&f, "cache", &mut u.cache_flow)?;
    apply_flow(&f, "compressed", &mut u.compressed_flow)?;
    if let Some(s) = f.u64("seed")? {
        u.seed = s;
    }
    Ok(())
}

fn apply_flow(f: &Fields, name: &str, flow: &mut GradFlow) -> Result<()> {
    if let Some(s) = f.choice(&format!("{name}_flow"), &["stop_gradient", "bptt"])? {
        *flow = if s == "bptt" {
            GradFlow::Bptt {
                horizon: flow.horizon().max(1),
            }
        } else {
            GradFlow::StopGradient
        };
    }
    if let Some(h) = f.usize(&format!("{name}_horizon"))? {
        match flow {
            GradFlow::Bptt { horizon } => *horizon = h,
            GradFlow::StopGradient => {
                return Err(requires(
                    &format!("memory.{name}_horizon"),
                    &format!("memory.{name}_flow = \"bptt\""),
                ))
            }
        }
    }
    Ok(())
}

fn apply_train(tc: &mut TrainConfig, t: &Table) -> Result<()> {
    let f = Fields::new(t, "train");
    if let Some(v) = f.f64("learning_rate")? {
        tc.learning_rate = v;
    }
    f.usize_into("steps", &mut tc.steps)?;
    f.usize_into("batch", &mut tc.batch)?;
    if let Some(s) = f.choice("optimizer", &["sgd", "adam"])? {
        tc.optimizer = if s == "sgd" {
            Optimizer::Sgd
        } else {
            match tc.optimizer {
                adam @ Optimizer::Adam { .. } => adam,
                Optimizer::Sgd => Optimizer::adam(),
            }
        };
    }
    for key in ["beta1", "beta2", "eps"] {
        if let Some(v) = f.f64(key)? {
            match &mut tc.optimizer {
                Optimizer::Adam { beta1, beta2, eps } => match key {
                    "beta1" => *beta1 = v,
                    "beta2" => *beta2 = v,
                    _ => *eps = v,
                },
                Optimizer::Sgd => return Err(requires(&format!("train.{key}"), "optimizer = \"adam\"")),
            }
        }
    }
    if let Some(c) = f.f64("clip_norm")? {
        tc.clip_norm = if c == 0.0 { None } else { Some(c) };
    }
    if let Some(s) = f.u64("seed")? {
        tc.seed = s;
    }
    f.usize_into("stream_segments", &mut tc.stream_segments)?;
    if let Some(v) = t.get("record_wall_clock") {
        tc.record_wall_clock = v
            .as_bool()
            .ok_or_else(|| type_err("train.record_wall_clock", "a boolean", v))?;
    }
    Ok(())
}

fn read_name(r: &ReadMode) -> &'static str {
    match r {
        ReadMode::Similarity { .. } => "similarity",
        ReadMode::Position { .. } => "position",
        ReadMode::All => "all",
        ReadMode::Random { .. } => "random",
    }
}

/// Typed accessors that report the full key path on failure.
struct Fields<'a> {
    table: &'a Table,
    section: &'static str,
}

impl<'a> Fields<'a> {
    fn new(table: &'a Table, section: &'static str) -> Self {
        Self { table, section }
    }

    fn path(&self, key: &str) -> String {
        format!("{}.{key}", self.section)
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::Integer(n)) if *n >= 0 => Ok(Some(*n as u64)),
            Some(v) => Err(type_err(&self.path(key), "a non-negative integer", v)),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        Ok(self.u64(key)?.map(|n| n as usize))
    }

    fn usize_into(&self, key: &str, slot: &mut usize) -> Result<()> {
        if let Some(v) = self.usize(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::Float(x)) => Ok(Some(*x)),
            Some(Value::Integer(n)) => Ok(Some(*n as f64)),
            Some(v) => Err(type_err(&self.path(key), "a number", v)),
        }
    }

    fn choice(&self, key: &str, allowed: &[&str]) -> Result<Option<String>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::String(s)) if allowed.contains(&s.as_str()) => Ok(Some(s.clone())),
            Some(v) => Err(type_err(&self.path(key), &one_of(allowed), v)),
        }
    }

    fn choice_list(&self, key: &str, allowed: &[&str]) -> Result<Option<Vec<String>>> {
        let Some(v) = self.table.get(key) else { return Ok(None) };
        let expected = format!("a list of {}", one_of(allowed));
        let items = match v {
            Value::Array(items) => items,
            Value::String(s) if allowed.contains(&s.as_str()) => return Ok(Some(vec![s.clone()])),
            _ => return Err(type_err(&self.path(key), &expected, v)),
        };
        let mut out = Vec::new();
        for item in items {
            match item {
                Value::String(s) if allowed.contains(&s.as_str()) => out.push(s.clone()),
                _ => return Err(type_err(&self.path(key), &expected, v)),
            }
        }
        Ok(Some(out))
    }
}

fn section<'a>(doc: &'a Table, name: &str) -> Result<Option<&'a Table>> {
    match doc.get(name) {
        None => Ok(None),
        Some(Value::Table(t)) => Ok(Some(t)),
        Some(v) => Err(type_err(name, "a table", v)),
    }
}

fn check_keys(t: &Table, section: &str, allowed: &[&str]) -> Result<()> {
    match t.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(unknown(&format!("{section}.{k}"))),
        None => Ok(()),
    }
}

fn unknown(path: &str) -> Error {
    Error::config(path, "unknown key")
}

fn requires(path: &str, what: &str) -> Error {
    Error::config(path, format!("only valid with {what}"))
}

fn type_err(path: &str, expected: &str, found: &Value) -> Error {
    Error::config(path, format!("expected {expected}, found {}", found.type_str()))
}

fn one_of(allowed: &[&str]) -> String {
    let quoted: Vec<String> = allowed.iter().map(|s| format!("\"{s}\"")).collect();
    format!("one of {}", quoted.join(", "))
}

fn quote(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn string_list(items: &[&str]) -> String {
    let quoted: Vec<String> = items.iter().map(|s| format!("\"{s}\"")).collect();
    format!("[{}]", quoted.join(", "))
}

fn float_literal(x: f64) -> String {
    // Debug formatting is the shortest representation that parses back exactly.
    format!("{x:?}")
}

fn seed_literal(path: &str, seed: u64) -> Result<String> {
    if seed > i64::MAX as u64 {
        return Err(Error::config(path, "config files hold seeds below 2^63"));
    }
    Ok(seed.to_string())
}
