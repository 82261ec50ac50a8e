//! Named memory configurations for well-known long-context methods.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::memory::{
    CacheWrite, GateMode, GradFlow, MemoryLayers, MemorySize, OverflowPolicy, ReadMode, UniMemConfig, WriteMode,
};
use crate::model::ModelConfig;

pub const PRESET_NAMES: [&str; 7] = [
    "vanilla",
    "transformer_xl",
    "memtrans",
    "rmt",
    "longformer",
    "bigbird",
    "unimix",
];

pub const DEFAULT_TOPK: usize = 8;
pub const DEFAULT_GLOBALS: usize = 4;
pub const DEFAULT_RANDOM: usize = 4;
pub const DEFAULT_COMPRESSED_TOKENS: usize = 4;
/// Relative depth of the single memory layer for `memtrans` and `unimix`.
pub const MEMORY_LAYER_DEPTH: f64 = 0.72;

/// Zero-based index of the single memory layer in an `layers`-deep model:
/// the `round(0.72·N)`-th layer counting from one.
pub fn single_memory_layer(layers: usize) -> usize {
    let one_based = (MEMORY_LAYER_DEPTH * layers as f64).round() as usize;
    one_based.clamp(1, layers.max(1)) - 1
}

/// The frozen configuration of a named preset for a given model shape.
pub fn preset(name: &str, model: &ModelConfig) -> Result<UniMemConfig> {
    let l = model.segment_len;
    let single = MemoryLayers::Certain(BTreeSet::from([single_memory_layer(model.layers)]));
    let direct = WriteMode {
        cache: Some(CacheWrite::Direct),
        compressed_tokens: 0,
    };
    let bptt = GradFlow::Bptt { horizon: 1 };
    let base = UniMemConfig::default();
    let cfg = match name {
        "vanilla" => base,
        "transformer_xl" => UniMemConfig {
            memory_size: MemorySize::Single,
            overflow: OverflowPolicy::Fifo,
            write: direct,
            read: vec![ReadMode::Position { window: l, globals: 0 }],
            memory_layers: MemoryLayers::All,
            ..base
        },
        "memtrans" => UniMemConfig {
            memory_size: MemorySize::Multi(8),
            overflow: OverflowPolicy::Fifo,
            write: direct,
            read: vec![ReadMode::Similarity { topk: DEFAULT_TOPK }],
            memory_layers: single,
            gate: GateMode::LearnedGate,
            ..base
        },
        "rmt" => UniMemConfig {
            memory_size: MemorySize::Single,
            write: WriteMode {
                cache: None,
                compressed_tokens: DEFAULT_COMPRESSED_TOKENS,
            },
            read: vec![ReadMode::All],
            memory_layers: MemoryLayers::All,
            compressed_flow: bptt,
            ..base
        },
        "longformer" => UniMemConfig {
            memory_size: MemorySize::Multi(4),
            overflow: OverflowPolicy::ClearAll,
            write: direct,
            read: vec![ReadMode::Position {
                window: l,
                globals: DEFAULT_GLOBALS,
            }],
            memory_layers: MemoryLayers::All,
            cache_flow: bptt,
            ..base
        },
        "bigbird" => {
            let mut cfg = preset("longformer", model)?;
            cfg.read.push(ReadMode::Random { count: DEFAULT_RANDOM });
            cfg
        }
        "unimix" => UniMemConfig {
            memory_size: MemorySize::Multi(8),
            overflow: OverflowPolicy::Fifo,
            write: WriteMode {
                cache: Some(CacheWrite::Direct),
                compressed_tokens: DEFAULT_COMPRESSED_TOKENS,
            },
            read: vec![
                ReadMode::Similarity { topk: DEFAULT_TOPK },
                ReadMode::Position { window: l, globals: 0 },
            ],
            memory_layers: single,
            compressed_flow: bptt,
            ..base
        },
        other => {
            return Err(Error::config(
                "preset",
                format!("unknown preset `{other}`; valid names: {}", PRESET_NAMES.join(", ")),
            ))
        }
    };
    Ok(cfg)
}

/// Compact human-readable description of each dimension.
pub fn describe(cfg: &UniMemConfig, model: &ModelConfig) -> Vec<(&'static str, String)> {
    let size = match cfg.memory_size {
        MemorySize::Single => "single".to_string(),
        MemorySize::Multi(n) => format!("multi({n})"),
    };
    let overflow = match cfg.overflow {
        OverflowPolicy::Fifo => "fifo",
        OverflowPolicy::ClearAll => "clear_all",
    };
    let mut write = Vec::new();
    match cfg.write.cache {
        Some(CacheWrite::Direct) => write.push("direct".to_string()),
        Some(CacheWrite::Pooling { ratio }) => write.push(format!("pooling({ratio})")),
        None => {}
    }
    if cfg.write.compressed_tokens > 0 {
        write.push(format!("model_forward({})", cfg.write.compressed_tokens));
    }
    let read: Vec<String> = cfg
        .read
        .iter()
        .map(|r| match *r {
            ReadMode::Position { window, globals } => format!("position(w={window},g={globals})"),
            ReadMode::Similarity { topk } => format!("similarity(k={topk})"),
            ReadMode::All => "all".to_string(),
            ReadMode::Random { count } => format!("random({count})"),
        })
        .collect();
    let layers = match &cfg.memory_layers {
        MemoryLayers::All => "all".to_string(),
        MemoryLayers::Certain(set) => {
            let v: Vec<String> = set.iter().map(usize::to_string).collect();
            format!("{{{}}}", v.join(";"))
        }
    };
    let gate = match cfg.gate {
        GateMode::Concat => "concat",
        GateMode::LearnedGate => "learned_gate",
        GateMode::DerivedGate => "derived_gate",
    };
    let mut flow = Vec::new();
    if cfg.write.cache.is_some() {
        flow.push(format!("cache:{}", cfg.cache_flow));
    }
    if cfg.write.compressed_tokens > 0 {
        flow.push(format!("tokens:{}", cfg.compressed_flow));
    }
    let or_dash = |v: Vec<String>| if v.is_empty() { "-".to_string() } else { v.join("+") };
    vec![
        ("memory_size", size),
        ("capacity", cfg.capacity(model.segment_len).to_string()),
        ("overflow", overflow.to_string()),
        ("write", or_dash(write)),
        ("read", or_dash(read)),
        ("memory_layers", layers),
        ("gate", gate.to_string()),
        ("grad_flow", or_dash(flow)),
    ]
}

/// One CSV row per preset for the given model shape.
pub fn preset_table(model: &ModelConfig) -> Result<String> {
    let mut out = String::from("preset,memory_size,capacity,overflow,write,read,memory_layers,gate,grad_flow\n");
    for name in PRESET_NAMES {
        let cfg = preset(name, model)?;
        let cells: Vec<String> = describe(&cfg, model).into_iter().map(|(_, v)| v).collect();
        let _ = writeln!(out, "{name},{}", cells.join(","));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid() {
        for layers in [1, 2, 4, 22] {
            let m = ModelConfig {
                layers,
                ..ModelConfig::default()
            };
            for name in PRESET_NAMES {
                let cfg = preset(name, &m).unwrap();
                cfg.validate(m.layers, m.segment_len).unwrap();
            }
        }
    }

    #[test]
    fn single_layer_matches_deep_optimum() {
        assert_eq!(single_memory_layer(22), 15);
        assert_eq!(single_memory_layer(4), 2);
        assert_eq!(single_memory_layer(1), 0);
    }

    #[test]
    fn named_properties() {
        let m = ModelConfig::default();
        assert_eq!(preset("vanilla", &m).unwrap().memory_layers, MemoryLayers::Certain(BTreeSet::new()));
        assert_eq!(
            preset("transformer_xl", &m).unwrap().read,
            vec![ReadMode::Position {
                window: m.segment_len,
                globals: 0
            }]
        );
        let u = preset("unimix", &m).unwrap();
        assert_eq!(u.write.cache, Some(CacheWrite::Direct));
        assert!(u.write.compressed_tokens > 0);
        let err = preset("nope", &m).unwrap_err().to_string();
        assert!(err.contains("unimix") && err.contains("vanilla"));
    }
}
