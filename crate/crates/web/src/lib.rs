//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart returning
//! `Result<String, String>` so the logic is testable off the browser.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unimem::attention::{
    build_bigbird_mask, build_causal_mask, build_knn_mask, build_rmt_mask, build_window_global_mask, build_xl_mask,
    compute_equivalence_gate, gated_attention, unimem_attention, MemoryKv,
};
use unimem::memory::{read_similarity, MemoryCache, MemoryEntry, OverflowPolicy};
use unimem::{MaskMatrix, Tensor};
use wasm_bindgen::prelude::*;

/// Upper bound on every size argument; keeps the page responsive.
const MAX_DIM: usize = 64;

fn check_dims(dims: &[(&str, usize)]) -> Result<(), String> {
    for (name, v) in dims {
        if *v > MAX_DIM {
            return Err(format!("{name} must be at most {MAX_DIM}"));
        }
    }
    Ok(())
}

/// Mask builder parameters, as entered on the page.
#[derive(Clone, Copy, Debug)]
pub struct MaskParams {
    pub segment_len: usize,
    pub memory_len: usize,
    pub window: usize,
    pub globals: usize,
    pub random: usize,
    pub memory_tokens: usize,
    pub topk: usize,
    pub seed: u64,
}

pub fn mask_for(builder: &str, p: MaskParams) -> Result<MaskMatrix, String> {
    check_dims(&[
        ("segment length", p.segment_len),
        ("memory length", p.memory_len),
        ("window", p.window),
        ("globals", p.globals),
        ("random", p.random),
        ("memory tokens", p.memory_tokens),
    ])?;
    let (l, m) = (p.segment_len, p.memory_len);
    let mask = match builder {
        "causal" => build_causal_mask(l),
        "xl" => build_xl_mask(l, m),
        "rmt" => build_rmt_mask(l, p.memory_tokens),
        "window_global" => build_window_global_mask(l, m, p.window, p.globals),
        "bigbird" => build_bigbird_mask(l, m, p.window, p.globals, p.random, p.seed),
        "knn" => {
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            let mut cache = MemoryCache::new(m.max(1), OverflowPolicy::Fifo);
            let entries = (0..m)
                .map(|j| MemoryEntry::new(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)], vec![0.0], 0, j))
                .collect();
            cache.write(entries).map_err(|e| e.to_string())?;
            let q = Tensor::matrix(l, 2, (0..2 * l).map(|_| rng.gen_range(-1.0..1.0)).collect());
            read_similarity(&q, &cache, p.topk).and_then(|sel| build_knn_mask(&sel, m, l))
        }
        other => return Err(format!("unknown builder `{other}`")),
    };
    mask.map_err(|e| e.to_string())
}

/// Mask as rows of `#` (allowed) and `.` (blocked).
pub fn mask_text(builder: &str, p: MaskParams) -> Result<String, String> {
    let mask = mask_for(builder, p)?;
    let mut out = String::new();
    for i in 0..mask.rows() {
        out.extend(mask.row(i).iter().map(|&a| if a { '#' } else { '.' }));
        out.push('\n');
    }
    Ok(out)
}

/// Runs concatenated attention and the derived-gate form on one random
/// instance and reports the gate and the largest output difference.
pub fn gate_report(segment_len: usize, memory_len: usize, dim: usize, seed: u64) -> Result<String, String> {
    check_dims(&[("segment length", segment_len), ("memory length", memory_len), ("dimension", dim)])?;
    if segment_len == 0 || dim == 0 {
        return Err("segment length and dimension must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut matrix = |rows: usize| Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.gen_range(-2.0..2.0)).collect());
    let (q, k_cur, v_cur) = (matrix(segment_len), matrix(segment_len), matrix(segment_len));
    let (k_mem, v_mem) = (matrix(memory_len), matrix(memory_len));
    let cur = build_causal_mask(segment_len).map_err(|e| e.to_string())?;
    let mem = MaskMatrix::from_fn(segment_len, memory_len, |_, _| true);
    let full = MaskMatrix::hstack(&[&mem, &cur]).map_err(|e| e.to_string())?;
    let scale = 1.0 / (dim as f64).sqrt();
    let memory = (memory_len > 0).then_some(MemoryKv { keys: &k_mem, values: &v_mem });
    let run = || -> unimem::Result<(Tensor, Tensor, Vec<f64>)> {
        let concat = unimem_attention(&q, memory, &k_cur, &v_cur, &full, scale)?;
        let gate = compute_equivalence_gate(&q, (memory_len > 0).then_some(&k_mem), &k_cur, &mem, &cur, scale)?;
        let gated = gated_attention(&q, memory, &k_cur, &v_cur, &mem, &cur, &gate, scale)?;
        Ok((concat, gated, gate.values().to_vec()))
    };
    let (concat, gated, gate) = run().map_err(|e| e.to_string())?;
    let mut out = String::new();
    let _ = writeln!(out, "max |concatenated - gated| = {:e}", concat.max_abs_diff(&gated));
    out.push_str("memory share per query row:\n");
    for (i, g) in gate.iter().enumerate() {
        let _ = writeln!(out, "  row {i}: g = {g:.6}");
    }
    Ok(out)
}

/// Writes segments of the given lengths into a FIFO and a CLEAR_ALL cache
/// side by side and shows what each holds after every write.
pub fn cache_trace(capacity: usize, lengths: &str) -> Result<String, String> {
    check_dims(&[("capacity", capacity)])?;
    if capacity == 0 {
        return Err("capacity must be positive".into());
    }
    let lens: Vec<usize> = lengths
        .split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("`{s}` is not a segment length")))
        .collect::<Result<_, _>>()?;
    if lens.len() > MAX_DIM {
        return Err(format!("at most {MAX_DIM} segments"));
    }
    let mut fifo = MemoryCache::new(capacity, OverflowPolicy::Fifo);
    let mut clear = MemoryCache::new(capacity, OverflowPolicy::ClearAll);
    let show = |c: &MemoryCache| {
        let cells: Vec<String> = c.entries().map(|e| format!("s{}.{}", e.segment_index, e.position)).collect();
        if cells.is_empty() {
            "(empty)".to_string()
        } else {
            cells.join(" ")
        }
    };
    let mut out = String::new();
    for (s, &len) in lens.iter().enumerate() {
        let entries = || (0..len).map(|p| MemoryEntry::new(vec![0.0], vec![0.0], s, p)).collect::<Vec<_>>();
        fifo.write(entries()).map_err(|e| e.to_string())?;
        clear.write(entries()).map_err(|e| e.to_string())?;
        let _ = writeln!(out, "write segment {s} ({len} tokens)");
        let _ = writeln!(out, "  fifo:      {}", show(&fifo));
        let _ = writeln!(out, "  clear_all: {}", show(&clear));
    }
    Ok(out)
}

#[wasm_bindgen(js_name = maskText)]
#[allow(clippy::too_many_arguments)]
pub fn mask_text_js(
    builder: &str,
    segment_len: usize,
    memory_len: usize,
    window: usize,
    globals: usize,
    random: usize,
    memory_tokens: usize,
    topk: usize,
    seed: u32,
) -> Result<String, JsValue> {
    let p = MaskParams {
        segment_len,
        memory_len,
        window,
        globals,
        random,
        memory_tokens,
        topk,
        seed: seed.into(),
    };
    mask_text(builder, p).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = gateReport)]
pub fn gate_report_js(segment_len: usize, memory_len: usize, dim: usize, seed: u32) -> Result<String, JsValue> {
    gate_report(segment_len, memory_len, dim, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = cacheTrace)]
pub fn cache_trace_js(capacity: usize, lengths: &str) -> Result<String, JsValue> {
    cache_trace(capacity, lengths).map_err(|e| JsValue::from_str(&e))
}
