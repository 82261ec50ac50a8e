//! The four memory dimensions: management (cache capacity and overflow),
//! writing (segment states to entries), reading (entry selection per query)
//! and injection (which layers consult memory).

use std::collections::{BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OverflowPolicy {
    /// Evict the oldest entries until the cache fits.
    Fifo,
    /// Empty the cache before an append that would overflow it.
    ClearAll,
}

/// How many past segments the cache holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemorySize {
    Single,
    Multi(usize),
}

impl MemorySize {
    pub fn segments(self) -> usize {
        match self {
            MemorySize::Single => 1,
            MemorySize::Multi(n) => n,
        }
    }
}

/// How segment states become cache entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheWrite {
    Direct,
    Pooling { ratio: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WriteMode {
    /// Entries written to the per-layer cache, if any.
    pub cache: Option<CacheWrite>,
    /// Compressed memory tokens produced by a forward pass (`0` disables).
    pub compressed_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReadMode {
    /// The `window` most recent entries plus the `globals` oldest ones.
    Position { window: usize, globals: usize },
    /// The `topk` entries with the largest query·key score.
    Similarity { topk: usize },
    All,
    /// `count` uniformly drawn entries per query.
    Random { count: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MemoryLayers {
    All,
    Certain(BTreeSet<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// Memory keys concatenated in front of the current keys.
    Concat,
    /// Separate memory and local attention mixed by a trained per-layer scalar.
    LearnedGate,
    /// Separate branches mixed by the score-mass ratio; equal to `Concat`.
    DerivedGate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFlow {
    StopGradient,
    /// Back-propagation through at most `horizon` previous segments.
    Bptt { horizon: usize },
}

impl GradFlow {
    pub fn horizon(self) -> usize {
        match self {
            GradFlow::StopGradient => 0,
            GradFlow::Bptt { horizon } => horizon,
        }
    }

    /// Whether memory produced `age` segments ago stays differentiable.
    pub fn connects(self, age: usize) -> bool {
        match self {
            GradFlow::StopGradient => false,
            GradFlow::Bptt { horizon } => age <= horizon,
        }
    }
}

impl fmt::Display for GradFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradFlow::StopGradient => f.write_str("stop_gradient"),
            GradFlow::Bptt { horizon } => write!(f, "bptt({horizon})"),
        }
    }
}

/// A complete assignment of the memory dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct UniMemConfig {
    pub memory_size: MemorySize,
    /// Explicit cache capacity in entries; defaults to segments × segment length.
    pub capacity_tokens: Option<usize>,
    pub overflow: OverflowPolicy,
    pub write: WriteMode,
    pub read: Vec<ReadMode>,
    pub memory_layers: MemoryLayers,
    pub gate: GateMode,
    /// Gradient flow through cache entries.
    pub cache_flow: GradFlow,
    /// Gradient flow through compressed memory tokens.
    pub compressed_flow: GradFlow,
    /// Seed for random reads.
    pub seed: u64,
}

impl Default for UniMemConfig {
    /// No memory anywhere: a plain causal transformer.
    fn default() -> Self {
        Self {
            memory_size: MemorySize::Single,
            capacity_tokens: None,
            overflow: OverflowPolicy::Fifo,
            write: WriteMode {
                cache: None,
                compressed_tokens: 0,
            },
            read: Vec::new(),
            memory_layers: MemoryLayers::Certain(BTreeSet::new()),
            gate: GateMode::Concat,
            cache_flow: GradFlow::StopGradient,
            compressed_flow: GradFlow::StopGradient,
            seed: 0,
        }
    }
}

impl UniMemConfig {
    pub fn capacity(&self, segment_len: usize) -> usize {
        self.capacity_tokens
            .unwrap_or(self.memory_size.segments() * segment_len)
    }

    /// Entries one segment writes to a layer cache.
    pub fn entries_per_segment(&self, segment_len: usize) -> usize {
        match self.write.cache {
            None => 0,
            Some(CacheWrite::Direct) => segment_len,
            Some(CacheWrite::Pooling { ratio }) => segment_len.div_ceil(ratio.max(1)),
        }
    }

    pub fn topk(&self) -> Option<usize> {
        self.read.iter().find_map(|r| match r {
            ReadMode::Similarity { topk } => Some(*topk),
            _ => None,
        })
    }

    /// Longest gradient horizon over the memory paths this config uses.
    pub fn bptt_horizon(&self) -> usize {
        let cache = if self.write.cache.is_some() {
            self.cache_flow.horizon()
        } else {
            0
        };
        let compressed = if self.write.compressed_tokens > 0 {
            self.compressed_flow.horizon()
        } else {
            0
        };
        cache.max(compressed)
    }

    pub fn validate(&self, layers: usize, segment_len: usize) -> Result<()> {
        if let Some(k) = self.topk() {
            if k == 0 {
                return Err(Error::config("memory.topk", "must be at least 1 when similarity reading is enabled"));
            }
        }
        if let MemorySize::Multi(0) = self.memory_size {
            return Err(Error::config("memory.memory_size", "must be at least 1 segment"));
        }
        if let Some(CacheWrite::Pooling { ratio: 0 }) = self.write.cache {
            return Err(Error::config("memory.pooling_ratio", "must be at least 1"));
        }
        resolve_memory_layers(self, layers)?;
        let per_segment = self.entries_per_segment(segment_len);
        let capacity = self.capacity(segment_len);
        if per_segment > capacity {
            return Err(Error::config(
                "memory.capacity",
                format!("{capacity} entries cannot hold one segment's {per_segment} entries"),
            ));
        }
        if self.write.cache.is_some() && capacity > 0 && self.read.is_empty() {
            return Err(Error::config("memory.read", "cache is written but no read mode is set"));
        }
        for (key, flow) in [
            ("memory.cache_horizon", self.cache_flow),
            ("memory.compressed_horizon", self.compressed_flow),
        ] {
            if let GradFlow::Bptt { horizon: 0 } = flow {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Which layers consult memory. An empty set disables memory entirely.
pub fn resolve_memory_layers(config: &UniMemConfig, layers: usize) -> Result<BTreeSet<usize>> {
    match &config.memory_layers {
        MemoryLayers::All => Ok((0..layers).collect()),
        MemoryLayers::Certain(set) => {
            if let Some(&bad) = set.iter().find(|&&l| l >= layers) {
                return Err(Error::config(
                    "memory.memory_layers",
                    format!("layer {bad} out of range for {layers} layers"),
                ));
            }
            Ok(set.clone())
        }
    }
}

/// Connection of an entry back to the tape values it was read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct EntryLink {
    pub tape: u64,
    pub keys: Var,
    pub values: Var,
    pub row: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryEntry {
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    /// Segment that produced the entry.
    pub segment_index: usize,
    /// Token (or group) index inside that segment.
    pub position: usize,
    pub(crate) link: Option<EntryLink>,
}

impl PartialEq for MemoryEntry {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
            && self.value == other.value
            && self.segment_index == other.segment_index
            && self.position == other.position
    }
}

impl MemoryEntry {
    pub fn new(key: Vec<f64>, value: Vec<f64>, segment_index: usize, position: usize) -> Self {
        Self {
            key,
            value,
            segment_index,
            position,
            link: None,
        }
    }

    pub fn is_linked(&self) -> bool {
        self.link.is_some()
    }
}

/// Per-layer store of memory entries, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCache {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
    policy: OverflowPolicy,
}

impl MemoryCache {
    pub fn new(capacity: usize, policy: OverflowPolicy) -> Self {
        Self {
            entries: VecDeque::new(),
            capacity,
            policy,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> OverflowPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &MemoryEntry> + DoubleEndedIterator {
        self.entries.iter()
    }

    pub fn entry(&self, index: usize) -> &MemoryEntry {
        &self.entries[index]
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Appends one segment's entries, applying the overflow policy.
    pub fn write(&mut self, new_entries: Vec<MemoryEntry>) -> Result<()> {
        let Some(first) = new_entries.first() else {
            return Ok(());
        };
        let segment = first.segment_index;
        if new_entries.iter().any(|e| e.segment_index != segment) {
            return Err(Error::invalid("a cache write must hold entries from exactly one segment"));
        }
        if new_entries.len() > self.capacity {
            return Err(Error::config(
                "memory.capacity",
                format!(
                    "segment {segment} writes {} entries into a cache of capacity {}",
                    new_entries.len(),
                    self.capacity
                ),
            ));
        }
        match self.policy {
            OverflowPolicy::Fifo => {
                self.entries.extend(new_entries);
                while self.entries.len() > self.capacity {
                    self.entries.pop_front();
                }
            }
            OverflowPolicy::ClearAll => {
                if self.entries.len() + new_entries.len() > self.capacity {
                    self.entries.clear();
                }
                self.entries.extend(new_entries);
            }
        }
        Ok(())
    }

    /// Drops every tape link, leaving plain values.
    pub fn detach(&mut self) {
        for e in &mut self.entries {
            e.link = None;
        }
    }

    /// Cache keys as an `n×d` tensor; `None` when empty.
    pub fn keys(&self) -> Option<Tensor> {
        stack(self.entries.iter().map(|e| e.key.as_slice()))
    }

    pub fn values(&self) -> Option<Tensor> {
        stack(self.entries.iter().map(|e| e.value.as_slice()))
    }

    /// CSV snapshot: `segment_index,position,k0..k{d-1},v0..v{d-1}`.
    pub fn to_csv(&self) -> String {
        let d = self.entries.front().map_or(0, |e| e.key.len());
        let mut out = String::from("segment_index,position");
        for i in 0..d {
            let _ = write!(out, ",k{i}");
        }
        for i in 0..d {
            let _ = write!(out, ",v{i}");
        }
        out.push('\n');
        for e in &self.entries {
            let _ = write!(out, "{},{}", e.segment_index, e.position);
            for v in e.key.iter().chain(&e.value) {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
        out
    }
}

fn stack<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Option<Tensor> {
    let n = rows.len();
    let mut data = Vec::new();
    let mut d = 0;
    for r in rows {
        d = r.len();
        data.extend_from_slice(r);
    }
    (n > 0).then(|| Tensor::matrix(n, d, data))
}

/// Entries from rows of already projected key/value matrices.
pub(crate) fn entries_from_projections(
    tape: &Tape,
    keys: Var,
    values: Var,
    rows: std::ops::Range<usize>,
    segment_index: usize,
    stop_grad: bool,
) -> Vec<MemoryEntry> {
    let kv = tape.value(keys);
    let vv = tape.value(values);
    let start = rows.start;
    rows.map(|r| MemoryEntry {
        key: kv.row(r).to_vec(),
        value: vv.row(r).to_vec(),
        segment_index,
        position: r - start,
        link: (!stop_grad).then_some(EntryLink {
            tape: tape.id(),
            keys,
            values,
            row: r,
        }),
    })
    .collect()
}

/// One entry per row of `hidden`: key `h·W_kᵀ`, value `h·W_vᵀ`.
/// With `stop_grad` the entries carry values only.
pub fn write_direct(
    tape: &mut Tape,
    hidden: Var,
    w_k: Var,
    w_v: Var,
    segment_index: usize,
    stop_grad: bool,
) -> Result<Vec<MemoryEntry>> {
    let keys = tape.matmul_nt(hidden, w_k)?;
    let values = tape.matmul_nt(hidden, w_v)?;
    let n = tape.value(keys).rows();
    Ok(entries_from_projections(tape, keys, values, 0..n, segment_index, stop_grad))
}

/// One entry per group of `ratio` consecutive rows, projected from the
/// group mean. Entry positions are the group start indices.
pub fn write_pooling(
    tape: &mut Tape,
    hidden: Var,
    ratio: usize,
    w_k: Var,
    w_v: Var,
    segment_index: usize,
    stop_grad: bool,
) -> Result<Vec<MemoryEntry>> {
    let pooled = tape.pool_rows(hidden, ratio)?;
    let mut entries = write_direct(tape, pooled, w_k, w_v, segment_index, stop_grad)?;
    for e in &mut entries {
        e.position *= ratio;
    }
    Ok(entries)
}

/// Entries projected from compressed memory-token states (`m×d`).
pub fn write_model_forward(
    tape: &mut Tape,
    states: Var,
    w_k: Var,
    w_v: Var,
    segment_index: usize,
    stop_grad: bool,
) -> Result<Vec<MemoryEntry>> {
    write_direct(tape, states, w_k, w_v, segment_index, stop_grad)
}

/// Exact top-`k` entries by query·key per query row, best first. Ties go to
/// the lower (older) index.
pub fn read_similarity(query: &Tensor, cache: &MemoryCache, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("top-k must be at least 1"));
    }
    let n = cache.len();
    let take = k.min(n);
    let mut out = Vec::with_capacity(query.rows());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..query.rows() {
        let q = query.row(i);
        if let Some(e) = cache.entries.front() {
            if e.key.len() != q.len() {
                return Err(Error::Shape {
                    op: "read_similarity",
                    left: vec![q.len()],
                    right: vec![e.key.len()],
                });
            }
        }
        scored.clear();
        scored.extend(cache.entries.iter().enumerate().map(|(j, e)| (dot(q, &e.key), j)));
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if take < n {
            scored.select_nth_unstable_by(take - 1, by_rank);
            scored.truncate(take);
        }
        scored.sort_unstable_by(by_rank);
        out.push(scored.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Indices of the `window` most recent entries, ascending.
pub fn read_position(cache: &MemoryCache, window: usize) -> Vec<usize> {
    let n = cache.len();
    (n - window.min(n)..n).collect()
}

/// Per-row union of every mode's selection, as ascending index lists.
pub fn read_union(query: &Tensor, cache: &MemoryCache, modes: &[ReadMode], seed: u64) -> Result<Vec<Vec<usize>>> {
    if modes.is_empty() {
        return Err(Error::invalid("read_union needs at least one read mode"));
    }
    let rows = query.rows();
    let n = cache.len();
    let mut sets = vec![BTreeSet::new(); rows];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mode in modes {
        match *mode {
            ReadMode::All => sets.iter_mut().for_each(|s| s.extend(0..n)),
            ReadMode::Position { window, globals } => {
                let recent = read_position(cache, window);
                let first = 0..globals.min(n);
                for s in &mut sets {
                    s.extend(recent.iter().copied());
                    s.extend(first.clone());
                }
            }
            ReadMode::Similarity { topk } => {
                for (s, picks) in sets.iter_mut().zip(read_similarity(query, cache, topk)?) {
                    s.extend(picks);
                }
            }
            ReadMode::Random { count } => {
                let take = count.min(n);
                if take == 0 {
                    continue;
                }
                for s in &mut sets {
                    s.extend(sample(&mut rng, n, take).iter());
                }
            }
        }
    }
    Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
}
