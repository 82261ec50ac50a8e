//! Decoder-only transformer with per-layer memory injection, run one
//! segment at a time over a token stream.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{build_bigbird_mask, build_causal_mask, build_knn_mask, build_rmt_mask, build_window_global_mask};
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::memory::{
    entries_from_projections, read_union, resolve_memory_layers, write_pooling, CacheWrite, GateMode, GradFlow,
    MemoryCache, ReadMode, UniMemConfig,
};
use crate::tape::{log_sum_exp, Tape, Var};
use crate::tensor::{Tensor, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Real token alphabet; id `vocab` is reserved for padding.
    pub vocab: usize,
    pub segment_len: usize,
    pub max_position: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            vocab: 256,
            segment_len: 64,
            max_position: 1024,
        }
    }
}

impl ModelConfig {
    pub fn pad_token(&self) -> usize {
        self.vocab
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.layers", self.layers),
            ("model.d_model", self.d_model),
            ("model.heads", self.heads),
            ("model.vocab", self.vocab),
            ("model.segment_len", self.segment_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("{} does not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.segment_len > self.max_position {
            return Err(Error::config(
                "model.max_position",
                format!("{} is below segment_len {}", self.max_position, self.segment_len),
            ));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding: `sin` on even coordinates, `cos` on odd ones,
/// with wavelengths growing geometrically from `2π` to `10000·2π`.
pub fn positional_encoding(position: usize, d: usize, max_position: usize) -> Result<Vec<f64>> {
    if position >= max_position {
        return Err(Error::invalid(format!(
            "position {position} outside max_position {max_position}"
        )));
    }
    let mut out = Vec::with_capacity(d);
    for j in 0..d {
        let pair = (j / 2) as f64;
        let angle = position as f64 / 10000f64.powf(2.0 * pair / d as f64);
        out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
    }
    Ok(out)
}

/// One fixed-length chunk of a stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Zero-based segment index inside its stream.
    pub index: usize,
    /// Exactly `segment_len` ids; the tail of a final partial segment is padding.
    pub tokens: Vec<usize>,
    pub real_len: usize,
    /// Next-token target per row; `None` for padding and for the last
    /// token of the stream.
    pub targets: Vec<Option<usize>>,
}

/// A token sequence cut into segments of `segment_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentStream {
    tokens: Vec<usize>,
    segment_len: usize,
    pad: usize,
    next: usize,
}

impl SegmentStream {
    pub fn new(tokens: Vec<usize>, segment_len: usize, pad: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token stream"));
        }
        if segment_len == 0 {
            return Err(Error::EmptySegment);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= pad) {
            return Err(Error::invalid(format!("token {bad} collides with pad id {pad}")));
        }
        Ok(Self {
            tokens,
            segment_len,
            pad,
            next: 0,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn segment_count(&self) -> usize {
        self.tokens.len().div_ceil(self.segment_len)
    }

    /// Tokens with a next-token target: all but the first.
    pub fn target_count(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn segment(&self, index: usize) -> Option<Segment> {
        let l = self.segment_len;
        let start = index * l;
        if start >= self.tokens.len() {
            return None;
        }
        let real_len = l.min(self.tokens.len() - start);
        let mut tokens = self.tokens[start..start + real_len].to_vec();
        tokens.resize(l, self.pad);
        let targets = (0..l)
            .map(|i| (i < real_len).then(|| self.tokens.get(start + i + 1).copied()).flatten())
            .collect();
        Some(Segment {
            index,
            tokens,
            real_len,
            targets,
        })
    }
}

impl Iterator for SegmentStream {
    type Item = Segment;

    fn next(&mut self) -> Option<Segment> {
        let s = self.segment(self.next)?;
        self.next += 1;
        Some(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct RmtLink {
    tape: u64,
    var: Var,
}

/// Carried state of the compressed memory tokens.
#[derive(Clone, Debug)]
pub struct RmtState {
    states: Tensor,
    produced_by: Option<usize>,
    link: Option<RmtLink>,
}

impl RmtState {
    /// Before the first segment: the learned initial embedding is used.
    pub fn initial(tokens: usize, d: usize) -> Self {
        Self {
            states: Tensor::zeros(&[tokens, d]),
            produced_by: None,
            link: None,
        }
    }

    /// Final-layer write-token states produced by segment `segment_index`.
    pub fn carried(states: Tensor, segment_index: usize) -> Self {
        Self {
            states,
            produced_by: Some(segment_index),
            link: None,
        }
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn produced_by(&self) -> Option<usize> {
        self.produced_by
    }
}

impl PartialEq for RmtState {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states && self.produced_by == other.produced_by
    }
}

/// Everything a stream threads from one segment to the next.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    /// One cache per layer; `None` where the layer keeps no cache.
    pub caches: Vec<Option<MemoryCache>>,
    pub rmt: Option<RmtState>,
    pub next_segment: usize,
}

impl StreamState {
    /// A copy holding values only, cut from any tape.
    pub fn detached(&self) -> Self {
        let mut out = self.clone();
        for c in out.caches.iter_mut().flatten() {
            c.detach();
        }
        if let Some(r) = &mut out.rmt {
            r.link = None;
        }
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "{} parameter names for {} tensors",
                names.len(),
                tensors.len()
            )));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Clone, Debug)]
struct LayerSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    gate: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    layers: Vec<LayerSlots>,
    lnf_gain: usize,
    lnf_bias: usize,
    head: usize,
    rmt_init: Option<usize>,
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug)]
enum Init {
    Ones,
    Zeros,
    /// Uniform in `±bound`.
    Uniform(f64),
}

fn xavier(rows: usize, cols: usize) -> Init {
    Init::Uniform((6.0 / (rows + cols) as f64).sqrt())
}

struct Spec {
    name: String,
    shape: [usize; 2],
    init: Init,
}

fn build_layout(config: &ModelConfig, ucfg: &UniMemConfig, memory_layers: &BTreeSet<usize>) -> (Layout, Vec<Spec>) {
    let d = config.d_model;
    let hidden = 4 * d;
    let mut specs = Vec::new();
    let mut add = |name: String, shape: [usize; 2], init: Init| {
        specs.push(Spec { name, shape, init });
        specs.len() - 1
    };
    let tok_emb = add("tok_emb".into(), [config.vocab + 1, d], Init::Uniform(1.0));
    let mut layers = Vec::with_capacity(config.layers);
    for n in 0..config.layers {
        let p = |s: &str| format!("layer{n}.{s}");
        layers.push(LayerSlots {
            ln1_gain: add(p("ln1.gain"), [1, d], Init::Ones),
            ln1_bias: add(p("ln1.bias"), [1, d], Init::Zeros),
            wq: add(p("wq"), [d, d], xavier(d, d)),
            wk: add(p("wk"), [d, d], xavier(d, d)),
            wv: add(p("wv"), [d, d], xavier(d, d)),
            wo: add(p("wo"), [d, d], xavier(d, d)),
            ln2_gain: add(p("ln2.gain"), [1, d], Init::Ones),
            ln2_bias: add(p("ln2.bias"), [1, d], Init::Zeros),
            w1: add(p("ffn.w1"), [hidden, d], xavier(hidden, d)),
            b1: add(p("ffn.b1"), [1, hidden], Init::Zeros),
            w2: add(p("ffn.w2"), [d, hidden], xavier(d, hidden)),
            b2: add(p("ffn.b2"), [1, d], Init::Zeros),
            gate: None,
        });
    }
    let lnf_gain = add("ln_f.gain".into(), [1, d], Init::Ones);
    let lnf_bias = add("ln_f.bias".into(), [1, d], Init::Zeros);
    let head = add("head".into(), [config.vocab, d], xavier(config.vocab, d));
    // Memory-only parameters come last so that every preset shares the
    // same draws for the common ones.
    if ucfg.gate == GateMode::LearnedGate {
        for &n in memory_layers {
            layers[n].gate = Some(add(format!("layer{n}.gate"), [1, 1], Init::Zeros));
        }
    }
    let m = if memory_layers.is_empty() {
        0
    } else {
        ucfg.write.compressed_tokens
    };
    let rmt_init = (m > 0).then(|| add("rmt.init".into(), [m, d], Init::Uniform(1.0)));
    (
        Layout {
            tok_emb,
            layers,
            lnf_gain,
            lnf_bias,
            head,
            rmt_init,
        },
        specs,
    )
}

/// Parameters registered on one tape, in [`Params`] order.
#[derive(Clone, Debug)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Tape handles produced by one segment's forward pass.
#[derive(Clone, Debug)]
pub struct SegmentVars {
    /// `L×vocab` logits for the content rows.
    pub logits: Var,
    /// Embedding plus position of the content rows.
    pub input: Var,
    /// Output of each layer over the full sequence (memory tokens included).
    pub hiddens: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SegmentOutput {
    pub logits: Tensor,
    /// Output of each layer for the content rows.
    pub hiddens: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    ucfg: UniMemConfig,
    memory_layers: BTreeSet<usize>,
    params: Params,
    layout: Layout,
    positions: Tensor,
    causal: MaskMatrix,
    /// Sequence masks with memory tokens: content rows see the read tokens
    /// (`rmt_open`) or not (`rmt_closed`).
    rmt_open: Option<MaskMatrix>,
    rmt_closed: Option<MaskMatrix>,
}

impl Model {
    /// A freshly initialised model.
    pub fn new(config: ModelConfig, ucfg: UniMemConfig, seed: u64) -> Result<Self> {
        let (layout, specs, memory_layers) = Self::plan(&config, &ucfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let [r, c] = spec.shape;
            let data = match spec.init {
                Init::Ones => vec![1.0; r * c],
                Init::Zeros => vec![0.0; r * c],
                Init::Uniform(b) => (0..r * c).map(|_| rng.gen_range(-b..b)).collect(),
            };
            names.push(spec.name);
            tensors.push(Tensor::matrix(r, c, data));
        }
        Self::assemble(config, ucfg, memory_layers, Params { names, tensors }, layout)
    }

    /// A model over existing parameters, which must match the layout.
    pub fn with_params(config: ModelConfig, ucfg: UniMemConfig, params: Params) -> Result<Self> {
        let (layout, specs, memory_layers) = Self::plan(&config, &ucfg)?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(params.iter()) {
            if spec.name != name || t.shape() != spec.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Self::assemble(config, ucfg, memory_layers, params, layout)
    }

    /// Parameter names and shapes in storage order.
    pub fn manifest(config: &ModelConfig, ucfg: &UniMemConfig) -> Result<Vec<(String, [usize; 2])>> {
        let (_, specs, _) = Self::plan(config, ucfg)?;
        Ok(specs.into_iter().map(|s| (s.name, s.shape)).collect())
    }

    fn plan(config: &ModelConfig, ucfg: &UniMemConfig) -> Result<(Layout, Vec<Spec>, BTreeSet<usize>)> {
        config.validate()?;
        ucfg.validate(config.layers, config.segment_len)?;
        let memory_layers = resolve_memory_layers(ucfg, config.layers)?;
        let (layout, specs) = build_layout(config, ucfg, &memory_layers);
        Ok((layout, specs, memory_layers))
    }

    fn assemble(
        config: ModelConfig,
        ucfg: UniMemConfig,
        memory_layers: BTreeSet<usize>,
        params: Params,
        layout: Layout,
    ) -> Result<Self> {
        let l = config.segment_len;
        let d = config.d_model;
        let mut pos = Vec::with_capacity(l * d);
        for p in 0..l {
            pos.extend(positional_encoding(p, d, config.max_position)?);
        }
        let m = layout.rmt_init.map_or(0, |i| params.tensors[i].rows());
        let (rmt_open, rmt_closed) = if m > 0 {
            let open = build_rmt_mask(l, m)?;
            let mut closed = open.clone();
            for i in m..m + l {
                for j in 0..m {
                    closed.set(i, j, false);
                }
            }
            (Some(open), Some(closed))
        } else {
            (None, None)
        };
        Ok(Self {
            causal: build_causal_mask(l)?,
            positions: Tensor::matrix(l, d, pos),
            config,
            ucfg,
            memory_layers,
            params,
            layout,
            rmt_open,
            rmt_closed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn memory_config(&self) -> &UniMemConfig {
        &self.ucfg
    }

    pub fn memory_layers(&self) -> &BTreeSet<usize> {
        &self.memory_layers
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Compressed memory tokens per segment (0 when memory is off).
    pub fn memory_tokens(&self) -> usize {
        self.rmt_open.as_ref().map_or(0, |m| m.rows() - self.config.segment_len) / 2
    }

    fn keeps_cache(&self, layer: usize) -> bool {
        self.ucfg.write.cache.is_some() && self.memory_layers.contains(&layer)
    }

    /// Empty caches and initial memory tokens.
    pub fn new_stream_state(&self) -> StreamState {
        let capacity = self.ucfg.capacity(self.config.segment_len);
        StreamState {
            caches: (0..self.config.layers)
                .map(|n| self.keeps_cache(n).then(|| MemoryCache::new(capacity, self.ucfg.overflow)))
                .collect(),
            rmt: (self.memory_tokens() > 0).then(|| RmtState::initial(self.memory_tokens(), self.config.d_model)),
            next_segment: 0,
        }
    }

    pub fn stream(&self, tokens: Vec<usize>) -> Result<SegmentStream> {
        SegmentStream::new(tokens, self.config.segment_len, self.config.pad_token())
    }

    /// Puts every parameter on `tape`, as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .tensors
                .iter()
                .map(|t| {
                    if trainable {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        )
    }

    /// One segment without gradients. Updates `state`.
    pub fn forward_segment(&self, segment: &Segment, state: &mut StreamState) -> Result<SegmentOutput> {
        let mut tape = Tape::new();
        let pv = self.register(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &pv, segment, state)?;
        let m = self.memory_tokens();
        let l = self.config.segment_len;
        let hiddens = out
            .hiddens
            .iter()
            .map(|&h| crate::tensor::slice_rows(tape.value(h), m, l))
            .collect::<Result<_>>()?;
        let logits = tape.value(out.logits).clone();
        state.detach_from(tape.id());
        Ok(SegmentOutput { logits, hiddens })
    }

    /// Per-token negative log-likelihoods over a whole stream, in order.
    pub fn stream_forward(&self, stream: &SegmentStream) -> Result<Vec<f64>> {
        let mut state = self.new_stream_state();
        let mut nlls = Vec::with_capacity(stream.target_count());
        for index in 0..stream.segment_count() {
            let seg = stream.segment(index).expect("index below segment count");
            let out = self.forward_segment(&seg, &mut state)?;
            nlls.extend(token_nlls(&out.logits, &seg.targets)?.into_iter().flatten());
        }
        Ok(nlls)
    }

    /// One segment recorded on `tape`. Memory written here stays linked to
    /// the tape, so a later segment on the same tape can differentiate
    /// through it where the configured gradient flow allows.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        segment: &Segment,
        state: &mut StreamState,
    ) -> Result<SegmentVars> {
        let cfg = &self.config;
        let l = cfg.segment_len;
        if segment.tokens.len() != l {
            return Err(Error::Shape {
                op: "forward_segment tokens",
                left: vec![segment.tokens.len()],
                right: vec![l],
            });
        }
        if segment.real_len == 0 {
            return Err(Error::PadOnlySegment);
        }
        if state.caches.len() != cfg.layers
            || state.caches.iter().enumerate().any(|(n, c)| c.is_some() != self.keeps_cache(n))
        {
            return Err(Error::invalid("stream state caches do not match the memory layers"));
        }
        let p = |i: usize| pv.0[i];
        let tau = segment.index;
        let m = self.memory_tokens();

        let emb = tape.gather_rows(p(self.layout.tok_emb), &segment.tokens)?;
        let pos = tape.constant(self.positions.clone());
        let input = tape.add(emb, pos)?;
        let (mut h, carry_visible) = if m > 0 {
            let rmt = state
                .rmt
                .as_ref()
                .ok_or_else(|| Error::invalid("memory tokens configured but stream state has none"))?;
            let tokens = match (rmt.produced_by, rmt.link) {
                (None, _) => p(self.layout.rmt_init.expect("memory tokens imply rmt.init")),
                (Some(src), Some(link))
                    if link.tape == tape.id() && self.ucfg.compressed_flow.connects(tau.saturating_sub(src)) =>
                {
                    link.var
                }
                _ => tape.constant(rmt.states.clone()),
            };
            (tape.concat_rows(&[tokens, input, tokens])?, rmt.produced_by.is_some())
        } else {
            (input, false)
        };
        let rows = l + 2 * m;

        let mut hiddens = Vec::with_capacity(cfg.layers);
        for (n, slots) in self.layout.layers.iter().enumerate() {
            let is_memory = self.memory_layers.contains(&n);
            let seq_mask = match (&self.rmt_open, &self.rmt_closed) {
                (Some(open), Some(closed)) => {
                    if is_memory && carry_visible {
                        open
                    } else {
                        closed
                    }
                }
                _ => &self.causal,
            };
            let a = tape.layer_norm(h, p(slots.ln1_gain), p(slots.ln1_bias), LAYER_NORM_EPS)?;
            let q = tape.matmul_nt(a, p(slots.wq))?;
            let k = tape.matmul_nt(a, p(slots.wk))?;
            let v = tape.matmul_nt(a, p(slots.wv))?;

            let memory = match &state.caches[n] {
                Some(cache) if is_memory => self.memory_block(tape, q, cache, tau, n, rows, m)?,
                _ => None,
            };
            let att = match memory {
                None => self.attend(tape, q, k, v, seq_mask, false)?,
                Some(mem) => match self.ucfg.gate {
                    GateMode::Concat => {
                        let keys = tape.concat_rows(&[mem.keys, k])?;
                        let values = tape.concat_rows(&[mem.values, v])?;
                        let mask = MaskMatrix::hstack(&[&mem.mask, seq_mask])?;
                        self.attend(tape, q, keys, values, &mask, false)?
                    }
                    GateMode::LearnedGate => {
                        let local = self.attend(tape, q, k, v, seq_mask, false)?;
                        let remote = self.attend(tape, q, mem.keys, mem.values, &mem.mask, true)?;
                        let logit = p(slots.gate.expect("learned gate parameter on memory layer"));
                        let g = tape.sigmoid(logit);
                        let g = tape.broadcast_rows(g, rows)?;
                        let has_memory: Vec<f64> = (0..rows)
                            .map(|i| f64::from(u8::from(mem.mask.row_allowed_count(i) > 0)))
                            .collect();
                        let has_memory = tape.constant(Tensor::matrix(rows, 1, has_memory));
                        let g = tape.mul(g, has_memory)?;
                        mix(tape, remote, local, g)?
                    }
                    GateMode::DerivedGate => self.derived_gate_attend(tape, q, k, v, &mem, seq_mask)?,
                },
            };
            let o = tape.matmul_nt(att, p(slots.wo))?;
            h = tape.add(h, o)?;

            if let Some(cache) = state.caches[n].as_mut() {
                let stop = !matches!(self.ucfg.cache_flow, GradFlow::Bptt { .. });
                let real = segment.real_len;
                let entries = match self.ucfg.write.cache {
                    Some(CacheWrite::Direct) => entries_from_projections(tape, k, v, m..m + real, tau, stop),
                    Some(CacheWrite::Pooling { ratio }) => {
                        let content = tape.slice_rows(a, m, real)?;
                        write_pooling(tape, content, ratio, p(slots.wk), p(slots.wv), tau, stop)?
                    }
                    None => Vec::new(),
                };
                cache.write(entries)?;
            }

            let f = tape.layer_norm(h, p(slots.ln2_gain), p(slots.ln2_bias), LAYER_NORM_EPS)?;
            let f = tape.matmul_nt(f, p(slots.w1))?;
            let f = tape.add_row_bias(f, p(slots.b1))?;
            let f = tape.gelu(f);
            let f = tape.matmul_nt(f, p(slots.w2))?;
            let f = tape.add_row_bias(f, p(slots.b2))?;
            h = tape.add(h, f)?;
            hiddens.push(h);
        }

        let content = tape.slice_rows(h, m, l)?;
        let z = tape.layer_norm(content, p(self.layout.lnf_gain), p(self.layout.lnf_bias), LAYER_NORM_EPS)?;
        let logits = tape.matmul_nt(z, p(self.layout.head))?;
        if m > 0 {
            let write = tape.slice_rows(h, m + l, m)?;
            state.rmt = Some(RmtState {
                states: tape.value(write).clone(),
                produced_by: Some(tau),
                link: Some(RmtLink {
                    tape: tape.id(),
                    var: write,
                }),
            });
        }
        state.next_segment = tau + 1;
        Ok(SegmentVars {
            logits,
            input,
            hiddens,
        })
    }

    /// Multi-head masked attention. `allow_empty` lets fully masked rows
    /// produce zeros (memory branch of a gated layer).
    fn attend(&self, tape: &mut Tape, q: Var, k: Var, v: Var, mask: &MaskMatrix, allow_empty: bool) -> Result<Var> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let s = tape.matmul_nt(qh, kh)?;
            let s = tape.scale(s, scale);
            let w = tape.masked_softmax_impl(s, mask, allow_empty)?;
            outs.push(tape.matmul(w, vh)?);
        }
        tape.concat_cols(&outs)
    }

    /// Separate memory and local branches per head, mixed by the share of
    /// score mass on memory.
    fn derived_gate_attend(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        mem: &MemoryBlock,
        seq_mask: &MaskMatrix,
    ) -> Result<Var> {
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let kmh = tape.slice_cols(mem.keys, head * dh, dh)?;
            let vmh = tape.slice_cols(mem.values, head * dh, dh)?;
            let s_mem = tape.matmul_nt(qh, kmh)?;
            let s_mem = tape.scale(s_mem, scale);
            let s_cur = tape.matmul_nt(qh, kh)?;
            let s_cur = tape.scale(s_cur, scale);
            let g = tape.equivalence_gate(s_mem, s_cur, &mem.mask, seq_mask)?;
            let w_mem = tape.masked_softmax_impl(s_mem, &mem.mask, true)?;
            let w_cur = tape.masked_softmax(s_cur, seq_mask)?;
            let remote = tape.matmul(w_mem, vmh)?;
            let local = tape.matmul(w_cur, vh)?;
            outs.push(mix(tape, remote, local, g)?);
        }
        tape.concat_cols(&outs)
    }

    /// Memory keys, values and the `rows×|cache|` mask for one memory layer,
    /// or `None` when no row can see any entry.
    #[allow(clippy::too_many_arguments)]
    fn memory_block(
        &self,
        tape: &mut Tape,
        q: Var,
        cache: &MemoryCache,
        tau: usize,
        layer: usize,
        rows: usize,
        content_start: usize,
    ) -> Result<Option<MemoryBlock>> {
        if cache.is_empty() {
            return Ok(None);
        }
        let n = cache.len();
        let l = self.config.segment_len;
        let seed = mix_seed(self.ucfg.seed, layer as u64, tau as u64);
        let modes = &self.ucfg.read;
        let positional = modes.iter().find_map(|r| match *r {
            ReadMode::Position { window, globals } => Some((window, globals)),
            _ => None,
        });
        let only_positional = modes
            .iter()
            .all(|r| matches!(r, ReadMode::Position { .. } | ReadMode::Random { .. }));
        let content_mask = match positional {
            Some((window, globals)) if only_positional => {
                let random = modes
                    .iter()
                    .find_map(|r| match *r {
                        ReadMode::Random { count } => Some(count),
                        _ => None,
                    })
                    .unwrap_or(0);
                let g = globals.min(n);
                if window == 0 && g == 0 && random == 0 {
                    return Ok(None);
                }
                let full = if random > 0 {
                    build_bigbird_mask(l, n - g, window, g, random, seed)?
                } else {
                    build_window_global_mask(l, n - g, window, g)?
                };
                full.split_cols(n).0
            }
            _ => {
                let qv = crate::tensor::slice_rows(tape.value(q), content_start, l)?;
                let selected = read_union(&qv, cache, modes, seed)?;
                build_knn_mask(&selected, n, l)?.split_cols(n).0
            }
        };
        let mask = MaskMatrix::from_fn(rows, n, |i, j| {
            i >= content_start && i < content_start + l && content_mask.is_allowed(i - content_start, j)
        });
        if mask.allowed_count() == 0 {
            return Ok(None);
        }
        let (keys, values) = self.cache_vars(tape, cache, tau)?;
        Ok(Some(MemoryBlock { keys, values, mask }))
    }

    /// Cache keys and values as tape variables. Entries still linked to this
    /// tape, within the gradient horizon, are sliced from their source so
    /// gradient reaches the segment that wrote them.
    fn cache_vars(&self, tape: &mut Tape, cache: &MemoryCache, tau: usize) -> Result<(Var, Var)> {
        let flow = self.ucfg.cache_flow;
        let tape_id = tape.id();
        let usable = |i: usize| {
            let e = cache.entry(i);
            e.link
                .filter(|l| l.tape == tape_id && flow.connects(tau.saturating_sub(e.segment_index)))
        };
        let n = cache.len();
        let mut keys = Vec::new();
        let mut values = Vec::new();
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            match usable(i) {
                Some(first) => {
                    while j < n {
                        match usable(j) {
                            Some(l)
                                if l.keys == first.keys
                                    && l.values == first.values
                                    && l.row == first.row + (j - i) => {}
                            _ => break,
                        }
                        j += 1;
                    }
                    keys.push(tape.slice_rows(first.keys, first.row, j - i)?);
                    values.push(tape.slice_rows(first.values, first.row, j - i)?);
                }
                None => {
                    while j < n && usable(j).is_none() {
                        j += 1;
                    }
                    let d = cache.entry(i).key.len();
                    let mut kd = Vec::with_capacity((j - i) * d);
                    let mut vd = Vec::with_capacity((j - i) * d);
                    for r in i..j {
                        kd.extend_from_slice(&cache.entry(r).key);
                        vd.extend_from_slice(&cache.entry(r).value);
                    }
                    keys.push(tape.constant(Tensor::matrix(j - i, d, kd)));
                    values.push(tape.constant(Tensor::matrix(j - i, d, vd)));
                }
            }
            i = j;
        }
        Ok((tape.concat_rows(&keys)?, tape.concat_rows(&values)?))
    }
}

impl StreamState {
    /// Drops links to the given tape, which is about to be discarded.
    fn detach_from(&mut self, tape: u64) {
        for c in self.caches.iter_mut().flatten() {
            if c.entries().any(|e| e.link.is_some_and(|l| l.tape == tape)) {
                c.detach();
            }
        }
        if let Some(r) = &mut self.rmt {
            if r.link.is_some_and(|l| l.tape == tape) {
                r.link = None;
            }
        }
    }
}

struct MemoryBlock {
    keys: Var,
    values: Var,
    mask: MaskMatrix,
}

/// `g ⊙ remote + (1 − g) ⊙ local` with `g` of shape `rows×1`.
fn mix(tape: &mut Tape, remote: Var, local: Var, g: Var) -> Result<Var> {
    let keep = tape.affine(g, -1.0, 1.0);
    let r = tape.scale_rows(remote, g)?;
    let l = tape.scale_rows(local, keep)?;
    tape.add(r, l)
}

/// Per-call seed for random reads.
fn mix_seed(seed: u64, layer: u64, segment: u64) -> u64 {
    let mut z = seed ^ layer.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ segment.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Negative log-likelihood of each row's target; `None` where a row has no
/// target.
pub fn token_nlls(logits: &Tensor, targets: &[Option<usize>]) -> Result<Vec<Option<f64>>> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            op: "token_nlls",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            t.map(|t| {
                let row = logits.row(i);
                if t >= row.len() {
                    return Err(Error::invalid(format!("target {t} outside vocabulary of {}", row.len())));
                }
                Ok(log_sum_exp(row).0 - row[t])
            })
            .transpose()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates() {
        let pe = positional_encoding(0, 6, 8).unwrap();
        assert_eq!(pe, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(positional_encoding(8, 6, 8).is_err());
    }

    #[test]
    fn positions_are_distinct() {
        let table: Vec<Vec<f64>> = (0..64).map(|p| positional_encoding(p, 4, 64).unwrap()).collect();
        for a in 0..64 {
            for b in a + 1..64 {
                assert_ne!(table[a], table[b], "positions {a} and {b}");
            }
        }
    }

    #[test]
    fn stream_segments_pad_and_targets() {
        let s = SegmentStream::new(vec![1, 2, 3, 4, 5], 2, 9).unwrap();
        assert_eq!(s.segment_count(), 3);
        let last = s.segment(2).unwrap();
        assert_eq!(last.tokens, vec![5, 9]);
        assert_eq!(last.real_len, 1);
        assert_eq!(last.targets, vec![None, None]);
        assert_eq!(s.segment(0).unwrap().targets, vec![Some(2), Some(3)]);
        assert_eq!(s.segment(1).unwrap().targets, vec![Some(4), Some(5)]);
        assert!(s.segment(3).is_none());
        assert!(SegmentStream::new(vec![9], 2, 9).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn manifest_puts_memory_parameters_last() {
        let cfg = ModelConfig {
            layers: 2,
            ..ModelConfig::default()
        };
        let plain = Model::manifest(&cfg, &UniMemConfig::default()).unwrap();
        let ucfg = UniMemConfig {
            memory_layers: crate::memory::MemoryLayers::All,
            gate: GateMode::LearnedGate,
            write: crate::memory::WriteMode {
                cache: None,
                compressed_tokens: 2,
            },
            ..UniMemConfig::default()
        };
        let mem = Model::manifest(&cfg, &ucfg).unwrap();
        assert_eq!(&mem[..plain.len()], &plain[..]);
        let extra: Vec<&str> = mem[plain.len()..].iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(extra, vec!["layer0.gate", "layer1.gate", "rmt.init"]);
    }
}
