//! Next-token training: loss, truncated back-propagation through memory,
//! and the optimizers.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::GradFlow;
use crate::model::{Model, SegmentStream, StreamState};
use crate::tape::{log_sum_exp, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Streams per step.
    pub batch: usize,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Segments per training stream when sampling from a corpus.
    pub stream_segments: usize,
    /// Fill the log's `wall_ms` column with elapsed time. Off by default so
    /// logs are byte-identical across runs.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            steps: 200,
            batch: 4,
            optimizer: Optimizer::adam(),
            clip_norm: Some(1.0),
            seed: 0,
            stream_segments: 4,
            record_wall_clock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be a finite non-negative number"));
        }
        if self.batch == 0 {
            return Err(Error::config("train.batch", "must be at least 1"));
        }
        if self.stream_segments == 0 {
            return Err(Error::config("train.stream_segments", "must be at least 1"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.clip_norm", "must be positive"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
            }
            if !(eps > 0.0) {
                return Err(Error::config("train.eps", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean negative log-likelihood over rows whose target is not `pad`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], pad: usize) -> Result<f64> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if t == pad {
            continue;
        }
        let row = logits.row(i);
        if t >= row.len() {
            return Err(Error::invalid(format!("target {t} outside vocabulary of {}", row.len())));
        }
        total += log_sum_exp(row).0 - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("every target position is padding"));
    }
    Ok(total / count as f64)
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam step; returns the delta to add to the parameter.
pub fn adam_update(
    state: &mut AdamMoments,
    grad: &[f64],
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    assert_eq!(state.m.len(), grad.len(), "moment and gradient sizes differ");
    state.step += 1;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    let mut delta = Vec::with_capacity(grad.len());
    for ((m, v), &g) in state.m.iter_mut().zip(&mut state.v).zip(grad) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        delta.push(-learning_rate * m_hat / (v_hat.sqrt() + eps));
    }
    delta
}

/// Optimizer state for every parameter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    moments: Vec<AdamMoments>,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        Self {
            moments: model.params().tensors().iter().map(|t| AdamMoments::new(t.len())).collect(),
        }
    }
}

/// Loss of segment `tau` recomputed from the state before segment `start`.
/// Returns the loss value, gradients when `trainable`, and the state after
/// `tau`.
fn window_pass(
    model: &Model,
    stream: &SegmentStream,
    start: usize,
    tau: usize,
    snapshots: &[StreamState],
    trainable: bool,
) -> Result<(f64, Option<Vec<Tensor>>, StreamState)> {
    let scale = 1.0 / stream.target_count() as f64;
    let mut tape = Tape::new();
    let pv = model.register(&mut tape, trainable);
    let snapshot = |s: usize| {
        snapshots
            .get(s)
            .ok_or_else(|| Error::invalid(format!("no snapshot for segment {s}")))
    };
    let mut state = snapshot(start)?.detached();
    let ucfg = model.memory_config();
    let mut last = None;
    for s in start..=tau {
        if s > start {
            // Memory on a stop-gradient path is a constant: take the frozen
            // value rather than the one recomputed inside this window.
            let frozen = snapshot(s)?;
            if ucfg.cache_flow == GradFlow::StopGradient {
                state.caches = frozen.detached().caches;
            }
            if ucfg.compressed_flow == GradFlow::StopGradient {
                state.rmt = frozen.detached().rmt;
            }
        }
        let seg = stream.segment(s).expect("segment inside stream");
        let out = model.forward_on_tape(&mut tape, &pv, &seg, &mut state)?;
        last = Some((out.logits, seg.targets));
    }
    let (logits, targets) = last.expect("window holds at least one segment");
    let loss = tape.cross_entropy(logits, &targets, scale)?;
    let value = tape.value(loss).item();
    let grads = if trainable {
        let g = tape.backward(loss)?;
        Some(pv.vars().iter().map(|&v| g.wrt(v)).collect())
    } else {
        None
    };
    Ok((value, grads, state.detached()))
}

fn horizon(model: &Model) -> usize {
    if model.memory_layers().is_empty() {
        0
    } else {
        model.memory_config().bptt_horizon()
    }
}

fn check_targets(stream: &SegmentStream) -> Result<()> {
    if stream.target_count() == 0 {
        return Err(Error::invalid("stream has no next-token targets"));
    }
    Ok(())
}

/// Mean next-token loss of one stream and its gradient under truncated
/// back-propagation: segment `τ`'s loss is differentiated through segments
/// `τ−h..τ`, where `h` is the configured horizon (0 under stop-gradient);
/// older memory enters as constants.
pub fn stream_gradients(model: &Model, stream: &SegmentStream) -> Result<(f64, Vec<Tensor>)> {
    check_targets(stream)?;
    let h = horizon(model);
    let mut snapshots = vec![model.new_stream_state()];
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for tau in 0..stream.segment_count() {
        let start = tau - h.min(tau);
        let (loss, g, after) = window_pass(model, stream, start, tau, &snapshots, true)?;
        total += loss;
        for (acc, g) in grads.iter_mut().zip(g.expect("trainable pass")) {
            acc.add_assign(&g);
        }
        snapshots.push(after);
    }
    Ok((total, grads))
}

/// States before each segment of a stream (index `τ` holds the state that
/// segment `τ` starts from), computed without gradients.
pub fn stream_snapshots(model: &Model, stream: &SegmentStream) -> Result<Vec<StreamState>> {
    let mut state = model.new_stream_state();
    let mut out = vec![state.clone()];
    for tau in 0..stream.segment_count() {
        let seg = stream.segment(tau).expect("segment inside stream");
        model.forward_segment(&seg, &mut state)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// The objective [`stream_gradients`] differentiates, with the memory that
/// enters each window frozen to `snapshots` (from [`stream_snapshots`]).
/// At the parameters the snapshots were taken with, this equals the stream
/// loss; its derivative there equals the truncated gradient.
pub fn windowed_loss(model: &Model, stream: &SegmentStream, snapshots: &[StreamState]) -> Result<f64> {
    check_targets(stream)?;
    let h = horizon(model);
    let mut total = 0.0;
    for tau in 0..stream.segment_count() {
        let start = tau - h.min(tau);
        total += window_pass(model, stream, start, tau, snapshots, false)?.0;
    }
    Ok(total)
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g.data() {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One optimizer update from the mean loss of `batch`. Returns that loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batch: &[SegmentStream],
    tcfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for stream in batch {
        let (l, g) = stream_gradients(model, stream)?;
        loss += l * inv;
        match &mut grads {
            None => grads = Some(g.into_iter().map(|t| t.scale(inv)).collect()),
            Some(acc) => {
                for (a, t) in acc.iter_mut().zip(g) {
                    a.add_assign(&t.scale(inv));
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss });
    }
    let mut grads = grads.expect("nonempty batch");
    if let Some(c) = tcfg.clip_norm {
        clip_global_norm(&mut grads, c);
    }
    let lr = tcfg.learning_rate;
    for ((param, g), moments) in model
        .params_mut()
        .tensors_mut()
        .iter_mut()
        .zip(&grads)
        .zip(&mut opt.moments)
    {
        match tcfg.optimizer {
            Optimizer::Sgd => {
                for (p, gv) in param.data_mut().iter_mut().zip(g.data()) {
                    *p -= lr * gv;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let delta = adam_update(moments, g.data(), lr, beta1, beta2, eps);
                for (p, dv) in param.data_mut().iter_mut().zip(delta) {
                    *p += dv;
                }
            }
        }
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub tokens_seen: usize,
    pub wall_ms: u64,
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("step,loss,tokens_seen,wall_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{:?},{},{}", r.step, r.loss, r.tokens_seen, r.wall_ms);
    }
    out
}

/// Runs `tcfg.steps` updates. `sample` draws the token ids of one training
/// stream from the run's generator, so runs with equal seeds see equal data.
pub fn train(
    model: &mut Model,
    tcfg: &TrainConfig,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Result<Vec<usize>>,
) -> Result<Vec<LogRow>> {
    tcfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut opt = OptimizerState::new(model);
    let started = Instant::now();
    let mut tokens_seen = 0;
    let mut log = Vec::with_capacity(tcfg.steps);
    for step in 1..=tcfg.steps {
        let batch = (0..tcfg.batch)
            .map(|_| model.stream(sample(&mut rng)?))
            .collect::<Result<Vec<_>>>()?;
        tokens_seen += batch.iter().map(|s| s.tokens().len()).sum::<usize>();
        let loss = train_step(model, &mut opt, &batch, tcfg, step)?;
        let wall_ms = if tcfg.record_wall_clock {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        log.push(LogRow {
            step,
            loss,
            tokens_seen,
            wall_ms,
        });
    }
    Ok(log)
}

/// A sampler drawing uniformly placed windows of `len` tokens from `corpus`.
pub fn corpus_sampler(corpus: &[usize], len: usize) -> Result<impl FnMut(&mut ChaCha8Rng) -> Result<Vec<usize>> + '_> {
    use rand::Rng;
    if len < 2 || corpus.len() < len {
        return Err(Error::invalid(format!(
            "corpus of {} tokens cannot supply windows of {len}",
            corpus.len()
        )));
    }
    Ok(move |rng: &mut ChaCha8Rng| {
        let start = rng.gen_range(0..=corpus.len() - len);
        Ok(corpus[start..start + len].to_vec())
    })
}
