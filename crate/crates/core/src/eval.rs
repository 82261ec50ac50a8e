//! Streamed perplexity, a synthetic long-range recall task, and the
//! preset-comparison and injection-layer sweep drivers built on them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::{MemoryLayers, UniMemConfig};
use crate::model::{token_nlls, Model, ModelConfig};
use crate::train::{corpus_sampler, train, LogRow, TrainConfig};

/// `exp` of the mean negative log-likelihood.
pub fn perplexity(nlls: &[f64]) -> Result<f64> {
    if nlls.is_empty() {
        return Err(Error::invalid("perplexity of an empty sequence"));
    }
    Ok((nlls.iter().sum::<f64>() / nlls.len() as f64).exp())
}

/// Binding-to-query distance classes, in multiples of the segment length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DistanceBucket {
    /// Binding and query in the same segment.
    Local,
    /// `[L, 2L)`
    Near,
    /// `[2L, 4L)`
    Mid,
    /// `[4L, 8L)`
    Far,
}

impl DistanceBucket {
    pub const ALL: [DistanceBucket; 4] = [
        DistanceBucket::Local,
        DistanceBucket::Near,
        DistanceBucket::Mid,
        DistanceBucket::Far,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DistanceBucket::Local => "lt_1L",
            DistanceBucket::Near => "1L_2L",
            DistanceBucket::Mid => "2L_4L",
            DistanceBucket::Far => "4L_8L",
        }
    }

    /// Distance range `[lo, hi)` in tokens.
    pub fn range(self, segment_len: usize) -> (usize, usize) {
        let l = segment_len;
        match self {
            DistanceBucket::Local => (1, l),
            DistanceBucket::Near => (l, 2 * l),
            DistanceBucket::Mid => (2 * l, 4 * l),
            DistanceBucket::Far => (4 * l, 8 * l),
        }
    }

    pub fn of(distance: usize, segment_len: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|b| {
            let (lo, hi) = b.range(segment_len);
            (lo..hi).contains(&distance)
        })
    }
}

impl fmt::Display for DistanceBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Key-value recall streams. A binding token encodes a (key, value) pair;
/// much later a query token names the key and the next token is the
/// matching answer token. Everything else is a counting filler that local
/// attention predicts easily.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallSpec {
    pub segment_len: usize,
    /// Minimum stream length in segments.
    pub stream_segments: usize,
    pub keys: usize,
    pub values: usize,
    /// Bindings per stream, each with a distinct key; one is queried.
    pub pairs: usize,
}

impl RecallSpec {
    pub const FILLER: usize = 32;
    pub const ANSWER_BASE: usize = 32;
    pub const QUERY_BASE: usize = 64;
    pub const BINDING_BASE: usize = 128;

    pub fn new(segment_len: usize) -> Self {
        Self {
            segment_len,
            stream_segments: 4,
            keys: 1,
            values: 8,
            pairs: 1,
        }
    }

    /// Smallest vocabulary holding every token of the task.
    pub fn vocab_needed(&self) -> usize {
        Self::BINDING_BASE + self.keys * self.values
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.segment_len < 3 {
            return Err(Error::config("recall.segment_len", "must be at least 3"));
        }
        if self.keys == 0 || self.keys > Self::BINDING_BASE - Self::QUERY_BASE {
            return Err(Error::config("recall.keys", "must lie in 1..=64"));
        }
        if self.values == 0 || self.values > Self::QUERY_BASE - Self::ANSWER_BASE {
            return Err(Error::config("recall.values", "must lie in 1..=32"));
        }
        if self.pairs == 0 || self.pairs > self.keys {
            return Err(Error::config("recall.pairs", "must lie in 1..=keys"));
        }
        if vocab < self.vocab_needed() {
            return Err(Error::config(
                "model.vocab",
                format!("recall task needs a vocabulary of {}", self.vocab_needed()),
            ));
        }
        Ok(())
    }

    pub fn binding_token(&self, key: usize, value: usize) -> usize {
        Self::BINDING_BASE + key * self.values + value
    }

    pub fn query_token(key: usize) -> usize {
        Self::QUERY_BASE + key
    }

    pub fn answer_token(value: usize) -> usize {
        Self::ANSWER_BASE + value
    }

    /// Stream length used for a bucket: long enough for its largest distance.
    pub fn stream_len(&self, bucket: DistanceBucket) -> usize {
        let (_, hi) = bucket.range(self.segment_len);
        (self.stream_segments * self.segment_len).max(hi)
    }

    /// One stream whose queried binding lies at a distance within `bucket`.
    pub fn sample(&self, bucket: DistanceBucket, rng: &mut impl Rng) -> RecallSample {
        let l = self.segment_len;
        let len = self.stream_len(bucket);
        let (binding_pos, query_pos) = match bucket {
            DistanceBucket::Local => {
                let segment = rng.gen_range(0..len / l);
                // The query stays off the last row so its answer shares the segment.
                let a = rng.gen_range(0..l - 2);
                let b = rng.gen_range(a + 1..l - 1);
                (segment * l + a, segment * l + b)
            }
            _ => {
                let (lo, hi) = bucket.range(l);
                // The answer must fit after the query.
                let distance = rng.gen_range(lo..hi.min(len - 1));
                let query = rng.gen_range(distance..len - 1);
                (query - distance, query)
            }
        };
        let offset = rng.gen_range(0..Self::FILLER);
        let mut tokens: Vec<usize> = (0..len).map(|t| (offset + t) % Self::FILLER).collect();
        let mut keys: Vec<usize> = (0..self.keys).collect();
        keys.shuffle(rng);
        let key = keys[0];
        let value = rng.gen_range(0..self.values);
        tokens[binding_pos] = self.binding_token(key, value);
        tokens[query_pos] = Self::query_token(key);
        tokens[query_pos + 1] = Self::answer_token(value);
        let mut taken = BTreeSet::from([binding_pos, query_pos, query_pos + 1]);
        for &other in &keys[1..self.pairs.min(self.keys)] {
            let free: Vec<usize> = (0..len).filter(|p| !taken.contains(p)).collect();
            let Some(&pos) = free.choose(rng) else { break };
            taken.insert(pos);
            tokens[pos] = self.binding_token(other, rng.gen_range(0..self.values));
        }
        RecallSample {
            tokens,
            binding_pos,
            query_pos,
            answer: Self::answer_token(value),
            bucket,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallSample {
    pub tokens: Vec<usize>,
    pub binding_pos: usize,
    pub query_pos: usize,
    pub answer: usize,
    pub bucket: DistanceBucket,
}

impl RecallSample {
    pub fn distance(&self) -> usize {
        self.query_pos - self.binding_pos
    }
}

/// `samples` streams for each bucket, in bucket order. Same seed, same corpus.
pub fn generate_recall_corpus(
    spec: &RecallSpec,
    seed: u64,
    buckets: &[DistanceBucket],
    samples: usize,
) -> Vec<RecallSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    buckets
        .iter()
        .flat_map(|&b| (0..samples).map(move |_| b))
        .collect::<Vec<_>>()
        .into_iter()
        .map(|b| spec.sample(b, &mut rng))
        .collect()
}

/// Index of the largest entry; ties to the lower index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Token NLLs and recall hits of a model over a set of recall samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecallEval {
    pub nlls: Vec<f64>,
    /// Mean NLL per segment index, pooled over samples.
    pub segment_nll: Vec<f64>,
    /// `(correct, total)` per bucket.
    pub hits: BTreeMap<DistanceBucket, (usize, usize)>,
}

impl RecallEval {
    pub fn accuracy(&self, bucket: DistanceBucket) -> Option<f64> {
        self.hits
            .get(&bucket)
            .filter(|(_, n)| *n > 0)
            .map(|&(c, n)| c as f64 / n as f64)
    }
}

/// Streams each token sequence through the model, accumulating NLLs per
/// token and per segment index; `query` marks rows whose argmax is checked.
fn stream_eval(
    model: &Model,
    streams: &[(Vec<usize>, Option<(usize, usize, DistanceBucket)>)],
) -> Result<RecallEval> {
    let mut out = RecallEval::default();
    let mut seg_sum: Vec<(f64, usize)> = Vec::new();
    let l = model.config().segment_len;
    for (tokens, query) in streams {
        let stream = model.stream(tokens.clone())?;
        let mut state = model.new_stream_state();
        for index in 0..stream.segment_count() {
            let seg = stream.segment(index).expect("segment in range");
            let o = model.forward_segment(&seg, &mut state)?;
            let nlls: Vec<f64> = token_nlls(&o.logits, &seg.targets)?.into_iter().flatten().collect();
            if seg_sum.len() <= index {
                seg_sum.resize(index + 1, (0.0, 0));
            }
            seg_sum[index].0 += nlls.iter().sum::<f64>();
            seg_sum[index].1 += nlls.len();
            out.nlls.extend(nlls);
            if let Some((pos, answer, bucket)) = *query {
                if pos / l == index {
                    let hit = argmax(o.logits.row(pos % l)) == answer;
                    let e = out.hits.entry(bucket).or_insert((0, 0));
                    e.0 += usize::from(hit);
                    e.1 += 1;
                }
            }
        }
    }
    out.segment_nll = seg_sum
        .into_iter()
        .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
        .collect();
    Ok(out)
}

pub fn evaluate_recall(model: &Model, samples: &[RecallSample]) -> Result<RecallEval> {
    let streams: Vec<_> = samples
        .iter()
        .map(|s| (s.tokens.clone(), Some((s.query_pos, s.answer, s.bucket))))
        .collect();
    stream_eval(model, &streams)
}

/// Streamed evaluation over consecutive chunks of `stream_len` tokens.
pub fn evaluate_corpus(model: &Model, tokens: &[usize], stream_len: usize) -> Result<RecallEval> {
    if stream_len < 2 {
        return Err(Error::invalid("evaluation streams need at least two tokens"));
    }
    let streams: Vec<_> = tokens
        .chunks(stream_len)
        .filter(|c| c.len() >= 2)
        .map(|c| (c.to_vec(), None))
        .collect();
    stream_eval(model, &streams)
}

/// What a comparison trains and evaluates on.
#[derive(Clone, Debug, PartialEq)]
pub enum Workload {
    Recall {
        spec: RecallSpec,
        train_buckets: Vec<DistanceBucket>,
        eval_buckets: Vec<DistanceBucket>,
        eval_samples: usize,
    },
    /// Train on random windows of `train`, report perplexity on `eval`.
    Corpus { train: Vec<usize>, eval: Vec<usize> },
}

impl Workload {
    /// Recall workload with the default bucket split: train up to `2L_4L`,
    /// evaluate every bucket.
    pub fn recall(spec: RecallSpec, eval_samples: usize) -> Self {
        Workload::Recall {
            spec,
            train_buckets: vec![DistanceBucket::Local, DistanceBucket::Near, DistanceBucket::Mid],
            eval_buckets: DistanceBucket::ALL.to_vec(),
            eval_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub workload: Workload,
    /// Concurrent training runs; results are assembled in input order.
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub name: String,
    pub perplexity: f64,
    pub recall: BTreeMap<DistanceBucket, f64>,
    pub segment_nll: Vec<f64>,
    pub log: Vec<LogRow>,
}

/// Trains `model` on the workload's training data.
pub fn train_workload(model: &mut Model, workload: &Workload, tcfg: &TrainConfig) -> Result<Vec<LogRow>> {
    match workload {
        Workload::Recall { spec, train_buckets, .. } => {
            spec.validate(model.config().vocab)?;
            if train_buckets.is_empty() {
                return Err(Error::config("recall.train_buckets", "must not be empty"));
            }
            train(model, tcfg, |rng| {
                let b = train_buckets[rng.gen_range(0..train_buckets.len())];
                Ok(spec.sample(b, rng).tokens)
            })
        }
        Workload::Corpus { train: corpus, .. } => {
            let len = tcfg.stream_segments * model.config().segment_len;
            train(model, tcfg, corpus_sampler(corpus, len)?)
        }
    }
}

/// Evaluates `model` on the workload's held-out data. Recall samples are
/// drawn from `seed`, apart from any training draw.
pub fn evaluate_workload(model: &Model, workload: &Workload, stream_segments: usize, seed: u64) -> Result<RecallEval> {
    match workload {
        Workload::Recall {
            spec,
            eval_buckets,
            eval_samples,
            ..
        } => {
            spec.validate(model.config().vocab)?;
            let samples = generate_recall_corpus(spec, seed ^ EVAL_SEED, eval_buckets, *eval_samples);
            evaluate_recall(model, &samples)
        }
        Workload::Corpus { eval, .. } => evaluate_corpus(model, eval, stream_segments * model.config().segment_len),
    }
}

impl RunResult {
    pub fn new(name: &str, eval: RecallEval, log: Vec<LogRow>) -> Result<Self> {
        Ok(RunResult {
            name: name.to_string(),
            perplexity: perplexity(&eval.nlls)?,
            recall: DistanceBucket::ALL
                .into_iter()
                .filter_map(|b| eval.accuracy(b).map(|a| (b, a)))
                .collect(),
            segment_nll: eval.segment_nll,
            log,
        })
    }
}

/// Trains one memory configuration and evaluates it.
pub fn run_one(name: &str, ucfg: &UniMemConfig, exp: &Experiment) -> Result<(Model, RunResult)> {
    let fail = |e: Error| Error::invalid(format!("run `{name}` failed: {e}"));
    let mut model = Model::new(exp.model.clone(), ucfg.clone(), exp.train.seed).map_err(fail)?;
    let log = train_workload(&mut model, &exp.workload, &exp.train).map_err(fail)?;
    let eval = evaluate_workload(&model, &exp.workload, exp.train.stream_segments, exp.train.seed).map_err(fail)?;
    let result = RunResult::new(name, eval, log).map_err(fail)?;
    Ok((model, result))
}

/// Keeps evaluation samples apart from the training draw.
const EVAL_SEED: u64 = 0x5EED_0F_E7A1;

/// Runs `jobs` with at most `threads` in flight; output order follows input.
fn run_all(jobs: &[(String, UniMemConfig)], exp: &Experiment) -> Result<Vec<RunResult>> {
    let threads = exp.threads.max(1);
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads) {
        let batch: Vec<Result<RunResult>> = if chunk.len() == 1 {
            vec![run_one(&chunk[0].0, &chunk[0].1, exp).map(|r| r.1)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(name, cfg)| s.spawn(move || run_one(name, cfg, exp).map(|r| r.1)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("training thread panicked"))
                    .collect()
            })
        };
        for r in batch {
            results.push(r?);
        }
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub runs: Vec<RunResult>,
}

impl EvalReport {
    fn buckets(&self) -> Vec<DistanceBucket> {
        let set: BTreeSet<DistanceBucket> = self.runs.iter().flat_map(|r| r.recall.keys().copied()).collect();
        set.into_iter().collect()
    }

    pub fn run(&self, name: &str) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.name == name)
    }

    /// `preset,ppl,recall_<bucket>...`
    pub fn comparison_csv(&self) -> String {
        let buckets = self.buckets();
        let mut out = String::from("preset,ppl");
        for b in &buckets {
            let _ = write!(out, ",recall_{b}");
        }
        out.push('\n');
        for r in &self.runs {
            let _ = write!(out, "{},{:?}", r.name, r.perplexity);
            for b in &buckets {
                match r.recall.get(b) {
                    Some(a) => {
                        let _ = write!(out, ",{a:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// `preset,segment,mean_nll`
    pub fn nll_series_csv(&self) -> String {
        let mut out = String::from("preset,segment,mean_nll\n");
        for r in &self.runs {
            for (s, v) in r.segment_nll.iter().enumerate() {
                let _ = writeln!(out, "{},{s},{v:?}", r.name);
            }
        }
        out
    }
}

/// Trains and evaluates each named configuration under identical data,
/// seed and budget.
pub fn run_comparison(configs: &[(String, UniMemConfig)], exp: &Experiment) -> Result<EvalReport> {
    if configs.is_empty() {
        return Err(Error::invalid("comparison needs at least one configuration"));
    }
    Ok(EvalReport {
        runs: run_all(configs, exp)?,
    })
}

/// Singletons, then the empty set, then all layers.
pub fn sweep_grid(layers: usize) -> Vec<BTreeSet<usize>> {
    let mut grid: Vec<BTreeSet<usize>> = (0..layers).map(|n| BTreeSet::from([n])).collect();
    grid.push(BTreeSet::new());
    grid.push((0..layers).collect());
    grid
}

pub fn layer_set_label(set: &BTreeSet<usize>) -> String {
    if set.is_empty() {
        return "none".to_string();
    }
    set.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub layer_count: usize,
    pub rows: Vec<(BTreeSet<usize>, RunResult)>,
}

impl SweepReport {
    fn find(&self, set: &BTreeSet<usize>) -> Option<&RunResult> {
        self.rows.iter().find(|(s, _)| s == set).map(|(_, r)| r)
    }

    /// Singleton with the lowest perplexity (first on ties).
    pub fn best_singleton(&self) -> Option<(usize, f64)> {
        self.rows
            .iter()
            .filter(|(s, _)| s.len() == 1)
            .map(|(s, r)| (*s.iter().next().expect("singleton"), r.perplexity))
            .fold(None, |best, cur| match best {
                Some((_, p)) if p <= cur.1 => best,
                _ => Some(cur),
            })
    }

    /// `(ppl(∅) − ppl(best)) / (ppl(∅) − ppl(all))`; `None` without those
    /// rows or when the gap is zero.
    pub fn gap_closed(&self) -> Option<f64> {
        let none = self.find(&BTreeSet::new())?.perplexity;
        let all = self.find(&(0..self.layer_count).collect())?.perplexity;
        let (_, best) = self.best_singleton()?;
        let gap = none - all;
        (gap != 0.0).then(|| (none - best) / gap)
    }

    /// `layers,ppl,recall_<bucket>...`
    pub fn sweep_csv(&self) -> String {
        let buckets: BTreeSet<DistanceBucket> = self.rows.iter().flat_map(|(_, r)| r.recall.keys().copied()).collect();
        let mut out = String::from("layers,ppl");
        for b in &buckets {
            let _ = write!(out, ",recall_{b}");
        }
        out.push('\n');
        for (set, r) in &self.rows {
            let _ = write!(out, "{},{:?}", layer_set_label(set), r.perplexity);
            for b in &buckets {
                match r.recall.get(b) {
                    Some(a) => {
                        let _ = write!(out, ",{a:?}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("best_single_layer,best_ppl,gap_closed\n");
        match self.best_singleton() {
            Some((layer, ppl)) => {
                let gap = self.gap_closed().map_or(String::new(), |g| format!("{g:?}"));
                let _ = writeln!(out, "{layer},{ppl:?},{gap}");
            }
            None => out.push_str(",,\n"),
        }
        out
    }
}

/// Identical runs of `base` that differ only in which layers carry memory.
pub fn injection_sweep(base: &UniMemConfig, choices: &[BTreeSet<usize>], exp: &Experiment) -> Result<SweepReport> {
    if choices.is_empty() {
        return Err(Error::invalid("sweep needs at least one layer set"));
    }
    let jobs: Vec<(String, UniMemConfig)> = choices
        .iter()
        .map(|set| {
            let cfg = UniMemConfig {
                memory_layers: MemoryLayers::Certain(set.clone()),
                ..base.clone()
            };
            cfg.validate(exp.model.layers, exp.model.segment_len)?;
            Ok((layer_set_label(set), cfg))
        })
        .collect::<Result<_>>()?;
    let runs = run_all(&jobs, exp)?;
    Ok(SweepReport {
        layer_count: exp.model.layers,
        rows: choices.iter().cloned().zip(runs).collect(),
    })
}
