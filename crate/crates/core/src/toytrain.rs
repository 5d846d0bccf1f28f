//! Desk-scale trainer that produces before/after checkpoints.
//!
//! The model maps one source token to a distribution over the vocabulary:
//! `softmax(W_out · E[source])`, where `E` is the `[V, d]` embedding and
//! `W_out` a frozen-by-default `[V, d]` output matrix. Training is plain
//! minibatch SGD on cross-entropy with a per-mode row mask, so the tuning
//! regimes (full, embedding only, ticket rows only, everything but the
//! ticket rows) can be compared end to end on a synthetic translation-like
//! task with Zipfian source frequencies.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::certify::PredictionRecord;
use crate::checkpoint::{Checkpoint, TensorRecord};
use crate::error::{Error, Result};
use crate::selection::WinningTicketSet;

pub const EMBEDDING: &str = "embedding";
pub const OUTPUT_WEIGHTS: &str = "output_weights";

/// Consecutive pairs grouped into one pseudo-example of a prediction log.
pub const EXAMPLE_LEN: usize = 20;

const INIT_RANGE: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    vocab_size: usize,
    dim: usize,
    /// `[V, d]`, row-major.
    pub embedding: Vec<f32>,
    /// `[V, d]`, row-major.
    pub output_weights: Vec<f32>,
}

impl ToyModel {
    pub fn new(
        vocab_size: usize,
        dim: usize,
        embedding: Vec<f32>,
        output_weights: Vec<f32>,
    ) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid(
                "vocabulary size and dimension must be positive",
            ));
        }
        for (name, data) in [(EMBEDDING, &embedding), (OUTPUT_WEIGHTS, &output_weights)] {
            if data.len() != vocab_size * dim {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    left: vec![vocab_size, dim],
                    right: vec![data.len()],
                });
            }
        }
        Ok(ToyModel {
            vocab_size,
            dim,
            embedding,
            output_weights,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding_row(&self, token: usize) -> &[f32] {
        &self.embedding[token * self.dim..(token + 1) * self.dim]
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let shape = vec![self.vocab_size, self.dim];
        Checkpoint::new(vec![
            TensorRecord::new(EMBEDDING, shape.clone(), self.embedding.clone())?,
            TensorRecord::new(OUTPUT_WEIGHTS, shape, self.output_weights.clone())?,
        ])
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let e = ckpt.tensor(EMBEDDING)?;
        let w = ckpt.tensor(OUTPUT_WEIGHTS)?;
        if e.shape.len() != 2 {
            return Err(Error::NotAMatrix {
                name: EMBEDDING.into(),
                rank: e.shape.len(),
            });
        }
        if w.shape != e.shape {
            return Err(Error::ShapeMismatch {
                name: OUTPUT_WEIGHTS.into(),
                left: e.shape.clone(),
                right: w.shape.clone(),
            });
        }
        ToyModel::new(e.shape[0], e.shape[1], e.data.clone(), w.data.clone())
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token >= self.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token as u64,
                position: 0,
                vocab_size: self.vocab_size,
            });
        }
        Ok(())
    }

    fn logits_into(&self, embedding_row: &[f64], out: &mut [f64]) {
        for (c, slot) in out.iter_mut().enumerate() {
            let w = &self.output_weights[c * self.dim..(c + 1) * self.dim];
            *slot = w
                .iter()
                .zip(embedding_row)
                .map(|(&a, &b)| f64::from(a) * b)
                .sum();
        }
    }

    fn probabilities(&self, token: usize) -> Vec<f64> {
        let row: Vec<f64> = self
            .embedding_row(token)
            .iter()
            .map(|&v| f64::from(v))
            .collect();
        let mut probs = vec![0.0; self.vocab_size];
        self.logits_into(&row, &mut probs);
        softmax_in_place(&mut probs);
        probs
    }
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest value, lowest index on ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Largest and second-largest entries, with the index of the largest.
fn top2(values: &[f64]) -> (usize, f64, f64) {
    let best = argmax(values);
    let second = values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &v)| v)
        .fold(0.0f64, f64::max);
    (best, values[best], second)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Embedding and output weights.
    Full,
    /// Every embedding row.
    Embed,
    /// Only the ticket rows of the embedding.
    Partial,
    /// Every embedding row except the tickets.
    FrozenComplement,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Embed => "embed",
            TrainMode::Partial => "partial",
            TrainMode::FrozenComplement => "frozen_complement",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainMode::Full),
            "embed" => Ok(TrainMode::Embed),
            "partial" => Ok(TrainMode::Partial),
            "frozen_complement" | "frozen-complement" => Ok(TrainMode::FrozenComplement),
            other => Err(Error::invalid(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub tickets: Option<WinningTicketSet>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn new(mode: TrainMode, seed: u64) -> Self {
        TrainConfig {
            mode,
            tickets: None,
            learning_rate: 0.1,
            epochs: 50,
            seed,
            batch_size: 32,
        }
    }

    pub fn with_tickets(mut self, tickets: WinningTicketSet) -> Self {
        self.tickets = Some(tickets);
        self
    }

    fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        match (self.mode, &self.tickets) {
            (TrainMode::Partial | TrainMode::FrozenComplement, None) => Err(Error::invalid(
                format!("mode {} requires a ticket set", self.mode),
            )),
            (_, Some(t)) => {
                t.validate()?;
                if t.vocab_size != vocab_size {
                    return Err(Error::invalid(format!(
                        "ticket set is for {} rows, model has {vocab_size}",
                        t.vocab_size
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn trainable_rows(&self, vocab_size: usize) -> Vec<bool> {
        match self.mode {
            TrainMode::Full | TrainMode::Embed => vec![true; vocab_size],
            TrainMode::Partial => self.tickets.as_ref().expect("validated").membership(),
            TrainMode::FrozenComplement => self
                .tickets
                .as_ref()
                .expect("validated")
                .membership()
                .into_iter()
                .map(|m| !m)
                .collect(),
        }
    }
}

/// Source/target pairs over a fixed permutation of a content sub-vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub vocab_size: usize,
    /// Content tokens in Zipf rank order (most frequent first).
    pub content_tokens: Vec<usize>,
    /// `target_map[s]` is the target of content token `s`.
    pub target_map: Vec<Option<usize>>,
    pub pairs: Vec<(usize, usize)>,
}

impl SyntheticTask {
    /// A task made of explicit pairs, e.g. read back from disk.
    pub fn from_pairs(vocab_size: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut target_map = vec![None; vocab_size];
        for (position, &(s, t)) in pairs.iter().enumerate() {
            for id in [s, t] {
                if id >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        id: id as u64,
                        position,
                        vocab_size,
                    });
                }
            }
            target_map[s].get_or_insert(t);
        }
        let content_tokens = (0..vocab_size)
            .filter(|&s| target_map[s].is_some())
            .collect();
        Ok(SyntheticTask {
            vocab_size,
            content_tokens,
            target_map,
            pairs,
        })
    }

    pub fn sources(&self) -> impl Iterator<Item = u64> + '_ {
        self.pairs.iter().map(|&(s, _)| s as u64)
    }

    /// `(source, target) -> occurrences`.
    fn pair_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut counts = BTreeMap::new();
        for &p in &self.pairs {
            *counts.entry(p).or_insert(0) += 1;
        }
        counts
    }
}

/// Content vocabulary: a quarter of the vocabulary, at least two tokens.
fn content_size(vocab_size: usize) -> usize {
    (vocab_size / 4).max(2)
}

pub fn generate_task(
    seed: u64,
    vocab_size: usize,
    n_pairs: usize,
    zipf_exponent: f64,
) -> Result<SyntheticTask> {
    if vocab_size < 4 {
        return Err(Error::invalid(format!(
            "vocabulary size {vocab_size} is below the minimum of 4"
        )));
    }
    if n_pairs == 0 {
        return Err(Error::invalid("a task needs at least one pair"));
    }
    if !(zipf_exponent >= 0.0 && zipf_exponent.is_finite()) {
        return Err(Error::invalid(
            "zipf exponent must be finite and non-negative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let content_tokens: Vec<usize> =
        index::sample(&mut rng, vocab_size, content_size(vocab_size)).into_vec();
    let mut images = content_tokens.clone();
    images.shuffle(&mut rng);
    let mut target_map = vec![None; vocab_size];
    for (&s, &t) in content_tokens.iter().zip(&images) {
        target_map[s] = Some(t);
    }

    let weights: Vec<f64> = (1..=content_tokens.len())
        .map(|rank| (rank as f64).powf(-zipf_exponent))
        .collect();
    let sampler = WeightedIndex::new(&weights).expect("weights are positive");
    let pairs = (0..n_pairs)
        .map(|_| {
            let s = content_tokens[sampler.sample(&mut rng)];
            (s, target_map[s].expect("content token"))
        })
        .collect();
    Ok(SyntheticTask {
        vocab_size,
        content_tokens,
        target_map,
        pairs,
    })
}

pub fn init_model(seed: u64, vocab_size: usize, dim: usize) -> Result<ToyModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f32> {
        (0..n)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect()
    };
    let embedding = draw(vocab_size * dim);
    let output_weights = draw(vocab_size * dim);
    ToyModel::new(vocab_size, dim, embedding, output_weights)
}

/// Next-token distribution for `source_token`.
pub fn forward(model: &ToyModel, source_token: usize) -> Result<Vec<f64>> {
    model.check_token(source_token)?;
    Ok(model.probabilities(source_token))
}

fn check_task(model: &ToyModel, task: &SyntheticTask) -> Result<()> {
    if task.vocab_size != model.vocab_size {
        return Err(Error::invalid(format!(
            "task vocabulary {} does not match model vocabulary {}",
            task.vocab_size, model.vocab_size
        )));
    }
    Ok(())
}

/// Mean cross-entropy over all pairs of the task.
pub fn task_loss(model: &ToyModel, task: &SyntheticTask) -> Result<f64> {
    check_task(model, task)?;
    if task.pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut by_source: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for ((s, t), count) in task.pair_counts() {
        let probs = by_source.entry(s).or_insert_with(|| model.probabilities(s));
        total += count as f64 * -probs[t].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / task.pairs.len() as f64)
}

/// Minibatch SGD on cross-entropy.
///
/// Returns the tuned model and its loss curve: the mean task loss before
/// training followed by one entry per epoch. Rows and matrices outside the
/// mode's trainable set are never written, so they stay bit-identical.
pub fn train(
    model: &ToyModel,
    task: &SyntheticTask,
    config: &TrainConfig,
) -> Result<(ToyModel, Vec<f64>)> {
    check_task(model, task)?;
    config.validate(model.vocab_size)?;
    let (v, d) = (model.vocab_size, model.dim);
    let trainable = config.trainable_rows(v);
    let update_output = config.mode == TrainMode::Full;

    let mut tuned = model.clone();
    let mut curve = Vec::with_capacity(config.epochs + 1);
    curve.push(task_loss(&tuned, task)?);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..task.pairs.len()).collect();
    let mut embedding_grad: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut output_grad = vec![0.0f64; if update_output { v * d } else { 0 }];
    let mut row = vec![0.0f64; d];
    let mut grad_logits = vec![0.0f64; v];

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            // Parameters are fixed within a batch, so repeated sources share
            // one forward pass.
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in batch {
                let (s, t) = task.pairs[i];
                groups.entry(s).or_default().push(t);
            }
            embedding_grad.clear();
            output_grad.iter_mut().for_each(|g| *g = 0.0);

            for (&s, targets) in &groups {
                if !trainable[s] && !update_output {
                    continue;
                }
                for (r, &x) in row.iter_mut().zip(tuned.embedding_row(s)) {
                    *r = f64::from(x);
                }
                tuned.logits_into(&row, &mut grad_logits);
                softmax_in_place(&mut grad_logits);
                let count = targets.len() as f64;
                grad_logits.iter_mut().for_each(|g| *g *= count);
                for &t in targets {
                    grad_logits[t] -= 1.0;
                }

                if trainable[s] {
                    let acc = embedding_grad.entry(s).or_insert_with(|| vec![0.0; d]);
                    for (c, &g) in grad_logits.iter().enumerate() {
                        let w = &tuned.output_weights[c * d..(c + 1) * d];
                        for (a, &wv) in acc.iter_mut().zip(w) {
                            *a += g * f64::from(wv);
                        }
                    }
                }
                if update_output {
                    for (c, &g) in grad_logits.iter().enumerate() {
                        let acc = &mut output_grad[c * d..(c + 1) * d];
                        for (a, &e) in acc.iter_mut().zip(&row) {
                            *a += g * e;
                        }
                    }
                }
            }

            let step = config.learning_rate / batch.len() as f64;
            for (&s, grad) in &embedding_grad {
                let target = &mut tuned.embedding[s * d..(s + 1) * d];
                for (p, &g) in target.iter_mut().zip(grad) {
                    *p = (f64::from(*p) - step * g) as f32;
                }
            }
            if update_output {
                for (p, &g) in tuned.output_weights.iter_mut().zip(&output_grad) {
                    *p = (f64::from(*p) - step * g) as f32;
                }
            }
        }
        curve.push(task_loss(&tuned, task)?);
    }
    Ok((tuned, curve))
}

/// Fraction of pairs whose argmax prediction (lowest id on ties) is the target.
pub fn evaluate(model: &ToyModel, task: &SyntheticTask) -> Result<f64> {
    check_task(model, task)?;
    if task.pairs.is_empty() {
        return Ok(0.0);
    }
    let mut predictions = BTreeMap::new();
    let mut hits = 0usize;
    for ((s, t), count) in task.pair_counts() {
        let predicted = *predictions
            .entry(s)
            .or_insert_with(|| argmax(&model.probabilities(s)));
        if predicted == t {
            hits += count;
        }
    }
    Ok(hits as f64 / task.pairs.len() as f64)
}

/// One record per pair, grouped into pseudo-examples of [`EXAMPLE_LEN`] pairs.
pub fn emit_prediction_log(
    tuned: &ToyModel,
    partial: &ToyModel,
    base: &ToyModel,
    task: &SyntheticTask,
) -> Result<Vec<PredictionRecord>> {
    for other in [partial, base] {
        if (other.vocab_size, other.dim) != (tuned.vocab_size, tuned.dim) {
            return Err(Error::ShapeMismatch {
                name: EMBEDDING.into(),
                left: vec![tuned.vocab_size, tuned.dim],
                right: vec![other.vocab_size, other.dim],
            });
        }
    }
    check_task(tuned, task)?;
    struct Summary {
        tuned: (usize, f64, f64),
        partial: usize,
        base: (f64, f64),
    }
    let mut cache: BTreeMap<usize, Summary> = BTreeMap::new();
    let mut records = Vec::with_capacity(task.pairs.len());
    for (i, &(s, t)) in task.pairs.iter().enumerate() {
        let summary = cache.entry(s).or_insert_with(|| {
            let (_, b1, b2) = top2(&base.probabilities(s));
            Summary {
                tuned: top2(&tuned.probabilities(s)),
                partial: argmax(&partial.probabilities(s)),
                base: (b1, b2),
            }
        });
        records.push(PredictionRecord {
            example_id: (i / EXAMPLE_LEN) as u64,
            position: (i % EXAMPLE_LEN) as u64,
            reference_token: t as u64,
            tuned_prediction: summary.tuned.0 as u64,
            p1: summary.tuned.1,
            p2: summary.tuned.2,
            partial_prediction: Some(summary.partial as u64),
            base_p1: Some(summary.base.0),
            base_p2: Some(summary.base.1),
        });
    }
    Ok(records)
}

/// One sampled embedding entry of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckEntry {
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    pub fn relative_error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / (self.analytic.abs() + self.numeric.abs()).max(1e-8)
    }
}

const GRAD_CHECK_ENTRIES: usize = 48;

/// Analytic vs central-difference gradients of the mean task loss with
/// respect to sampled embedding entries. Half the samples come from rows
/// that occur as sources, half from anywhere in the matrix.
pub fn grad_check_entries(
    model: &ToyModel,
    task: &SyntheticTask,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<GradCheckEntry>> {
    check_task(model, task)?;
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::invalid("epsilon must be positive"));
    }
    if task.pairs.is_empty() {
        return Err(Error::invalid("gradient check needs at least one pair"));
    }
    let (v, d) = (model.vocab_size, model.dim);
    let embedding: Vec<f64> = model.embedding.iter().map(|&x| f64::from(x)).collect();
    let counts = task.pair_counts();
    let n = task.pairs.len() as f64;

    let loss_of_row = |s: usize, row: &[f64]| -> f64 {
        let mut logits = vec![0.0; v];
        model.logits_into(row, &mut logits);
        softmax_in_place(&mut logits);
        counts
            .range((s, 0)..(s + 1, 0))
            .map(|(&(_, t), &c)| c as f64 * -logits[t].ln())
            .sum::<f64>()
            / n
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<usize> = task.content_tokens.clone();
    let mut entries = Vec::with_capacity(GRAD_CHECK_ENTRIES);
    for k in 0..GRAD_CHECK_ENTRIES {
        let row_id = if k % 2 == 0 && !sources.is_empty() {
            sources[rng.gen_range(0..sources.len())]
        } else {
            rng.gen_range(0..v)
        };
        let col = rng.gen_range(0..d);
        let row = &embedding[row_id * d..(row_id + 1) * d];

        let mut probs = vec![0.0; v];
        model.logits_into(row, &mut probs);
        softmax_in_place(&mut probs);
        let mut analytic = 0.0;
        for (&(_, t), &c) in counts.range((row_id, 0)..(row_id + 1, 0)) {
            let c = c as f64;
            for (cls, &p) in probs.iter().enumerate() {
                let g = p - if cls == t { 1.0 } else { 0.0 };
                analytic += c * g * f64::from(model.output_weights[cls * d + col]);
            }
        }
        analytic /= n;

        // Only this row's pairs depend on the entry, so the full-task loss
        // difference equals this row's loss difference.
        let mut plus = row.to_vec();
        plus[col] += epsilon;
        let mut minus = row.to_vec();
        minus[col] -= epsilon;
        let numeric = (loss_of_row(row_id, &plus) - loss_of_row(row_id, &minus)) / (2.0 * epsilon);
        entries.push(GradCheckEntry {
            row: row_id,
            col,
            analytic,
            numeric,
        });
    }
    Ok(entries)
}

/// Largest relative error over [`grad_check_entries`].
pub fn grad_check(model: &ToyModel, task: &SyntheticTask, epsilon: f64, seed: u64) -> Result<f64> {
    Ok(grad_check_entries(model, task, epsilon, seed)?
        .iter()
        .map(GradCheckEntry::relative_error)
        .fold(0.0, f64::max))
}
