//! Training regimes: base model cross-entropy training on general-domain
//! parallel data, adapter training by representation matching with the base
//! frozen, the reverse-direction model for back-translation, and full-model
//! fine-tuning.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentencePair, TokenId, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{DropoutCtx, ForwardPass, Model, ModelConfig};
use crate::nn::{inv_sqrt_lr, log_softmax_rows, Adam, AdamConfig, GradStore, Params};

const LABEL_SMOOTHING: f64 = 0.1;
const BASE_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub lr_peak: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    pub grad_clip: f64,
}

impl TrainConfig {
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            batch_tokens: 1000,
            max_steps: 300,
            lr_peak: 5e-3,
            warmup_steps: 50,
            seed,
            grad_clip: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be >= 1".into()));
        }
        if self.lr_peak < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("negative lr or grad clip".into()));
        }
        Ok(())
    }
}

/// One training metrics line: step, loss, lr, tokens/sec.
pub type MetricsSink<'a> = Option<&'a mut dyn std::io::Write>;

fn log_metrics(sink: &mut MetricsSink, step: u64, loss: f64, lr: f64, tok_per_sec: f64) {
    if let Some(w) = sink {
        let _ = writeln!(w, "{step}\t{loss:.6}\t{lr:.6e}\t{tok_per_sec:.0}");
    }
}

/// Deterministic batcher: shuffles sentence order each epoch and cuts
/// batches at `batch_tokens` target tokens (|y| + 1 per sentence).
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next_batch(&mut self, pairs: &[SentencePair], batch_tokens: usize) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0;
        while tokens < batch_tokens {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let i = self.order[self.pos];
            self.pos += 1;
            tokens += pairs[i].target.len() + 1;
            batch.push(i);
        }
        batch
    }
}

fn decoder_io(pair: &SentencePair) -> (Vec<TokenId>, Vec<usize>) {
    let mut y_in = Vec::with_capacity(pair.target.len() + 1);
    y_in.push(BOS);
    y_in.extend_from_slice(&pair.target);
    let mut targets: Vec<usize> = pair.target.iter().map(|&t| t as usize).collect();
    targets.push(EOS as usize);
    (y_in, targets)
}

/// Cross-entropy training of all parameters, from the given initial model.
/// Used for base training (with dropout) and full fine-tuning (without).
fn train_cross_entropy(
    mut model: Model,
    pairs: &[SentencePair],
    cfg: &TrainConfig,
    dropout: bool,
    mut metrics: MetricsSink,
) -> Result<Model> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let mut adam = Adam::new(&model.params, AdamConfig::default());
    let mut batcher = Batcher::new(pairs.len(), cfg.seed);
    for step in 1..=cfg.max_steps {
        let started = std::time::Instant::now();
        let batch = batcher.next_batch(pairs, cfg.batch_tokens);
        let mut grads = GradStore::new(model.params.len());
        let mut loss_sum = 0.0;
        let mut n_tokens = 0usize;
        for &i in &batch {
            let pair = &pairs[i];
            let drop_ctx = if dropout {
                Some(DropoutCtx {
                    p: BASE_DROPOUT,
                    rng: ChaCha8Rng::seed_from_u64(
                        cfg.seed ^ (step << 20) ^ (i as u64), // per (step, sentence) stream
                    ),
                })
            } else {
                None
            };
            let mut fwd = ForwardPass::new(&model, None, drop_ctx);
            let enc = fwd.encode(&pair.source)?;
            let (y_in, targets) = decoder_io(pair);
            let h = fwd.decode(enc, &y_in, false)?;
            let logits = fwd.logits(h);
            let loss = fwd.tape.ce_loss_sum(logits, &targets, LABEL_SMOOTHING);
            loss_sum += fwd.tape.value(loss)[(0, 0)];
            n_tokens += targets.len();
            let mut sinks = [std::mem::replace(&mut grads, GradStore::disabled())];
            fwd.backward(loss, 1.0, &mut sinks);
            let [g] = sinks;
            grads = g;
        }
        let mean_loss = loss_sum / n_tokens as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training loss diverged at step {step}: {mean_loss}"
            )));
        }
        grads.scale(1.0 / n_tokens as f64);
        let lr = inv_sqrt_lr(cfg.lr_peak, cfg.warmup_steps, step);
        adam.step(&mut model.params, &mut grads, lr, cfg.grad_clip);
        let tok_per_sec = n_tokens as f64 / started.elapsed().as_secs_f64().max(1e-9);
        log_metrics(&mut metrics, step, mean_loss, lr, tok_per_sec);
    }
    Ok(model)
}

/// Trains a fresh base model on general-domain parallel data with
/// label-smoothed cross-entropy and dropout.
pub fn train_base(
    pairs: &[SentencePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    metrics: MetricsSink,
) -> Result<Model> {
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    train_cross_entropy(model, pairs, cfg, true, metrics)
}

/// Trains the reverse-direction model (for back-translation) by swapping
/// source and target.
pub fn train_reverse(
    pairs: &[SentencePair],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    metrics: MetricsSink,
) -> Result<Model> {
    let swapped: Vec<SentencePair> = pairs.iter().map(|p| p.swapped()).collect();
    train_base(&swapped, model_cfg, cfg, metrics)
}

/// Fine-tunes every parameter of an existing model on synthetic parallel
/// data (the BT-FT baseline).
pub fn fine_tune_full(
    pairs: &[SentencePair],
    base: &Model,
    cfg: &TrainConfig,
    metrics: MetricsSink,
) -> Result<Model> {
    let model = Model {
        cfg: base.cfg.clone(),
        params: base.params.clone(),
    };
    train_cross_entropy(model, pairs, cfg, false, metrics)
}

/// A representation-matching batch: per pair, the frozen-base translation
/// representations h and the adapter-pass autoencoder representations h'.
pub struct RepMatchBatch {
    pub base_reps: Vec<Array2<f64>>,
    pub adapter_reps: Vec<Array2<f64>>,
}

/// Mean (per target token) squared euclidean distance between the two
/// representation sets.
pub fn rep_match_loss(batch: &RepMatchBatch) -> Result<f64> {
    if batch.base_reps.len() != batch.adapter_reps.len() {
        return Err(Error::Contract("rep-match batch length mismatch".into()));
    }
    let mut total = 0.0;
    let mut n_positions = 0usize;
    for (h, h_prime) in batch.base_reps.iter().zip(batch.adapter_reps.iter()) {
        if h.nrows() != h_prime.nrows() {
            return Err(Error::Contract(
                "rep-match pair with mismatched position counts".into(),
            ));
        }
        total += h
            .iter()
            .zip(h_prime.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        n_positions += h.nrows();
    }
    Ok(total / n_positions.max(1) as f64)
}

/// Trains encoder-side adapters by representation matching: for each pair
/// (x, y), the frozen base produces h from the translation pass while the
/// adapter-equipped model produces h' from the copied pair (y, y); the
/// squared distance is minimized w.r.t. the adapter parameters only.
pub fn train_adapters(
    pairs: &[SentencePair],
    base: &Model,
    cfg: &TrainConfig,
    metrics: MetricsSink,
) -> Result<Params> {
    let mut adapters = base.init_adapters(cfg.seed);
    train_adapters_from(pairs, base, &mut adapters, cfg, metrics)?;
    Ok(adapters)
}

/// Per-token mean Eq. 5 loss over `pairs` together with its analytic
/// gradients w.r.t. the adapter parameters. Base gradients are never
/// materialized.
pub fn rep_match_loss_and_grads(
    pairs: &[SentencePair],
    base: &Model,
    adapters: &Params,
) -> Result<(f64, GradStore)> {
    let mut grads = GradStore::new(adapters.len());
    let mut loss_sum = 0.0;
    let mut n_tokens = 0usize;
    for pair in pairs {
        // frozen translation pass: the matching target
        let h = base.forced_decode_reps(pair, None)?;
        // adapter-equipped autoencoder pass on (y, y)
        let copy = pair.copy_of_target();
        let mut fwd = ForwardPass::new(base, Some(adapters), None);
        let enc = fwd.encode(&copy.source)?;
        let (y_in, _) = decoder_io(&copy);
        let use_dec = base.cfg.adapter_sites == crate::model::AdapterSites::EncoderDecoder;
        let h_prime = fwd.decode(enc, &y_in, use_dec)?;
        n_tokens += h.nrows();
        let loss = fwd.tape.sq_dist_sum(h_prime, h);
        loss_sum += fwd.tape.value(loss)[(0, 0)];
        // sink 0 (base) is disabled: base gradients are never materialized
        let mut sinks = [
            GradStore::disabled(),
            std::mem::replace(&mut grads, GradStore::disabled()),
        ];
        fwd.backward(loss, 1.0, &mut sinks);
        let [_, g] = sinks;
        grads = g;
    }
    let n = n_tokens.max(1) as f64;
    grads.scale(1.0 / n);
    Ok((loss_sum / n, grads))
}

fn train_adapters_from(
    pairs: &[SentencePair],
    base: &Model,
    adapters: &mut Params,
    cfg: &TrainConfig,
    mut metrics: MetricsSink,
) -> Result<()> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    if adapters.is_empty() {
        return Err(Error::Config(
            "model config has adapter_sites = none; nothing to train".into(),
        ));
    }
    let mut adam = Adam::new(adapters, AdamConfig::default());
    let mut batcher = Batcher::new(pairs.len(), cfg.seed);
    for step in 1..=cfg.max_steps {
        let started = std::time::Instant::now();
        let batch = batcher.next_batch(pairs, cfg.batch_tokens);
        let batch_pairs: Vec<SentencePair> = batch.iter().map(|&i| pairs[i].clone()).collect();
        let n_tokens: usize = batch_pairs.iter().map(|p| p.target.len() + 1).sum();
        let (mean_loss, mut grads) = rep_match_loss_and_grads(&batch_pairs, base, adapters)?;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "adapter loss diverged at step {step}: {mean_loss}"
            )));
        }
        let lr = inv_sqrt_lr(cfg.lr_peak, cfg.warmup_steps, step);
        adam.step(adapters, &mut grads, lr, cfg.grad_clip);
        let tok_per_sec = n_tokens as f64 / started.elapsed().as_secs_f64().max(1e-9);
        log_metrics(&mut metrics, step, mean_loss, lr, tok_per_sec);
    }
    Ok(())
}

/// Mean rep-match loss of a corpus under given adapters, for held-out
/// evaluation.
pub fn corpus_rep_match_loss(
    pairs: &[SentencePair],
    base: &Model,
    adapters: Option<&Params>,
) -> Result<f64> {
    let mut batch = RepMatchBatch {
        base_reps: Vec::with_capacity(pairs.len()),
        adapter_reps: Vec::with_capacity(pairs.len()),
    };
    for pair in pairs {
        batch.base_reps.push(base.forced_decode_reps(pair, None)?);
        batch
            .adapter_reps
            .push(base.forced_decode_reps(&pair.copy_of_target(), adapters)?);
    }
    rep_match_loss(&batch)
}

/// Teacher-forced token accuracy, the overfit sanity oracle.
pub fn token_accuracy(model: &Model, pairs: &[SentencePair]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let mut fwd = ForwardPass::new(model, None, None);
        let enc = fwd.encode(&pair.source)?;
        let (y_in, targets) = decoder_io(pair);
        let h = fwd.decode(enc, &y_in, false)?;
        let logits = fwd.logits(h);
        let values = fwd.tape.value(logits).to_owned();
        for (row, &gold) in values.rows().into_iter().zip(targets.iter()) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == gold {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Mean per-token cross-entropy (no smoothing) of a corpus, for dev-loss
/// direction checks.
pub fn corpus_ce_loss(model: &Model, pairs: &[SentencePair]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for pair in pairs {
        let mut fwd = ForwardPass::new(model, None, None);
        let enc = fwd.encode(&pair.source)?;
        let (y_in, targets) = decoder_io(pair);
        let h = fwd.decode(enc, &y_in, false)?;
        let logits = fwd.logits(h);
        let logp = log_softmax_rows(&fwd.tape.value(logits));
        for (r, &t) in targets.iter().enumerate() {
            total -= logp[(r, t)];
        }
        n += targets.len();
    }
    Ok(total / n.max(1) as f64)
}
