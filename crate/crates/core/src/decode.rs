//! kNN-interpolated decoding: the per-step retrieval distribution, its
//! interpolation with the base model distribution, and greedy/beam sequence
//! generation. The translating model is always the base model without
//! adapters; adapters serve datastore creation only.

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, BOS, EOS};
use crate::datastore::{knn_search, Datastore, IvfIndex, Neighbor};
use crate::error::{Error, Result};
use crate::model::Model;

/// Probability vector over the vocabulary.
pub type VocabDistribution = Vec<f64>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub nprobe: usize,
}

impl KnnConfig {
    /// Pure base-model decoding (no retrieval).
    pub fn disabled() -> Self {
        KnnConfig {
            k: 1,
            temperature: 1.0,
            lambda: 0.0,
            nprobe: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        if self.nprobe < 1 {
            return Err(Error::Config("nprobe must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

/// Retrieval distribution over the vocabulary: p(v) proportional to
/// sum over neighbors with value v of exp(-distance / T), mass aggregated
/// over duplicate values. An empty neighbor list means there is no retrieval
/// evidence and yields `None`; callers must fall back to lambda = 0 for that
/// step.
pub fn knn_distribution(
    neighbors: &[Neighbor],
    temperature: f64,
    vocab_size: usize,
) -> Result<Option<VocabDistribution>> {
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be > 0".into()));
    }
    if neighbors.is_empty() {
        return Ok(None);
    }
    let mut probs = vec![0.0; vocab_size];
    // subtract the min distance before exponentiation; cancels in the
    // normalization and keeps exp in range
    let min_d = neighbors
        .iter()
        .map(|n| n.distance)
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for n in neighbors {
        let w = (-(n.distance - min_d) / temperature).exp();
        probs[n.value as usize] += w;
        total += w;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(Some(probs))
}

/// Elementwise interpolation p = lambda * p_knn + (1 - lambda) * p_nmt.
pub fn interpolate(
    p_knn: &VocabDistribution,
    p_nmt: &VocabDistribution,
    lambda: f64,
) -> VocabDistribution {
    debug_assert_eq!(p_knn.len(), p_nmt.len());
    p_knn
        .iter()
        .zip(p_nmt.iter())
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect()
}

/// Per-step decoding trace: top-5 of p_NMT, the retrieved neighbors, and the
/// top-5 of the interpolated distribution.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub top_nmt: Vec<(TokenId, f64)>,
    pub neighbors: Vec<(f64, TokenId)>,
    pub top_interpolated: Vec<(TokenId, f64)>,
}

fn top_n(probs: &[f64], n: usize) -> Vec<(TokenId, f64)> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    idx.into_iter()
        .take(n)
        .map(|i| (i as TokenId, probs[i]))
        .collect()
}

struct StepContext<'a> {
    model: &'a Model,
    store: Option<(&'a Datastore, &'a IvfIndex)>,
    cfg: &'a KnnConfig,
}

impl<'a> StepContext<'a> {
    /// Final per-step distribution after retrieval and interpolation.
    fn step(
        &self,
        enc: &ndarray::Array2<f64>,
        prefix: &[TokenId],
        trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<VocabDistribution> {
        let (h, p_nmt) = self.model.decode_step(enc, prefix)?;
        let mut neighbors: Vec<Neighbor> = Vec::new();
        let p = if self.cfg.lambda > 0.0 {
            let (ds, index) = self.store.ok_or_else(|| {
                Error::Config("lambda > 0 requires a datastore and index".into())
            })?;
            if ds.dim() != h.len() {
                return Err(Error::Config(format!(
                    "datastore dim {} does not match model dim {}",
                    ds.dim(),
                    h.len()
                )));
            }
            let query: Vec<f32> = h.iter().map(|&v| v as f32).collect();
            neighbors = knn_search(index, ds, &query, self.cfg.k, self.cfg.nprobe)?;
            match knn_distribution(&neighbors, self.cfg.temperature, p_nmt.len())? {
                Some(p_knn) => interpolate(&p_knn, &p_nmt, self.cfg.lambda),
                None => p_nmt.clone(),
            }
        } else {
            p_nmt.clone()
        };
        if let Some(tr) = trace {
            tr.push(StepTrace {
                top_nmt: top_n(&p_nmt, 5),
                neighbors: neighbors.iter().map(|n| (n.distance, n.value)).collect(),
                top_interpolated: top_n(&p, 5),
            });
        }
        Ok(p)
    }
}

fn argmax(probs: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Generation length cap: 2|x| + 8, clamped to the model's max_len.
fn generation_cap(model: &Model, src_len: usize) -> usize {
    (2 * src_len + 8).min(model.cfg.max_len - 1)
}

/// Translates a source sentence. With lambda = 0 this is basic NMT decoding;
/// otherwise each step queries the datastore with the current context
/// representation and interpolates the two distributions.
pub fn translate(
    model: &Model,
    x: &[TokenId],
    store: Option<(&Datastore, &IvfIndex)>,
    cfg: &KnnConfig,
    strategy: DecodeStrategy,
) -> Result<Vec<TokenId>> {
    translate_impl(model, x, store, cfg, strategy, None)
}

/// As `translate`, also returning the per-step trace.
pub fn translate_traced(
    model: &Model,
    x: &[TokenId],
    store: Option<(&Datastore, &IvfIndex)>,
    cfg: &KnnConfig,
    strategy: DecodeStrategy,
) -> Result<(Vec<TokenId>, Vec<StepTrace>)> {
    let mut trace = Vec::new();
    let out = translate_impl(model, x, store, cfg, strategy, Some(&mut trace))?;
    Ok((out, trace))
}

fn translate_impl(
    model: &Model,
    x: &[TokenId],
    store: Option<(&Datastore, &IvfIndex)>,
    cfg: &KnnConfig,
    strategy: DecodeStrategy,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Vec<TokenId>> {
    cfg.validate()?;
    if cfg.lambda > 0.0 && store.is_none() {
        return Err(Error::Config("lambda > 0 requires a datastore".into()));
    }
    let ctx = StepContext { model, store, cfg };
    let enc = model.encode_plain(x, None)?;
    let cap = generation_cap(model, x.len());
    match strategy {
        DecodeStrategy::Greedy => {
            let mut prefix = vec![BOS];
            let mut out = Vec::new();
            for _ in 0..cap {
                let p = ctx.step(&enc, &prefix, trace.as_deref_mut())?;
                let next = argmax(&p);
                if next == EOS {
                    break;
                }
                out.push(next);
                prefix.push(next);
            }
            Ok(out)
        }
        DecodeStrategy::Beam(width) => {
            if width < 1 || width > 4 {
                return Err(Error::Config(format!("beam width {width} out of range")));
            }
            beam_search(&ctx, &enc, cap, width, trace)
        }
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>, // BOS-led prefix
    log_prob: f64,
    finished: bool,
}

impl Beam {
    /// Length-normalized score over generated tokens.
    fn score(&self) -> f64 {
        let len = (self.tokens.len() - 1).max(1);
        self.log_prob / len as f64
    }
}

fn beam_search(
    ctx: &StepContext,
    enc: &ndarray::Array2<f64>,
    cap: usize,
    width: usize,
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<Vec<TokenId>> {
    let mut beams = vec![Beam {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..cap {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut next_beams: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                next_beams.push(beam.clone());
                continue;
            }
            // trace only follows the current best beam
            let want_trace = trace.is_some() && std::ptr::eq(beam, &beams[0]);
            let p = ctx.step(
                enc,
                &beam.tokens,
                if want_trace { trace.as_deref_mut() } else { None },
            )?;
            for (tok, lp) in top_n(&p, width) {
                let mut tokens = beam.tokens.clone();
                let finished = tok == EOS;
                if !finished {
                    tokens.push(tok);
                }
                next_beams.push(Beam {
                    tokens,
                    log_prob: beam.log_prob + lp.max(1e-300).ln(),
                    finished,
                });
            }
        }
        next_beams.sort_by(|a, b| b.score().partial_cmp(&a.score()).unwrap());
        next_beams.truncate(width);
        beams = next_beams;
    }
    let best = beams
        .iter()
        .max_by(|a, b| a.score().partial_cmp(&b.score()).unwrap())
        .unwrap();
    Ok(best.tokens[1..].to_vec())
}
