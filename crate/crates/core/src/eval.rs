//! Corpus BLEU, lambda tuning, representation-similarity measurement and
//! datastore representation dumps.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::corpus::{SentencePair, TokenId, Vocabulary};
use crate::datastore::Datastore;
use crate::decode::{translate, DecodeStrategy, KnnConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Params;

const BLEU_SMOOTH_EPS: f64 = 0.1;

fn ngram_counts(sentence: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts: HashMap<&[TokenId], usize> = HashMap::new();
    if sentence.len() >= n {
        for window in sentence.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of clipped n-gram precisions (n = 1..4)
/// with add-epsilon smoothing on zero counts, times the brevity penalty.
/// Returns a score in [0, 100].
pub fn corpus_bleu(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "hypothesis/reference count mismatch: {} vs {}",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += c.min(clip);
                totals[n - 1] += c;
            }
        }
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if totals[n] == 0 {
            // no n-grams of this order anywhere (all hypotheses shorter
            // than n); the order carries no evidence
            continue;
        }
        let m = if matches[n] == 0 {
            BLEU_SMOOTH_EPS
        } else {
            matches[n] as f64
        };
        log_sum += (m / totals[n] as f64).ln();
    }
    let precision = (log_sum / 4.0).exp();
    let bp = if hyp_len >= ref_len || hyp_len == 0 {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok((100.0 * bp * precision).clamp(0.0, 100.0))
}

/// Picks the grid value maximizing dev BLEU; ties and sub-margin gains go to
/// the smaller lambda. `system` maps a lambda to the hypotheses for the dev
/// sources.
pub fn tune_lambda(
    dev: &[SentencePair],
    system: &mut dyn FnMut(f64) -> Result<Vec<Vec<TokenId>>>,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let references: Vec<Vec<TokenId>> = dev.iter().map(|p| p.target.clone()).collect();
    // a larger lambda must beat the incumbent by a clear margin; hair-thin
    // dev gains are noise and the smaller (safer) interpolation wins
    const MARGIN: f64 = 0.1;
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &lambda in grid {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        let hyps = system(lambda)?;
        let bleu = corpus_bleu(&hyps, &references)?;
        if bleu > best.1 + MARGIN {
            best = (lambda, bleu);
        }
    }
    Ok(best)
}

/// How the candidate representations of a similarity measurement are built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimCandidate {
    Copy,
    CopyWithAdapters,
    Backtranslate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityReport {
    pub mean_cosine: f64,
    pub mean_sq_euclidean: f64,
    pub n_positions: usize,
}

/// Measures how close synthetic-pass representations are to the ideals from
/// the ground-truth translation pass, per target position (micro means).
pub fn measure_similarity(
    parallel_dev: &[SentencePair],
    base: &Model,
    candidate: SimCandidate,
    adapters: Option<&Params>,
    reverse_model: Option<&Model>,
) -> Result<SimilarityReport> {
    if parallel_dev.is_empty() {
        return Err(Error::Contract("empty similarity dev set".into()));
    }
    if candidate == SimCandidate::CopyWithAdapters && adapters.is_none() {
        return Err(Error::Config("copy+adapters measurement needs adapters".into()));
    }
    if candidate == SimCandidate::Backtranslate && reverse_model.is_none() {
        return Err(Error::Config("backtranslate measurement needs a reverse model".into()));
    }
    let mut cos_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut n_positions = 0usize;
    for pair in parallel_dev {
        let ideal = base.forced_decode_reps(pair, None)?;
        let cand_pair = match candidate {
            SimCandidate::Copy | SimCandidate::CopyWithAdapters => pair.copy_of_target(),
            SimCandidate::Backtranslate => {
                let synth = translate(
                    reverse_model.unwrap(),
                    &pair.target,
                    None,
                    &KnnConfig::disabled(),
                    DecodeStrategy::Greedy,
                )?;
                // a degenerate empty back-translation falls back to copy
                let src = if synth.is_empty() { pair.target.clone() } else { synth };
                SentencePair::new(src, pair.target.clone())?
            }
        };
        let cand_adapters = match candidate {
            SimCandidate::CopyWithAdapters => adapters,
            _ => None,
        };
        let cand = base.forced_decode_reps(&cand_pair, cand_adapters)?;
        for (ideal_row, cand_row) in ideal.rows().into_iter().zip(cand.rows()) {
            let dot: f64 = ideal_row.iter().zip(cand_row.iter()).map(|(a, b)| a * b).sum();
            let na: f64 = ideal_row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = cand_row.iter().map(|b| b * b).sum::<f64>().sqrt();
            cos_sum += dot / (na * nb).max(1e-12);
            dist_sum += ideal_row
                .iter()
                .zip(cand_row.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            n_positions += 1;
        }
    }
    Ok(SimilarityReport {
        mean_cosine: cos_sum / n_positions as f64,
        mean_sq_euclidean: dist_sum / n_positions as f64,
        n_positions,
    })
}

/// Writes every datastore entry whose value is one of `tokens` as a line
/// "token<TAB>entry_id<TAB>v0<TAB>v1...". Returns the number of requested
/// tokens absent from the datastore (reported, not fatal).
pub fn dump_representations(
    store: &Datastore,
    tokens: &[TokenId],
    vocab: &Vocabulary,
    path: &Path,
) -> Result<usize> {
    if tokens.is_empty() {
        return Err(Error::Contract("no tokens requested for dump".into()));
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut seen = vec![false; tokens.len()];
    for i in 0..store.len() {
        let v = store.value(i);
        if let Some(pos) = tokens.iter().position(|&t| t == v) {
            seen[pos] = true;
            let mut line = format!("{}\t{}", vocab.token(v), i);
            for k in store.key(i) {
                line.push('\t');
                line.push_str(&format!("{k}"));
            }
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(seen.iter().filter(|&&s| !s).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_match_scores_100() {
        let refs = vec![vec![4, 5, 6, 7, 8], vec![9, 10, 11]];
        let bleu = corpus_bleu(&refs, &refs).unwrap();
        assert!((bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn hand_counted_example() {
        // hyp "a b c d e f" vs ref "a b c d e g":
        // precisions 5/6, 4/5, 3/4, 2/3; BP = 1
        let hyp = vec![vec![10, 11, 12, 13, 14, 15]];
        let reference = vec![vec![10, 11, 12, 13, 14, 16]];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        let expect = 100.0 * ((5.0f64 / 6.0) * (4.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0)).powf(0.25);
        assert!((bleu - expect).abs() < 1e-9, "bleu {bleu} expect {expect}");
        assert!((bleu - 75.98).abs() < 0.01);
    }

    #[test]
    fn disjoint_hypothesis_is_smoothed_not_zero() {
        let hyp = vec![vec![4, 5, 6, 7]];
        let reference = vec![vec![8, 9, 10, 11]];
        let bleu = corpus_bleu(&hyp, &reference).unwrap();
        assert!(bleu > 0.0 && bleu < 10.0, "bleu {bleu}");
    }

    #[test]
    fn short_hypothesis_gets_brevity_penalty() {
        let hyp = vec![vec![4, 5]];
        let reference = vec![vec![4, 5, 6, 7]];
        let with_bp = corpus_bleu(&hyp, &reference).unwrap();
        let full = corpus_bleu(&vec![vec![4, 5, 6, 7]], &reference).unwrap();
        assert!(with_bp < full);
    }

    #[test]
    fn bleu_rejects_length_mismatch() {
        assert!(corpus_bleu(&[vec![4]], &[]).is_err());
    }

    #[test]
    fn tune_lambda_singleton_and_ties() {
        let dev = vec![SentencePair::new(vec![4], vec![5, 6]).unwrap()];
        // singleton grid
        let (l, _) = tune_lambda(&dev, &mut |_| Ok(vec![vec![5, 6]]), &[0.0]).unwrap();
        assert_eq!(l, 0.0);
        // identical BLEU everywhere -> smallest lambda wins
        let (l, _) = tune_lambda(&dev, &mut |_| Ok(vec![vec![5, 6]]), &[0.25, 0.5]).unwrap();
        assert_eq!(l, 0.25);
        // a better lambda wins
        let (l, bleu) = tune_lambda(
            &dev,
            &mut |lambda| {
                Ok(if lambda > 0.4 {
                    vec![vec![5, 6]]
                } else {
                    vec![vec![7]]
                })
            },
            &[0.0, 0.5],
        )
        .unwrap();
        assert_eq!(l, 0.5);
        assert!((bleu - 100.0).abs() < 1e-9);
    }
}
