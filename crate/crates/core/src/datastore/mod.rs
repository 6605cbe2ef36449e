//! Token-level vector datastore: (context representation, next target token)
//! entries collected by forced decoding, with binary persistence and a native
//! IVF approximate nearest-neighbor index.

mod io;
mod ivf;

pub use io::{load_datastore, load_index, save_datastore, save_index, DATASTORE_MAGIC, INDEX_MAGIC};
pub use ivf::{brute_force_search, build_ivf, knn_search, IvfIndex, Neighbor};

use serde::{Deserialize, Serialize};

use crate::corpus::{SentencePair, TokenId, EOS};
use crate::decode::{translate, DecodeStrategy, KnnConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Params;

/// One key is a dense f32 vector of the model dimension.
pub type RepVector = Vec<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Datastore {
    dim: usize,
    keys: Vec<f32>,
    values: Vec<TokenId>,
}

impl Datastore {
    pub fn new(dim: usize) -> Self {
        Datastore {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize) -> TokenId {
        self.values[i]
    }

    pub fn push(&mut self, key: &[f32], value: TokenId) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                got: key.len(),
            });
        }
        self.keys.extend_from_slice(key);
        self.values.push(value);
        Ok(())
    }

    pub(crate) fn from_parts(dim: usize, keys: Vec<f32>, values: Vec<TokenId>) -> Self {
        debug_assert_eq!(keys.len(), values.len() * dim);
        Datastore { dim, keys, values }
    }
}

/// How the synthetic source side of each datastore pass is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceMode {
    /// Ground-truth parallel data (the retrieval upper bound).
    Parallel,
    /// Target copied to the source side (Copy-kNN; UDA-kNN when the pass
    /// runs with trained adapters).
    Copy,
    /// Source always set to the single EOS token.
    Empty,
    /// Source produced by greedy decoding with a reverse-direction model.
    Backtranslate,
}

impl SourceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parallel" => Ok(SourceMode::Parallel),
            "copy" => Ok(SourceMode::Copy),
            "empty" => Ok(SourceMode::Empty),
            "backtranslate" | "bt" => Ok(SourceMode::Backtranslate),
            other => Err(Error::Config(format!("unknown source mode '{other}'"))),
        }
    }
}

/// Corpus input for datastore construction: parallel pairs, or target-side
/// monolingual sentences for the synthetic-source modes.
pub enum DatastoreCorpus<'a> {
    Parallel(&'a [SentencePair]),
    Monolingual(&'a [Vec<TokenId>]),
}

impl<'a> DatastoreCorpus<'a> {
    fn targets(&self) -> Vec<&'a [TokenId]> {
        match self {
            DatastoreCorpus::Parallel(pairs) => {
                pairs.iter().map(|p| p.target.as_slice()).collect()
            }
            DatastoreCorpus::Monolingual(sents) => {
                sents.iter().map(|s| s.as_slice()).collect()
            }
        }
    }
}

/// Builds a datastore by teacher-forcing the model over the corpus and
/// collecting one (representation, next token) entry per target position,
/// EOS position included. `adapters` are applied to the forced pass when
/// given (the UDA copy-mode configuration); parallel/empty/backtranslate
/// baselines run the unmodified base model.
pub fn build_datastore(
    model: &Model,
    adapters: Option<&Params>,
    corpus: &DatastoreCorpus,
    mode: SourceMode,
    reverse_model: Option<&Model>,
) -> Result<Datastore> {
    if mode == SourceMode::Backtranslate && reverse_model.is_none() {
        return Err(Error::Config(
            "backtranslate mode requires a reverse model".into(),
        ));
    }
    if mode == SourceMode::Parallel && !matches!(corpus, DatastoreCorpus::Parallel(_)) {
        return Err(Error::Config(
            "parallel mode requires a parallel corpus".into(),
        ));
    }
    let dim = model.cfg.d_model;
    let mut ds = Datastore::new(dim);
    let targets = corpus.targets();
    let sources: Vec<Vec<TokenId>> = match (mode, corpus) {
        (SourceMode::Parallel, DatastoreCorpus::Parallel(pairs)) => {
            pairs.iter().map(|p| p.source.clone()).collect()
        }
        (SourceMode::Copy, _) => targets.iter().map(|t| t.to_vec()).collect(),
        (SourceMode::Empty, _) => targets.iter().map(|_| vec![EOS]).collect(),
        (SourceMode::Backtranslate, _) => {
            let reverse = reverse_model.unwrap();
            let cfg = KnnConfig::disabled();
            targets
                .iter()
                .map(|t| translate(reverse, t, None, &cfg, DecodeStrategy::Greedy))
                .collect::<Result<Vec<_>>>()?
        }
        _ => unreachable!(),
    };
    for (src, tgt) in sources.iter().zip(targets.iter()) {
        let pair = SentencePair::new(src.clone(), tgt.to_vec())?;
        let reps = model.forced_decode_reps(&pair, adapters)?;
        for (t, row) in reps.rows().into_iter().enumerate() {
            let key: Vec<f32> = row.iter().map(|&v| v as f32).collect();
            let value = if t < tgt.len() { tgt[t] } else { EOS };
            ds.push(&key, value)?;
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AdapterSites, ModelConfig};

    fn toy_model() -> Model {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            adapter_hidden: 4,
            adapter_sites: AdapterSites::Encoder,
            vocab_size: 12,
            max_len: 32,
        };
        Model::new(cfg, 3).unwrap()
    }

    #[test]
    fn entry_count_is_target_len_plus_one_per_sentence() {
        let model = toy_model();
        let targets = vec![vec![4, 5, 6], vec![7, 8, 9, 10]];
        let ds = build_datastore(
            &model,
            None,
            &DatastoreCorpus::Monolingual(&targets),
            SourceMode::Copy,
            None,
        )
        .unwrap();
        assert_eq!(ds.len(), 9); // (3+1) + (4+1)
        assert_eq!(ds.value(3), EOS);
        assert_eq!(ds.value(8), EOS);
    }

    #[test]
    fn copy_mode_with_identity_adapters_matches_copy_baseline_exactly() {
        let model = toy_model();
        let adapters = model.init_adapters(9);
        let targets = vec![vec![4, 5, 6]];
        let corpus = DatastoreCorpus::Monolingual(&targets);
        let plain = build_datastore(&model, None, &corpus, SourceMode::Copy, None).unwrap();
        let with = build_datastore(&model, Some(&adapters), &corpus, SourceMode::Copy, None).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn backtranslate_without_reverse_model_is_a_config_error() {
        let model = toy_model();
        let targets = vec![vec![4, 5]];
        let corpus = DatastoreCorpus::Monolingual(&targets);
        assert!(matches!(
            build_datastore(&model, None, &corpus, SourceMode::Backtranslate, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_mode_entries_differ_from_copy_mode() {
        let model = toy_model();
        let targets = vec![vec![4, 5, 6]];
        let corpus = DatastoreCorpus::Monolingual(&targets);
        let empty = build_datastore(&model, None, &corpus, SourceMode::Empty, None).unwrap();
        let copy = build_datastore(&model, None, &corpus, SourceMode::Copy, None).unwrap();
        assert_eq!(empty.len(), copy.len());
        assert_ne!(empty, copy);
    }
}
