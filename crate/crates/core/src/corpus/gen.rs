use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A synthetic translation domain: a total source->target lexicon, plus
/// shared ambiguous source tokens whose target sense is domain-specific,
/// plus a local reordering window applied to the target side. An ambiguous
/// token can also carry an alternate sense that fires with probability
/// `alt_rate` per occurrence; that is how the minority sense of a word leaks
/// into a domain's text, the way technical usage leaks into general corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    #[serde(skip, default)]
    pub name: String,
    pub reorder_window: usize,
    pub lexicon: BTreeMap<String, String>,
    #[serde(default)]
    pub ambiguous: BTreeMap<String, String>,
    #[serde(default)]
    pub ambiguous_alt: BTreeMap<String, String>,
    #[serde(default)]
    pub alt_rate: f64,
}

/// A generated pair before tokenization; whitespace-joined for file output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lexicon.is_empty() {
            return Err(Error::Config(format!(
                "domain '{}' has an empty lexicon",
                self.name
            )));
        }
        if self.reorder_window < 1 {
            return Err(Error::Config(format!(
                "domain '{}' has reorder_window < 1",
                self.name
            )));
        }
        if !(0.0..=1.0).contains(&self.alt_rate) {
            return Err(Error::Config(format!(
                "domain '{}' has alt_rate outside [0, 1]",
                self.name
            )));
        }
        for tok in self.ambiguous_alt.keys() {
            if !self.ambiguous.contains_key(tok) {
                return Err(Error::Config(format!(
                    "domain '{}': alternate sense for non-ambiguous token '{tok}'",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Source tokens of the domain, in deterministic order: lexicon keys
    /// then ambiguous keys.
    pub fn source_tokens(&self) -> Vec<&str> {
        self.lexicon
            .keys()
            .chain(self.ambiguous.keys())
            .map(|s| s.as_str())
            .collect()
    }

    /// Maps a source token to its domain target: ambiguous sense first,
    /// lexicon otherwise.
    pub fn translate_token(&self, tok: &str) -> Option<&str> {
        self.ambiguous
            .get(tok)
            .or_else(|| self.lexicon.get(tok))
            .map(|s| s.as_str())
    }

    /// Applies the domain's deterministic local reordering: the sequence is
    /// chunked into blocks of `reorder_window` tokens and each block is
    /// reversed. Window 1 is the identity.
    pub fn reorder<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        let mut out = Vec::with_capacity(seq.len());
        for chunk in seq.chunks(self.reorder_window) {
            out.extend(chunk.iter().rev().cloned());
        }
        out
    }
}

/// Generates `n_sentences` synthetic pairs: source tokens sampled uniformly
/// over the domain's source vocabulary, mapped through the lexicon (ambiguous
/// tokens take the domain sense, or the alternate sense at `alt_rate`), then
/// the target side is locally reordered. A fixed (spec, n, range, seed)
/// always yields the identical corpus.
pub fn generate_domain_corpus(
    spec: &DomainSpec,
    n_sentences: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Vec<RawPair>> {
    spec.validate()?;
    let (min_len, max_len) = len_range;
    if min_len < 1 || max_len < min_len {
        return Err(Error::Config(format!(
            "invalid length range [{min_len}, {max_len}]"
        )));
    }
    let source_vocab = spec.source_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let len = rng.gen_range(min_len..=max_len);
        let source: Vec<String> = (0..len)
            .map(|_| source_vocab[rng.gen_range(0..source_vocab.len())].to_string())
            .collect();
        let mapped: Vec<String> = source
            .iter()
            .map(|t| {
                if let Some(alt) = spec.ambiguous_alt.get(t.as_str()) {
                    // one rng draw per alternate-capable occurrence keeps the
                    // stream deterministic for specs without alternates
                    if rng.gen::<f64>() < spec.alt_rate {
                        return alt.clone();
                    }
                }
                spec.translate_token(t).expect("lexicon is total").to_string()
            })
            .collect();
        let target = spec.reorder(&mapped);
        out.push(RawPair { source, target });
    }
    Ok(out)
}

/// Loads domain specs from a TOML document with one top-level table per
/// domain. Domains come back sorted by name.
pub fn load_domain_specs(path: &Path) -> Result<Vec<DomainSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_domain_specs(&text)
}

pub fn parse_domain_specs(text: &str) -> Result<Vec<DomainSpec>> {
    let table: BTreeMap<String, DomainSpec> =
        toml::from_str(text).map_err(|e| Error::Config(format!("domain spec: {e}")))?;
    let mut specs: Vec<DomainSpec> = table
        .into_iter()
        .map(|(name, mut spec)| {
            spec.name = name;
            spec
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(specs)
}

pub fn save_domain_specs(specs: &[DomainSpec], path: &Path) -> Result<()> {
    let table: BTreeMap<&str, &DomainSpec> =
        specs.iter().map(|s| (s.name.as_str(), s)).collect();
    let text = toml::to_string_pretty(&table)
        .map_err(|e| Error::Config(format!("domain spec serialization: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_spec(window: usize) -> DomainSpec {
        let lexicon: BTreeMap<String, String> = ["a", "b", "c", "d"]
            .iter()
            .map(|t| (t.to_string(), t.to_string()))
            .collect();
        DomainSpec {
            name: "id".into(),
            reorder_window: window,
            lexicon,
            ambiguous: BTreeMap::new(),
            ambiguous_alt: BTreeMap::new(),
            alt_rate: 0.0,
        }
    }

    #[test]
    fn identity_lexicon_window_one_copies_source() {
        let pairs = generate_domain_corpus(&identity_spec(1), 1, (5, 5), 3).unwrap();
        assert_eq!(pairs[0].source, pairs[0].target);
    }

    #[test]
    fn ambiguous_sense_differs_per_domain() {
        let mut d1 = identity_spec(1);
        d1.ambiguous.insert("bank".into(), "riverbank".into());
        let mut d2 = identity_spec(1);
        d2.ambiguous.insert("bank".into(), "institution".into());
        for (src, spec, want) in [("bank", &d1, "riverbank"), ("bank", &d2, "institution")] {
            assert_eq!(spec.translate_token(src), Some(want));
        }
        // every generated occurrence carries the domain sense
        let p1 = generate_domain_corpus(&d1, 50, (3, 8), 7).unwrap();
        for pair in &p1 {
            for (i, s) in pair.source.iter().enumerate() {
                if s == "bank" {
                    let reordered = d1.reorder(&pair.source);
                    let _ = i;
                    assert!(pair.target.contains(&"riverbank".to_string()));
                    assert!(!reordered.is_empty());
                }
            }
        }
    }

    #[test]
    fn alternate_sense_fires_at_roughly_alt_rate() {
        let mut spec = identity_spec(1);
        spec.ambiguous.insert("bank".into(), "riverbank".into());
        spec.ambiguous_alt.insert("bank".into(), "institution".into());
        spec.alt_rate = 0.25;
        let pairs = generate_domain_corpus(&spec, 2000, (4, 8), 11).unwrap();
        let (mut major, mut minor) = (0usize, 0usize);
        for p in &pairs {
            major += p.target.iter().filter(|t| *t == "riverbank").count();
            minor += p.target.iter().filter(|t| *t == "institution").count();
        }
        let rate = minor as f64 / (major + minor) as f64;
        assert!((rate - 0.25).abs() < 0.05, "observed alt rate {rate}");
    }

    #[test]
    fn alt_sense_for_unknown_token_rejected() {
        let mut spec = identity_spec(1);
        spec.ambiguous_alt.insert("bank".into(), "institution".into());
        spec.alt_rate = 0.5;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = identity_spec(2);
        let a = generate_domain_corpus(&spec, 100, (2, 9), 7).unwrap();
        let b = generate_domain_corpus(&spec, 100, (2, 9), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_domain_corpus(&spec, 100, (2, 9), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_lexicon_rejected() {
        let spec = DomainSpec {
            name: "bad".into(),
            reorder_window: 1,
            lexicon: BTreeMap::new(),
            ambiguous: BTreeMap::new(),
            ambiguous_alt: BTreeMap::new(),
            alt_rate: 0.0,
        };
        assert!(generate_domain_corpus(&spec, 1, (1, 2), 0).is_err());
    }

    #[test]
    fn reorder_window_two_swaps_adjacent() {
        let spec = identity_spec(2);
        let out = spec.reorder(&[1, 2, 3, 4, 5]);
        assert_eq!(out, vec![2, 1, 4, 3, 5]);
    }

    #[test]
    fn spec_toml_round_trip() {
        let mut spec = identity_spec(2);
        spec.ambiguous.insert("bank".into(), "riverbank".into());
        let specs = vec![spec.clone()];
        let table: BTreeMap<&str, &DomainSpec> =
            specs.iter().map(|s| (s.name.as_str(), s)).collect();
        let text = toml::to_string_pretty(&table).unwrap();
        let loaded = parse_domain_specs(&text).unwrap();
        assert_eq!(loaded, specs);
    }
}
