use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token <-> id mapping. The four specials always occupy
/// ids 0..4 in the order PAD, BOS, EOS, UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-tokenized corpora. Tokens with
    /// frequency >= min_count are kept, ordered by descending frequency with
    /// lexicographic tie-break, after the specials.
    pub fn build(corpora: &[&[String]], min_count: usize) -> Result<Self> {
        if min_count < 1 {
            return Err(Error::Config("min_count must be >= 1".into()));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for corpus in corpora {
            for line in corpus.iter() {
                for tok in line.split_whitespace() {
                    *freq.entry(tok).or_insert(0) += 1;
                }
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    /// Builds directly from a token list that already starts with the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        debug_assert!(tokens.len() >= 4);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Token string -> id, UNK for out-of-vocabulary items.
    pub fn lookup(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, line: &str) -> Vec<TokenId> {
        line.split_whitespace().map(|t| self.lookup(t)).collect()
    }

    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let parts: Vec<&str> = ids.iter().map(|&i| self.token(i)).collect();
        parts.join(" ")
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4 || tokens[..4] != SPECIALS.map(|s| s.to_string()) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("{}: vocabulary must start with the specials", path.display()),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// A tokenized parallel sentence pair. Neither side is empty or contains PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl SentencePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Contract("sentence pair with an empty side".into()));
        }
        if source.contains(&PAD) || target.contains(&PAD) {
            return Err(Error::Contract("sentence pair containing PAD".into()));
        }
        Ok(SentencePair { source, target })
    }

    /// Source/target swapped, for reverse-model training.
    pub fn swapped(&self) -> SentencePair {
        SentencePair {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }

    /// The copied pair (y, y) used by the autoencoder task.
    pub fn copy_of_target(&self) -> SentencePair {
        SentencePair {
            source: self.target.clone(),
            target: self.target.clone(),
        }
    }
}
