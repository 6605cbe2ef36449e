use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

use super::gen::RawPair;
use super::vocab::{SentencePair, TokenId, Vocabulary};

/// Loads a tab-separated parallel corpus: one pair per line, source and
/// target fields separated by a single tab. Unknown tokens map to UNK.
pub fn load_parallel(path: &Path, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_parallel(&text, vocab)
}

pub fn parse_parallel(text: &str, vocab: &Vocabulary) -> Result<Vec<SentencePair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (src, tgt) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(t), None) => (s, t),
            _ => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected exactly two tab-separated fields".into(),
                })
            }
        };
        let pair = SentencePair::new(vocab.tokenize(src), vocab.tokenize(tgt)).map_err(|e| {
            Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            }
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Loads a monolingual corpus: one sentence per line.
pub fn load_monolingual(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let toks = vocab.tokenize(line);
            if toks.is_empty() {
                Err(Error::Parse {
                    line: i + 1,
                    msg: "blank sentence".into(),
                })
            } else {
                Ok(toks)
            }
        })
        .collect()
}

pub fn save_parallel_raw(pairs: &[RawPair], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for p in pairs {
        writeln!(f, "{}\t{}", p.source.join(" "), p.target.join(" "))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn save_monolingual_raw(sentences: &[Vec<String>], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for s in sentences {
        writeln!(f, "{}", s.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Writes tokenized hypotheses one sentence per line.
pub fn save_sentences(sentences: &[Vec<TokenId>], vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for s in sentences {
        writeln!(f, "{}", vocab.detokenize(s)).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
