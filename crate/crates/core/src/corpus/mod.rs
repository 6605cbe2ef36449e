//! Synthetic multi-domain data generation, corpus I/O, tokenization and
//! vocabulary management.

mod gen;
mod io;
mod vocab;

pub use gen::{
    generate_domain_corpus, load_domain_specs, parse_domain_specs, save_domain_specs, DomainSpec,
    RawPair,
};
pub use io::{
    load_monolingual, load_parallel, parse_parallel, save_monolingual_raw, save_parallel_raw,
    save_sentences,
};
pub use vocab::{SentencePair, TokenId, Vocabulary, BOS, EOS, PAD, SPECIALS, UNK};
