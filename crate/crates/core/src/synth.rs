//! Seeded generator of English-like text for desk-scale experiments.
//!
//! Words are built from syllables and drawn from a Zipf-shaped unigram
//! distribution; each word also prefers a small set of successors, so the
//! stream has spelling, word-bigram and sentence-level regularities for a
//! byte-level model to learn.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br", "ch", "cl",
    "dr", "fr", "gr", "pl", "pr", "sh", "st", "th", "tr",
];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ee", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "ng", "m"];

/// Vocabulary shared by every corpus (fixed lexicon seed); only the text
/// stream depends on the caller's seed.
const LEXICON_SEED: u64 = 0x5eed_1e81;
const LEXICON_SIZE: usize = 1500;
const SUCCESSORS: usize = 6;

struct Lexicon {
    words: Vec<String>,
    unigram: WeightedIndex<f64>,
    successors: Vec<Vec<usize>>,
    successor_weights: WeightedIndex<f64>,
}

impl Lexicon {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut words = Vec::with_capacity(LEXICON_SIZE);
        let mut seen = std::collections::HashSet::new();
        while words.len() < LEXICON_SIZE {
            // frequent words are short
            let max_syl = 1 + (words.len() * 3 / LEXICON_SIZE);
            let syllables = rng.random_range(1..=max_syl);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
                w.push_str(NUCLEI[rng.random_range(0..NUCLEI.len())]);
                w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
            }
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        let zipf: Vec<f64> = (1..=LEXICON_SIZE).map(|r| 1.0 / r as f64).collect();
        let unigram = WeightedIndex::new(&zipf).expect("positive weights");
        let successors = (0..LEXICON_SIZE)
            .map(|_| (0..SUCCESSORS).map(|_| unigram.sample(&mut rng)).collect())
            .collect();
        let successor_weights =
            WeightedIndex::new((1..=SUCCESSORS).map(|r| 1.0 / r as f64)).expect("positive weights");
        Self {
            words,
            unigram,
            successors,
            successor_weights,
        }
    }
}

/// Documents of synthetic prose totalling at least `total_bytes` bytes.
pub fn synthetic_documents(total_bytes: usize, seed: u64) -> Vec<String> {
    let lex = Lexicon::build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut produced = 0usize;
    while produced < total_bytes {
        let mut doc = String::new();
        let sentences = rng.random_range(8..30);
        for s in 0..sentences {
            if s > 0 {
                doc.push(if rng.random_bool(0.15) { '\n' } else { ' ' });
            }
            let len = rng.random_range(4..14);
            let mut prev = lex.unigram.sample(&mut rng);
            for k in 0..len {
                let word = if k == 0 {
                    prev
                } else if rng.random_bool(0.75) {
                    lex.successors[prev][lex.successor_weights.sample(&mut rng)]
                } else {
                    lex.unigram.sample(&mut rng)
                };
                let text = &lex.words[word];
                if k == 0 {
                    let mut chars = text.chars();
                    if let Some(first) = chars.next() {
                        doc.extend(first.to_uppercase());
                        doc.push_str(chars.as_str());
                    }
                } else {
                    doc.push(if rng.random_bool(0.06) { ',' } else { ' ' });
                    if doc.ends_with(',') {
                        doc.push(' ');
                    }
                    doc.push_str(text);
                }
                prev = word;
            }
            doc.push(if rng.random_bool(0.1) { '?' } else { '.' });
        }
        produced += doc.len() + 1;
        docs.push(doc);
    }
    docs
}

/// Byte-tokenized synthetic corpus with document boundaries.
pub fn synthetic_corpus(total_bytes: usize, seed: u64) -> crate::Result<crate::data::Corpus> {
    let docs = synthetic_documents(total_bytes, seed);
    crate::data::Corpus::from_documents(
        docs.into_iter()
            .enumerate()
            .map(|(i, d)| (format!("synthetic:{seed}:{i}"), d)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = synthetic_documents(20_000, 1);
        let b = synthetic_documents(20_000, 1);
        let c = synthetic_documents(20_000, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bytes: usize = a.iter().map(|d| d.len() + 1).sum();
        assert!(bytes >= 20_000);
        assert!(a.iter().all(|d| d.is_ascii()));
    }

    #[test]
    fn corpus_has_boundaries() {
        let c = synthetic_corpus(10_000, 3).unwrap();
        assert!(c.tokens().contains(&crate::data::EOS));
        assert!(c.total_tokens() >= 10_000);
    }
}
