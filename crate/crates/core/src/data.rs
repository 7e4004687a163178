//! Byte-level tokenization, corpora, calibration sampling and training-phase
//! token allocation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const UNK: u32 = 259;
/// 256 byte values plus BOS/EOS/PAD/UNK.
pub const VOCAB_SIZE: usize = 260;

/// Magic prefix of a pre-tokenized stream: `APTK1` then little-endian u32 ids.
pub const TOKEN_STREAM_MAGIC: &[u8; 5] = b"APTK1";

pub const DEFAULT_CALIBRATION_SEQUENCES: usize = 512;
pub const DEFAULT_CALIBRATION_MAX_LEN: usize = 64;

pub fn tokenize(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]; special tokens carry no bytes and are dropped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub sources: Vec<String>,
    tokens: Vec<u32>,
}

impl Corpus {
    /// Concatenates documents, separated by [`EOS`].
    pub fn from_documents<S: AsRef<[u8]>>(docs: impl IntoIterator<Item = (String, S)>) -> Result<Self> {
        let mut sources = Vec::new();
        let mut tokens = Vec::new();
        for (name, bytes) in docs {
            if !tokens.is_empty() {
                tokens.push(EOS);
            }
            tokens.extend(tokenize(bytes.as_ref()));
            sources.push(name);
        }
        Self::from_tokens(sources, tokens)
    }

    pub fn from_tokens(sources: Vec<String>, tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::CorpusTooSmall("corpus has no tokens".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange { id, vocab: VOCAB_SIZE });
        }
        Ok(Self { sources, tokens })
    }

    /// Loads a text file, a pre-tokenized `APTK1` stream, or every file under
    /// a directory (sorted by path, recursively).
    pub fn load(path: &Path) -> Result<Self> {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        let mut sources = Vec::new();
        let mut tokens = Vec::new();
        for file in files {
            let bytes = fs::read(&file)?;
            let ids = if bytes.starts_with(TOKEN_STREAM_MAGIC) {
                decode_token_stream(&bytes)?
            } else {
                tokenize(&bytes)
            };
            if !tokens.is_empty() {
                tokens.push(EOS);
            }
            tokens.extend(ids);
            sources.push(file.display().to_string());
        }
        Self::from_tokens(sources, tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Splits off the trailing `fraction` of tokens as a second corpus.
    pub fn split_tail(&self, fraction: f64) -> Result<(Corpus, Corpus)> {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        if cut == 0 || cut >= self.tokens.len() {
            return Err(Error::CorpusTooSmall(format!(
                "cannot split {} tokens at fraction {fraction}",
                self.tokens.len()
            )));
        }
        Ok((
            Corpus::from_tokens(self.sources.clone(), self.tokens[..cut].to_vec())?,
            Corpus::from_tokens(self.sources.clone(), self.tokens[cut..].to_vec())?,
        ))
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in fs::read_dir(path)? {
            collect_files(&entry?.path(), out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

pub fn encode_token_stream(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * ids.len());
    out.extend_from_slice(TOKEN_STREAM_MAGIC);
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_token_stream(bytes: &[u8]) -> Result<Vec<u32>> {
    let body = bytes
        .strip_prefix(TOKEN_STREAM_MAGIC.as_slice())
        .ok_or_else(|| Error::CorpusTooSmall("missing APTK1 header".into()))?;
    if body.len() % 4 != 0 {
        return Err(Error::CorpusTooSmall(format!(
            "token stream payload of {} bytes is not a multiple of 4",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Short token sequences used to measure activations and gradients.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub max_len: usize,
    pub sequences: Vec<Vec<u32>>,
}

impl CalibrationSet {
    pub fn new(max_len: usize, sequences: Vec<Vec<u32>>) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::CorpusTooSmall("empty calibration set".into()));
        }
        if let Some(s) = sequences.iter().find(|s| s.len() < 2 || s.len() > max_len) {
            return Err(Error::CorpusTooSmall(format!(
                "calibration sequence of length {} outside [2, {max_len}]",
                s.len()
            )));
        }
        Ok(Self { max_len, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Draws `n` windows of at most `max_len` tokens at seeded offsets. A window
/// is cut at the first document boundary; windows left shorter than two
/// tokens are redrawn.
pub fn sample_calibration(corpus: &Corpus, n: usize, max_len: usize, seed: u64) -> Result<CalibrationSet> {
    let tokens = corpus.tokens();
    if n == 0 || max_len < 2 {
        return Err(Error::CorpusTooSmall(format!("cannot sample {n} sequences of length {max_len}")));
    }
    if tokens.len() < max_len {
        return Err(Error::CorpusTooSmall(format!(
            "{} tokens cannot hold a {max_len}-token window",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last_start = tokens.len() - max_len;
    let mut sequences = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while sequences.len() < n {
        attempts += 1;
        if attempts > 100 * n + 100 {
            return Err(Error::CorpusTooSmall(
                "documents too short to draw calibration windows".into(),
            ));
        }
        let start = rng.random_range(0..=last_start);
        let window = &tokens[start..start + max_len];
        let end = window.iter().position(|&t| t == EOS).unwrap_or(max_len);
        if end >= 2 {
            sequences.push(window[..end].to_vec());
        }
    }
    CalibrationSet::new(max_len, sequences)
}

/// Token counts per training phase, growing linearly with the phase index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseAllocation {
    pub total: usize,
    pub counts: Vec<usize>,
}

impl PhaseAllocation {
    /// Share of phase `i` out of `phases`: `2(i+1) / (T(T+1))`.
    pub fn fraction(i: usize, phases: usize) -> f64 {
        2.0 * (i + 1) as f64 / (phases * (phases + 1)) as f64
    }

    pub fn phases(&self) -> usize {
        self.counts.len()
    }

    /// Cuts `tokens` (of length `total`) into consecutive disjoint slices.
    pub fn partition<'a>(&self, tokens: &'a [u32]) -> Result<Vec<&'a [u32]>> {
        if tokens.len() != self.total {
            return Err(Error::Schedule(format!(
                "allocation covers {} tokens, stream has {}",
                self.total,
                tokens.len()
            )));
        }
        let mut out = Vec::with_capacity(self.counts.len());
        let mut at = 0;
        for &c in &self.counts {
            out.push(&tokens[at..at + c]);
            at += c;
        }
        Ok(out)
    }
}

/// Splits `total_tokens` over `phases` with fractions `2(i+1)/(T(T+1))`.
/// Each count is floored; the remainder goes to the last phase, which keeps
/// the counts non-decreasing and exactly exhaustive.
pub fn allocate_phases(total_tokens: usize, phases: usize) -> Result<PhaseAllocation> {
    if phases == 0 {
        return Err(Error::Schedule("need at least one phase".into()));
    }
    if phases > total_tokens {
        return Err(Error::Schedule(format!("{phases} phases exceed {total_tokens} tokens")));
    }
    let mut counts: Vec<usize> = (0..phases)
        .map(|i| (PhaseAllocation::fraction(i, phases) * total_tokens as f64).floor() as usize)
        .collect();
    let assigned: usize = counts[..phases - 1].iter().sum();
    counts[phases - 1] = total_tokens - assigned;
    Ok(PhaseAllocation {
        total: total_tokens,
        counts,
    })
}

/// Randomly permutes fixed-size blocks of the stream (the tail block stays
/// last), giving a seeded random split when the result is partitioned.
pub fn shuffle_blocks(tokens: &[u32], block: usize, seed: u64) -> Vec<u32> {
    let block = block.max(1);
    let full = tokens.len() / block;
    let mut order: Vec<usize> = (0..full).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(tokens.len());
    for b in order {
        out.extend_from_slice(&tokens[b * block..(b + 1) * block]);
    }
    out.extend_from_slice(&tokens[full * block..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_identity() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"ab"), vec![97, 98]);
        assert_eq!(detokenize(&[97, EOS, 98]), b"ab");
    }

    proptest! {
        #[test]
        fn tokenize_roundtrip(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)), bytes);
        }

        #[test]
        fn token_stream_roundtrip(ids in proptest::collection::vec(0u32..260, 0..256)) {
            prop_assert_eq!(decode_token_stream(&encode_token_stream(&ids)).unwrap(), ids);
        }
    }

    #[test]
    fn documents_are_separated_by_eos() {
        let c = Corpus::from_documents([("a".to_string(), b"xy".as_slice()), ("b".to_string(), b"z".as_slice())]).unwrap();
        assert_eq!(c.tokens(), &[120, 121, EOS, 122]);
        assert!(Corpus::from_tokens(vec![], vec![]).is_err());
    }

    #[test]
    fn load_directory_and_binary_stream() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("b.txt"), b"world").unwrap();
        fs::write(dir.path().join("a.txt"), b"hello").unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/c.bin"), encode_token_stream(&[1, 2, BOS])).unwrap();
        let c = Corpus::load(dir.path()).unwrap();
        let mut want = tokenize(b"hello");
        want.push(EOS);
        want.extend(tokenize(b"world"));
        want.extend([EOS, 1, 2, BOS]);
        assert_eq!(c.tokens(), want.as_slice());
        assert_eq!(c.sources.len(), 3);
    }

    #[test]
    fn calibration_defaults_and_forced_window() {
        assert_eq!((DEFAULT_CALIBRATION_SEQUENCES, DEFAULT_CALIBRATION_MAX_LEN), (512, 64));
        let tokens: Vec<u32> = (0..64).map(|i| i % 250).collect();
        let c = Corpus::from_tokens(vec![], tokens.clone()).unwrap();
        let cal = sample_calibration(&c, 1, 64, 9).unwrap();
        assert_eq!(cal.sequences, vec![tokens]);
        assert!(sample_calibration(&c, 1, 65, 9).is_err());
    }

    #[test]
    fn calibration_is_seeded_and_respects_boundaries() {
        let docs = (0..40).map(|i| (format!("d{i}"), vec![b'a' + (i % 26) as u8; 30]));
        let c = Corpus::from_documents(docs).unwrap();
        let a = sample_calibration(&c, 50, 16, 3).unwrap();
        let b = sample_calibration(&c, 50, 16, 3).unwrap();
        let other = sample_calibration(&c, 50, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        for s in &a.sequences {
            assert!(!s.contains(&EOS));
            assert!(s.len() >= 2 && s.len() <= 16);
        }
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_phases(1000, 1).unwrap().counts, vec![1000]);
        let fr: Vec<f64> = (0..4).map(|i| PhaseAllocation::fraction(i, 4)).collect();
        assert_eq!(fr, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(allocate_phases(1000, 4).unwrap().counts, vec![100, 200, 300, 400]);
        assert!(allocate_phases(3, 4).is_err());
        assert!(allocate_phases(3, 0).is_err());
    }

    proptest! {
        #[test]
        fn allocation_is_exhaustive_and_monotone(total in 1usize..200_000, phases in 1usize..100) {
            prop_assume!(phases <= total);
            let a = allocate_phases(total, phases).unwrap();
            prop_assert_eq!(a.counts.iter().sum::<usize>(), total);
            prop_assert!(a.counts.windows(2).all(|w| w[0] <= w[1]));
            let tokens: Vec<u32> = (0..total as u32).map(|x| x % 256).collect();
            let parts = a.partition(&tokens).unwrap();
            prop_assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), total);
        }
    }

    #[test]
    fn shuffle_blocks_is_a_permutation() {
        let tokens: Vec<u32> = (0..103).collect();
        let s = shuffle_blocks(&tokens, 10, 1);
        assert_ne!(s, tokens);
        let mut sorted = s.clone();
        sorted.sort();
        assert_eq!(sorted, tokens);
        assert_eq!(&s[100..], &[100, 101, 102]);
        assert_eq!(s, shuffle_blocks(&tokens, 10, 1));
    }
}
