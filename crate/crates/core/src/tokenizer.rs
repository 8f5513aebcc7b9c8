//! Byte-level vocabulary, synthetic corpora and batch assembly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BYTE_TOKENS: usize = 256;
pub const AE: TokenId = 256;
pub const BOS: TokenId = 257;
pub const EOS: TokenId = 258;
pub const PAD: TokenId = 259;
/// Size of the output vocabulary: raw bytes plus the four specials.
pub const OUTPUT_VOCAB: usize = 260;

/// Byte vocabulary with special tokens and `max_memory` memory placeholder ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub max_memory: usize,
}

impl Vocabulary {
    pub fn new(max_memory: usize) -> Self {
        Self { max_memory }
    }

    /// Total id space, `260 + max_memory`.
    pub fn size(&self) -> usize {
        OUTPUT_VOCAB + self.max_memory
    }

    /// Id of memory placeholder `slot` (0-based; slot 0 is MEM_1).
    pub fn memory_id(&self, slot: usize) -> Result<TokenId> {
        if slot >= self.max_memory {
            return Err(Error::Index {
                what: "memory slot",
                index: slot,
                size: self.max_memory,
            });
        }
        Ok(OUTPUT_VOCAB + slot)
    }

    /// Inverse of [`Vocabulary::memory_id`].
    pub fn memory_slot(&self, id: TokenId) -> Option<usize> {
        (OUTPUT_VOCAB..self.size())
            .contains(&id)
            .then(|| id - OUTPUT_VOCAB)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id >= BYTE_TOKENS
    }
}

/// Content tokens `x_1..x_L`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_specials(&self) -> bool {
        self.ids.iter().any(|&id| id >= BYTE_TOKENS)
    }

    pub fn prefix(&self, k: usize) -> TokenSequence {
        TokenSequence::new(self.ids[..k].to_vec())
    }
}

pub fn encode(text: &[u8]) -> TokenSequence {
    TokenSequence::new(text.iter().map(|&b| b as TokenId).collect())
}

/// Inverse of [`encode`]. Special ids are rendered as `<AE>`, `<BOS>` etc.
pub fn decode(seq: &[TokenId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(seq.len());
    for &id in seq {
        match id {
            b if b < BYTE_TOKENS => out.push(b as u8),
            AE => out.extend_from_slice(b"<AE>"),
            BOS => out.extend_from_slice(b"<BOS>"),
            EOS => out.extend_from_slice(b"<EOS>"),
            PAD => out.extend_from_slice(b"<PAD>"),
            m => out.extend_from_slice(format!("<MEM_{}>", m - OUTPUT_VOCAB + 1).as_bytes()),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Structured records with random fields.
    RepeatedTemplate,
    /// First-order chain over a small alphabet with a seeded transition table.
    RandomMarkov { states: usize },
    /// Non-overlapping windows cut from a file.
    FileIngest { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorpusSpec {
    #[serde(flatten)]
    pub kind: CorpusKind,
    pub seed: u64,
    pub seq_len: usize,
    pub count: usize,
}

impl CorpusSpec {
    pub fn template(seed: u64, seq_len: usize, count: usize) -> Self {
        Self {
            kind: CorpusKind::RepeatedTemplate,
            seed,
            seq_len,
            count,
        }
    }
}

const MARKOV_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Transition table of the Markov generator; `table[i][j]` is `P(j | i)`
/// over the first `states` symbols of the alphabet.
pub fn markov_table(seed: u64, states: usize) -> Result<Vec<Vec<f64>>> {
    if states < 2 || states > MARKOV_ALPHABET.len() {
        return Err(Error::config(
            "corpus.states",
            format!("must be in 2..={}", MARKOV_ALPHABET.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
    Ok((0..states)
        .map(|_| {
            // sparse-ish rows so the chain has visible structure
            let w: Vec<f64> = (0..states)
                .map(|_| {
                    let u: f64 = rng.gen();
                    u * u * u
                })
                .collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

pub fn markov_symbol(state: usize) -> u8 {
    MARKOV_ALPHABET[state]
}

/// Deterministic in `spec`: same spec, same corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<TokenSequence>> {
    if spec.seq_len == 0 {
        return Err(Error::config("corpus.seq_len", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        CorpusKind::RepeatedTemplate => Ok((0..spec.count)
            .map(|_| template_sequence(&mut rng, spec.seq_len))
            .collect()),
        CorpusKind::RandomMarkov { states } => {
            let table = markov_table(spec.seed, *states)?;
            let dists = table
                .iter()
                .map(|row| WeightedIndex::new(row).expect("positive weights"))
                .collect::<Vec<_>>();
            Ok((0..spec.count)
                .map(|_| {
                    let mut state = rng.gen_range(0..*states);
                    let mut ids = Vec::with_capacity(spec.seq_len);
                    for _ in 0..spec.seq_len {
                        ids.push(markov_symbol(state) as TokenId);
                        state = dists[state].sample(&mut rng);
                    }
                    TokenSequence::new(ids)
                })
                .collect())
        }
        CorpusKind::FileIngest { path } => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let windows: Vec<TokenSequence> = bytes
                .chunks_exact(spec.seq_len)
                .take(spec.count)
                .map(encode)
                .collect();
            if windows.is_empty() {
                return Err(Error::config(
                    "corpus.path",
                    format!("{} is shorter than seq_len {}", path.display(), spec.seq_len),
                ));
            }
            Ok(windows)
        }
    }
}

fn random_span(rng: &mut ChaCha8Rng, alphabet: &[u8], len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
        .collect()
}

const LOWER: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
const DIGITS: &[u8] = b"0123456789";
const HEX: &[u8] = b"0123456789abcdef";

/// Records drawn from a handful of fixed templates, each with random spans,
/// concatenated and cropped to exactly `len` bytes.
fn template_sequence(rng: &mut ChaCha8Rng, len: usize) -> TokenSequence {
    let mut text = Vec::with_capacity(len + 32);
    while text.len() < len {
        match rng.gen_range(0..4) {
            0 => {
                text.extend_from_slice(b"user:");
                text.extend(random_span(rng, LOWER, 5));
                text.extend_from_slice(b" id:");
                text.extend(random_span(rng, DIGITS, 4));
                text.push(b'\n');
            }
            1 => {
                text.extend_from_slice(b"city:");
                text.extend(random_span(rng, LOWER, 6));
                text.extend_from_slice(b" zip:");
                text.extend(random_span(rng, DIGITS, 5));
                text.push(b'\n');
            }
            2 => {
                text.extend_from_slice(b"key=");
                text.extend(random_span(rng, HEX, 8));
                text.push(b';');
            }
            _ => {
                text.extend_from_slice(b"the ");
                text.extend(random_span(rng, LOWER, 4));
                text.extend_from_slice(b" saw ");
                text.extend(random_span(rng, LOWER, 4));
                text.extend_from_slice(b".\n");
            }
        }
    }
    text.truncate(len);
    encode(&text)
}

/// Stacked ids of uniform length, shape `[batch, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub sequences: Vec<TokenSequence>,
    pub seq_len: usize,
}

impl TrainingBatch {
    pub fn shape(&self) -> [usize; 2] {
        [self.sequences.len(), self.seq_len]
    }
}

/// Takes the first `batch_size` sequences, in order.
pub fn make_batch(sequences: &[TokenSequence], batch_size: usize) -> Result<TrainingBatch> {
    if batch_size == 0 || batch_size > sequences.len() {
        return Err(Error::Contract(format!(
            "batch size {batch_size} with {} sequences available",
            sequences.len()
        )));
    }
    let seq_len = sequences[0].len();
    if let Some(bad) = sequences[..batch_size].iter().find(|s| s.len() != seq_len) {
        return Err(Error::Contract(format!(
            "ragged batch: lengths {seq_len} and {}",
            bad.len()
        )));
    }
    Ok(TrainingBatch {
        sequences: sequences[..batch_size].to_vec(),
        seq_len,
    })
}

/// One sequence per line, decimal ids separated by single spaces.
pub fn write_corpus_cache(path: &Path, corpus: &[TokenSequence]) -> Result<()> {
    let mut out = Vec::new();
    for seq in corpus {
        let line = seq
            .ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_corpus_cache(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            line.split(' ')
                .filter(|s| !s.is_empty())
                .map(|tok| {
                    tok.parse::<TokenId>().map_err(|e| Error::Format {
                        path: path.to_path_buf(),
                        reason: format!("line {}: {e}", n + 1),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(TokenSequence::new)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        assert_eq!(encode(b"ab").ids, vec![97, 98]);
        assert!(encode(b"").is_empty());
    }

    #[test]
    fn specials_are_disjoint() {
        let v = Vocabulary::new(8);
        let mut ids = vec![AE, BOS, EOS, PAD];
        ids.extend((0..8).map(|s| v.memory_id(s).unwrap()));
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        assert!(ids.iter().all(|&id| id >= BYTE_TOKENS && id < v.size()));
        assert_eq!(v.size(), 268);
        assert_eq!(v.memory_slot(v.memory_id(3).unwrap()), Some(3));
        assert!(v.memory_id(8).is_err());
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in prop::collection::vec(any::<u8>(), 0..200)) {
            prop_assert_eq!(decode(&encode(&s).ids), s);
        }
    }

    #[test]
    fn corpus_is_deterministic_and_shaped() {
        let spec = CorpusSpec::template(7, 128, 200);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|s| s.len() == 128 && !s.has_specials()));
        let other = generate_corpus(&CorpusSpec::template(8, 128, 200)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn markov_bigrams_match_transition_table() {
        let states = 6;
        let spec = CorpusSpec {
            kind: CorpusKind::RandomMarkov { states },
            seed: 11,
            seq_len: 1000,
            count: 100,
        };
        let table = markov_table(11, states).unwrap();
        let corpus = generate_corpus(&spec).unwrap();
        let index = |id: TokenId| MARKOV_ALPHABET.iter().position(|&c| c as TokenId == id).unwrap();
        let mut counts = vec![vec![0f64; states]; states];
        for seq in &corpus {
            for w in seq.ids.windows(2) {
                counts[index(w[0])][index(w[1])] += 1.0;
            }
        }
        // Pearson χ² per source state over cells with expected count ≥ 5.
        for (i, row) in counts.iter().enumerate() {
            let n: f64 = row.iter().sum();
            let mut chi2 = 0.0;
            let mut dof = 0usize;
            for j in 0..states {
                let e = n * table[i][j];
                if e >= 5.0 {
                    chi2 += (row[j] - e).powi(2) / e;
                    dof += 1;
                }
            }
            let dof = dof.saturating_sub(1).max(1) as f64;
            // Wilson–Hilferty 99.9% quantile bound.
            let z = 3.09;
            let bound = dof * (1.0 - 2.0 / (9.0 * dof) + z * (2.0 / (9.0 * dof)).sqrt()).powi(3);
            assert!(chi2 < bound, "state {i}: chi2 {chi2} bound {bound}");
        }
    }

    #[test]
    fn file_ingest_crops_windows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("in.txt");
        fs::write(&path, b"abcdefghij").unwrap();
        let spec = CorpusSpec {
            kind: CorpusKind::FileIngest { path: path.clone() },
            seed: 0,
            seq_len: 4,
            count: 10,
        };
        let c = generate_corpus(&spec).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[1].ids, encode(b"efgh").ids);
        let short = CorpusSpec { seq_len: 11, ..spec };
        assert!(generate_corpus(&short).is_err());
    }

    #[test]
    fn batch_contract() {
        let seqs: Vec<_> = (0..4).map(|i| TokenSequence::new(vec![i; 8])).collect();
        let b = make_batch(&seqs, 4).unwrap();
        assert_eq!(b.shape(), [4, 8]);
        assert_eq!(b.sequences, seqs);
        assert!(make_batch(&seqs, 5).is_err());
        let mut ragged = seqs.clone();
        ragged[2] = TokenSequence::new(vec![1; 7]);
        assert!(make_batch(&ragged, 4).is_err());
    }

    #[test]
    fn corpus_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let corpus = generate_corpus(&CorpusSpec::template(3, 16, 5)).unwrap();
        write_corpus_cache(&path, &corpus).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().next().unwrap().split(' ').all(|t| t.parse::<u32>().is_ok()));
        assert_eq!(read_corpus_cache(&path).unwrap(), corpus);
    }
}
