//! Byte-level corpus ingestion, deterministic batching, train/val splits.
//!
//! Tokens are raw bytes (vocab 256). Training samples windows with
//! replacement from seeded offsets; validation enumerates a fixed set of
//! non-overlapping windows so per-batch losses pair across model variants.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 256;

/// Token stream loaded from one file.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokens: Vec<u8>,
    pub source_path: String,
}

/// One training batch: `targets[i][j]` is the token following `inputs[i][j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn from_bytes(tokens: Vec<u8>, source_path: &str) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Ingest(format!("{source_path}: empty corpus")));
        }
        Ok(Corpus { tokens, source_path: source_path.to_string() })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Byte-level corpora always carry the full byte vocabulary.
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }
}

/// Read a file's raw bytes as token ids, in order.
pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    Corpus::from_bytes(bytes, &path.display().to_string())
}

/// Split off a contiguous validation tail. `val_fraction` must be in (0, 0.5).
pub fn split(corpus: &Corpus, val_fraction: f64) -> Result<(Corpus, Corpus)> {
    if !(val_fraction > 0.0 && val_fraction < 0.5) {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} outside (0, 0.5)"
        )));
    }
    let val_len = (corpus.len() as f64 * val_fraction).floor() as usize;
    let train_len = corpus.len() - val_len;
    if train_len == 0 || val_len == 0 {
        return Err(Error::Ingest("corpus too small to split".to_string()));
    }
    let train = Corpus {
        tokens: corpus.tokens[..train_len].to_vec(),
        source_path: format!("{}#train", corpus.source_path),
    };
    let val = Corpus {
        tokens: corpus.tokens[train_len..].to_vec(),
        source_path: format!("{}#val", corpus.source_path),
    };
    Ok((train, val))
}

/// Stream of training batches: windows sampled with replacement from
/// seeded offsets. Same (corpus, seed, batch, seq_len) ⇒ identical stream.
pub struct BatchStream<'a> {
    corpus: &'a Corpus,
    batch: usize,
    seq_len: usize,
    rng: ChaCha8Rng,
    max_offset: usize,
}

impl<'a> BatchStream<'a> {
    pub fn new(corpus: &'a Corpus, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        if batch == 0 || seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".to_string()));
        }
        if corpus.len() < seq_len + 1 {
            return Err(Error::Ingest(format!(
                "corpus of {} tokens shorter than one {seq_len}+1 window",
                corpus.len()
            )));
        }
        Ok(BatchStream {
            corpus,
            batch,
            seq_len,
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_offset: corpus.len() - seq_len - 1,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut inputs = Vec::with_capacity(self.batch);
        let mut targets = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let off = self.rng.gen_range(0..=self.max_offset);
            let window = &self.corpus.tokens[off..off + self.seq_len + 1];
            inputs.push(window[..self.seq_len].iter().map(|&b| b as usize).collect());
            targets.push(window[1..].iter().map(|&b| b as usize).collect());
        }
        Batch { inputs, targets }
    }
}

pub fn batches(corpus: &Corpus, batch: usize, seq_len: usize, seed: u64) -> Result<BatchStream<'_>> {
    BatchStream::new(corpus, batch, seq_len, seed)
}

/// Fixed, enumerated validation windows at stride `seq_len`, grouped into
/// batches. Every caller sees the same windows in the same order, which is
/// what pairs per-batch losses across variants.
pub fn fixed_val_batches(
    corpus: &Corpus,
    batch: usize,
    seq_len: usize,
    max_batches: usize,
) -> Result<Vec<Batch>> {
    if corpus.len() < seq_len + 1 {
        return Err(Error::Ingest(format!(
            "validation corpus of {} tokens shorter than one {seq_len}+1 window",
            corpus.len()
        )));
    }
    let mut windows = Vec::new();
    let mut off = 0;
    while off + seq_len + 1 <= corpus.len() {
        windows.push(off);
        off += seq_len;
    }
    let mut out = Vec::new();
    for chunk in windows.chunks(batch) {
        if chunk.len() < batch || out.len() == max_batches {
            break;
        }
        let mut inputs = Vec::with_capacity(batch);
        let mut targets = Vec::with_capacity(batch);
        for &w in chunk {
            let window = &corpus.tokens[w..w + seq_len + 1];
            inputs.push(window[..seq_len].iter().map(|&b| b as usize).collect());
            targets.push(window[1..].iter().map(|&b| b as usize).collect());
        }
        out.push(Batch { inputs, targets });
    }
    if out.is_empty() {
        return Err(Error::Ingest("validation corpus yields no full batch".to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn load_corpus_maps_bytes_to_ids() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(b"abc").unwrap();
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.tokens, vec![97, 98, 99]);
    }

    #[test]
    fn load_corpus_rejects_empty_file() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(load_corpus(f.path()), Err(Error::Ingest(_))));
    }

    #[test]
    fn load_corpus_token_count_equals_byte_count() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        let payload = vec![7u8; 100_000];
        f.write_all(&payload).unwrap();
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 100_000);
    }

    #[test]
    fn split_sizes_are_exact_and_sum() {
        let c = Corpus::from_bytes(vec![0; 1000], "mem").unwrap();
        let (train, val) = split(&c, 0.1).unwrap();
        assert_eq!(train.len(), 900);
        assert_eq!(val.len(), 100);
        assert_eq!(train.len() + val.len(), c.len());
    }

    #[test]
    fn split_rejects_out_of_range_fraction() {
        let c = Corpus::from_bytes(vec![0; 100], "mem").unwrap();
        assert!(matches!(split(&c, 0.6), Err(Error::Config(_))));
        assert!(matches!(split(&c, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn batches_are_deterministic_per_seed() {
        let c = Corpus::from_bytes((0..=255u8).cycle().take(4096).collect(), "mem").unwrap();
        let a = batches(&c, 4, 16, 42).unwrap().next_batch();
        let b = batches(&c, 4, 16, 42).unwrap().next_batch();
        assert_eq!(a, b);
        let other = batches(&c, 4, 16, 43).unwrap().next_batch();
        assert_ne!(a, other);
    }

    #[test]
    fn targets_are_inputs_shifted_by_one() {
        let c = Corpus::from_bytes(b"abcde".to_vec(), "mem").unwrap();
        let batch = batches(&c, 1, 4, 0).unwrap().next_batch();
        assert_eq!(batch.inputs[0], vec![97, 98, 99, 100]);
        assert_eq!(batch.targets[0], vec![98, 99, 100, 101]);
    }

    #[test]
    fn emitted_offsets_stay_in_bounds() {
        let c = Corpus::from_bytes((0..200u8).map(|i| i as u8).collect(), "mem").unwrap();
        let mut stream = batches(&c, 8, 16, 7).unwrap();
        for _ in 0..200 {
            let b = stream.next_batch();
            for (inp, tgt) in b.inputs.iter().zip(&b.targets) {
                // every target must be the corpus token after its input
                for j in 0..inp.len() - 1 {
                    assert_eq!(tgt[j], inp[j + 1]);
                }
                assert!(*tgt.last().unwrap() < VOCAB_SIZE);
            }
        }
    }

    #[test]
    fn batches_reject_short_corpus() {
        let c = Corpus::from_bytes(vec![1, 2, 3], "mem").unwrap();
        assert!(matches!(batches(&c, 1, 8, 0), Err(Error::Ingest(_))));
    }

    #[test]
    fn fixed_val_windows_tile_without_overlap() {
        let c = Corpus::from_bytes((0..255u8).collect(), "mem").unwrap();
        let bs = fixed_val_batches(&c, 2, 16, usize::MAX).unwrap();
        // windows start at 0, 16, 32, ...; inputs of consecutive windows abut
        assert_eq!(bs[0].inputs[0][0], 0);
        assert_eq!(bs[0].inputs[1][0], 16);
        let again = fixed_val_batches(&c, 2, 16, usize::MAX).unwrap();
        assert_eq!(bs.len(), again.len());
        assert_eq!(bs[0], again[0]);
    }
}
