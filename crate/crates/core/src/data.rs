//! Byte-level corpus, tokenization and seeded batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Size of the byte vocabulary.
pub const BYTE_VOCAB: usize = 256;

/// Fraction of the corpus held out for evaluation, taken from the end.
pub const EVAL_FRACTION: f64 = 0.05;

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .enumerate()
        .map(|(i, &id)| {
            u8::try_from(id).map_err(|_| Error::Index {
                what: "byte token",
                index: i,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Raw text with a train/eval split and a SHA-256 content fingerprint.
#[derive(Clone, Debug)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
    fingerprint: String,
}

impl Corpus {
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        Self::with_eval_fraction(bytes, EVAL_FRACTION)
    }

    pub fn with_eval_fraction(bytes: Vec<u8>, eval_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::Config(format!("eval fraction must lie in [0, 1), got {eval_fraction}")));
        }
        if bytes.is_empty() {
            return Err(Error::Data("corpus is empty".into()));
        }
        let eval_len = (bytes.len() as f64 * eval_fraction).ceil() as usize;
        let split = bytes.len() - eval_len;
        let fingerprint = hex::encode(Sha256::digest(&bytes));
        Ok(Corpus {
            bytes,
            split,
            fingerprint,
        })
    }

    /// Reads a file, or every regular file of a directory in name order.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_eval_fraction(path, EVAL_FRACTION)
    }

    pub fn load_with_eval_fraction(path: &Path, eval_fraction: f64) -> Result<Self> {
        let bytes = if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|p| p.is_file());
            files.sort();
            let mut all = Vec::new();
            for f in files {
                all.extend(fs::read(f)?);
            }
            all
        } else {
            fs::read(path)?
        };
        Self::with_eval_fraction(bytes, eval_fraction)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn eval(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    pub fn split_offset(&self) -> usize {
        self.split
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub seq_len: usize,
    pub shuffle: bool,
    pub seed: u64,
}

/// Next-token prediction batch; both buffers are `batch_size * seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub epoch: u64,
}

/// Deterministic batch stream over non-overlapping windows of `seq_len + 1`
/// bytes (stride `seq_len`). Batch `step` is a pure function of the `BatchSpec` and
/// the step index; windows are reshuffled every epoch when enabled.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    tokens: &'a [u8],
    spec: BatchSpec,
    windows: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl<'a> Batcher<'a> {
    pub fn new(tokens: &'a [u8], spec: BatchSpec) -> Result<Self> {
        if spec.batch_size == 0 || spec.seq_len == 0 {
            return Err(Error::Config("batch_size and seq_len must be positive".into()));
        }
        if tokens.len() < spec.seq_len + 1 {
            return Err(Error::Data(format!(
                "corpus of {} tokens is shorter than seq_len + 1 = {}",
                tokens.len(),
                spec.seq_len + 1
            )));
        }
        Ok(Batcher {
            tokens,
            spec,
            windows: (tokens.len() - 1) / spec.seq_len,
            cached: None,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows
    }

    pub fn epoch_of(&self, step: usize) -> u64 {
        ((step * self.spec.batch_size) / self.windows) as u64
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.windows).collect();
            if self.spec.shuffle {
                let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
                rng.set_stream(epoch);
                order.shuffle(&mut rng);
            }
            self.cached = Some((epoch, order));
        }
        &self.cached.as_ref().expect("just filled").1
    }

    pub fn batch(&mut self, step: usize) -> Batch {
        let (b, t) = (self.spec.batch_size, self.spec.seq_len);
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        let first = step * b;
        for j in 0..b {
            let sample = first + j;
            let epoch = (sample / self.windows) as u64;
            let pos = sample % self.windows;
            let w = self.order(epoch)[pos];
            let window = &self.tokens[w * t..w * t + t + 1];
            inputs.extend(window[..t].iter().map(|&x| x as usize));
            targets.extend(window[1..].iter().map(|&x| x as usize));
        }
        Batch {
            inputs,
            targets,
            batch_size: b,
            seq_len: t,
            epoch: (first / self.windows) as u64,
        }
    }
}

/// Non-overlapping evaluation windows in corpus order, up to `max_windows`
/// (0 means all).
pub fn eval_windows(tokens: &[u8], seq_len: usize, max_windows: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if tokens.len() < seq_len + 1 {
        return Err(Error::Data(format!(
            "eval split of {} tokens is shorter than seq_len + 1 = {}",
            tokens.len(),
            seq_len + 1
        )));
    }
    let mut n = (tokens.len() - 1) / seq_len;
    if max_windows > 0 {
        n = n.min(max_windows);
    }
    Ok((0..n)
        .map(|w| {
            let window = &tokens[w * seq_len..w * seq_len + seq_len + 1];
            (tokenize(&window[..seq_len]), tokenize(&window[1..]))
        })
        .collect())
}
