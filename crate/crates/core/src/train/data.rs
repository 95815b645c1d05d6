use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Batch;
use crate::error::{Error, Result};
use crate::rng::mix_all;

/// Vocabulary of byte-level tokenization.
pub const BYTE_VOCAB: usize = 256;

const BATCH_SALT: u64 = 0x6261_7463_6800_0001;

/// Reads a file as one token per byte.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Ok(tokenize_bytes(&bytes))
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// `length` tokens drawn uniformly from `[0, vocab)`.
pub fn synth_data(seed: u64, vocab: usize, length: usize) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..length)
        .map(|_| rng.random_range(0..vocab as u32))
        .collect()
}

/// Training and validation streams; validation is the trailing
/// `floor(N/20)` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    train: Vec<u32>,
    val: Vec<u32>,
}

impl Dataset {
    /// Splits `tokens` and checks that both halves hold at least one window
    /// of `seq + 1` tokens.
    pub fn split(tokens: Vec<u32>, seq: usize) -> Result<Self> {
        let n = tokens.len();
        let val_len = n / 20;
        let need = seq + 1;
        if n - val_len < need {
            return Err(Error::Data(format!(
                "{n} tokens leave {} for training, fewer than a window of {need}",
                n - val_len
            )));
        }
        if val_len < need {
            return Err(Error::Data(format!(
                "{n} tokens leave {val_len} for validation, fewer than a window of {need}"
            )));
        }
        let mut train = tokens;
        let val = train.split_off(n - val_len);
        Ok(Self { train, val })
    }

    pub fn train(&self) -> &[u32] {
        &self.train
    }

    pub fn val(&self) -> &[u32] {
        &self.val
    }

    /// Largest token id plus one.
    pub fn vocab_bound(&self) -> usize {
        self.train
            .iter()
            .chain(&self.val)
            .max()
            .map_or(0, |&m| m as usize + 1)
    }

    /// Training batch of step `step`, a pure function of `(seed, step)`.
    pub fn sample_batch(&self, batch: usize, seq: usize, seed: u64, step: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_all(&[seed, step, BATCH_SALT]));
        let last = self.train.len() - seq - 1;
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let start = rng.random_range(0..=last);
            let window = &self.train[start..start + seq + 1];
            inputs.extend(window[..seq].iter().map(|&t| t as usize));
            targets.extend(window[1..].iter().map(|&t| t as usize));
        }
        Batch::new(inputs, targets, batch, seq)
    }

    /// Consecutive non-overlapping validation windows, at most `max_windows`,
    /// grouped `batch` at a time.
    pub fn val_batches(&self, batch: usize, seq: usize, max_windows: usize) -> Result<Vec<Batch>> {
        let windows = ((self.val.len() - 1) / seq).min(max_windows);
        if windows == 0 {
            return Err(Error::Data("no validation windows to evaluate".into()));
        }
        let mut out = Vec::new();
        let mut w = 0;
        while w < windows {
            let count = batch.min(windows - w);
            let mut inputs = Vec::with_capacity(count * seq);
            let mut targets = Vec::with_capacity(count * seq);
            for i in w..w + count {
                let window = &self.val[i * seq..i * seq + seq + 1];
                inputs.extend(window[..seq].iter().map(|&t| t as usize));
                targets.extend(window[1..].iter().map(|&t| t as usize));
            }
            out.push(Batch::new(inputs, targets, count, seq)?);
            w += count;
        }
        Ok(out)
    }
}
