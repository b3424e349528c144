//! Token-sequence classification datasets: synthetic cluster tokens,
//! IDX image ingestion, the binary shard format and deterministic batching.

mod idx;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, patchify, IdxImages};
pub use synthetic::{generate_synthetic, load_synthetic, LabelRule, SyntheticData, SyntheticSpec};

const SHARD_MAGIC: &[u8; 4] = b"TGRD";
const SHARD_VERSION: u32 = 1;
const SHARD_HEADER: usize = 24;

/// An in-memory labelled set of token sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    tokens: Vec<f64>,
    labels: Vec<usize>,
    tokens_per_sample: usize,
    token_dim: usize,
    num_classes: usize,
}

/// One mini-batch; `tokens` is `[B, N, D_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn new(
        tokens: Vec<f64>,
        labels: Vec<usize>,
        tokens_per_sample: usize,
        token_dim: usize,
        num_classes: usize,
    ) -> Result<Self> {
        if labels.is_empty() || tokens_per_sample == 0 || token_dim == 0 || num_classes == 0 {
            return Err(Error::Config("dataset dimensions must be positive".into()));
        }
        if tokens.len() != labels.len() * tokens_per_sample * token_dim {
            return Err(Error::Config(format!(
                "{} token values for {} samples of {}x{}",
                tokens.len(),
                labels.len(),
                tokens_per_sample,
                token_dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            tokens,
            labels,
            tokens_per_sample,
            token_dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.tokens_per_sample
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Flattened `[N, D_in]` tokens of sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let per = self.tokens_per_sample * self.token_dim;
        &self.tokens[i * per..(i + 1) * per]
    }

    pub fn batch(&self, ids: &[usize]) -> Result<TokenBatch> {
        if ids.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(ids.len() * self.tokens_per_sample * self.token_dim);
        let mut labels = Vec::with_capacity(ids.len());
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "batch",
                    index: i,
                    len: self.len(),
                });
            }
            tokens.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Ok(TokenBatch {
            tokens: Tensor::new(vec![ids.len(), self.tokens_per_sample, self.token_dim], tokens)?,
            labels,
            ids: ids.to_vec(),
        })
    }

    /// The first `n` samples (or all of them, if fewer).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.tokens_per_sample * self.token_dim;
        Dataset {
            tokens: self.tokens[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..*self
        }
    }

    /// The samples at `ids`, in the given order.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let b = self.batch(ids)?;
        Ok(Dataset {
            tokens: b.tokens.into_data(),
            labels: b.labels,
            ..*self
        })
    }

    /// Shard bytes: header, little-endian f32 tokens, little-endian u16 labels.
    pub fn to_shard_bytes(&self) -> Result<Vec<u8>> {
        let as_u32 = |v: usize, what: &str| {
            u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the shard header")))
        };
        if self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Config("too many classes for u16 labels".into()));
        }
        let mut out = Vec::with_capacity(SHARD_HEADER + self.tokens.len() * 4 + self.labels.len() * 2);
        out.extend_from_slice(SHARD_MAGIC);
        for v in [
            SHARD_VERSION,
            as_u32(self.len(), "sample count")?,
            as_u32(self.tokens_per_sample, "tokens per sample")?,
            as_u32(self.token_dim, "token dim")?,
            as_u32(self.num_classes, "class count")?,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &t in &self.tokens {
            out.extend_from_slice(&(t as f32).to_le_bytes());
        }
        for &y in &self.labels {
            out.extend_from_slice(&(y as u16).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_shard_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::format("shard", path, detail);
        if bytes.len() < SHARD_HEADER {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != SHARD_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) as u32 != SHARD_VERSION {
            return Err(bad(format!("unsupported version {}", word(0))));
        }
        let (b, n, d, c) = (word(1), word(2), word(3), word(4));
        let values = b
            .checked_mul(n)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| bad("header dimensions overflow".into()))?;
        let expected = SHARD_HEADER + values * 4 + b * 2;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let body = &bytes[SHARD_HEADER..];
        let tokens = body[..values * 4]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        let labels = body[values * 4..]
            .chunks_exact(2)
            .map(|ch| u16::from_le_bytes(ch.try_into().unwrap()) as usize)
            .collect();
        Dataset::new(tokens, labels, n, d, c).map_err(|e| bad(e.to_string()))
    }

    pub fn write_shard(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_shard_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_shard(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_shard_bytes(&bytes, path)
    }
}

/// Sample ids of every batch in one epoch. The order is a pure function of
/// `(seed, epoch)` when shuffling, file order otherwise; the last batch may
/// be short.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Iterator over the batches of one epoch.
pub struct BatchIter<'a> {
    data: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(data: &'a Dataset, batch_size: usize, seed: u64, epoch: usize, shuffle: bool) -> Self {
        BatchIter {
            data,
            batches: epoch_batches(data.len(), batch_size, seed, epoch, shuffle).into_iter(),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        let ids = self.batches.next()?;
        Some(self.data.batch(&ids).expect("ids come from the dataset's own range"))
    }
}

#[cfg(test)]
mod tests;
