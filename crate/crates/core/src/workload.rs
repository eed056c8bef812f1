//! Document-length distributions, batch sampling and chunk packing.

use std::io::{Read, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Chunk, DeviceId, DocId, Document, Segment, Tokens};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthKind {
    /// Log-normal pretraining mix with short documents randomly filtered out.
    PretrainUpsampled,
    /// Pretraining mix with a heavier long-document tail.
    ProlongLike,
    Uniform,
    Fixed,
    CustomHistogram,
}

fn default_log_mean() -> f64 {
    (2048f64).ln()
}

fn default_log_std() -> f64 {
    1.6
}

fn default_drop_prob() -> f64 {
    0.9
}

fn default_long_weight() -> f64 {
    0.35
}

fn default_min_len() -> Tokens {
    1
}

/// Document-length distribution. Samples always lie in `[1, max_doc_len]`
/// and a given seed always reproduces the same stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub kind: LengthKind,
    pub max_doc_len: Tokens,
    /// Documents shorter than this are candidates for the upsampling filter
    /// (pretrain) or the lower end of the long tail (prolong).
    #[serde(default)]
    pub min_len_threshold: Tokens,
    #[serde(default)]
    pub seed: u64,
    /// Log-space mean of the base log-normal.
    #[serde(default = "default_log_mean")]
    pub log_mean: f64,
    #[serde(default = "default_log_std")]
    pub log_std: f64,
    /// Probability that a document below the threshold is filtered out.
    #[serde(default = "default_drop_prob")]
    pub drop_prob: f64,
    /// Mixture weight of the long tail for `prolong_like`.
    #[serde(default = "default_long_weight")]
    pub long_weight: f64,
    /// Smallest length for `uniform`.
    #[serde(default = "default_min_len")]
    pub min_len: Tokens,
    /// Length for `fixed`; defaults to `max_doc_len`.
    #[serde(default)]
    pub fixed_len: Option<Tokens>,
    /// `(length, probability)` bins for `custom_histogram`.
    #[serde(default)]
    pub histogram: Vec<(Tokens, f64)>,
}

impl LengthDistribution {
    fn base(kind: LengthKind, max_doc_len: Tokens, seed: u64) -> Self {
        Self {
            kind,
            max_doc_len,
            min_len_threshold: 0,
            seed,
            log_mean: default_log_mean(),
            log_std: default_log_std(),
            drop_prob: default_drop_prob(),
            long_weight: default_long_weight(),
            min_len: 1,
            fixed_len: None,
            histogram: Vec::new(),
        }
    }

    pub fn fixed(length: Tokens, seed: u64) -> Self {
        Self {
            fixed_len: Some(length),
            ..Self::base(LengthKind::Fixed, length, seed)
        }
    }

    pub fn uniform(min_len: Tokens, max_doc_len: Tokens, seed: u64) -> Self {
        Self {
            min_len,
            ..Self::base(LengthKind::Uniform, max_doc_len, seed)
        }
    }

    pub fn pretrain_upsampled(max_doc_len: Tokens, threshold: Tokens, seed: u64) -> Self {
        Self {
            min_len_threshold: threshold,
            ..Self::base(LengthKind::PretrainUpsampled, max_doc_len, seed)
        }
    }

    pub fn prolong_like(max_doc_len: Tokens, threshold: Tokens, seed: u64) -> Self {
        Self {
            min_len_threshold: threshold,
            ..Self::base(LengthKind::ProlongLike, max_doc_len, seed)
        }
    }

    pub fn custom(histogram: Vec<(Tokens, f64)>, seed: u64) -> Self {
        let max = histogram.iter().map(|b| b.0).max().unwrap_or(1);
        Self {
            histogram,
            ..Self::base(LengthKind::CustomHistogram, max, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_doc_len == 0 {
            return Err(Error::config("max_doc_len must be >= 1"));
        }
        if !(self.log_std >= 0.0) || !self.log_mean.is_finite() {
            return Err(Error::config("log-normal parameters must be finite with log_std >= 0"));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::config("drop_prob must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.long_weight) {
            return Err(Error::config("long_weight must be in [0, 1]"));
        }
        match self.kind {
            LengthKind::Uniform if self.min_len == 0 || self.min_len > self.max_doc_len => {
                Err(Error::config("uniform needs 1 <= min_len <= max_doc_len"))
            }
            LengthKind::Fixed if matches!(self.fixed_len, Some(0)) => Err(Error::config("fixed_len must be >= 1")),
            LengthKind::CustomHistogram => {
                if self.histogram.is_empty()
                    || self.histogram.iter().any(|&(l, p)| l == 0 || !(p >= 0.0))
                    || self.histogram.iter().all(|&(_, p)| p == 0.0)
                {
                    Err(Error::config("histogram needs positive lengths and non-negative, non-zero weights"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Loads `custom_histogram` bins from a `(length, probability)` CSV.
    pub fn read_histogram<R: Read>(reader: R) -> Result<Vec<(Tokens, f64)>> {
        #[derive(Deserialize)]
        struct Bin {
            length: Tokens,
            probability: f64,
        }
        let mut bins = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let bin: Bin = row?;
            bins.push((bin.length, bin.probability));
        }
        Ok(bins)
    }
}

/// Deterministic stream of document lengths and batches.
pub struct LengthSampler {
    dist: LengthDistribution,
    rng: ChaCha8Rng,
    lognormal: LogNormal<f64>,
    histogram: Option<WeightedIndex<f64>>,
    next_id: DocId,
}

impl LengthSampler {
    pub fn new(dist: &LengthDistribution) -> Result<Self> {
        dist.validate()?;
        let lognormal = LogNormal::new(dist.log_mean, dist.log_std).map_err(|e| Error::config(e.to_string()))?;
        let histogram = match dist.kind {
            LengthKind::CustomHistogram => Some(
                WeightedIndex::new(dist.histogram.iter().map(|b| b.1)).map_err(|e| Error::config(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self {
            dist: dist.clone(),
            rng: ChaCha8Rng::seed_from_u64(dist.seed),
            lognormal,
            histogram,
            next_id: 0,
        })
    }

    fn base_length(&mut self) -> Tokens {
        let max = self.dist.max_doc_len;
        for _ in 0..64 {
            let x = self.lognormal.sample(&mut self.rng).round();
            if x >= 1.0 && x <= max as f64 {
                return x as Tokens;
            }
        }
        max
    }

    pub fn sample_length(&mut self) -> Tokens {
        let d = &self.dist;
        let len = match d.kind {
            LengthKind::Fixed => d.fixed_len.unwrap_or(d.max_doc_len),
            LengthKind::Uniform => self.rng.gen_range(d.min_len..=d.max_doc_len),
            LengthKind::CustomHistogram => {
                let idx = self.histogram.as_ref().expect("built for histograms").sample(&mut self.rng);
                d.histogram[idx].0
            }
            LengthKind::PretrainUpsampled => loop {
                let threshold = self.dist.min_len_threshold;
                let drop_prob = self.dist.drop_prob;
                let x = self.base_length();
                if x >= threshold || !self.rng.gen_bool(drop_prob) {
                    break x;
                }
            },
            LengthKind::ProlongLike => {
                let (long_weight, lo, hi) = (d.long_weight, d.min_len_threshold.max(1), d.max_doc_len);
                if lo < hi && self.rng.gen_bool(long_weight) {
                    let u: f64 = self.rng.gen_range((lo as f64).ln()..=(hi as f64).ln());
                    u.exp().round() as Tokens
                } else {
                    self.base_length()
                }
            }
        };
        len.clamp(1, self.dist.max_doc_len)
    }

    /// Samples documents until `total_tokens` is reached, truncating the last one.
    pub fn sample_batch(&mut self, total_tokens: Tokens) -> Vec<Document> {
        let mut docs = Vec::new();
        let mut remaining = total_tokens;
        while remaining > 0 {
            let len = self.sample_length().min(remaining);
            docs.push(Document::new(self.next_id, len));
            self.next_id += 1;
            remaining -= len;
        }
        docs
    }
}

/// One batch from a fresh sampler seeded with `dist.seed`.
pub fn sample_batch(dist: &LengthDistribution, total_tokens: Tokens) -> Result<Vec<Document>> {
    if total_tokens == 0 {
        return Err(Error::config("total_tokens must be >= 1"));
    }
    Ok(LengthSampler::new(dist)?.sample_batch(total_tokens))
}

/// Seed of batch `index` derived from a run seed (SplitMix64 finalizer).
pub fn batch_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fill_sequential(documents: &[Document], capacity: Tokens, count: usize) -> Result<Vec<Chunk>> {
    let total: Tokens = documents.iter().map(|d| d.length).sum();
    if capacity == 0 || total != capacity * count as Tokens {
        return Err(Error::config(format!(
            "documents hold {total} tokens but {count} x {capacity} are required"
        )));
    }
    let mut chunks: Vec<Chunk> = (0..count).map(Chunk::new).collect();
    let mut device: DeviceId = 0;
    let mut room = capacity;
    for doc in documents {
        let mut start = 0;
        while start < doc.length {
            if room == 0 {
                device += 1;
                room = capacity;
            }
            let take = room.min(doc.length - start);
            chunks[device].segments.push(Segment {
                doc: doc.id,
                start,
                end: start + take,
            });
            start += take;
            room -= take;
        }
    }
    Ok(chunks)
}

/// Fixed-size packing: documents are concatenated in order into `num_chunks`
/// chunks of exactly `tokens_per_chunk` tokens, splitting at chunk boundaries.
pub fn pack_fixed(documents: &[Document], tokens_per_chunk: Tokens, num_chunks: usize) -> Result<Vec<Chunk>> {
    fill_sequential(documents, tokens_per_chunk, num_chunks)
}

/// Sequential placement: every device computes the same number of tokens and
/// the rest of a document that does not fit continues on the next device.
pub fn place_sequential(documents: &[Document], num_devices: usize, tokens_per_device: Tokens) -> Result<Vec<Chunk>> {
    fill_sequential(documents, tokens_per_device, num_devices)
}

pub fn write_batch_csv<W: Write>(documents: &[Document], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["doc_id", "length"])?;
    for d in documents {
        w.write_record([d.id.to_string(), d.length.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
