//! Domain types shared by every other module: model and cluster configuration,
//! documents, packed chunks, scheduling items and core-attention tasks.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Tokens = u64;
pub type Bytes = u64;
/// FLOP counts. Batch totals of quadratic attention work overflow `u64` at
/// realistic model widths, so FLOPs are carried as `u128`.
pub type Flops = u128;
pub type DeviceId = usize;
pub type DocId = u64;

fn default_true() -> bool {
    true
}

/// Transformer architecture dimensions.
///
/// `size_q` and `size_kv` are per-token byte sizes of the query and key/value
/// states. They may be left at zero in config files and filled in with
/// [`derive_sizes`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: u64,
    pub hidden: u64,
    pub kv_hidden: u64,
    pub ffn_intermediate: u64,
    pub head_dim: u64,
    pub num_heads: u64,
    pub gqa_groups: u64,
    pub bytes_per_element: u64,
    /// When set, `size_kv` counts both K and V (2 × kv_hidden elements).
    #[serde(default = "default_true")]
    pub kv_counts_both: bool,
    #[serde(default)]
    pub size_q: Bytes,
    #[serde(default)]
    pub size_kv: Bytes,
}

impl ModelConfig {
    /// Llama-3-8B dimensions in 16-bit precision.
    pub fn llama_8b() -> Self {
        Self {
            num_layers: 32,
            hidden: 4096,
            kv_hidden: 1024,
            ffn_intermediate: 14336,
            head_dim: 128,
            num_heads: 32,
            gqa_groups: 8,
            bytes_per_element: 2,
            kv_counts_both: true,
            size_q: 8192,
            size_kv: 4096,
        }
    }

    /// Llama-34B dimensions in 16-bit precision.
    pub fn llama_34b() -> Self {
        Self {
            num_layers: 48,
            hidden: 8192,
            kv_hidden: 2048,
            ffn_intermediate: 22016,
            head_dim: 128,
            num_heads: 64,
            gqa_groups: 16,
            bytes_per_element: 2,
            kv_counts_both: true,
            size_q: 16384,
            size_kv: 8192,
        }
    }

    fn check_dims(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("kv_hidden", self.kv_hidden),
            ("ffn_intermediate", self.ffn_intermediate),
            ("head_dim", self.head_dim),
            ("num_heads", self.num_heads),
            ("gqa_groups", self.gqa_groups),
            ("bytes_per_element", self.bytes_per_element),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model dimension `{name}` must be > 0")));
        }
        if self.hidden % self.num_heads != 0 {
            return Err(Error::config(format!(
                "hidden ({}) is not divisible by num_heads ({})",
                self.hidden, self.num_heads
            )));
        }
        if self.num_heads % self.gqa_groups != 0 {
            return Err(Error::config(format!(
                "num_heads ({}) is not divisible by gqa_groups ({})",
                self.num_heads, self.gqa_groups
            )));
        }
        Ok(())
    }

    fn computed_sizes(&self) -> (Bytes, Bytes) {
        let kv_factor = if self.kv_counts_both { 2 } else { 1 };
        (
            self.hidden * self.bytes_per_element,
            kv_factor * self.kv_hidden * self.bytes_per_element,
        )
    }

    /// Checks dimension invariants and that the stored sizes match the dims.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        let (size_q, size_kv) = self.computed_sizes();
        if self.size_q != size_q || self.size_kv != size_kv {
            return Err(Error::config(format!(
                "stored sizes (q={}, kv={}) disagree with dims (q={size_q}, kv={size_kv})",
                self.size_q, self.size_kv
            )));
        }
        Ok(())
    }
}

/// Materializes `size_q` and `size_kv` from the model dimensions.
pub fn derive_sizes(config: &ModelConfig) -> Result<ModelConfig> {
    config.check_dims()?;
    let (size_q, size_kv) = config.computed_sizes();
    Ok(ModelConfig {
        size_q,
        size_kv,
        ..config.clone()
    })
}

fn default_tile() -> Tokens {
    128
}

fn default_one() -> u64 {
    1
}

fn default_mfu_attention() -> f64 {
    0.5
}

fn default_kernel_overhead() -> f64 {
    20e-6
}

/// Cluster shape and hardware characteristics.
///
/// `peak_flops` and `interconnect_bandwidth` are per GPU. A TP group is
/// collapsed into one logical device whose throughput and bandwidth are
/// `tp` times the per-GPU values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub num_gpus: u64,
    #[serde(default = "default_one")]
    pub tp: u64,
    #[serde(default = "default_one")]
    pub pp: u64,
    #[serde(default = "default_one")]
    pub dp: u64,
    #[serde(default = "default_one")]
    pub cp: u64,
    /// Bytes per second.
    pub interconnect_bandwidth: f64,
    /// FLOPs per second.
    pub peak_flops: f64,
    pub mfu_linear: f64,
    /// Attention kernel MFU in its saturation region.
    #[serde(default = "default_mfu_attention")]
    pub mfu_attention: f64,
    /// Fixed launch cost of one attention kernel, seconds.
    #[serde(default = "default_kernel_overhead")]
    pub kernel_overhead_s: f64,
    #[serde(default = "default_tile")]
    pub tile_size: Tokens,
    pub memory_capacity: Bytes,
}

impl ClusterConfig {
    /// H200-class nodes on a 50 GiB/s per-GPU fabric.
    pub fn h200(num_gpus: u64) -> Self {
        Self {
            num_gpus,
            tp: 1,
            pp: 1,
            dp: num_gpus,
            cp: 1,
            interconnect_bandwidth: 50.0 * (1u64 << 30) as f64,
            peak_flops: 990e12,
            mfu_linear: 0.5,
            mfu_attention: 0.5,
            kernel_overhead_s: default_kernel_overhead(),
            tile_size: 128,
            memory_capacity: 141 * (1u64 << 30),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.num_gpus, self.tp, self.pp, self.dp, self.cp].contains(&0) {
            return Err(Error::config("device counts and parallel degrees must be >= 1"));
        }
        let used = self.tp * self.pp * self.dp * self.cp;
        if used > self.num_gpus {
            return Err(Error::config(format!(
                "tp*pp*dp*cp = {used} exceeds num_gpus = {}",
                self.num_gpus
            )));
        }
        if !(self.interconnect_bandwidth > 0.0) {
            return Err(Error::config("interconnect_bandwidth must be > 0"));
        }
        if !(self.peak_flops > 0.0) {
            return Err(Error::config("peak_flops must be > 0"));
        }
        for (name, v) in [("mfu_linear", self.mfu_linear), ("mfu_attention", self.mfu_attention)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if self.tile_size == 0 {
            return Err(Error::config("tile_size must be >= 1"));
        }
        if self.kernel_overhead_s < 0.0 {
            return Err(Error::config("kernel_overhead_s must be >= 0"));
        }
        Ok(())
    }

    pub fn is_fully_assigned(&self) -> bool {
        self.tp * self.pp * self.dp * self.cp == self.num_gpus
    }

    pub fn logical_devices(&self) -> usize {
        (self.num_gpus / self.tp) as usize
    }

    pub fn device_bandwidth(&self) -> f64 {
        self.interconnect_bandwidth * self.tp as f64
    }

    pub fn device_peak_flops(&self) -> f64 {
        self.peak_flops * self.tp as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Document {
    pub id: DocId,
    pub length: Tokens,
}

impl Document {
    pub fn new(id: DocId, length: Tokens) -> Self {
        assert!(length >= 1, "documents hold at least one token");
        Self { id, length }
    }
}

/// A `[start, end)` slice of one document, in document token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub doc: DocId,
    pub start: Tokens,
    pub end: Tokens,
}

impl Segment {
    pub fn len(&self) -> Tokens {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// The tokens one device runs its context-independent layers on.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub device: DeviceId,
    pub segments: Vec<Segment>,
}

impl Chunk {
    pub fn new(device: DeviceId) -> Self {
        Self {
            device,
            segments: Vec::new(),
        }
    }

    pub fn total_tokens(&self) -> Tokens {
        self.segments.iter().map(Segment::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChunkViolation {
    UnknownDocument { doc: DocId },
    OutOfRange { doc: DocId, end: Tokens, length: Tokens },
    Overlap { doc: DocId, at: Tokens },
    Gap { doc: DocId, at: Tokens },
}

impl fmt::Display for ChunkViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChunkViolation::UnknownDocument { doc } => write!(f, "segment references unknown document {doc}"),
            ChunkViolation::OutOfRange { doc, end, length } => {
                write!(f, "document {doc}: segment ends at {end} past length {length}")
            }
            ChunkViolation::Overlap { doc, at } => write!(f, "document {doc}: overlap at token {at}"),
            ChunkViolation::Gap { doc, at } => write!(f, "document {doc}: gap at token {at}"),
        }
    }
}

/// Confirms every document token appears in exactly one chunk segment.
pub fn validate_chunking(documents: &[Document], chunks: &[Chunk]) -> Result<(), Vec<ChunkViolation>> {
    let lengths: BTreeMap<DocId, Tokens> = documents.iter().map(|d| (d.id, d.length)).collect();
    let mut covered: BTreeMap<DocId, Vec<(Tokens, Tokens)>> = lengths.keys().map(|&id| (id, Vec::new())).collect();
    let mut violations = Vec::new();

    for seg in chunks.iter().flat_map(|c| &c.segments) {
        let Some(&length) = lengths.get(&seg.doc) else {
            violations.push(ChunkViolation::UnknownDocument { doc: seg.doc });
            continue;
        };
        if seg.end > length {
            violations.push(ChunkViolation::OutOfRange {
                doc: seg.doc,
                end: seg.end,
                length,
            });
        }
        if !seg.is_empty() {
            covered.get_mut(&seg.doc).expect("initialized above").push((seg.start, seg.end));
        }
    }

    for (doc, ranges) in &mut covered {
        ranges.sort_unstable();
        let mut cursor = 0;
        for &(start, end) in ranges.iter() {
            if start > cursor {
                violations.push(ChunkViolation::Gap { doc: *doc, at: cursor });
            } else if start < cursor {
                violations.push(ChunkViolation::Overlap { doc: *doc, at: start });
            }
            cursor = cursor.max(end);
        }
        if cursor < lengths[doc] {
            violations.push(ChunkViolation::Gap { doc: *doc, at: cursor });
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Contiguous,
    /// Covers `[q_start, q_end)` and the mirrored `[L - q_end, L - q_start)`.
    HeadTail,
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::Contiguous => "contiguous",
            Layout::HeadTail => "head_tail",
        })
    }
}

/// A whole document or a shard of one, resident on the device that runs its
/// context-independent layers. One item maps to one core-attention task.
///
/// Contiguous items attend causally to every token before `q_end`, so the
/// key/value extent is the absolute end position. Head-tail items pair the
/// head range `[q_start, q_end)` with its mirror at the end of the document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub doc: DocId,
    pub doc_len: Tokens,
    pub q_start: Tokens,
    pub q_end: Tokens,
    pub layout: Layout,
    pub home: DeviceId,
}

impl Item {
    pub fn contiguous(doc: DocId, doc_len: Tokens, q_start: Tokens, q_end: Tokens, home: DeviceId) -> Result<Self> {
        let item = Self {
            doc,
            doc_len,
            q_start,
            q_end,
            layout: Layout::Contiguous,
            home,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn head_tail(doc: DocId, doc_len: Tokens, head_start: Tokens, head_end: Tokens, home: DeviceId) -> Result<Self> {
        let item = Self {
            doc,
            doc_len,
            q_start: head_start,
            q_end: head_end,
            layout: Layout::HeadTail,
            home,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn whole(doc: &Document, home: DeviceId) -> Self {
        Self {
            doc: doc.id,
            doc_len: doc.length,
            q_start: 0,
            q_end: doc.length,
            layout: Layout::Contiguous,
            home,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_end <= self.q_start {
            return Err(Error::domain(format!(
                "item on doc {} has empty query range [{}, {})",
                self.doc, self.q_start, self.q_end
            )));
        }
        let limit = match self.layout {
            Layout::Contiguous => self.doc_len,
            Layout::HeadTail => self.doc_len / 2,
        };
        if self.q_end > limit {
            return Err(Error::domain(format!(
                "{} item on doc {} ends at {} beyond {}",
                self.layout, self.doc, self.q_end, limit
            )));
        }
        Ok(())
    }

    /// Query tokens per half (`n_q`).
    pub fn n_q(&self) -> Tokens {
        self.q_end - self.q_start
    }

    /// Key/value extent (`n_kv`): the absolute end of the (head) query range.
    pub fn kv_extent(&self) -> Tokens {
        self.q_end
    }

    /// Total query tokens carried by the item.
    pub fn query_tokens(&self) -> Tokens {
        match self.layout {
            Layout::Contiguous => self.n_q(),
            Layout::HeadTail => 2 * self.n_q(),
        }
    }

    /// The `[start, end)` token ranges the item's queries cover.
    pub fn ranges(&self) -> Vec<(Tokens, Tokens)> {
        match self.layout {
            Layout::Contiguous => vec![(self.q_start, self.q_end)],
            Layout::HeadTail => vec![
                (self.q_start, self.q_end),
                (self.doc_len - self.q_end, self.doc_len - self.q_start),
            ],
        }
    }

    /// Causal attention work in token-pair units, `n_q (2 n_kv - n_q)` per
    /// contiguous range. A whole document of length `l` yields `l^2`.
    pub fn work(&self) -> u128 {
        self.ranges().into_iter().map(|(s, e)| range_work(s, e)).sum()
    }

    /// Work with every query range padded up to one kernel tile.
    pub fn padded_work(&self, tile: Tokens) -> u128 {
        self.ranges()
            .into_iter()
            .map(|(s, e)| {
                let n_q = (e - s).max(tile) as u128;
                let n_kv = (e as u128).max(n_q);
                n_q * (2 * n_kv - n_q)
            })
            .sum()
    }
}

/// `n_q (2 n_kv - n_q)` with `n_q = end - start`, `n_kv = end`; equals `end^2 - start^2`.
pub fn range_work(start: Tokens, end: Tokens) -> u128 {
    let (s, e) = (start as u128, end as u128);
    e * e - s * s
}

/// Core-attention task: an item plus the server it runs on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaTask {
    pub item: Item,
    pub source_device: DeviceId,
    pub assigned_server: DeviceId,
    pub comm_bytes: Bytes,
}

impl CaTask {
    pub fn is_local(&self) -> bool {
        self.source_device == self.assigned_server
    }
}
