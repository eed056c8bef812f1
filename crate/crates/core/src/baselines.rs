//! Reference placements: fixed-size packing, variable-length chunks balanced
//! on squared length, and per-document head-tail context parallelism.
//!
//! A document cut by a chunk boundary keeps its full causal context: the
//! later piece attends to the earlier tokens, whose K/V it fetches from the
//! device holding them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::comm::allgather_volume_cp;
use crate::cost::{ca_flops, CostCoefficients};
use crate::error::{Error, Result};
use crate::model::{Bytes, CaTask, Chunk, DeviceId, DocId, Document, Flops, Item, ModelConfig, Segment, Tokens};
use crate::workload::pack_fixed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fixed,
    Varlen,
    PerDocCp,
    WlbIdeal,
    Distca,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Fixed,
        Strategy::Varlen,
        Strategy::PerDocCp,
        Strategy::WlbIdeal,
        Strategy::Distca,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Varlen => "varlen",
            Strategy::PerDocCp => "per_doc_cp",
            Strategy::WlbIdeal => "wlb_ideal",
            Strategy::Distca => "distca",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Per-device placement produced by a reference strategy. Attention runs
/// where the tokens live, so every task is local.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineAssignment {
    pub strategy: Strategy,
    pub cp_degree: u64,
    pub chunks: Vec<Chunk>,
    pub tasks: Vec<CaTask>,
    /// Attention FLOPs per layer.
    pub per_device_flops: Vec<Flops>,
    /// Tokens computed per device, including context-parallel padding.
    pub per_device_tokens: Vec<Tokens>,
    pub per_device_memory: Vec<Bytes>,
    /// Bytes received per layer, overlappable with nothing: prefix K/V fetches
    /// plus context-parallel all-gathers.
    pub comm_bytes: Vec<Bytes>,
    /// The all-gather share of `comm_bytes`.
    pub allgather_bytes: Vec<Bytes>,
    /// Prefix K/V fetches as `(holder, reader, bytes)`; they sum to the
    /// non-all-gather share of `comm_bytes`.
    pub fetches: Vec<(DeviceId, DeviceId, Bytes)>,
}

impl BaselineAssignment {
    pub fn num_devices(&self) -> usize {
        self.chunks.len()
    }

    /// Max over min activation memory across devices; `inf` if a device holds nothing.
    pub fn memory_divergence(&self) -> f64 {
        memory_divergence(&self.per_device_memory)
    }
}

pub fn memory_divergence(memory: &[Bytes]) -> f64 {
    let max = memory.iter().copied().max().unwrap_or(0);
    let min = memory.iter().copied().min().unwrap_or(0);
    match (max, min) {
        (0, _) => 1.0,
        (_, 0) => f64::INFINITY,
        _ => max as f64 / min as f64,
    }
}

fn lengths(documents: &[Document]) -> BTreeMap<DocId, Tokens> {
    documents.iter().map(|d| (d.id, d.length)).collect()
}

struct Builder<'a> {
    model: &'a ModelConfig,
    coeff: &'a CostCoefficients,
    chunks: Vec<Chunk>,
    tasks: Vec<CaTask>,
    flops: Vec<Flops>,
    tokens: Vec<Tokens>,
    memory: Vec<Bytes>,
    fetch: Vec<Bytes>,
    /// `(doc, prefix end, reader)` of every prefix fetch.
    requests: Vec<(DocId, Tokens, DeviceId)>,
    allgather: Vec<Bytes>,
}

impl<'a> Builder<'a> {
    fn new(devices: usize, model: &'a ModelConfig, coeff: &'a CostCoefficients) -> Self {
        Self {
            model,
            coeff,
            chunks: (0..devices).map(Chunk::new).collect(),
            tasks: Vec::new(),
            flops: vec![0; devices],
            tokens: vec![0; devices],
            memory: vec![0; devices],
            fetch: vec![0; devices],
            requests: Vec::new(),
            allgather: vec![0; devices],
        }
    }

    fn add_item(&mut self, item: Item) {
        let d = item.home;
        self.flops[d] += ca_flops(&item, self.coeff);
        self.tokens[d] += item.n_q();
        self.memory[d] += item.n_q() * self.coeff.gamma_mem;
        self.tasks.push(CaTask {
            item,
            source_device: d,
            assigned_server: d,
            comm_bytes: 0,
        });
    }

    /// Whole-context segment computed locally; an offset start fetches the prefix K/V.
    fn add_segment(&mut self, device: DeviceId, seg: Segment, doc_len: Tokens) -> Result<()> {
        self.chunks[device].segments.push(seg);
        self.add_item(Item::contiguous(seg.doc, doc_len, seg.start, seg.end, device)?);
        self.fetch_prefix(device, seg);
        Ok(())
    }

    fn fetch_prefix(&mut self, device: DeviceId, seg: Segment) {
        if seg.start > 0 {
            self.fetch[device] += seg.start * self.model.size_kv;
            self.requests.push((seg.doc, seg.start, device));
        }
    }

    fn finish(self, strategy: Strategy, cp_degree: u64) -> BaselineAssignment {
        let mut holders: BTreeMap<DocId, Vec<(DeviceId, Segment)>> = BTreeMap::new();
        for chunk in &self.chunks {
            for seg in &chunk.segments {
                holders.entry(seg.doc).or_default().push((chunk.device, *seg));
            }
        }
        let mut fetches = Vec::new();
        for &(doc, prefix, reader) in &self.requests {
            for &(holder, seg) in &holders[&doc] {
                if seg.end <= prefix {
                    debug_assert_ne!(holder, reader);
                    fetches.push((holder, reader, seg.len() * self.model.size_kv));
                }
            }
        }
        let comm_bytes = self.fetch.iter().zip(&self.allgather).map(|(a, b)| a + b).collect();
        BaselineAssignment {
            strategy,
            cp_degree,
            chunks: self.chunks,
            tasks: self.tasks,
            per_device_flops: self.flops,
            per_device_tokens: self.tokens,
            per_device_memory: self.memory,
            comm_bytes,
            allgather_bytes: self.allgather,
            fetches,
        }
    }
}

/// Fixed-size packing: every device computes exactly `tokens_per_chunk` tokens.
pub fn assign_fixed(
    documents: &[Document],
    devices: usize,
    tokens_per_chunk: Tokens,
    model: &ModelConfig,
    coeff: &CostCoefficients,
) -> Result<BaselineAssignment> {
    let chunks = pack_fixed(documents, tokens_per_chunk, devices)?;
    let lens = lengths(documents);
    let mut b = Builder::new(devices, model, coeff);
    for chunk in &chunks {
        for seg in &chunk.segments {
            b.add_segment(chunk.device, *seg, lens[&seg.doc])?;
        }
    }
    Ok(b.finish(Strategy::Fixed, 1))
}

/// Longest-processing-time assignment on squared length: documents in
/// descending `l^2` order (ties by id) each go to the bin with the least
/// `sum l^2` so far (ties to the lower index). Returns document indices per bin.
pub fn lpt_bins(documents: &[Document], bins: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..documents.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(documents[i].length), documents[i].id));
    let mut load = vec![0u128; bins];
    let mut out = vec![Vec::new(); bins];
    for i in order {
        let l = documents[i].length as u128;
        let (best, _) = load.iter().enumerate().min_by_key(|&(idx, &v)| (v, idx)).expect("at least one bin");
        load[best] += l * l;
        out[best].push(i);
    }
    out
}

/// Variable-length chunks: whole documents balanced on `sum l^2`; token
/// counts, and with them activation memory, diverge.
pub fn assign_varlen(
    documents: &[Document],
    devices: usize,
    model: &ModelConfig,
    coeff: &CostCoefficients,
) -> Result<BaselineAssignment> {
    if devices == 0 {
        return Err(Error::config("need at least one device"));
    }
    let mut b = Builder::new(devices, model, coeff);
    for (device, bin) in lpt_bins(documents, devices).into_iter().enumerate() {
        for i in bin {
            let d = &documents[i];
            b.add_segment(device, Segment { doc: d.id, start: 0, end: d.length }, d.length)?;
        }
    }
    Ok(b.finish(Strategy::Varlen, 1))
}

/// Spreads each segment of a group over `cp` ranks: the segment is padded to
/// a multiple of `2 cp` and cut into `2 cp` equal pieces; rank `r` takes
/// pieces `r` and `2 cp - 1 - r`, which carry equal causal work for any
/// segment offset.
fn add_cp_segment(
    b: &mut Builder<'_>,
    group: &[DeviceId],
    seg: Segment,
    doc_len: Tokens,
) -> Result<()> {
    let cp = group.len() as Tokens;
    if cp == 1 {
        return b.add_segment(group[0], seg, doc_len);
    }
    for &device in group {
        b.fetch_prefix(device, seg);
    }
    let pieces = 2 * cp;
    let width = seg.len().div_ceil(pieces);
    let padded_len = doc_len.max(seg.start + width * pieces);
    for (r, &device) in group.iter().enumerate() {
        let r = r as Tokens;
        for k in [r, pieces - 1 - r] {
            let start = seg.start + k * width;
            let end = start + width;
            let real_end = end.min(seg.end);
            if start < real_end {
                b.chunks[device].segments.push(Segment {
                    doc: seg.doc,
                    start,
                    end: real_end,
                });
            }
            b.add_item(Item::contiguous(seg.doc, padded_len, start, end, device)?);
        }
    }
    // The last rank keeps the aggregated K/V of the whole segment for backward.
    let last = *group.last().expect("non-empty group");
    b.memory[last] += seg.len() * b.model.size_kv * b.model.num_layers;
    Ok(())
}

fn finish_cp(mut b: Builder<'_>, groups: &[Vec<DeviceId>], strategy: Strategy, cp: u64) -> BaselineAssignment {
    for group in groups {
        let total: Tokens = group.iter().map(|&d| b.tokens[d]).sum();
        let volume = allgather_volume_cp(total, cp, b.model);
        for &d in group {
            b.allgather[d] = volume;
        }
    }
    b.finish(strategy, cp)
}

fn cp_groups(devices: usize, cp_degree: u64) -> Result<Vec<Vec<DeviceId>>> {
    if cp_degree < 1 {
        return Err(Error::config("cp_degree must be at least 1"));
    }
    let cp = cp_degree as usize;
    if devices == 0 || devices % cp != 0 {
        return Err(Error::config(format!("cp_degree {cp} does not divide {devices} devices")));
    }
    Ok((0..devices / cp).map(|g| (g * cp..(g + 1) * cp).collect()).collect())
}

/// Per-document context parallelism over fixed-size packing: each group of
/// `cp_degree` devices receives `cp_degree * tokens_per_chunk` tokens and
/// shards every document in it head-tail across its ranks.
pub fn assign_per_doc_cp(
    documents: &[Document],
    devices: usize,
    tokens_per_chunk: Tokens,
    cp_degree: u64,
    model: &ModelConfig,
    coeff: &CostCoefficients,
) -> Result<BaselineAssignment> {
    let groups = cp_groups(devices, cp_degree)?;
    let group_chunks = pack_fixed(documents, tokens_per_chunk * cp_degree, groups.len())?;
    let lens = lengths(documents);
    let mut b = Builder::new(devices, model, coeff);
    for (group, chunk) in groups.iter().zip(&group_chunks) {
        for seg in &chunk.segments {
            add_cp_segment(&mut b, group, *seg, lens[&seg.doc])?;
        }
    }
    Ok(finish_cp(b, &groups, Strategy::PerDocCp, cp_degree))
}

/// One point of the WLB-style sweep: whole documents balanced on `sum l^2`
/// across groups of `cp_degree` devices, then sharded head-tail inside each group.
pub fn assign_wlb_candidate(
    documents: &[Document],
    devices: usize,
    cp_degree: u64,
    model: &ModelConfig,
    coeff: &CostCoefficients,
) -> Result<BaselineAssignment> {
    let groups = cp_groups(devices, cp_degree)?;
    let mut b = Builder::new(devices, model, coeff);
    for (group, bin) in groups.iter().zip(lpt_bins(documents, groups.len())) {
        for i in bin {
            let d = &documents[i];
            add_cp_segment(&mut b, group, Segment { doc: d.id, start: 0, end: d.length }, d.length)?;
        }
    }
    Ok(finish_cp(b, &groups, Strategy::WlbIdeal, cp_degree))
}

/// Powers of two up to `devices` that divide it.
pub fn cp_degrees(devices: usize) -> Vec<u64> {
    std::iter::successors(Some(1usize), |c| Some(c * 2))
        .take_while(|&c| c <= devices)
        .filter(|&c| devices % c == 0)
        .map(|c| c as u64)
        .collect()
}
