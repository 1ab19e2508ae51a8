//! Memory banks and memory selection strategies.
//!
//! A bank holds one partition per decoder block. Every frame each block
//! appends one query vector to its partition, together with that vector's
//! key and value under the block's memory attention, so later frames attend
//! to stored memories without recomputing their projections.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tubestream_tensor::Var;

use crate::config::Similarity;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Spatial,
    Temporal,
}

/// Tape handles of an entry created during a differentiable pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryHandles {
    pub tape: u32,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub frame: usize,
    pub vector: Vec<f64>,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub handles: Option<EntryHandles>,
}

impl MemoryEntry {
    /// Entry without attention projections, for selection-only use.
    pub fn plain(frame: usize, vector: Vec<f64>) -> Self {
        Self {
            frame,
            key: vector.clone(),
            value: vector.clone(),
            vector,
            handles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub kind: BankKind,
    pub width: usize,
    pub capacity: Option<usize>,
    partitions: Vec<Vec<MemoryEntry>>,
}

impl MemoryBank {
    pub fn new(kind: BankKind, partitions: usize, width: usize, capacity: Option<usize>) -> Self {
        Self {
            kind,
            width,
            capacity,
            partitions: vec![Vec::new(); partitions],
        }
    }

    pub fn partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Partition `k`, counted from 1.
    pub fn partition(&self, k: usize) -> Result<&[MemoryEntry]> {
        self.check(k)?;
        Ok(&self.partitions[k - 1])
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.partitions.iter().map(Vec::len).collect()
    }

    /// Total stored `f64` values.
    pub fn stored_len(&self) -> usize {
        self.partitions
            .iter()
            .flatten()
            .map(|e| e.vector.len() + e.key.len() + e.value.len())
            .sum()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.partitions.len() {
            return Err(Error::NoPartition { k, partitions: self.partitions.len() });
        }
        Ok(())
    }

    /// Append to partition `k` (from 1); evicts the oldest entry past capacity.
    pub fn insert(&mut self, k: usize, entry: MemoryEntry) -> Result<()> {
        self.check(k)?;
        if entry.vector.len() != self.width || entry.key.len() != self.width || entry.value.len() != self.width {
            return Err(Error::Dimension(format!(
                "memory vector of width {} in a bank of width {}",
                entry.vector.len(),
                self.width
            )));
        }
        let part = &mut self.partitions[k - 1];
        part.push(entry);
        if let Some(cap) = self.capacity {
            if part.len() > cap {
                let excess = part.len() - cap;
                part.drain(..excess);
            }
        }
        Ok(())
    }

    pub fn insert_vector(&mut self, k: usize, frame: usize, vector: Vec<f64>) -> Result<()> {
        self.insert(k, MemoryEntry::plain(frame, vector))
    }

    /// Forget tape handles, e.g. once the pass that created them is gone.
    pub fn detach(&mut self) {
        for e in self.partitions.iter_mut().flatten() {
            e.handles = None;
        }
    }
}

/// Selected memories of one partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedMemory {
    /// Positions within the partition, increasing.
    pub positions: Vec<usize>,
    /// Frames the memories came from, increasing.
    pub source_indices: Vec<usize>,
    pub vectors: Vec<Vec<f64>>,
}

impl SelectedMemory {
    pub fn from_positions(partition: &[MemoryEntry], positions: Vec<usize>) -> Self {
        Self {
            source_indices: positions.iter().map(|&p| partition[p].frame).collect(),
            vectors: positions.iter().map(|&p| partition[p].vector.clone()).collect(),
            positions,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub fn similarity(kind: Similarity, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Similarity::Cosine => cosine(a, b),
        Similarity::Dot => dot(a, b),
    }
}

/// Mean of the rows of `text` (`rows × width`, row-major) whose mask is set.
pub fn mean_pool(text: &[f64], width: usize, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; width];
    let mut n = 0usize;
    for (row, &keep) in text.chunks(width).zip(mask) {
        if keep {
            n += 1;
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    if n > 0 {
        for o in &mut out {
            *o /= n as f64;
        }
    }
    out
}

/// Positions of the `n_s` entries most similar to `text`, in partition order.
/// Ties go to the earlier entry.
pub fn top_n_positions(partition: &[MemoryEntry], text: &[f64], n_s: usize, kind: Similarity) -> Vec<usize> {
    if partition.len() <= n_s {
        return (0..partition.len()).collect();
    }
    let scores: Vec<f64> = partition.iter().map(|e| similarity(kind, &e.vector, text)).collect();
    let mut order: Vec<usize> = (0..partition.len()).collect();
    // Stable sort keeps earlier entries first among equal scores.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep = order[..n_s].to_vec();
    keep.sort_unstable();
    keep
}

/// Top-`n_s` memories of partition `k` by similarity to the mean-pooled text.
pub fn select_spatial(
    bank: &MemoryBank,
    k: usize,
    text: &[f64],
    mask: &[bool],
    n_s: usize,
    kind: Similarity,
) -> Result<SelectedMemory> {
    let part = bank.partition(k)?;
    if part.is_empty() {
        return Err(Error::EmptyPartition(k));
    }
    let pooled = mean_pool(text, bank.width, mask);
    Ok(SelectedMemory::from_positions(part, top_n_positions(part, &pooled, n_s, kind)))
}

/// Rule deciding which adjacent-similarity dips are event boundaries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryRule {
    /// `s_j < mean - alpha * std`
    Relative { alpha: f64 },
    /// `s_j < threshold`
    Absolute { threshold: f64 },
}

impl Default for BoundaryRule {
    fn default() -> Self {
        BoundaryRule::Relative { alpha: 1.0 }
    }
}

/// Adjacent similarities `s_j = sim(m_j, m_{j+1})`.
pub fn adjacent_similarities(vectors: &[&[f64]], kind: Similarity) -> Vec<f64> {
    vectors.windows(2).map(|w| similarity(kind, w[0], w[1])).collect()
}

/// Boundary positions `j` (0-based): a boundary lies between vectors `j` and `j + 1`.
pub fn detect_boundaries(vectors: &[&[f64]], rule: BoundaryRule, kind: Similarity) -> Vec<usize> {
    let s = adjacent_similarities(vectors, kind);
    match rule {
        BoundaryRule::Absolute { threshold } => {
            (0..s.len()).filter(|&j| s[j] < threshold).collect()
        }
        BoundaryRule::Relative { alpha } => {
            if vectors.len() < 3 {
                return Vec::new();
            }
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            // Rounding can leave a tiny spread on constant similarities.
            if std <= 1e-12 * mean.abs().max(1.0) {
                return Vec::new();
            }
            // With two similarities `mean - std` is exactly the smaller one; a
            // margin keeps such threshold ties from flipping on rounding.
            let cut = mean - alpha * std - 1e-9 * std.max(mean.abs());
            (0..s.len()).filter(|&j| s[j] < cut).collect()
        }
    }
}

/// Positions after the last boundary of `partition`.
pub fn suffix_positions(partition: &[MemoryEntry], rule: BoundaryRule, kind: Similarity) -> Vec<usize> {
    let vectors: Vec<&[f64]> = partition.iter().map(|e| e.vector.as_slice()).collect();
    let start = detect_boundaries(&vectors, rule, kind).last().map_or(0, |&j| j + 1);
    (start..partition.len()).collect()
}

/// Memories of the event the newest memory belongs to.
pub fn select_temporal(bank: &MemoryBank, k: usize, rule: BoundaryRule, kind: Similarity) -> Result<SelectedMemory> {
    let part = bank.partition(k)?;
    Ok(SelectedMemory::from_positions(part, suffix_positions(part, rule, kind)))
}

/// Inputs a selection strategy may consult.
#[derive(Debug, Clone)]
pub struct SelectionContext<'a> {
    /// Mean-pooled text feature of the current frame.
    pub text: &'a [f64],
    pub n_s: usize,
    pub similarity: Similarity,
    pub boundary: BoundaryRule,
}

/// A way of choosing which stored memories a block attends to.
pub trait MemorySelector: Send + Sync {
    fn name(&self) -> &'static str;

    /// Positions into `partition`, strictly increasing. An empty result skips
    /// the memory attention entirely.
    fn select(&self, partition: &[MemoryEntry], ctx: &SelectionContext<'_>) -> Vec<usize>;
}

/// Memory disabled.
pub struct NoMemory;

impl MemorySelector for NoMemory {
    fn name(&self) -> &'static str {
        "none"
    }
    fn select(&self, _: &[MemoryEntry], _: &SelectionContext<'_>) -> Vec<usize> {
        Vec::new()
    }
}

/// Every stored memory.
pub struct AllMemory;

impl MemorySelector for AllMemory {
    fn name(&self) -> &'static str {
        "all"
    }
    fn select(&self, partition: &[MemoryEntry], _: &SelectionContext<'_>) -> Vec<usize> {
        (0..partition.len()).collect()
    }
}

/// Top-`N_s` by similarity to the text.
pub struct TextTopK;

impl MemorySelector for TextTopK {
    fn name(&self) -> &'static str {
        "text-topk"
    }
    fn select(&self, partition: &[MemoryEntry], ctx: &SelectionContext<'_>) -> Vec<usize> {
        top_n_positions(partition, ctx.text, ctx.n_s, ctx.similarity)
    }
}

/// Suffix after the last detected event boundary.
pub struct EventSuffix;

impl MemorySelector for EventSuffix {
    fn name(&self) -> &'static str {
        "event-suffix"
    }
    fn select(&self, partition: &[MemoryEntry], ctx: &SelectionContext<'_>) -> Vec<usize> {
        suffix_positions(partition, ctx.boundary, ctx.similarity)
    }
}

type Factory<T> = fn() -> Arc<T>;

/// Name-keyed registry of strategy constructors.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn empty(kind: &'static str) -> Self {
        Self { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &'static str, factory: Factory<T>) {
        self.entries.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn create(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}

impl Registry<dyn MemorySelector> {
    /// Registry with the built-in selectors.
    pub fn selectors() -> Self {
        let mut r = Self::empty("memory selector");
        r.register("none", || Arc::new(NoMemory));
        r.register("all", || Arc::new(AllMemory));
        r.register("text-topk", || Arc::new(TextTopK));
        r.register("event-suffix", || Arc::new(EventSuffix));
        r
    }
}
