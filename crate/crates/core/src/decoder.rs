//! Memory-augmented query decoders, region pooling and decoder designs.
//!
//! Both the spatial and the temporal decoder are stacks of [`DecoderBlock`]s.
//! A block first lets its query attend to memories selected from its bank
//! partition, then to the frame context (appearance and text rows for the
//! spatial decoder, pooled motion and text rows for the temporal one).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use tubestream_tensor::{Rng, Tensor, Var};

use crate::boxes::{cell_centers, covered_cells, BBox};
use crate::config::MemoryInsert;
use crate::error::{Error, Result};
use crate::memory::{EntryHandles, MemoryBank, MemoryEntry, MemorySelector, Registry, SelectedMemory, SelectionContext};
use crate::nn::CrossAttentionBlock;
use crate::params::{Graph, ParamStore};

static ROI_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// Number of region poolings that fell back to the centre cell so far.
pub fn roi_fallbacks() -> u64 {
    ROI_FALLBACKS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub memory: CrossAttentionBlock,
    pub context: CrossAttentionBlock,
}

/// Stack of `K` decoder blocks sharing one bank (one partition per block).
#[derive(Debug, Clone)]
pub struct QueryDecoder {
    pub blocks: Vec<DecoderBlock>,
}

/// Per-call decoding options.
pub struct DecodeOptions<'a> {
    pub frame: usize,
    pub selector: &'a dyn MemorySelector,
    pub selection: SelectionContext<'a>,
    pub insert: MemoryInsert,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, name: &str, blocks: usize, width: usize, heads: usize, ratio: usize, rng: &mut Rng) -> Self {
        let blocks = (0..blocks)
            .map(|k| DecoderBlock {
                memory: CrossAttentionBlock::new(store, &format!("{name}.block{k}.mem"), width, heads, ratio, rng),
                context: CrossAttentionBlock::new(store, &format!("{name}.block{k}.ctx"), width, heads, ratio, rng),
            })
            .collect();
        Self { blocks }
    }

    /// Store `q` in partition `k` with its key and value under block `k`'s memory attention.
    pub fn insert(&self, g: &mut Graph, bank: &mut MemoryBank, k: usize, frame: usize, q: Var) -> Result<()> {
        let block = self.block(k)?;
        let (key, value) = block.memory.project_kv(g, q)?;
        let entry = MemoryEntry {
            frame,
            vector: g.value(q).data().to_vec(),
            key: g.value(key).data().to_vec(),
            value: g.value(value).data().to_vec(),
            handles: Some(EntryHandles { tape: g.id(), key, value }),
        };
        bank.insert(k, entry)
    }

    fn block(&self, k: usize) -> Result<&DecoderBlock> {
        self.blocks
            .get(k.wrapping_sub(1))
            .ok_or(Error::NoPartition { k, partitions: self.blocks.len() })
    }

    /// Memory attention of block `k` over the given entries.
    pub fn attend_memory(&self, g: &mut Graph, k: usize, q: Var, entries: &[&MemoryEntry]) -> Result<Var> {
        let block = self.block(k)?;
        let mut keys = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for e in entries {
            match e.handles {
                Some(h) if h.tape == g.id() => {
                    keys.push(h.key);
                    values.push(h.value);
                }
                _ => {
                    let w = e.key.len();
                    keys.push(g.constant(Tensor::new([1, w], e.key.clone())?));
                    values.push(g.constant(Tensor::new([1, w], e.value.clone())?));
                }
            }
        }
        block.memory.forward(g, q, &keys, &values, None)
    }

    /// One block: insert (if before), select, memory attention, context attention, insert (if after).
    pub fn block_step(
        &self,
        g: &mut Graph,
        k: usize,
        q: Var,
        bank: &mut MemoryBank,
        context: Var,
        context_mask: &[bool],
        opts: &DecodeOptions<'_>,
    ) -> Result<(Var, SelectedMemory)> {
        if opts.insert == MemoryInsert::PreBlock {
            self.insert(g, bank, k, opts.frame, q)?;
        }
        let part = bank.partition(k)?;
        let positions = opts.selector.select(part, &opts.selection);
        let selected = SelectedMemory::from_positions(part, positions);
        let q_mem = if selected.is_empty() {
            q
        } else {
            let entries: Vec<&MemoryEntry> = selected.positions.iter().map(|&p| &part[p]).collect();
            self.attend_memory(g, k, q, &entries)?
        };
        let block = self.block(k)?;
        let (ck, cv) = block.context.project_kv(g, context)?;
        let out = block.context.forward(g, q_mem, &[ck], &[cv], Some(context_mask))?;
        if opts.insert == MemoryInsert::PostBlock {
            self.insert(g, bank, k, opts.frame, out)?;
        }
        Ok((out, selected))
    }

    /// Run all blocks from `q0`; returns the final query and each block's selection.
    pub fn decode(
        &self,
        g: &mut Graph,
        q0: Var,
        bank: &mut MemoryBank,
        context: Var,
        context_mask: &[bool],
        opts: &DecodeOptions<'_>,
    ) -> Result<(Var, Vec<SelectedMemory>)> {
        if bank.partitions() != self.blocks.len() {
            return Err(Error::Dimension(format!(
                "bank has {} partitions for {} blocks",
                bank.partitions(),
                self.blocks.len()
            )));
        }
        let mut q = q0;
        let mut selections = Vec::with_capacity(self.blocks.len());
        for k in 1..=self.blocks.len() {
            let (next, sel) = self.block_step(g, k, q, bank, context, context_mask, opts)?;
            q = next;
            selections.push(sel);
        }
        Ok((q, selections))
    }
}

/// Average of the motion rows (`HW × C`) whose cell centres fall in `b`.
pub fn roi_pool(motion: &[f64], grid_h: usize, grid_w: usize, b: BBox) -> Vec<f64> {
    let c = motion.len() / (grid_h * grid_w);
    let (cells, fallback) = covered_cells(grid_h, grid_w, b);
    if fallback {
        ROI_FALLBACKS.fetch_add(1, Ordering::Relaxed);
    }
    let mut out = vec![0.0; c];
    for &cell in &cells {
        for (o, v) in out.iter_mut().zip(&motion[cell * c..(cell + 1) * c]) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= cells.len() as f64;
    }
    out
}

/// Hard region pooling on the tape (no gradient to the box).
pub fn roi_pool_hard(g: &mut Graph, motion: Var, grid_h: usize, grid_w: usize, b: BBox) -> Result<Var> {
    let (cells, fallback) = covered_cells(grid_h, grid_w, b);
    if fallback {
        ROI_FALLBACKS.fetch_add(1, Ordering::Relaxed);
    }
    let rows = g.gather_rows(motion, &cells)?;
    let n = cells.len();
    let avg = g.constant(Tensor::full([1, n], 1.0 / n as f64));
    Ok(g.matmul(avg, rows)?)
}

/// Soft region pooling: each cell is weighted by the product of sigmoid
/// memberships of its centre along the four box edges, so the pooled vector
/// is differentiable in the box.
pub fn roi_pool_soft(g: &mut Graph, motion: Var, grid_h: usize, grid_w: usize, bbox: Var, temperature: f64) -> Result<Var> {
    let n = grid_h * grid_w;
    let centers = cell_centers(grid_h, grid_w);
    let xs = g.constant(Tensor::new([n, 1], centers.iter().map(|c| c.0).collect())?);
    let ys = g.constant(Tensor::new([n, 1], centers.iter().map(|c| c.1).collect())?);
    let ones_col = g.constant(Tensor::ones([n, 1]));
    let col = |g: &mut Graph, j: usize| -> Result<Var> {
        let v = g.slice_cols(bbox, j, 1)?;
        Ok(g.matmul(ones_col, v)?)
    };
    let (cx, cy, w, h) = (col(g, 0)?, col(g, 1)?, col(g, 2)?, col(g, 3)?);
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    let x0 = g.sub(cx, hw)?;
    let x1 = g.add(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let y1 = g.add(cy, hh)?;
    let inv_t = 1.0 / temperature;
    let edge = |g: &mut Graph, a: Var, b: Var| -> Result<Var> {
        let d = g.sub(a, b)?;
        let d = g.scale(d, inv_t)?;
        Ok(g.sigmoid(d)?)
    };
    let left = edge(g, xs, x0)?;
    let right = edge(g, x1, xs)?;
    let top = edge(g, ys, y0)?;
    let bottom = edge(g, y1, ys)?;
    let wx = g.mul(left, right)?;
    let wy = g.mul(top, bottom)?;
    let weights = g.mul(wx, wy)?;
    let wt = g.transpose(weights)?;
    let pooled = g.matmul(wt, motion)?;
    let total = g.matmul(wt, ones_col)?;
    let c = g.shape(motion)[1];
    let ones_row = g.constant(Tensor::ones([1, c]));
    let total = g.matmul(total, ones_row)?;
    Ok(g.div(pooled, total)?)
}

/// How region pooling treats the predicted box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoiMode {
    /// Cells whose centres fall inside the box.
    Hard,
    /// Differentiable sigmoid membership at the given temperature.
    Soft { temperature: f64 },
}

/// Frame geometry and box information handed to a decoder design.
pub struct MotionInput {
    pub motion: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub predicted: Var,
    /// Box used instead of the prediction (teacher forcing).
    pub forced: Option<BBox>,
    pub mode: RoiMode,
}

/// Wiring between spatial and temporal decoding.
pub trait DecoderDesign: Send + Sync {
    fn name(&self) -> &'static str;

    /// Motion rows the temporal decoder attends to.
    fn motion_context(&self, g: &mut Graph, input: &MotionInput) -> Result<Var>;
}

/// Region-pooled motion under the predicted box.
pub struct Cascaded;

impl DecoderDesign for Cascaded {
    fn name(&self) -> &'static str {
        "cascaded"
    }

    fn motion_context(&self, g: &mut Graph, input: &MotionInput) -> Result<Var> {
        if let Some(b) = input.forced {
            return roi_pool_hard(g, input.motion, input.grid_h, input.grid_w, b);
        }
        match input.mode {
            RoiMode::Hard => {
                let b = BBox::from_array(g.value(input.predicted).data().try_into().map_err(|_| {
                    Error::Dimension("predicted box must have four values".into())
                })?);
                roi_pool_hard(g, input.motion, input.grid_h, input.grid_w, b)
            }
            RoiMode::Soft { temperature } => {
                roi_pool_soft(g, input.motion, input.grid_h, input.grid_w, input.predicted, temperature)
            }
        }
    }
}

/// All motion rows, independent of the spatial prediction.
pub struct Parallel;

impl DecoderDesign for Parallel {
    fn name(&self) -> &'static str {
        "parallel"
    }

    fn motion_context(&self, _: &mut Graph, input: &MotionInput) -> Result<Var> {
        Ok(input.motion)
    }
}

impl Registry<dyn DecoderDesign> {
    pub fn designs() -> Self {
        let mut r = Self::empty("decoder design");
        r.register("cascaded", || Arc::new(Cascaded));
        r.register("parallel", || Arc::new(Parallel));
        r
    }
}
