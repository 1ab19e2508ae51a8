//! Multimodal encoder: per-modality embedders, fusion by self-attention and
//! deconcatenation into appearance, motion and text features.

use tubestream_tensor::{Rng, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, SelfAttentionBlock};
use crate::params::{Graph, ParamId, ParamStore};

/// Enhanced per-frame features, all of width `C`.
#[derive(Debug, Clone, Copy)]
pub struct MultimodalFeature {
    /// `HW × C`
    pub appearance: Var,
    /// `HW × C`
    pub motion: Var,
    /// `N_t × C`
    pub text: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cells: usize,
    pub text_len: usize,
    pub appearance: Linear,
    pub motion: Linear,
    pub token_table: ParamId,
    pub text: Linear,
    pub pos: ParamId,
    pub typ: ParamId,
    pub blocks: Vec<SelfAttentionBlock>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let c = cfg.width;
        let cells = cfg.grid_h * cfg.grid_w;
        let appearance = Linear::new(store, "enc.appearance", cfg.appearance_dim, c, rng);
        let motion = Linear::new(store, "enc.motion", cfg.motion_dim, c, rng);
        let token_table = store.add("enc.tokens", Tensor::randn([cfg.vocab_size, cfg.text_dim], 1.0, rng));
        let text = Linear::new(store, "enc.text", cfg.text_dim, c, rng);
        let pos = store.add("enc.pos", Tensor::randn([cfg.fused_len(), c], 0.02, rng));
        let typ = store.add("enc.type", Tensor::randn([3, c], 0.02, rng));
        let blocks = (0..cfg.encoder_blocks)
            .map(|n| SelfAttentionBlock::new(store, &format!("enc.block{n}"), c, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        Self {
            cells,
            text_len: cfg.text_len,
            appearance,
            motion,
            token_table,
            text,
            pos,
            typ,
            blocks,
        }
    }

    /// Project raw grids (`HW × C_raw`, row-major cells) and tokens to width `C`.
    /// Rows of padding tokens are zeroed.
    pub fn embed_modalities(
        &self,
        g: &mut Graph,
        appearance_raw: &[f64],
        motion_raw: &[f64],
        tokens: &[usize],
        mask: &[bool],
    ) -> Result<(Var, Var, Var)> {
        let ca = g.params().get(self.appearance.w).shape()[0];
        let cm = g.params().get(self.motion.w).shape()[0];
        if appearance_raw.len() != self.cells * ca || motion_raw.len() != self.cells * cm {
            return Err(Error::Dimension(format!(
                "raw grids of length {} and {} do not match {} cells of {ca} and {cm} channels",
                appearance_raw.len(),
                motion_raw.len(),
                self.cells
            )));
        }
        if tokens.len() != self.text_len || mask.len() != self.text_len {
            return Err(Error::Dimension(format!(
                "expected {} tokens and mask entries, got {} and {}",
                self.text_len,
                tokens.len(),
                mask.len()
            )));
        }
        let vocab = g.params().get(self.token_table).shape()[0];
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let a = g.constant(Tensor::new([self.cells, ca], appearance_raw.to_vec())?);
        let m = g.constant(Tensor::new([self.cells, cm], motion_raw.to_vec())?);
        let fa = self.appearance.forward(g, a)?;
        let fm = self.motion.forward(g, m)?;
        let table = g.p(self.token_table);
        let emb = g.gather_rows(table, tokens)?;
        let ft = self.text.forward(g, emb)?;
        let width = g.shape(ft)[1];
        let keep: Vec<f64> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(if m { 1.0 } else { 0.0 }, width))
            .collect();
        let keep = g.constant(Tensor::new([self.text_len, width], keep)?);
        let ft = g.mul(ft, keep)?;
        Ok((fa, fm, ft))
    }

    /// Concatenate, add position and type embeddings, run the blocks and split.
    pub fn fuse(&self, g: &mut Graph, fa: Var, fm: Var, ft: Var, mask: &[bool]) -> Result<MultimodalFeature> {
        let total = g.shape(fa)[0] + g.shape(fm)[0] + g.shape(ft)[0];
        let expected = 2 * self.cells + self.text_len;
        if total != expected || g.shape(fa)[0] != self.cells || g.shape(fm)[0] != self.cells {
            return Err(Error::Dimension(format!(
                "fused sequence has {total} rows, expected {expected}"
            )));
        }
        if mask.len() != self.text_len {
            return Err(Error::Dimension(format!(
                "text mask has {} entries, expected {}",
                mask.len(),
                self.text_len
            )));
        }
        let x = g.concat_rows(&[fa, fm, ft])?;
        let pos = g.p(self.pos);
        let x = g.add(x, pos)?;
        let types: Vec<usize> = (0..expected)
            .map(|i| match i {
                i if i < self.cells => 0,
                i if i < 2 * self.cells => 1,
                _ => 2,
            })
            .collect();
        let typ = g.p(self.typ);
        let typ = g.gather_rows(typ, &types)?;
        let mut x = g.add(x, typ)?;
        let key_mask = self.key_mask(mask);
        for block in &self.blocks {
            x = block.forward(g, x, Some(&key_mask))?;
        }
        Ok(MultimodalFeature {
            appearance: g.slice_rows(x, 0, self.cells)?,
            motion: g.slice_rows(x, self.cells, self.cells)?,
            text: g.slice_rows(x, 2 * self.cells, self.text_len)?,
        })
    }

    /// Attention mask over the fused sequence: grid rows always visible.
    pub fn key_mask(&self, text_mask: &[bool]) -> Vec<bool> {
        let mut m = vec![true; 2 * self.cells];
        m.extend_from_slice(text_mask);
        m
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        appearance_raw: &[f64],
        motion_raw: &[f64],
        tokens: &[usize],
        mask: &[bool],
    ) -> Result<MultimodalFeature> {
        let (fa, fm, ft) = self.embed_modalities(g, appearance_raw, motion_raw, tokens, mask)?;
        self.fuse(g, fa, fm, ft, mask)
    }
}
