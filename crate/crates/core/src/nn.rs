//! Transformer building blocks on top of the tape.

use tubestream_tensor::{Rng, Tensor, Var};

use crate::error::Result;
use crate::params::{Graph, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.add_weight(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([1, fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.p(b);
                g.add_row(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([1, width])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.p(self.gamma), g.p(self.beta));
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), width, width * ratio, rng),
            down: Linear::new(store, &format!("{name}.down"), width * ratio, width, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, h)
    }
}

/// Head MLP: two hidden ReLU layers of the input width.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, out: usize, rng: &mut Rng) -> Self {
        let layers = vec![
            Linear::new(store, &format!("{name}.0"), width, width, rng),
            Linear::new(store, &format!("{name}.1"), width, width, rng),
            Linear::new(store, &format!("{name}.2"), width, out, rng),
        ];
        Self { layers }
    }

    /// Output of the last layer, before any squashing.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Pre-norm multi-head self-attention block with an MLP.
#[derive(Debug, Clone)]
pub struct SelfAttentionBlock {
    pub heads: usize,
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SelfAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            wq: Linear::new(store, &format!("{name}.q"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.k"), width, width, rng),
            wv: Linear::new(store, &format!("{name}.v"), width, width, rng),
            wo: Linear::new(store, &format!("{name}.o"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ratio, rng),
        }
    }

    /// `mask[j] == false` removes key `j` from every row's attention.
    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (y, _) = self.forward_with_attention(g, x, mask)?;
        Ok(y)
    }

    /// Also returns the attention node, whose saved weights can be inspected.
    pub fn forward_with_attention(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let att = g.attention(q, &[k], &[v], self.heads, mask)?;
        let o = self.wo.forward(g, att)?;
        let x = g.add(x, o)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok((g.add(x, f)?, att))
    }
}

/// Pre-norm cross-attention: a single query row attends to projected key/value blocks.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    pub heads: usize,
    pub ln_q: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, ratio: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            ln_q: LayerNorm::new(store, &format!("{name}.lnq"), width),
            wq: Linear::new(store, &format!("{name}.q"), width, width, rng),
            wk: Linear::new(store, &format!("{name}.k"), width, width, rng),
            wv: Linear::new(store, &format!("{name}.v"), width, width, rng),
            wo: Linear::new(store, &format!("{name}.o"), width, width, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, ratio, rng),
        }
    }

    /// Key and value projections of context rows.
    pub fn project_kv(&self, g: &mut Graph, ctx: Var) -> Result<(Var, Var)> {
        Ok((self.wk.forward(g, ctx)?, self.wv.forward(g, ctx)?))
    }

    pub fn forward(&self, g: &mut Graph, q: Var, keys: &[Var], values: &[Var], mask: Option<&[bool]>) -> Result<Var> {
        Ok(self.forward_with_attention(g, q, keys, values, mask)?.0)
    }

    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        q: Var,
        keys: &[Var],
        values: &[Var],
        mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let h = self.ln_q.forward(g, q)?;
        let qp = self.wq.forward(g, h)?;
        let att = g.attention(qp, keys, values, self.heads, mask)?;
        let o = self.wo.forward(g, att)?;
        let x = g.add(q, o)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok((g.add(x, f)?, att))
    }
}
