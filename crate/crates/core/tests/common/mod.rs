//! Straight-line reference implementations on plain row-major matrices,
//! written independently of the tape.
#![allow(dead_code)]

use tubestream::config::{ModelConfig, RunConfig, WorldConfig};
use tubestream::nn::{CrossAttentionBlock, FeedForward, LayerNorm, Linear, SelfAttentionBlock};
use tubestream::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn stack(parts: &[&Mat]) -> Mat {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        for p in parts {
            assert_eq!(p.cols, cols);
            data.extend_from_slice(&p.data);
        }
        Mat::new(data.len() / cols, cols, data)
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.data.iter().zip(other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn param(store: &ParamStore, id: tubestream::params::ParamId) -> Mat {
    let t = store.get(id);
    let (r, c) = (t.shape()[0], t.shape()[1]);
    Mat::new(r, c, t.data().to_vec())
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows);
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut s = 0.0;
            for k in 0..a.cols {
                s += a.at(i, k) * b.at(k, j);
            }
            out[i * b.cols + j] = s;
        }
    }
    Mat::new(a.rows, b.cols, out)
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    Mat::new(a.rows, a.cols, a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
}

pub fn linear(store: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let mut y = matmul(x, &param(store, l.w));
    if let Some(b) = l.b {
        let b = param(store, b);
        for r in 0..y.rows {
            for c in 0..y.cols {
                y.data[r * y.cols + c] += b.data[c];
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let g = param(store, ln.gamma);
    let b = param(store, ln.beta);
    let mut out = Vec::with_capacity(x.data.len());
    for r in 0..x.rows {
        let row = x.row(r);
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for (c, v) in row.iter().enumerate() {
            out.push((v - mean) / (var + 1e-5).sqrt() * g.data[c] + b.data[c]);
        }
    }
    Mat::new(x.rows, x.cols, out)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn ffn(store: &ParamStore, f: &FeedForward, x: &Mat) -> Mat {
    let mut h = linear(store, &f.up, x);
    for v in &mut h.data {
        *v = gelu(*v);
    }
    linear(store, &f.down, &h)
}

/// Multi-head scaled dot-product attention; `mask[j] == false` drops key `j`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, mask: Option<&[bool]>) -> Mat {
    let d = q.cols / heads;
    let mut out = vec![0.0; q.rows * q.cols];
    for h in 0..heads {
        for i in 0..q.rows {
            let mut scores = Vec::new();
            for j in 0..k.rows {
                if mask.is_some_and(|m| !m[j]) {
                    scores.push(f64::NEG_INFINITY);
                    continue;
                }
                let mut s = 0.0;
                for c in 0..d {
                    s += q.at(i, h * d + c) * k.at(j, h * d + c);
                }
                scores.push(s / (d as f64).sqrt());
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                let mut acc = 0.0;
                for j in 0..k.rows {
                    acc += e[j] / z * v.at(j, h * d + c);
                }
                out[i * q.cols + h * d + c] = acc;
            }
        }
    }
    Mat::new(q.rows, q.cols, out)
}

pub fn self_block(store: &ParamStore, b: &SelfAttentionBlock, x: &Mat, mask: Option<&[bool]>) -> Mat {
    let h = layer_norm(store, &b.ln1, x);
    let q = linear(store, &b.wq, &h);
    let k = linear(store, &b.wk, &h);
    let v = linear(store, &b.wv, &h);
    let a = attention(&q, &k, &v, b.heads, mask);
    let x = add(x, &linear(store, &b.wo, &a));
    let h = layer_norm(store, &b.ln2, &x);
    add(&x, &ffn(store, &b.ffn, &h))
}

/// Cross-attention block with raw (unprojected) context rows.
pub fn cross_block(store: &ParamStore, b: &CrossAttentionBlock, q: &Mat, ctx: &Mat, mask: Option<&[bool]>) -> Mat {
    let k = linear(store, &b.wk, ctx);
    let v = linear(store, &b.wv, ctx);
    let h = layer_norm(store, &b.ln_q, q);
    let qp = linear(store, &b.wq, &h);
    let a = attention(&qp, &k, &v, b.heads, mask);
    let x = add(q, &linear(store, &b.wo, &a));
    let h = layer_norm(store, &b.ln2, &x);
    add(&x, &ffn(store, &b.ffn, &h))
}

pub fn relu_mlp(store: &ParamStore, layers: &[Linear], x: &Mat) -> Mat {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = linear(store, l, &h);
        if i + 1 < layers.len() {
            for v in &mut h.data {
                *v = v.max(0.0);
            }
        }
    }
    h
}

/// Small model and world that keep tests fast.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        width: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_blocks: 2,
        grid_h: 4,
        grid_w: 4,
        appearance_dim: 4,
        motion_dim: 4,
        text_dim: 6,
        text_len: 4,
        n_s: 3,
        ..ModelConfig::default()
    };
    cfg.world = WorldConfig {
        frames: 12,
        grid_h: 4,
        grid_w: 4,
        channels: 4,
        text_len: 4,
        events: 2,
        min_event_len: 2,
        max_event_len: 4,
        min_box: 0.3,
        max_box: 0.5,
        ..WorldConfig::default()
    };
    cfg.validate().unwrap();
    cfg
}
