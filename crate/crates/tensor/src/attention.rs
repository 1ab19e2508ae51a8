//! Multi-head scaled dot-product attention kernels.
//!
//! Queries are `lq×d`, keys and values `s×d`; the `d` columns are split into
//! `heads` contiguous groups. Masked keys receive an additive `-1e9` before the
//! softmax, which drives their weight to exactly zero.

use crate::kernels::{gemm_strided, softmax_into};

pub const MASK_PENALTY: f64 = -1e9;

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnDims {
    pub lq: usize,
    pub s: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.d / self.heads
    }
    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

/// Returns `(output lq×d, probabilities heads×lq×s)`.
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: AttnDims,
    mask: Option<&[bool]>,
) -> (Vec<f64>, Vec<f64>) {
    let AttnDims { lq, s, d, heads } = dims;
    let dh = dims.head_dim();
    let mut out = vec![0.0; lq * d];
    let mut probs = vec![0.0; heads * lq * s];
    let mut scores = vec![0.0; lq * s];
    for h in 0..heads {
        let off = h * dh;
        gemm_strided(
            lq,
            dh,
            s,
            dims.scale(),
            &q[off..],
            d,
            1,
            &k[off..],
            1,
            d,
            0.0,
            &mut scores,
            s,
            1,
        );
        let p = &mut probs[h * lq * s..(h + 1) * lq * s];
        for i in 0..lq {
            let row = &mut scores[i * s..(i + 1) * s];
            if let Some(mask) = mask {
                for (x, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *x += MASK_PENALTY;
                    }
                }
            }
            softmax_into(row, &mut p[i * s..(i + 1) * s]);
        }
        gemm_strided(lq, s, dh, 1.0, p, s, 1, &v[off..], d, 1, 0.0, &mut out[off..], d, 1);
    }
    (out, probs)
}

/// Accumulates gradients into `dq`, `dk`, `dv` (each `+=`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: AttnDims,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let AttnDims { lq, s, d, heads } = dims;
    let dh = dims.head_dim();
    let scale = dims.scale();
    let mut dp = vec![0.0; lq * s];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * lq * s..(h + 1) * lq * s];
        // dP = dOut_h · V_hᵀ
        gemm_strided(lq, dh, s, 1.0, &dout[off..], d, 1, &v[off..], 1, d, 0.0, &mut dp, s, 1);
        // dS = P ⊙ (dP − rowsum(P ⊙ dP))
        for i in 0..lq {
            let pr = &p[i * s..(i + 1) * s];
            let dr = &mut dp[i * s..(i + 1) * s];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot);
            }
        }
        gemm_strided(lq, s, dh, scale, &dp, s, 1, &k[off..], d, 1, 1.0, &mut dq[off..], d, 1);
        gemm_strided(s, lq, dh, scale, &dp, 1, s, &q[off..], d, 1, 1.0, &mut dk[off..], d, 1);
        gemm_strided(s, lq, dh, 1.0, p, 1, s, &dout[off..], d, 1, 1.0, &mut dv[off..], d, 1);
    }
}
