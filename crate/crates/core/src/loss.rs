//! Training objective: KL divergence on start/end distributions over frames,
//! smooth-L1 and (G)IoU terms on boxes inside the ground-truth segment.

use std::sync::atomic::{AtomicU64, Ordering};

use tubestream_tensor::{Tensor, Var};

use crate::boxes::BBox;
use crate::config::{IouLossKind, LossConfig};
use crate::error::{Error, Result};
use crate::params::Graph;

static EMPTY_BOX_MASKS: AtomicU64 = AtomicU64::new(0);

/// Number of box-loss evaluations that had no supervised frame.
pub fn empty_box_masks() -> u64 {
    EMPTY_BOX_MASKS.load(Ordering::Relaxed)
}

/// One-hot distribution at `index`, optionally Gaussian-smoothed.
pub fn frame_target(len: usize, index: usize, sigma: f64) -> Result<Vec<f64>> {
    if index >= len {
        return Err(Error::OutOfRange { index, len });
    }
    if sigma <= 0.0 {
        let mut t = vec![0.0; len];
        t[index] = 1.0;
        return Ok(t);
    }
    let w: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - index as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `sum p log p` with `0 log 0 = 0`.
fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// KL(target ‖ softmax(scores)) where `scores` is a `T × 1` column.
pub fn kl_loss(g: &mut Graph, target: &[f64], scores: Var) -> Result<Var> {
    let t = g.shape(scores)[0];
    if target.len() != t || g.value(scores).numel() != t {
        return Err(Error::Dimension(format!(
            "target over {} frames, scores over {t}",
            target.len()
        )));
    }
    let logq = g.log_softmax(scores, 0)?;
    let p = g.constant(Tensor::new([t, 1], target.to_vec())?);
    let cross = g.mul(p, logq)?;
    let cross = g.sum(cross)?;
    let kl = g.scale(cross, -1.0)?;
    Ok(g.add_scalar(kl, neg_entropy(target))?)
}

/// Plain KL divergence between two distributions, for reporting.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).ln())
        .sum()
}

/// Column `j` of an `S × 4` box matrix.
fn coord(g: &mut Graph, boxes: Var, j: usize) -> Result<Var> {
    Ok(g.slice_cols(boxes, j, 1)?)
}

/// Per-row corners `(x0, y0, x1, y1)` of an `S × 4` centre-format box matrix.
fn corners(g: &mut Graph, boxes: Var) -> Result<[Var; 4]> {
    let (cx, cy, w, h) = (coord(g, boxes, 0)?, coord(g, boxes, 1)?, coord(g, boxes, 2)?, coord(g, boxes, 3)?);
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// Per-row IoU and GIoU (`S × 1` each).
pub fn iou_terms(g: &mut Graph, pred: Var, gt: Var) -> Result<(Var, Var)> {
    let [px0, py0, px1, py1] = corners(g, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(g, gt)?;
    let ix0 = g.maximum(px0, gx0)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.relu(iw)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.relu(ih)?;
    let inter = g.mul(iw, ih)?;
    let area = |g: &mut Graph, x0: Var, y0: Var, x1: Var, y1: Var| -> Result<Var> {
        let w = g.sub(x1, x0)?;
        let h = g.sub(y1, y0)?;
        Ok(g.mul(w, h)?)
    };
    let pa = area(g, px0, py0, px1, py1)?;
    let ga = area(g, gx0, gy0, gx1, gy1)?;
    let union = g.add(pa, ga)?;
    let union = g.sub(union, inter)?;
    let iou = g.div(inter, union)?;
    let hx0 = g.minimum(px0, gx0)?;
    let hy0 = g.minimum(py0, gy0)?;
    let hx1 = g.maximum(px1, gx1)?;
    let hy1 = g.maximum(py1, gy1)?;
    let hull = area(g, hx0, hy0, hx1, hy1)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    Ok((iou, giou))
}

/// Smooth-L1 and IoU losses over the supervised frames.
///
/// `pred` is `T × 4`; `gt[i]` is `Some` for supervised frames. Returns `None`
/// when nothing is supervised.
pub fn box_losses(
    g: &mut Graph,
    pred: Var,
    gt: &[Option<BBox>],
    beta: f64,
    kind: IouLossKind,
) -> Result<Option<(Var, Var)>> {
    let t = g.shape(pred)[0];
    if gt.len() != t {
        return Err(Error::Dimension(format!("{} ground-truth entries for {t} boxes", gt.len())));
    }
    let rows: Vec<usize> = (0..t).filter(|&i| gt[i].is_some()).collect();
    if rows.is_empty() {
        EMPTY_BOX_MASKS.fetch_add(1, Ordering::Relaxed);
        log::warn!("box loss called without supervised frames");
        return Ok(None);
    }
    let s = rows.len();
    let sel = g.gather_rows(pred, &rows)?;
    let gt_data: Vec<f64> = rows.iter().flat_map(|&i| gt[i].expect("supervised").to_array()).collect();
    let gt_var = g.constant(Tensor::new([s, 4], gt_data)?);
    let diff = g.sub(sel, gt_var)?;
    let l1 = g.smooth_l1(diff, beta)?;
    let l1 = g.mean(l1)?;
    let (iou, giou) = iou_terms(g, sel, gt_var)?;
    let score = match kind {
        IouLossKind::Giou => giou,
        IouLossKind::Iou => iou,
    };
    let score = g.mean(score)?;
    let neg = g.scale(score, -1.0)?;
    let loss = g.add_scalar(neg, 1.0)?;
    Ok(Some((l1, loss)))
}

/// Loss graph handles and their values.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub value: f64,
    pub kl_s: f64,
    pub kl_e: f64,
    pub l1: f64,
    pub iou: f64,
}

/// `λk (KL_s + KL_e) + λl L1 + λu L_IoU` for one episode.
///
/// `boxes` is `T × 4`, `logits` is `T × 2` (start, end).
pub fn total_loss(
    g: &mut Graph,
    boxes: Var,
    logits: Var,
    segment: (usize, usize),
    gt: &[Option<BBox>],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let t = g.shape(logits)[0];
    if g.shape(logits) != [t, 2] || g.shape(boxes) != [t, 4] {
        return Err(Error::Dimension("logits must be T×2 and boxes T×4".into()));
    }
    let (s, e) = segment;
    if s > e || e >= t {
        return Err(Error::Segment(s, e));
    }
    let hs = g.slice_cols(logits, 0, 1)?;
    let he = g.slice_cols(logits, 1, 1)?;
    let kl_s = kl_loss(g, &frame_target(t, s, cfg.kl_sigma)?, hs)?;
    let kl_e = kl_loss(g, &frame_target(t, e, cfg.kl_sigma)?, he)?;
    let kl = g.add(kl_s, kl_e)?;
    let mut total = g.scale(kl, cfg.lambda_k)?;
    let (mut l1_v, mut iou_v) = (0.0, 0.0);
    if let Some((l1, iou)) = box_losses(g, boxes, gt, cfg.smooth_l1_beta, cfg.iou_kind)? {
        l1_v = g.value(l1).data()[0];
        iou_v = g.value(iou).data()[0];
        let a = g.scale(l1, cfg.lambda_l)?;
        let b = g.scale(iou, cfg.lambda_u)?;
        total = g.add(total, a)?;
        total = g.add(total, b)?;
    }
    Ok(LossParts {
        total,
        value: g.value(total).data()[0],
        kl_s: g.value(kl_s).data()[0],
        kl_e: g.value(kl_e).data()[0],
        l1: l1_v,
        iou: iou_v,
    })
}
