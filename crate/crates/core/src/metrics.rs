//! Grounding metrics and evaluation reports.

use serde::{Deserialize, Serialize};

use crate::boxes::{box_iou, BBox};
use crate::engine::{ground_episode, TubePrediction};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::world::Episode;

pub const THRESHOLDS: [f64; 2] = [0.3, 0.5];

fn check_segment(seg: (usize, usize)) -> Result<()> {
    if seg.0 > seg.1 {
        return Err(Error::Segment(seg.0, seg.1));
    }
    Ok(())
}

/// Temporal IoU of inclusive frame intervals, counted in frames.
pub fn t_iou(gt: (usize, usize), pred: (usize, usize)) -> Result<f64> {
    check_segment(gt)?;
    check_segment(pred)?;
    let inter = (gt.1.min(pred.1) + 1).saturating_sub(gt.0.max(pred.0));
    let union = (gt.1 - gt.0 + 1) + (pred.1 - pred.0 + 1) - inter;
    Ok(inter as f64 / union as f64)
}

/// A segment with one box per frame of the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub segment: (usize, usize),
    pub boxes: Vec<BBox>,
}

impl Tube {
    pub fn new(segment: (usize, usize), boxes: Vec<BBox>) -> Result<Self> {
        check_segment(segment)?;
        if boxes.len() != segment.1 - segment.0 + 1 {
            return Err(Error::Dimension(format!(
                "segment ({}, {}) needs {} boxes, got {}",
                segment.0,
                segment.1,
                segment.1 - segment.0 + 1,
                boxes.len()
            )));
        }
        Ok(Self { segment, boxes })
    }

    pub fn box_at(&self, frame: usize) -> Option<BBox> {
        (self.segment.0..=self.segment.1)
            .contains(&frame)
            .then(|| self.boxes[frame - self.segment.0])
    }

    /// Tube of a prediction: its segment and the boxes inside it.
    pub fn from_prediction(pred: &TubePrediction) -> Result<Self> {
        let (s, e) = pred.segment;
        if e >= pred.boxes.len() {
            return Err(Error::Segment(s, e));
        }
        Tube::new(pred.segment, pred.boxes[s..=e].to_vec())
    }

    pub fn from_episode(ep: &Episode) -> Result<Self> {
        Tube::new(ep.segment, ep.gt_boxes.clone())
    }
}

/// Sum of box IoUs over frames in both segments, divided by the union length.
pub fn v_iou(gt: &Tube, pred: &Tube) -> Result<f64> {
    let lo = gt.segment.0.max(pred.segment.0);
    let hi = gt.segment.1.min(pred.segment.1);
    let inter = (hi + 1).saturating_sub(lo);
    let union = (gt.segment.1 - gt.segment.0 + 1) + (pred.segment.1 - pred.segment.0 + 1) - inter;
    let mut sum = 0.0;
    if lo <= hi {
        for f in lo..=hi {
            sum += box_iou(gt.box_at(f).expect("in gt"), pred.box_at(f).expect("in pred"))?;
        }
    }
    Ok(sum / union as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub index: usize,
    pub seed: u64,
    pub gt_segment: (usize, usize),
    pub pred_segment: (usize, usize),
    pub t_iou: f64,
    pub v_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub m_tiou: f64,
    pub m_viou: f64,
    pub viou_at_03: f64,
    pub viou_at_05: f64,
    pub samples: Vec<SampleRow>,
}

impl EvalReport {
    /// Means and threshold rates of per-sample rows.
    pub fn from_rows(samples: Vec<SampleRow>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("evaluation set".into()));
        }
        let n = samples.len() as f64;
        let rate = |r: f64| samples.iter().filter(|s| s.v_iou > r).count() as f64 / n;
        Ok(Self {
            m_tiou: samples.iter().map(|s| s.t_iou).sum::<f64>() / n,
            m_viou: samples.iter().map(|s| s.v_iou).sum::<f64>() / n,
            viou_at_03: rate(THRESHOLDS[0]),
            viou_at_05: rate(THRESHOLDS[1]),
            samples,
        })
    }

    /// Report-level invariants; per-sample vIoU never exceeds tIoU.
    pub fn check_invariants(&self) -> Result<()> {
        const EPS: f64 = 1e-12;
        for s in &self.samples {
            if !(0.0..=1.0 + EPS).contains(&s.t_iou) || s.v_iou < -EPS || s.v_iou > s.t_iou + EPS {
                return Err(Error::Format {
                    what: "eval report",
                    detail: format!("sample {}: vIoU {} tIoU {}", s.index, s.v_iou, s.t_iou),
                });
            }
        }
        if self.m_viou > self.m_tiou + EPS || self.viou_at_05 > self.viou_at_03 + EPS {
            return Err(Error::Format {
                what: "eval report",
                detail: "summary metrics out of order".into(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Aligned text table: one header row and one row of percentages.
    pub fn table(&self, label: &str) -> String {
        format_table(&[(label.to_string(), self)])
    }
}

/// Aligned table of several labelled reports, metrics in percent.
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let headers = ["Variant", "m_tIoU", "m_vIoU", "vIoU@0.3", "vIoU@0.5"];
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|(label, r)| {
            [
                label.clone(),
                format!("{:.1}", 100.0 * r.m_tiou),
                format!("{:.1}", 100.0 * r.m_viou),
                format!("{:.1}", 100.0 * r.viou_at_03),
                format!("{:.1}", 100.0 * r.viou_at_05),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |items: &[&str]| -> String {
        items
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&headers);
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for row in &cells {
        let refs: Vec<&str> = row.iter().map(String::as_str).collect();
        out.push_str(&line(&refs));
        out.push('\n');
    }
    out
}

/// Score one prediction against an episode.
pub fn score(index: usize, ep: &Episode, pred: &TubePrediction) -> Result<SampleRow> {
    let gt = Tube::from_episode(ep)?;
    let pt = Tube::from_prediction(pred)?;
    Ok(SampleRow {
        index,
        seed: ep.seed,
        gt_segment: ep.segment,
        pred_segment: pred.segment,
        t_iou: t_iou(ep.segment, pred.segment)?,
        v_iou: v_iou(&gt, &pt)?,
    })
}

/// Anything that produces a tube for an episode.
pub trait Grounder {
    fn predict(&self, ep: &Episode) -> Result<TubePrediction>;
}

impl Grounder for Model {
    fn predict(&self, ep: &Episode) -> Result<TubePrediction> {
        ground_episode(self, ep)
    }
}

/// Returns the ground truth; useful as a reference point.
pub struct OracleGrounder;

impl Grounder for OracleGrounder {
    fn predict(&self, ep: &Episode) -> Result<TubePrediction> {
        let t = ep.len();
        let mut boxes = vec![BBox::new(0.5, 0.5, 1.0, 1.0); t];
        for (i, b) in boxes.iter_mut().enumerate() {
            if let Some(g) = ep.gt_box(i) {
                *b = g;
            }
        }
        let (s, e) = ep.segment;
        let peak = |k: usize| (0..t).map(|i| if i == k { 50.0 } else { 0.0 }).collect();
        Ok(TubePrediction {
            boxes,
            start_scores: peak(s),
            end_scores: peak(e),
            segment: (s, e),
        })
    }
}

/// Evaluate a grounder over a dataset. Rows keep dataset order.
pub fn evaluate(data: &[Episode], grounder: &dyn Grounder) -> Result<EvalReport> {
    let rows = data
        .iter()
        .enumerate()
        .map(|(i, ep)| score(i, ep, &grounder.predict(ep)?))
        .collect::<Result<Vec<_>>>()?;
    let report = EvalReport::from_rows(rows)?;
    report.check_invariants()?;
    Ok(report)
}
