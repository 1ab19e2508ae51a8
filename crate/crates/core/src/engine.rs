//! Streaming inference: frames are pushed one at a time, memory banks carry
//! information forward, and the tube is assembled once the stream ends.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::model::{Banks, FrameInput, FrameOptions, Model};
use crate::params::Graph;
use crate::world::{encode_query_tokens, Episode};

/// Everything a stream needs to continue after a pause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamState {
    pub banks: Banks,
    /// Index of the next frame.
    pub cursor: usize,
    pub prev_frame: Option<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
    pub boxes: Vec<BBox>,
    /// Per-frame start logits.
    pub start_scores: Vec<f64>,
    /// Per-frame end logits.
    pub end_scores: Vec<f64>,
    /// Largest per-frame activation footprint seen, in `f64` values.
    pub peak_activation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub bbox: BBox,
    pub start_score: f64,
    pub end_score: f64,
    pub activation: usize,
}

impl StreamState {
    pub fn new(model: &Model, tokens: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        if tokens.len() != model.config.text_len || mask.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "query must be padded to {} tokens",
                model.config.text_len
            )));
        }
        Ok(Self {
            banks: model.new_banks(),
            cursor: 0,
            prev_frame: None,
            tokens,
            mask,
            boxes: Vec::new(),
            start_scores: Vec::new(),
            end_scores: Vec::new(),
            peak_activation: 0,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stream state serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format { what: "stream state", detail: e.to_string() })
    }

    /// Predictions gathered so far, with the decoded segment.
    pub fn prediction(&self) -> Result<TubePrediction> {
        let segment = decode_segment(&self.start_scores, &self.end_scores)?;
        Ok(TubePrediction {
            boxes: self.boxes.clone(),
            start_scores: self.start_scores.clone(),
            end_scores: self.end_scores.clone(),
            segment,
        })
    }
}

/// Process frame `frame` (its raw `H × W × C_raw` grid). Frames must arrive in order.
pub fn step(model: &Model, state: &mut StreamState, frame: usize, grid: &[f64]) -> Result<FrameOutput> {
    if frame != state.cursor {
        return Err(Error::OutOfOrder { expected: state.cursor, got: frame });
    }
    let expected = model.cells() * model.config.appearance_dim;
    if grid.len() != expected {
        return Err(Error::Dimension(format!("frame grid has {} values, expected {expected}", grid.len())));
    }
    let prev = state.prev_frame.as_deref().unwrap_or(grid);
    let motion: Vec<f64> = grid.iter().zip(prev).map(|(a, b)| a - b).collect();
    let mut g = Graph::new(&model.params, false);
    let input = FrameInput {
        frame,
        appearance: grid,
        motion: &motion,
        tokens: &state.tokens,
        mask: &state.mask,
    };
    let vars = model.forward_frame(&mut g, &mut state.banks, &input, &FrameOptions::inference())?;
    let b = g.value(vars.bbox).data();
    let bbox = BBox::new(b[0], b[1], b[2], b[3]);
    let l = g.value(vars.logits).data();
    let (hs, he) = (l[0], l[1]);
    let activation = g.activation_len();
    drop(g);
    state.banks.detach();
    state.prev_frame = Some(grid.to_vec());
    state.cursor += 1;
    state.boxes.push(bbox);
    state.start_scores.push(hs);
    state.end_scores.push(he);
    state.peak_activation = state.peak_activation.max(activation);
    Ok(FrameOutput {
        frame,
        bbox,
        start_score: hs,
        end_score: he,
        activation,
    })
}

/// Per-frame boxes and start/end scores of a whole stream, plus the segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubePrediction {
    pub boxes: Vec<BBox>,
    pub start_scores: Vec<f64>,
    pub end_scores: Vec<f64>,
    pub segment: (usize, usize),
}

impl TubePrediction {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Ground a query in a sequence of raw frame grids.
pub fn ground(model: &Model, frames: &[&[f64]], tokens: Vec<usize>, mask: Vec<bool>) -> Result<TubePrediction> {
    if frames.is_empty() {
        return Err(Error::Empty("video has no frames".into()));
    }
    let mut state = StreamState::new(model, tokens, mask)?;
    for (i, f) in frames.iter().enumerate() {
        step(model, &mut state, i, f)?;
    }
    state.prediction()
}

pub fn ground_episode(model: &Model, episode: &Episode) -> Result<TubePrediction> {
    let (tokens, mask) = encode_query_tokens(episode, model.config.text_len)?;
    let frames: Vec<&[f64]> = episode.frames.iter().map(|f| f.grid.as_slice()).collect();
    ground(model, &frames, tokens, mask)
}

/// Most probable `(s, e)` with `s <= e` under independent softmaxes over frames.
///
/// Ties go to the smaller start, then the smaller end.
pub fn decode_segment(start_scores: &[f64], end_scores: &[f64]) -> Result<(usize, usize)> {
    let t = start_scores.len();
    if t == 0 || end_scores.len() != t {
        return Err(Error::Dimension(format!(
            "score lists of lengths {t} and {} must be equal and non-empty",
            end_scores.len()
        )));
    }
    let ps = tubestream_tensor::kernels::softmax(start_scores);
    let pe = tubestream_tensor::kernels::softmax(end_scores);
    let mut suffix_max = pe.clone();
    for i in (0..t - 1).rev() {
        suffix_max[i] = suffix_max[i].max(suffix_max[i + 1]);
    }
    let mut best = f64::NEG_INFINITY;
    let mut s = 0;
    for i in 0..t {
        let v = ps[i] * suffix_max[i];
        if v > best {
            best = v;
            s = i;
        }
    }
    let e = (s..t).find(|&j| ps[s] * pe[j] == best).expect("suffix maximum is attained");
    Ok((s, e))
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    hs: f64,
    he: f64,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    segment: [usize; 2],
}

/// One JSON record per frame followed by a trailer with the segment.
pub fn write_tube_jsonl(pred: &TubePrediction, out: &mut impl Write) -> Result<()> {
    for (i, b) in pred.boxes.iter().enumerate() {
        let rec = FrameRecord {
            frame: i,
            bbox: b.to_array(),
            hs: pred.start_scores[i],
            he: pred.end_scores[i],
        };
        writeln!(out, "{}", serde_json::to_string(&rec).expect("record serialises"))?;
    }
    let trailer = Trailer { segment: [pred.segment.0, pred.segment.1] };
    writeln!(out, "{}", serde_json::to_string(&trailer).expect("trailer serialises"))?;
    Ok(())
}

pub fn read_tube_jsonl(text: &str) -> Result<TubePrediction> {
    let err = |d: String| Error::Format { what: "tube", detail: d };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let (last, body) = lines.split_last().ok_or_else(|| err("empty file".into()))?;
    let trailer: Trailer = serde_json::from_str(last).map_err(|e| err(e.to_string()))?;
    let mut pred = TubePrediction {
        boxes: Vec::new(),
        start_scores: Vec::new(),
        end_scores: Vec::new(),
        segment: (trailer.segment[0], trailer.segment[1]),
    };
    for line in body {
        let rec: FrameRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        pred.boxes.push(BBox::from_array(rec.bbox));
        pred.start_scores.push(rec.hs);
        pred.end_scores.push(rec.he);
    }
    Ok(pred)
}
