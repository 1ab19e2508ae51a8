//! Optimiser, episode loss and the training loop.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tubestream_tensor::{rng, Rng, Tensor, TensorError};

use crate::checkpoint::{AdamMoments, Checkpoint};
use crate::config::{LossConfig, TrainConfig};
use crate::decoder::RoiMode;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossParts};
use crate::model::{FrameInput, FrameOptions, Model};
use crate::params::{Graph, ParamStore};
use crate::world::{encode_query_tokens, render_frame_features, Episode};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: AdamMoments,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, params: &ParamStore) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            moments: AdamMoments { t: 0, m: zeros(), v: zeros() },
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        let st = &mut self.moments;
        st.t += 1;
        let c1 = 1.0 - self.beta1.powi(st.t as i32);
        let c2 = 1.0 - self.beta2.powi(st.t as i32);
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[i].data();
            let m = st.m[i].data_mut();
            let v = st.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// How frames are run during training.
#[derive(Debug, Clone, Copy)]
pub struct TrainForward {
    pub roi: RoiMode,
    pub teacher_forcing: bool,
}

impl TrainForward {
    pub fn for_model(model: &Model, teacher_forcing: bool) -> Self {
        Self {
            roi: RoiMode::Soft { temperature: model.config.roi_temperature },
            teacher_forcing,
        }
    }
}

/// Run a whole episode on one tape and build its loss.
pub fn episode_loss(g: &mut Graph, model: &Model, ep: &Episode, loss: &LossConfig, fwd: TrainForward) -> Result<LossParts> {
    let (tokens, mask) = encode_query_tokens(ep, model.config.text_len)?;
    let mut banks = model.new_banks();
    let mut boxes = Vec::with_capacity(ep.len());
    let mut logits = Vec::with_capacity(ep.len());
    for i in 0..ep.len() {
        let (app, mot) = render_frame_features(ep, i)?;
        let input = FrameInput {
            frame: i,
            appearance: &app,
            motion: &mot,
            tokens: &tokens,
            mask: &mask,
        };
        let opts = FrameOptions {
            roi: fwd.roi,
            teacher_box: if fwd.teacher_forcing { ep.gt_box(i) } else { None },
        };
        let vars = model.forward_frame(g, &mut banks, &input, &opts)?;
        boxes.push(vars.bbox);
        logits.push(vars.logits);
    }
    let boxes = g.concat_rows(&boxes)?;
    let logits = g.concat_rows(&logits)?;
    let gt: Vec<_> = (0..ep.len()).map(|i| ep.gt_box(i)).collect();
    total_loss(g, boxes, logits, ep.segment, &gt, loss)
}

/// Loss values and parameter gradients for one episode.
pub fn episode_gradients(model: &Model, ep: &Episode, loss: &LossConfig, fwd: TrainForward) -> Result<(LossParts, Vec<Tensor>)> {
    let mut g = Graph::new(&model.params, true);
    let parts = episode_loss(&mut g, model, ep, loss, fwd)?;
    g.backward(parts.total)?;
    Ok((parts, g.param_grads()))
}

/// Loss value only, without recording gradients.
pub fn episode_loss_value(model: &Model, ep: &Episode, loss: &LossConfig, fwd: TrainForward) -> Result<f64> {
    let mut g = Graph::new(&model.params, false);
    Ok(episode_loss(&mut g, model, ep, loss, fwd)?.value)
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub kl_s: f64,
    pub kl_e: f64,
    pub l1: f64,
    pub iou: f64,
}

impl StepLog {
    pub const HEADER: &'static str = "step,loss,kl_s,kl_e,l1,iou";

    pub fn csv(&self) -> String {
        format!(
            "{},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
            self.step, self.loss, self.kl_s, self.kl_e, self.l1, self.iou
        )
    }
}

#[derive(Serialize, Deserialize)]
struct TrainerState {
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

/// Training run state: model, optimiser, data order and counters.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub step: u64,
    pub epoch: u64,
    rng: Rng,
    order: Vec<usize>,
    cursor: usize,
    episodes: usize,
    /// Where periodic checkpoints go.
    pub checkpoint_path: Option<PathBuf>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, loss: LossConfig, episodes: usize, seed: u64) -> Result<Self> {
        if episodes == 0 {
            return Err(Error::Empty("training set".into()));
        }
        config.validate()?;
        let adam = Adam::new(&config, &model.params);
        let mut t = Self {
            model,
            adam,
            config,
            loss,
            step: 0,
            epoch: 0,
            rng: rng::derive(seed, 7),
            order: Vec::new(),
            cursor: 0,
            episodes,
            checkpoint_path: None,
        };
        t.reshuffle();
        Ok(t)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.episodes).collect();
        if self.config.shuffle {
            self.order.shuffle(&mut self.rng);
        }
        self.cursor = 0;
    }

    fn next_index(&mut self) -> Result<usize> {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every as u64 == 0 {
                if let Some(path) = self.checkpoint_path.clone() {
                    self.checkpoint().save(&path)?;
                }
            }
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        Ok(i)
    }

    /// One optimiser step over `batch` episodes.
    pub fn train_step(&mut self, data: &[Episode]) -> Result<StepLog> {
        if data.len() != self.episodes {
            return Err(Error::Dimension(format!(
                "trainer expects {} episodes, got {}",
                self.episodes,
                data.len()
            )));
        }
        let fwd = TrainForward::for_model(&self.model, self.config.teacher_forcing);
        let batch = self.config.batch;
        let mut log = StepLog { step: self.step, ..Default::default() };
        let mut grads: Option<Vec<Tensor>> = None;
        for _ in 0..batch {
            let idx = self.next_index()?;
            let (parts, g) = match episode_gradients(&self.model, &data[idx], &self.loss, fwd) {
                Ok(r) => r,
                Err(Error::Tensor(TensorError::NonFinite { op })) => {
                    return Err(self.diverged(idx, format!("non-finite value in {op}")));
                }
                Err(e) => return Err(e),
            };
            if !parts.value.is_finite() {
                return Err(self.diverged(idx, format!("loss {}", parts.value)));
            }
            log.loss += parts.value / batch as f64;
            log.kl_s += parts.kl_s / batch as f64;
            log.kl_e += parts.kl_e / batch as f64;
            log.l1 += parts.l1 / batch as f64;
            log.iou += parts.iou / batch as f64;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("batch >= 1");
        if batch > 1 {
            for t in &mut grads {
                for v in t.data_mut() {
                    *v /= batch as f64;
                }
            }
        }
        let norm = clip_global_norm(&mut grads, self.config.clip_norm);
        if !norm.is_finite() {
            return Err(self.diverged(usize::MAX, format!("gradient norm {norm}")));
        }
        self.adam.step(&mut self.model.params, &grads);
        self.step += 1;
        Ok(log)
    }

    fn diverged(&self, episode: usize, detail: String) -> Error {
        let norms: Vec<String> = self
            .model
            .params
            .named()
            .map(|(n, t)| format!("{n}={:.3e}", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
            .collect();
        log::error!(
            "diverged at step {} (episode {episode}): {detail}; parameter norms: {}",
            self.step,
            norms.join(" ")
        );
        Error::Diverged {
            step: self.step as usize,
            detail: format!("episode {episode}: {detail}"),
        }
    }

    /// Train for `steps` optimiser steps, writing one CSV row per step to `log`.
    pub fn run(&mut self, data: &[Episode], steps: usize, mut log: Option<&mut dyn Write>) -> Result<Vec<StepLog>> {
        let mut rows = Vec::with_capacity(steps);
        for _ in 0..steps {
            let row = self.train_step(data)?;
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let state = TrainerState {
            rng: self.rng.clone(),
            order: self.order.clone(),
            cursor: self.cursor,
        };
        let mut ck = Checkpoint::from_model(&self.model);
        ck.moments = Some(self.adam.moments.clone());
        ck.trainer = Some(serde_json::to_string(&state).expect("trainer state serialises"));
        ck.step = self.step;
        ck.epoch = self.epoch;
        ck
    }

    /// Continue a run from `ck`.
    pub fn resume(ck: &Checkpoint, config: TrainConfig, loss: LossConfig, episodes: usize, seed: u64) -> Result<Self> {
        let model = ck.to_model()?;
        let mut t = Trainer::new(model, config, loss, episodes, seed)?;
        if let Some(m) = &ck.moments {
            if m.m.len() != t.model.params.len() {
                return Err(Error::Format { what: "checkpoint", detail: "optimizer state size".into() });
            }
            t.adam.moments = m.clone();
        }
        if let Some(s) = &ck.trainer {
            let state: TrainerState = serde_json::from_str(s)
                .map_err(|e| Error::Format { what: "checkpoint", detail: e.to_string() })?;
            if state.order.len() != episodes {
                return Err(Error::Config(format!(
                    "checkpoint was trained on {} episodes, dataset has {episodes}",
                    state.order.len()
                )));
            }
            t.rng = state.rng;
            t.order = state.order;
            t.cursor = state.cursor;
        }
        t.step = ck.step;
        t.epoch = ck.epoch;
        Ok(t)
    }
}
