//! Synthetic long-form episodes.
//!
//! An episode is a sequence of low-resolution feature grids in which a few
//! actors move around and perform scripted events. Each actor paints additive
//! signature patterns onto the cells its box covers: a shared body pattern, a
//! pattern for its type (the actor word), and while acting, a pattern for the
//! action word plus start and end phase patterns on the first and last frame
//! of the event. The query names one (actor word, action word) pair and exactly
//! one scripted event matches it.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tubestream_tensor::rng;

use crate::boxes::{covered_cells, BBox};
use crate::config::WorldConfig;
use crate::error::{Error, Result};

pub const PAD: usize = 0;

const FUNCTION_WORDS: [&str; 3] = ["the", "a", "then"];
pub const ACTOR_WORDS: [&str; 4] = ["man", "woman", "child", "dog"];
pub const ACTION_WORDS: [&str; 4] = ["walks", "runs", "jumps", "waves"];

/// Closed vocabulary with dense ids; id 0 is padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    pub fn standard() -> Self {
        let mut words = vec!["<pad>".to_string()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(ACTOR_WORDS.iter().map(|w| w.to_string()));
        words.extend(ACTION_WORDS.iter().map(|w| w.to_string()));
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&str> {
        self.words
            .get(id)
            .map(String::as_str)
            .ok_or(Error::UnknownToken(id))
    }

    pub fn actor_token(&self, actor_type: usize) -> usize {
        1 + FUNCTION_WORDS.len() + actor_type
    }

    pub fn action_token(&self, action: usize) -> usize {
        1 + FUNCTION_WORDS.len() + ACTOR_WORDS.len() + action
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Inverse of [`Vocabulary::encode`]; padding is dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .filter(|&&id| id != PAD)
            .map(|&id| self.word(id).map(str::to_string))
            .collect()
    }
}

/// Right-pad `tokens` to `text_len` and return the real-token mask.
pub fn pad_tokens(tokens: &[usize], text_len: usize, vocab_size: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    if tokens.len() > text_len {
        return Err(Error::Dimension(format!(
            "query has {} tokens but text length is {text_len}",
            tokens.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::UnknownToken(bad));
    }
    let mut ids = tokens.to_vec();
    let mut mask: Vec<bool> = tokens.iter().map(|&t| t != PAD).collect();
    ids.resize(text_len, PAD);
    mask.resize(text_len, false);
    Ok((ids, mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: usize,
    pub start: usize,
    /// Inclusive last frame.
    pub end: usize,
    pub actor: usize,
    pub action: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub actor: usize,
    pub bbox: BBox,
    pub action: Option<usize>,
}

/// One frame: an `H × W × C` grid stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub grid: Vec<f64>,
    pub objects: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub query: Vec<usize>,
    pub segment: (usize, usize),
    /// Boxes for frames `segment.0..=segment.1`.
    pub gt_boxes: Vec<BBox>,
    pub events: Vec<Event>,
    pub actor_types: Vec<usize>,
    pub frames: Vec<FrameGrid>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn gt_box(&self, i: usize) -> Option<BBox> {
        let (s, e) = self.segment;
        (s..=e).contains(&i).then(|| self.gt_boxes[i - s])
    }

    /// Events whose actor type and action both match the query.
    pub fn matching_events(&self, vocab: &Vocabulary) -> Vec<&Event> {
        self.events
            .iter()
            .filter(|ev| {
                let actor = vocab.actor_token(self.actor_types[ev.actor]);
                let action = vocab.action_token(ev.action);
                self.query.contains(&actor) && self.query.contains(&action)
            })
            .collect()
    }

    /// Keep only the first `n` frames, clipping the ground truth accordingly.
    pub fn truncated(&self, n: usize) -> Result<Episode> {
        if n == 0 || n > self.len() {
            return Err(Error::OutOfRange { index: n, len: self.len() });
        }
        let mut ep = self.clone();
        ep.frames.truncate(n);
        let (s, e) = ep.segment;
        if s >= n {
            return Err(Error::Segment(s, e));
        }
        let e = e.min(n - 1);
        ep.gt_boxes.truncate(e - s + 1);
        ep.segment = (s, e);
        ep.events.retain(|ev| ev.start < n);
        for ev in &mut ep.events {
            ev.end = ev.end.min(n - 1);
        }
        Ok(ep)
    }
}

/// Raw appearance and motion grids of frame `i`.
///
/// Motion is the cellwise difference to the previous frame; the first frame
/// is its own predecessor.
pub fn render_frame_features(episode: &Episode, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = episode.len();
    if i >= n {
        return Err(Error::OutOfRange { index: i, len: n });
    }
    let cur = &episode.frames[i].grid;
    let prev = &episode.frames[i.saturating_sub(1)].grid;
    let motion = cur.iter().zip(prev).map(|(a, b)| a - b).collect();
    Ok((cur.clone(), motion))
}

/// The query right-padded to `text_len`, with its mask.
pub fn encode_query_tokens(episode: &Episode, text_len: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    pad_tokens(&episode.query, text_len, Vocabulary::standard().len())
}

/// Fixed signature patterns shared by all episodes with the same channel count.
#[derive(Debug, Clone)]
pub struct Signatures {
    pub body: Vec<f64>,
    pub types: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl Signatures {
    pub fn new(channels: usize) -> Self {
        // A fixed stream keeps the patterns identical across runs and seeds.
        let mut r = rng::seeded(0x5151_6e61_7475_7265);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut pattern = || -> Vec<f64> {
            let v: Vec<f64> = (0..channels).map(|_| normal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        };
        let body = pattern();
        let types = (0..ACTOR_WORDS.len()).map(|_| pattern()).collect();
        let actions = (0..ACTION_WORDS.len()).map(|_| pattern()).collect();
        let start = pattern();
        let end = pattern();
        Self { body, types, actions, start, end }
    }
}

struct Actor {
    kind: usize,
    bbox: BBox,
    vx: f64,
    vy: f64,
}

impl Actor {
    fn advance(&mut self, speed: f64, r: &mut rng::Rng) {
        if speed <= 0.0 {
            return;
        }
        // Small heading jitter keeps trajectories from being straight lines.
        let angle = self.vy.atan2(self.vx) + r.random_range(-0.4..0.4);
        self.vx = angle.cos() * speed;
        self.vy = angle.sin() * speed;
        let (hw, hh) = (self.bbox.w / 2.0, self.bbox.h / 2.0);
        let mut x = self.bbox.cx + self.vx;
        let mut y = self.bbox.cy + self.vy;
        if x < hw || x > 1.0 - hw {
            self.vx = -self.vx;
            x = x.clamp(hw, 1.0 - hw);
        }
        if y < hh || y > 1.0 - hh {
            self.vy = -self.vy;
            y = y.clamp(hh, 1.0 - hh);
        }
        self.bbox.cx = x;
        self.bbox.cy = y;
    }
}

/// Generate one episode. Pure in `(config, seed)`.
pub fn generate_episode(config: &WorldConfig, seed: u64) -> Result<Episode> {
    if config.events == 0 {
        return Err(Error::Config("world.events must be >= 1".into()));
    }
    config.validate()?;
    let mut r = rng::seeded(seed);
    let vocab = Vocabulary::standard();
    let sigs = Signatures::new(config.channels);
    let n_types = ACTOR_WORDS.len();
    let n_actions = ACTION_WORDS.len();

    let mut actors: Vec<Actor> = (0..config.actors)
        .map(|_| {
            let w = r.random_range(config.min_box..=config.max_box);
            let h = r.random_range(config.min_box..=config.max_box);
            let cx = r.random_range(w / 2.0..=1.0 - w / 2.0);
            let cy = r.random_range(h / 2.0..=1.0 - h / 2.0);
            let angle: f64 = r.random_range(0.0..std::f64::consts::TAU);
            Actor {
                kind: r.random_range(0..n_types),
                bbox: BBox::new(cx, cy, w, h),
                vx: angle.cos(),
                vy: angle.sin(),
            }
        })
        .collect();

    let events = script_events(config, &actors, &mut r)?;
    let target = r.random_range(0..events.len());
    let query_kind = actors[events[target].actor].kind;
    let query_action = events[target].action;
    // Distractors may share one query word, never both.
    let mut events = events;
    for (j, ev) in events.iter_mut().enumerate() {
        if j == target {
            continue;
        }
        if actors[ev.actor].kind == query_kind && ev.action == query_action {
            let others: Vec<usize> = (0..n_actions).filter(|&a| a != query_action).collect();
            ev.action = *others.choose(&mut r).expect("at least two actions");
        }
    }
    let query = vec![vocab.actor_token(query_kind), vocab.action_token(query_action)];
    let target_event = events[target];

    let cells = config.grid_h * config.grid_w;
    let c = config.channels;
    let noise = Normal::new(0.0, config.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut frames = Vec::with_capacity(config.frames);
    let mut gt_boxes = Vec::new();
    for i in 0..config.frames {
        let active: Vec<Option<&Event>> = (0..actors.len())
            .map(|a| events.iter().find(|ev| ev.actor == a && (ev.start..=ev.end).contains(&i)))
            .collect();
        if i > 0 {
            for (a, actor) in actors.iter_mut().enumerate() {
                let speed = if active[a].is_some() { config.max_step } else { config.idle_speed };
                actor.advance(speed, &mut r);
            }
        }
        let mut grid = vec![0.0; cells * c];
        let mut objects = Vec::with_capacity(actors.len());
        for (a, actor) in actors.iter().enumerate() {
            let ev = active[a];
            let mut pattern = sigs.body.clone();
            if r.random::<f64>() < config.type_visibility {
                add(&mut pattern, &sigs.types[actor.kind]);
            }
            if let Some(ev) = ev {
                if config.cue_frames == 0 || i < ev.start + config.cue_frames {
                    add(&mut pattern, &sigs.actions[ev.action]);
                }
                if i == ev.start {
                    add(&mut pattern, &sigs.start);
                }
                if i == ev.end {
                    add(&mut pattern, &sigs.end);
                }
            }
            let (covered, _) = covered_cells(config.grid_h, config.grid_w, actor.bbox);
            for cell in covered {
                add(&mut grid[cell * c..(cell + 1) * c], &pattern);
            }
            objects.push(SceneObject {
                actor: a,
                bbox: actor.bbox,
                action: ev.map(|e| e.action),
            });
        }
        if config.noise > 0.0 {
            for v in &mut grid {
                *v += noise.sample(&mut r);
            }
        }
        if (target_event.start..=target_event.end).contains(&i) {
            gt_boxes.push(actors[target_event.actor].bbox);
        }
        frames.push(FrameGrid { grid, objects });
    }

    Ok(Episode {
        seed,
        grid_h: config.grid_h,
        grid_w: config.grid_w,
        channels: c,
        query,
        segment: (target_event.start, target_event.end),
        gt_boxes,
        events,
        actor_types: actors.iter().map(|a| a.kind).collect(),
        frames,
    })
}

/// Generate `count` episodes with seeds derived from `seed`.
pub fn generate_dataset(config: &WorldConfig, seed: u64, count: usize) -> Result<Vec<Episode>> {
    (0..count)
        .map(|k| generate_episode(config, episode_seed(seed, k)))
        .collect()
}

pub fn episode_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

fn add(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Non-overlapping, ordered events with random lengths and gaps.
fn script_events(config: &WorldConfig, actors: &[Actor], r: &mut rng::Rng) -> Result<Vec<Event>> {
    let n = config.events;
    let mut lens: Vec<usize> = (0..n)
        .map(|_| r.random_range(config.min_event_len..=config.max_event_len))
        .collect();
    while lens.iter().sum::<usize>() > config.frames {
        let longest = (0..n).max_by_key(|&j| (lens[j], usize::MAX - j)).expect("n >= 1");
        if lens[longest] <= config.min_event_len {
            return Err(Error::Config("events do not fit in the episode".into()));
        }
        lens[longest] -= 1;
    }
    let free = config.frames - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..n).map(|_| r.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for j in 0..n {
        cursor += cuts[j] - prev_cut;
        prev_cut = cuts[j];
        let start = cursor;
        let end = start + lens[j] - 1;
        cursor = end + 1;
        events.push(Event {
            id: j,
            start,
            end,
            actor: r.random_range(0..actors.len()),
            action: r.random_range(0..ACTION_WORDS.len()),
        });
    }
    Ok(events)
}
