//! Run configuration.
//!
//! A run is fully described by one TOML file with `[model]`, `[world]`,
//! `[loss]`, `[train]`, `[eval]` and `[ablate]` sections. Every key has a
//! default, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryInsert {
    /// Insert the block's incoming query before selection.
    PreBlock,
    /// Insert the block's output query after decoding.
    PostBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IouLossKind {
    Giou,
    Iou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared hidden width `C`.
    pub width: usize,
    pub heads: usize,
    /// Self-attention encoder blocks `N`.
    pub encoder_blocks: usize,
    /// Decoder blocks `K` (and memory partitions per bank).
    pub decoder_blocks: usize,
    pub mlp_ratio: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Input width of the appearance embedder.
    pub appearance_dim: usize,
    /// Input width of the motion embedder.
    pub motion_dim: usize,
    /// Width of the token embedding table.
    pub text_dim: usize,
    /// Padded query length `N_t`.
    pub text_len: usize,
    pub vocab_size: usize,
    /// Spatial memories kept by top-`N_s` text-similarity selection.
    pub n_s: usize,
    pub spatial_selector: String,
    pub temporal_selector: String,
    pub decoder_design: String,
    pub memory_insert: MemoryInsert,
    pub similarity: Similarity,
    /// Boundary when adjacent similarity drops below `mean - alpha * std`.
    pub boundary_alpha: f64,
    /// Absolute similarity threshold; replaces the relative rule when set.
    pub boundary_threshold: Option<f64>,
    /// Per-partition capacity with oldest-first eviction; unbounded when unset.
    pub memory_capacity: Option<usize>,
    /// Temperature of the soft region membership used while training.
    pub roi_temperature: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            mlp_ratio: 2,
            grid_h: 8,
            grid_w: 8,
            appearance_dim: 8,
            motion_dim: 8,
            text_dim: 16,
            text_len: 30,
            vocab_size: crate::world::Vocabulary::standard().len(),
            n_s: 32,
            spatial_selector: "text-topk".into(),
            temporal_selector: "event-suffix".into(),
            decoder_design: "cascaded".into(),
            memory_insert: MemoryInsert::PreBlock,
            similarity: Similarity::Cosine,
            boundary_alpha: 1.0,
            boundary_threshold: None,
            memory_capacity: None,
            roi_temperature: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Dimensions used with real backbones: `C = 256`, `N = 6`, `N_t = 30`,
    /// appearance 2048, motion 768 and text 768 channels.
    pub fn reference_scale() -> Self {
        Self {
            width: 256,
            heads: 8,
            encoder_blocks: 6,
            appearance_dim: 2048,
            motion_dim: 768,
            text_dim: 768,
            text_len: 30,
            ..Self::default()
        }
    }

    /// Length of the fused token sequence `2·H·W + N_t`.
    pub fn fused_len(&self) -> usize {
        2 * self.grid_h * self.grid_w + self.text_len
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("width", self.width),
            ("heads", self.heads),
            ("decoder_blocks", self.decoder_blocks),
            ("mlp_ratio", self.mlp_ratio),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("appearance_dim", self.appearance_dim),
            ("motion_dim", self.motion_dim),
            ("text_dim", self.text_dim),
            ("text_len", self.text_len),
            ("vocab_size", self.vocab_size),
            ("n_s", self.n_s),
        ];
        for (name, v) in dims {
            if v < 1 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.width {} not divisible by model.heads {}",
                self.width, self.heads
            )));
        }
        if self.roi_temperature <= 0.0 {
            return Err(Error::Config("model.roi_temperature must be > 0".into()));
        }
        if self.memory_capacity == Some(0) {
            return Err(Error::Config("model.memory_capacity must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub actors: usize,
    pub events: usize,
    pub min_event_len: usize,
    pub max_event_len: usize,
    pub min_box: f64,
    pub max_box: f64,
    /// Per-frame displacement cap, in normalised coordinates.
    pub max_step: f64,
    /// Speed of actors that are not performing an event.
    pub idle_speed: f64,
    pub noise: f64,
    /// Probability that an actor's type signature is drawn in a frame.
    pub type_visibility: f64,
    /// Frames at an event's start that show the action signature (0 = all).
    pub cue_frames: usize,
    pub text_len: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            grid_h: 8,
            grid_w: 8,
            channels: 8,
            actors: 2,
            events: 3,
            min_event_len: 4,
            max_event_len: 8,
            min_box: 0.2,
            max_box: 0.35,
            max_step: 0.08,
            idle_speed: 0.0,
            noise: 0.02,
            type_visibility: 1.0,
            cue_frames: 0,
            text_len: 30,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 4 {
            return Err(Error::Config("world.frames must be >= 4".into()));
        }
        if self.actors < 1 {
            return Err(Error::Config("world.actors must be >= 1".into()));
        }
        if self.events < 1 {
            return Err(Error::Config("world.events must be >= 1".into()));
        }
        if self.grid_h < 1 || self.grid_w < 1 || self.channels < 1 {
            return Err(Error::Config("world grid dimensions must be >= 1".into()));
        }
        if self.min_event_len < 1 || self.min_event_len > self.max_event_len {
            return Err(Error::Config(
                "world.min_event_len must be in 1..=max_event_len".into(),
            ));
        }
        if self.events * self.min_event_len > self.frames {
            return Err(Error::Config(format!(
                "{} events of length >= {} do not fit in {} frames",
                self.events, self.min_event_len, self.frames
            )));
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box && self.max_box <= 1.0) {
            return Err(Error::Config("world box size range must satisfy 0 < min <= max <= 1".into()));
        }
        if self.max_step < 0.0 || self.idle_speed < 0.0 || self.idle_speed > self.max_step {
            return Err(Error::Config(
                "world speeds must satisfy 0 <= idle_speed <= max_step".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.type_visibility) {
            return Err(Error::Config("world.type_visibility must be in [0, 1]".into()));
        }
        if self.text_len < 2 {
            return Err(Error::Config("world.text_len must hold a two-word query".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_k: f64,
    pub lambda_l: f64,
    pub lambda_u: f64,
    /// Gaussian smoothing of the start/end targets, in frames (0 = one-hot).
    pub kl_sigma: f64,
    pub smooth_l1_beta: f64,
    pub iou_kind: IouLossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_k: 10.0,
            lambda_l: 5.0,
            lambda_u: 3.0,
            kl_sigma: 0.0,
            smooth_l1_beta: 0.1,
            iou_kind: IouLossKind::Giou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub steps: usize,
    /// Episodes whose gradients are averaged per optimiser step.
    pub batch: usize,
    /// Episodes generated for the training set.
    pub episodes: usize,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Pool motion features under the ground-truth box instead of the prediction.
    pub teacher_forcing: bool,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            steps: 1000,
            batch: 1,
            episodes: 8,
            checkpoint_every: 0,
            teacher_forcing: false,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.clip_norm <= 0.0 || self.batch < 1 || self.episodes < 1 {
            return Err(Error::Config(
                "train: lr >= 0, clip_norm > 0, batch >= 1 and episodes >= 1 required".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Offset added to the run seed for held-out episodes.
    pub seed_offset: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 16,
            seed_offset: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Named variants to train; see [`crate::ablation::Variant::named`].
    pub variants: Vec<String>,
    pub n_s_values: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: crate::ablation::STANDARD_VARIANTS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            n_s_values: vec![2, 4, 8],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Check internal consistency between sections.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world.validate()?;
        self.train.validate()?;
        if self.model.grid_h != self.world.grid_h || self.model.grid_w != self.world.grid_w {
            return Err(Error::Config(
                "model.grid_h/grid_w must match world.grid_h/grid_w".into(),
            ));
        }
        if self.model.appearance_dim != self.world.channels
            || self.model.motion_dim != self.world.channels
        {
            return Err(Error::Config(
                "model.appearance_dim and model.motion_dim must equal world.channels".into(),
            ));
        }
        if self.model.text_len != self.world.text_len {
            return Err(Error::Config("model.text_len must equal world.text_len".into()));
        }
        Ok(())
    }

    /// Override a single `section.key` with a TOML value literal.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc: toml::Value =
            toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        let mut cur = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: not a table")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed);
                break;
            }
            cur = table
                .get_mut(*part)
                .ok_or_else(|| Error::Config(format!("unknown config section {part:?}")))?;
        }
        let updated: RunConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}
