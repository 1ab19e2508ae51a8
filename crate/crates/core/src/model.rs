//! The full grounding model and its per-frame forward pass.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tubestream_tensor::{rng, Tensor, Var};

use crate::boxes::BBox;
use crate::config::ModelConfig;
use crate::decoder::{DecodeOptions, DecoderDesign, MotionInput, QueryDecoder, RoiMode};
use crate::encoder::{Encoder, MultimodalFeature};
use crate::error::{Error, Result};
use crate::memory::{mean_pool, BankKind, BoundaryRule, MemoryBank, MemorySelector, Registry, SelectedMemory, SelectionContext};
use crate::nn::Mlp;
use crate::params::{Graph, ParamStore};

/// Spatial and temporal banks of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Banks {
    pub spatial: MemoryBank,
    pub temporal: MemoryBank,
}

impl Banks {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            spatial: MemoryBank::new(BankKind::Spatial, cfg.decoder_blocks, cfg.width, cfg.memory_capacity),
            temporal: MemoryBank::new(BankKind::Temporal, cfg.decoder_blocks, cfg.width, cfg.memory_capacity),
        }
    }

    pub fn detach(&mut self) {
        self.spatial.detach();
        self.temporal.detach();
    }

    pub fn stored_len(&self) -> usize {
        self.spatial.stored_len() + self.temporal.stored_len()
    }
}

/// Inputs of one frame.
#[derive(Debug, Clone, Copy)]
pub struct FrameInput<'a> {
    pub frame: usize,
    /// `HW × C_raw`, cells row-major.
    pub appearance: &'a [f64],
    pub motion: &'a [f64],
    pub tokens: &'a [usize],
    pub mask: &'a [bool],
}

/// Per-frame forward options.
#[derive(Debug, Clone, Copy)]
pub struct FrameOptions {
    pub roi: RoiMode,
    /// Pool motion under this box instead of the prediction.
    pub teacher_box: Option<BBox>,
}

impl FrameOptions {
    pub fn inference() -> Self {
        Self { roi: RoiMode::Hard, teacher_box: None }
    }
}

/// Tape handles of one frame's outputs.
#[derive(Debug, Clone)]
pub struct FrameVars {
    pub features: MultimodalFeature,
    /// `1 × 4` box in `(0, 1)`.
    pub bbox: Var,
    /// `1 × 2` start and end logits.
    pub logits: Var,
    pub spatial_query: Var,
    pub temporal_query: Var,
    pub motion_context: Var,
    pub spatial_selection: Vec<SelectedMemory>,
    pub temporal_selection: Vec<SelectedMemory>,
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub spatial: QueryDecoder,
    pub temporal: QueryDecoder,
    pub spatial_head: Mlp,
    pub temporal_head: Mlp,
    pub spatial_selector: Arc<dyn MemorySelector>,
    pub temporal_selector: Arc<dyn MemorySelector>,
    pub design: Arc<dyn DecoderDesign>,
}

impl Model {
    /// Fresh model with parameters drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let selectors = Registry::<dyn MemorySelector>::selectors();
        let spatial_selector = selectors.create(&config.spatial_selector)?;
        let temporal_selector = selectors.create(&config.temporal_selector)?;
        let design = Registry::<dyn DecoderDesign>::designs().create(&config.decoder_design)?;
        let mut r = rng::seeded(config.init_seed);
        let mut params = ParamStore::new();
        let c = config.width;
        let encoder = Encoder::new(&mut params, &config, &mut r);
        let spatial = QueryDecoder::new(&mut params, "spatial", config.decoder_blocks, c, config.heads, config.mlp_ratio, &mut r);
        let temporal = QueryDecoder::new(&mut params, "temporal", config.decoder_blocks, c, config.heads, config.mlp_ratio, &mut r);
        let spatial_head = Mlp::new(&mut params, "spatial.head", c, 4, &mut r);
        let temporal_head = Mlp::new(&mut params, "temporal.head", c, 2, &mut r);
        Ok(Self {
            config,
            params,
            encoder,
            spatial,
            temporal,
            spatial_head,
            temporal_head,
            spatial_selector,
            temporal_selector,
            design,
        })
    }

    pub fn new_banks(&self) -> Banks {
        Banks::new(&self.config)
    }

    pub fn boundary_rule(&self) -> BoundaryRule {
        match self.config.boundary_threshold {
            Some(threshold) => BoundaryRule::Absolute { threshold },
            None => BoundaryRule::Relative { alpha: self.config.boundary_alpha },
        }
    }

    pub fn cells(&self) -> usize {
        self.config.grid_h * self.config.grid_w
    }

    /// Box from the final spatial query: sigmoid of the head output.
    pub fn spatial_head_forward(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let out = self.spatial_head.forward(g, q)?;
        Ok(g.sigmoid(out)?)
    }

    /// Start and end logits from the final temporal query.
    pub fn temporal_logits(&self, g: &mut Graph, p: Var) -> Result<Var> {
        self.temporal_head.forward(g, p)
    }

    /// Start and end probabilities in `(0, 1)`.
    pub fn temporal_head_forward(&self, g: &mut Graph, p: Var) -> Result<Var> {
        let logits = self.temporal_logits(g, p)?;
        Ok(g.sigmoid(logits)?)
    }

    /// Encode, decode both queries and predict box and start/end logits for one frame.
    pub fn forward_frame(&self, g: &mut Graph, banks: &mut Banks, input: &FrameInput<'_>, opts: &FrameOptions) -> Result<FrameVars> {
        let c = self.config.width;
        let mm = self.encoder.forward(g, input.appearance, input.motion, input.tokens, input.mask)?;
        let pooled = mean_pool(g.value(mm.text).data(), c, input.mask);
        let selection = SelectionContext {
            text: &pooled,
            n_s: self.config.n_s,
            similarity: self.config.similarity,
            boundary: self.boundary_rule(),
        };

        let cells = self.cells();
        let mut spatial_mask = vec![true; cells];
        spatial_mask.extend_from_slice(input.mask);
        let spatial_ctx = g.concat_rows(&[mm.appearance, mm.text])?;
        let q0 = g.constant(Tensor::zeros([1, c]));
        let spatial_opts = DecodeOptions {
            frame: input.frame,
            selector: self.spatial_selector.as_ref(),
            selection: selection.clone(),
            insert: self.config.memory_insert,
        };
        let (q, spatial_selection) =
            self.spatial.decode(g, q0, &mut banks.spatial, spatial_ctx, &spatial_mask, &spatial_opts)?;
        let bbox = self.spatial_head_forward(g, q)?;

        let motion_input = MotionInput {
            motion: mm.motion,
            grid_h: self.config.grid_h,
            grid_w: self.config.grid_w,
            predicted: bbox,
            forced: opts.teacher_box,
            mode: opts.roi,
        };
        let motion_ctx = self.design.motion_context(g, &motion_input)?;
        let motion_rows = g.shape(motion_ctx)[0];
        let mut temporal_mask = vec![true; motion_rows];
        temporal_mask.extend_from_slice(input.mask);
        let temporal_ctx = g.concat_rows(&[motion_ctx, mm.text])?;
        let p0 = g.constant(Tensor::zeros([1, c]));
        let temporal_opts = DecodeOptions {
            frame: input.frame,
            selector: self.temporal_selector.as_ref(),
            selection,
            insert: self.config.memory_insert,
        };
        let (p, temporal_selection) =
            self.temporal.decode(g, p0, &mut banks.temporal, temporal_ctx, &temporal_mask, &temporal_opts)?;
        let logits = self.temporal_logits(g, p)?;
        Ok(FrameVars {
            features: mm,
            bbox,
            logits,
            spatial_query: q,
            temporal_query: p,
            motion_context: motion_ctx,
            spatial_selection,
            temporal_selection,
        })
    }

    /// Copy of this model with a different selector, design or insert mode;
    /// parameters are shared by value.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        let mut m = Model::new(config)?;
        if m.params.len() != self.params.len() {
            return Err(Error::Config("variant changes the parameter layout".into()));
        }
        m.params = self.params.clone();
        Ok(m)
    }
}
