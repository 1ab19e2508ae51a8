//! Ablation harness: train model variants under one budget and compare them.
//!
//! Every variant of a seed sees the same training episodes in the same order
//! and starts from the same initial parameters; only the named mechanism
//! changes.

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_table, EvalReport};
use crate::model::Model;
use crate::train::Trainer;
use crate::world::generate_dataset;

/// Variants trained by default.
pub const STANDARD_VARIANTS: [&str; 6] = [
    "full",
    "temporal-none",
    "temporal-all",
    "spatial-none",
    "spatial-all",
    "parallel",
];

/// A named change to the model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub spatial_selector: String,
    pub temporal_selector: String,
    pub decoder_design: String,
    pub n_s: Option<usize>,
}

impl Variant {
    /// `full`, `temporal-{none,all,selective}`, `spatial-{none,all,selective}`,
    /// `parallel`, `cascaded`, or `ns-<N>`.
    pub fn named(name: &str) -> Result<Self> {
        let mut v = Variant {
            name: name.to_string(),
            spatial_selector: "text-topk".into(),
            temporal_selector: "event-suffix".into(),
            decoder_design: "cascaded".into(),
            n_s: None,
        };
        match name {
            "full" | "cascaded" | "temporal-selective" | "spatial-selective" => {}
            "temporal-none" => v.temporal_selector = "none".into(),
            "temporal-all" => v.temporal_selector = "all".into(),
            "spatial-none" => v.spatial_selector = "none".into(),
            "spatial-all" => v.spatial_selector = "all".into(),
            "parallel" => v.decoder_design = "parallel".into(),
            other => match other.strip_prefix("ns-").map(str::parse::<usize>) {
                Some(Ok(n)) if n >= 1 => v.n_s = Some(n),
                _ => {
                    return Err(Error::UnknownStrategy {
                        kind: "ablation variant",
                        name: name.to_string(),
                        known: "full, temporal-none, temporal-all, spatial-none, spatial-all, parallel, ns-<N>".into(),
                    })
                }
            },
        }
        Ok(v)
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.spatial_selector = self.spatial_selector.clone();
        cfg.temporal_selector = self.temporal_selector.clone();
        cfg.decoder_design = self.decoder_design.clone();
        if let Some(n) = self.n_s {
            cfg.n_s = n;
        }
        cfg
    }
}

/// Train one variant for `cfg.train.steps` steps and evaluate it on held-out episodes.
pub fn run_variant(cfg: &RunConfig, variant: &Variant, seed: u64) -> Result<EvalReport> {
    let mut model_cfg = variant.apply(&cfg.model);
    model_cfg.init_seed = seed;
    let train = generate_dataset(&cfg.world, seed, cfg.train.episodes)?;
    let test = generate_dataset(&cfg.world, seed.wrapping_add(cfg.eval.seed_offset), cfg.eval.episodes)?;
    let model = Model::new(model_cfg)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), train.len(), seed)?;
    trainer.run(&train, cfg.train.steps, None)?;
    evaluate(&test, &trainer.model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MTiou,
    MViou,
}

impl Metric {
    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Metric::MTiou => r.m_tiou,
            Metric::MViou => r.m_viou,
        }
    }
}

/// Expected ordering between two variants on one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expectation {
    pub better: String,
    pub worse: String,
    pub metric: Metric,
    /// Whether a tie counts as holding.
    pub allow_tie: bool,
}

impl Expectation {
    fn new(better: &str, worse: &str, metric: Metric, allow_tie: bool) -> Self {
        Self { better: better.into(), worse: worse.into(), metric, allow_tie }
    }

    pub fn describe(&self) -> String {
        let op = if self.allow_tie { ">=" } else { ">" };
        let m = match self.metric {
            Metric::MTiou => "m_tIoU",
            Metric::MViou => "m_vIoU",
        };
        format!("{} {op} {} ({m})", self.better, self.worse)
    }
}

/// Orderings the memory and decoder mechanisms are expected to produce.
pub fn standard_expectations() -> Vec<Expectation> {
    vec![
        Expectation::new("full", "temporal-none", Metric::MTiou, false),
        Expectation::new("temporal-none", "temporal-all", Metric::MTiou, false),
        Expectation::new("full", "spatial-all", Metric::MTiou, true),
        Expectation::new("spatial-all", "spatial-none", Metric::MTiou, true),
        Expectation::new("full", "parallel", Metric::MViou, false),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub expectation: Expectation,
    /// Seeds on which the ordering held.
    pub holds: usize,
    pub seeds: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub verdicts: Vec<Verdict>,
}

impl Ablation {
    pub fn report(&self, variant: &str, seed: u64) -> Option<&EvalReport> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .map(|r| &r.report)
    }

    /// Seed-majority verdicts for the expectations whose variants were run.
    pub fn judge(&mut self, expectations: &[Expectation]) {
        let mut seeds: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        self.verdicts = expectations
            .iter()
            .filter_map(|ex| {
                let mut holds = 0;
                let mut counted = 0;
                for &s in &seeds {
                    let (a, b) = (self.report(&ex.better, s)?, self.report(&ex.worse, s)?);
                    let (a, b) = (ex.metric.of(a), ex.metric.of(b));
                    counted += 1;
                    if a > b || (ex.allow_tie && a == b) {
                        holds += 1;
                    }
                }
                Some(Verdict {
                    expectation: ex.clone(),
                    holds,
                    seeds: counted,
                    passed: 2 * holds > counted,
                })
            })
            .collect();
    }

    /// Per-seed table followed by seed means and verdict lines.
    pub fn table(&self) -> String {
        let labelled: Vec<(String, &EvalReport)> = self
            .rows
            .iter()
            .map(|r| (format!("{} (seed {})", r.variant, r.seed), &r.report))
            .collect();
        let mut out = format_table(&labelled);
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.variant.as_str()) {
                names.push(&r.variant);
            }
        }
        let means: Vec<EvalReport> = names.iter().map(|n| self.mean(n)).collect();
        let labelled: Vec<(String, &EvalReport)> =
            names.iter().zip(&means).map(|(n, r)| (format!("{n} (mean)"), r)).collect();
        out.push('\n');
        out.push_str(&format_table(&labelled));
        if !self.verdicts.is_empty() {
            out.push('\n');
            for v in &self.verdicts {
                out.push_str(&format!(
                    "{} {}: {}/{} seeds\n",
                    if v.passed { "PASS" } else { "FAIL" },
                    v.expectation.describe(),
                    v.holds,
                    v.seeds
                ));
            }
        }
        out
    }

    /// Seed-averaged summary metrics of one variant (no per-sample rows).
    pub fn mean(&self, variant: &str) -> EvalReport {
        let rows: Vec<&EvalReport> = self.rows.iter().filter(|r| r.variant == variant).map(|r| &r.report).collect();
        let n = rows.len().max(1) as f64;
        EvalReport {
            m_tiou: rows.iter().map(|r| r.m_tiou).sum::<f64>() / n,
            m_viou: rows.iter().map(|r| r.m_viou).sum::<f64>() / n,
            viou_at_03: rows.iter().map(|r| r.viou_at_03).sum::<f64>() / n,
            viou_at_05: rows.iter().map(|r| r.viou_at_05).sum::<f64>() / n,
            samples: Vec::new(),
        }
    }
}

/// Train and evaluate every `(variant, seed)` pair; `progress` sees each finished row.
pub fn ablate(
    cfg: &RunConfig,
    variants: &[String],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Ablation> {
    let parsed = variants.iter().map(|v| Variant::named(v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(parsed.len() * seeds.len());
    for &seed in seeds {
        for v in &parsed {
            let report = run_variant(cfg, v, seed)?;
            let row = AblationRow { variant: v.name.clone(), seed, report };
            progress(&row);
            rows.push(row);
        }
    }
    let mut out = Ablation { rows, verdicts: Vec::new() };
    out.judge(&standard_expectations());
    Ok(out)
}
