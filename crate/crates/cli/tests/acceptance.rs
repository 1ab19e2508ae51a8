//! Acceptance gate. Each criterion runs at its stated tolerance and prints
//! one PASS or FAIL line followed by a summary. A failed criterion makes the
//! process exit non-zero only with `ACCEPTANCE_STRICT=1`, so the workspace
//! test run keeps reporting the verdicts without aborting on them.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! terminal. Expect tens of minutes on one core: the overfit run and the
//! three-seed ablation dominate.

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use sha2::{Digest, Sha256};
use tubestream::ablation::{ablate, Ablation, STANDARD_VARIANTS};
use tubestream::boxes::box_iou;
use tubestream::checkpoint::Checkpoint;
use tubestream::config::{ModelConfig, RunConfig, Similarity, WorldConfig};
use tubestream::engine::FrameOutput;
use tubestream::memory::{cosine, mean_pool, select_spatial, select_temporal, BankKind, BoundaryRule, MemoryBank};
use tubestream::metrics::{evaluate, t_iou, v_iou, EvalReport, OracleGrounder, Tube};
use tubestream::train::{episode_gradients, episode_loss_value, TrainForward, Trainer};
use tubestream::world::{encode_query_tokens, generate_dataset, generate_episode};
use tubestream::{decode_segment, step, BBox, Episode, Model, StreamState};
use tubestream_tensor::{rng, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient integrity", gradient_integrity),
        ("overfit", overfit),
        ("memory selection oracles", memory_selection),
        ("metric oracles", metric_oracles),
        ("segment decoding", segment_decoding),
        ("streaming contracts", streaming_contracts),
        ("directional ablation", directional_ablation),
        ("CLI determinism", cli_determinism),
    ];
    // Comma-separated criterion numbers to run a subset, e.g. `ACCEPTANCE_ONLY=1,3`.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed > 0 && strict {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 1

fn micro_config() -> RunConfig {
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
        n_s: 2,
        ..ModelConfig::default()
    };
    cfg.world = WorldConfig {
        frames: 4,
        grid_h: 4,
        grid_w: 4,
        channels: 4,
        text_len: 4,
        events: 1,
        min_event_len: 2,
        max_event_len: 3,
        min_box: 0.3,
        max_box: 0.5,
        ..WorldConfig::default()
    };
    cfg.validate().expect("micro config");
    cfg
}

/// A three-frame episode whose target starts inside the clip.
fn micro_episode(world: &WorldConfig) -> Episode {
    (0..)
        .find_map(|seed| {
            let ep = generate_episode(world, seed).ok()?;
            let ep = ep.truncated(3).ok()?;
            (ep.segment.0 >= 1 && ep.segment.1 == 2).then_some(ep)
        })
        .expect("some seed fits")
}

fn gradient_integrity() -> Check {
    const H: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    // Denominator floor for gradients at the level of finite-difference roundoff.
    const FLOOR: f64 = 1e-6;
    let cfg = micro_config();
    let ep = micro_episode(&cfg.world);
    // At initialisation every bias is zero: the first memory block sees only
    // zero queries, so LayerNorm sits at zero variance, and dead ReLU units
    // sit exactly on their kink. A small jitter moves to a generic point.
    let mut model = Model::new(cfg.model.clone()).map_err(err)?;
    let mut r = rng::seeded(101);
    let ids: Vec<_> = model.params.ids().collect();
    for &id in &ids {
        let shape = model.params.get(id).shape().to_vec();
        let noise = Tensor::randn(shape, 0.05, &mut r);
        for (v, n) in model.params.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    let fwd = TrainForward::for_model(&model, false);
    let (_, grads) = episode_gradients(&model, &ep, &cfg.loss, fwd).map_err(err)?;

    let (mut checked, mut worst, mut worst_name) = (0usize, 0.0f64, String::new());
    let mut failures = Vec::new();
    for (pi, &id) in ids.iter().enumerate() {
        for j in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + H;
            let up = episode_loss_value(&model, &ep, &cfg.loss, fwd).map_err(err)?;
            model.params.get_mut(id).data_mut()[j] = orig - H;
            let down = episode_loss_value(&model, &ep, &cfg.loss, fwd).map_err(err)?;
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * H);
            let analytic = grads[pi].data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            checked += 1;
            if rel > worst {
                worst = rel;
                worst_name = format!("{}[{j}]", model.params.name(id));
            }
            if rel >= TOL {
                failures.push(format!("{}[{j}] analytic {analytic:.3e} numeric {numeric:.3e}", model.params.name(id)));
            }
        }
    }
    ensure(failures.is_empty(), || format!("{} of {checked} entries off: {}", failures.len(), failures[..failures.len().min(5)].join("; ")))?;

    // Motion enters the temporal branch only through RoI pooling under the predicted box.
    let temporal_only = tubestream::config::LossConfig { lambda_l: 0.0, lambda_u: 0.0, ..cfg.loss.clone() };
    let (_, tgrads) = episode_gradients(&model, &ep, &temporal_only, fwd).map_err(err)?;
    let motion = model.params.find("enc.motion.w").ok_or("no enc.motion.w")?;
    let mi = ids.iter().position(|&i| i == motion).expect("listed");
    let norm = tgrads[mi].data().iter().map(|v| v * v).sum::<f64>().sqrt();
    ensure(norm > 1e-8, || format!("temporal terms give enc.motion.w gradient norm {norm:.2e}"))?;
    Ok(format!(
        "{checked} parameter entries, max relative error {worst:.2e} at {worst_name} (< {TOL}); temporal-only motion gradient norm {norm:.2e}"
    ))
}

// ---------------------------------------------------------------- 2

fn mean_loss(model: &Model, data: &[Episode], cfg: &RunConfig) -> Result<f64, String> {
    let fwd = TrainForward::for_model(model, cfg.train.teacher_forcing);
    let mut sum = 0.0;
    for ep in data {
        sum += episode_loss_value(model, ep, &cfg.loss, fwd).map_err(err)?;
    }
    Ok(sum / data.len() as f64)
}

fn overfit() -> Check {
    let mut cfg = RunConfig::default();
    cfg.train.lr = 5e-4;
    cfg.train.episodes = 8;
    let steps = 2000;
    let data = generate_dataset(&cfg.world, 1, 8).map_err(err)?;
    ensure(data.iter().all(|e| e.len() == 32), || "episodes must have 32 frames".into())?;
    let model = Model::new(cfg.model.clone()).map_err(err)?;
    let initial = mean_loss(&model, &data, &cfg)?;
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), data.len(), 1).map_err(err)?;
    trainer.run(&data, steps, None).map_err(err)?;
    let last = mean_loss(&trainer.model, &data, &cfg)?;
    let report = evaluate(&data, &trainer.model).map_err(err)?;
    let ratio = last / initial;
    let detail = format!(
        "loss {initial:.3} -> {last:.3} (ratio {ratio:.3}), m_tIoU {:.3}, m_vIoU {:.3} after {steps} steps",
        report.m_tiou, report.m_viou
    );
    ensure(ratio <= 0.1 && report.m_tiou >= 0.8 && report.m_viou >= 0.8, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn bank_with(vectors: &[Vec<f64>]) -> MemoryBank {
    let mut b = MemoryBank::new(BankKind::Spatial, 1, vectors[0].len(), None);
    for (i, v) in vectors.iter().enumerate() {
        b.insert_vector(1, i, v.clone()).expect("insert");
    }
    b
}

fn memory_selection() -> Check {
    let mut r = rng::seeded(303);
    for trial in 0..1000 {
        let width = r.random_range(1..8);
        let len = r.random_range(1..50);
        let n_s = r.random_range(1..16);
        // Coarse integer entries make exact score ties common.
        let vectors: Vec<Vec<f64>> = (0..len).map(|_| (0..width).map(|_| r.random_range(-2i32..3) as f64).collect()).collect();
        let rows = r.random_range(1..5);
        let text: Vec<f64> = (0..rows * width).map(|_| r.random_range(-3.0..3.0)).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i == 0 || r.random_bool(0.5)).collect();
        let sel = select_spatial(&bank_with(&vectors), 1, &text, &mask, n_s, Similarity::Cosine).map_err(err)?;
        // Full sort by score descending, earlier frame first on ties.
        let pooled = mean_pool(&text, width, &mask);
        let mut order: Vec<(f64, usize)> = vectors.iter().enumerate().map(|(i, v)| (cosine(v, &pooled), i)).collect();
        order.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
        let want: BTreeSet<usize> = order.iter().take(n_s).map(|&(_, i)| i).collect();
        let got: BTreeSet<usize> = sel.source_indices.iter().copied().collect();
        ensure(got == want, || format!("spatial trial {trial}: {got:?} vs {want:?}"))?;
    }
    let mut hits = 0;
    for _ in 0..100 {
        let clusters = r.random_range(2..6);
        let lengths: Vec<usize> = (0..clusters).map(|_| r.random_range(2..10)).collect();
        let width = 8;
        let mut vectors = Vec::new();
        for (c, &len) in lengths.iter().enumerate() {
            for _ in 0..len {
                let mut v: Vec<f64> = (0..width).map(|_| r.random_range(-0.05..0.05)).collect();
                v[c] += 1.0;
                vectors.push(v);
            }
        }
        let start = vectors.len() - lengths[clusters - 1];
        let sel = select_temporal(&bank_with(&vectors), 1, BoundaryRule::Relative { alpha: 1.0 }, Similarity::Cosine)
            .map_err(err)?;
        hits += (sel.source_indices == (start..vectors.len()).collect::<Vec<_>>()) as usize;
    }
    ensure(hits == 100, || format!("temporal suffix correct on {hits}/100 planted banks"))?;
    Ok("spatial top-N_s equals full sort on 1000/1000 banks; temporal suffix exact on 100/100 planted banks".into())
}

// ---------------------------------------------------------------- 4

const RES: i64 = 64;

fn pix_box(r: &mut impl Rng) -> [i64; 4] {
    let (x0, y0) = (r.random_range(0..RES), r.random_range(0..RES));
    [x0, y0, r.random_range(x0 + 1..=RES), r.random_range(y0 + 1..=RES)]
}

fn to_bbox(p: [i64; 4]) -> BBox {
    let s = RES as f64;
    BBox::from_corners(p[0] as f64 / s, p[1] as f64 / s, p[2] as f64 / s, p[3] as f64 / s)
}

/// Pixel-count IoU on the `RES` grid; exact for pixel-aligned corners.
fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |p: [i64; 4], x: i64, y: i64| x >= p[0] && x < p[2] && y >= p[1] && y < p[3];
    let (mut i, mut u) = (0u32, 0u32);
    for y in 0..RES {
        for x in 0..RES {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            i += (ia && ib) as u32;
            u += (ia || ib) as u32;
        }
    }
    i as f64 / u as f64
}

fn segment(r: &mut impl Rng, t: usize) -> (usize, usize) {
    let s = r.random_range(0..t);
    (s, r.random_range(s..t))
}

fn frame_set(s: (usize, usize)) -> BTreeSet<usize> {
    (s.0..=s.1).collect()
}

fn metric_oracles() -> Check {
    const TOL: f64 = 1e-9;
    let mut r = rng::seeded(404);
    let mut worst = [0.0f64; 3];
    for _ in 0..1000 {
        let (a, b) = (pix_box(&mut r), pix_box(&mut r));
        worst[0] = worst[0].max((box_iou(to_bbox(a), to_bbox(b)).map_err(err)? - raster_iou(a, b)).abs());

        let t = r.random_range(1..80);
        let (g, p) = (segment(&mut r, t), segment(&mut r, t));
        let (gs, ps) = (frame_set(g), frame_set(p));
        let want = gs.intersection(&ps).count() as f64 / gs.union(&ps).count() as f64;
        worst[1] = worst[1].max((t_iou(g, p).map_err(err)? - want).abs());

        let t = r.random_range(1..30);
        let (g, p) = (segment(&mut r, t), segment(&mut r, t));
        let gp: Vec<[i64; 4]> = (g.0..=g.1).map(|_| pix_box(&mut r)).collect();
        let pp: Vec<[i64; 4]> = (p.0..=p.1).map(|_| pix_box(&mut r)).collect();
        let (gs, ps) = (frame_set(g), frame_set(p));
        let want = gs.intersection(&ps).map(|&f| raster_iou(gp[f - g.0], pp[f - p.0])).sum::<f64>()
            / gs.union(&ps).count() as f64;
        let gt = Tube::new(g, gp.iter().map(|&b| to_bbox(b)).collect()).map_err(err)?;
        let pr = Tube::new(p, pp.iter().map(|&b| to_bbox(b)).collect()).map_err(err)?;
        worst[2] = worst[2].max((v_iou(&gt, &pr).map_err(err)? - want).abs());
    }
    ensure(worst.iter().all(|&w| w < TOL), || format!("max deviations box/t/v {worst:?}"))?;

    // Report invariants across oracle, untrained and briefly trained models.
    let cfg = micro_config();
    let data = generate_dataset(&cfg.world, 9, 20).map_err(err)?;
    let mut reports: Vec<EvalReport> = vec![evaluate(&data, &OracleGrounder).map_err(err)?];
    let model = Model::new(cfg.model.clone()).map_err(err)?;
    reports.push(evaluate(&data, &model).map_err(err)?);
    let mut trainer = Trainer::new(model, cfg.train.clone(), cfg.loss.clone(), data.len(), 9).map_err(err)?;
    trainer.run(&data, 20, None).map_err(err)?;
    reports.push(evaluate(&data, &trainer.model).map_err(err)?);
    for rep in &reports {
        rep.check_invariants().map_err(err)?;
        ensure(rep.viou_at_05 <= rep.viou_at_03, || "vIoU@0.5 above vIoU@0.3".into())?;
        ensure(rep.samples.iter().all(|s| 0.0 <= s.v_iou && s.v_iou <= s.t_iou + 1e-12 && s.t_iou <= 1.0), || {
            "sample with vIoU > tIoU".into()
        })?;
    }
    Ok(format!(
        "1000 instances each, max deviation box {:.1e} t {:.1e} v {:.1e}; invariants held on {} reports",
        worst[0],
        worst[1],
        worst[2],
        reports.len()
    ))
}

// ---------------------------------------------------------------- 5

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn segment_decoding() -> Check {
    let mut r = rng::seeded(505);
    for case in 0..500 {
        let t = r.random_range(1..=200);
        let scale = [0.1, 1.0, 4.0, 20.0][case % 4];
        let hs = Tensor::randn([t], scale, &mut r).into_data();
        let he = Tensor::randn([t], scale, &mut r).into_data();
        let (ps, pe) = (softmax(&hs), softmax(&he));
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for s in 0..t {
            for e in s..t {
                if ps[s] * pe[e] > best.0 {
                    best = (ps[s] * pe[e], s, e);
                }
            }
        }
        let got = decode_segment(&hs, &he).map_err(err)?;
        ensure(got == (best.1, best.2), || format!("case {case} (T={t}): {got:?} vs {:?}", (best.1, best.2)))?;
    }
    Ok("500/500 random score lists (T <= 200) equal exhaustive pair search".into())
}

// ---------------------------------------------------------------- 6

fn stream(model: &Model, ep: &Episode, grids: &[Vec<f64>], state: Option<StreamState>, from: usize) -> Result<(StreamState, Vec<FrameOutput>), String> {
    let mut state = match state {
        Some(s) => s,
        None => {
            let (tokens, mask) = encode_query_tokens(ep, model.config.text_len).map_err(err)?;
            StreamState::new(model, tokens, mask).map_err(err)?
        }
    };
    let mut out = Vec::new();
    for (i, g) in grids.iter().enumerate().skip(from) {
        out.push(step(model, &mut state, i, g).map_err(err)?);
    }
    Ok((state, out))
}

fn streaming_contracts() -> Check {
    let cfg = RunConfig::default();
    let model = Model::new(cfg.model.clone()).map_err(err)?;
    let ep = generate_episode(&cfg.world, 606).map_err(err)?;
    let grids: Vec<Vec<f64>> = ep.frames.iter().map(|f| f.grid.clone()).collect();
    let (_, base) = stream(&model, &ep, &grids, None, 0)?;

    // (a) causality
    let mut r = rng::seeded(6);
    for i in [0, 7, 15, 30] {
        let mut changed = grids.clone();
        changed[i + 1] = Tensor::randn([grids[0].len()], 1.0, &mut r).into_data();
        let (_, out) = stream(&model, &ep, &changed, None, 0)?;
        ensure(out[..=i] == base[..=i], || format!("outputs up to frame {i} changed"))?;
        ensure(out[i + 1] != base[i + 1], || format!("frame {} ignored its own input", i + 1))?;
    }

    // (b) resume through a checkpoint file
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("mid.ckpt");
    let (mid, _) = stream(&model, &ep, &grids[..13], None, 0)?;
    let mut ck = Checkpoint::from_model(&model);
    ck.stream = Some(mid.to_json());
    ck.save(&path).map_err(err)?;
    let back = Checkpoint::load(&path).map_err(err)?;
    let model2 = back.to_model().map_err(err)?;
    let state = StreamState::from_json(back.stream.as_deref().ok_or("no stream")?).map_err(err)?;
    let (_, rest) = stream(&model2, &ep, &grids, Some(state), 13)?;
    ensure(rest[..] == base[13..], || "resumed outputs differ".into())?;

    // (c) constant live activations, linear banks
    let mut peaks = Vec::new();
    let mut per_frame = Vec::new();
    for t in [32, 128, 512] {
        let mut wc = cfg.world.clone();
        wc.frames = t;
        let ep = generate_episode(&wc, 607).map_err(err)?;
        let grids: Vec<Vec<f64>> = ep.frames.iter().map(|f| f.grid.clone()).collect();
        let (state, _) = stream(&model, &ep, &grids, None, 0)?;
        peaks.push(state.peak_activation);
        let stored = state.banks.stored_len();
        ensure(stored % t == 0, || format!("bank size {stored} not a multiple of T={t}"))?;
        per_frame.push(stored / t);
    }
    let (lo, hi) = (*peaks.iter().min().unwrap(), *peaks.iter().max().unwrap());
    let spread = (hi - lo) as f64 / lo as f64;
    ensure(spread <= 0.01, || format!("peak activations {peaks:?} spread {spread:.4}"))?;
    ensure(per_frame.iter().all(|&p| p == per_frame[0] && p > 0), || format!("bank values per frame {per_frame:?}"))?;
    Ok(format!(
        "causal at 4 cut points; checkpoint resume bit-identical; peak activation {peaks:?} for T = 32/128/512 (spread {:.2}%), banks grow by {} values per frame",
        100.0 * spread,
        per_frame[0]
    ))
}

// ---------------------------------------------------------------- 7

/// Multi-event benchmark used for the mechanism comparison.
const ABLATION_CONFIG: &str = r#"
[model]
width = 16
heads = 2
encoder_blocks = 1
decoder_blocks = 2
grid_h = 6
grid_w = 6
text_len = 4
n_s = 8

[world]
frames = 24
grid_h = 6
grid_w = 6
text_len = 4
events = 3
min_event_len = 3
max_event_len = 6
cue_frames = 2
type_visibility = 0.5

[train]
lr = 0.001
steps = 1500
episodes = 64

[eval]
episodes = 64

[ablate]
n_s_values = [2, 8, 32]
seeds = [1, 2, 3]
"#;

fn directional_ablation() -> Check {
    let cfg = RunConfig::from_toml(ABLATION_CONFIG).map_err(err)?;
    ensure(cfg.world.events >= 3, || "benchmark needs three or more events".into())?;
    let variants: Vec<String> = STANDARD_VARIANTS.iter().map(|s| s.to_string()).collect();
    let main: Ablation = ablate(&cfg, &variants, &cfg.ablate.seeds, |_| {}).map_err(err)?;
    println!("{}", main.table());
    let sweep: Vec<String> = cfg.ablate.n_s_values.iter().map(|n| format!("ns-{n}")).collect();
    let ns = ablate(&cfg, &sweep, &cfg.ablate.seeds, |_| {}).map_err(err)?;
    println!("N_s sweep\n{}", ns.table());
    ensure(ns.rows.len() == sweep.len() * cfg.ablate.seeds.len(), || "N_s sweep incomplete".into())?;
    ensure(main.verdicts.len() == 5, || format!("{} verdicts", main.verdicts.len()))?;
    let failing: Vec<String> = main.verdicts.iter().filter(|v| !v.passed).map(|v| v.expectation.describe()).collect();
    ensure(failing.is_empty(), || format!("directions not reproduced: {}", failing.join(", ")))?;
    Ok(format!("all {} directional verdicts hold on a seed majority; N_s sweep emitted", main.verdicts.len()))
}

// ---------------------------------------------------------------- 8

const CLI_CONFIG: &str = r#"
seed = 5

[model]
width = 8
heads = 2
encoder_blocks = 1
decoder_blocks = 2
grid_h = 4
grid_w = 4
appearance_dim = 4
motion_dim = 4
text_dim = 6
text_len = 4
n_s = 3

[world]
frames = 10
grid_h = 4
grid_w = 4
channels = 4
text_len = 4
events = 2
min_event_len = 2
max_event_len = 4
min_box = 0.3
max_box = 0.5

[train]
lr = 0.001
steps = 5
episodes = 4

[eval]
episodes = 4

[ablate]
variants = ["full", "temporal-none", "parallel"]
n_s_values = [1, 3]
seeds = [1, 2]
"#;

fn digest(path: &Path) -> Result<Vec<u8>, String> {
    Ok(Sha256::digest(fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?).to_vec())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tubestream"))
        .args(args)
        .env_remove("TUBESTREAM_DATA_DIR")
        .env("TUBESTREAM_LOG", "warn")
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
}

/// Run every command into `dir` and return the artifacts it wrote.
fn cli_round(dir: &Path, cfg: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_str().expect("utf-8 path").to_string();
    cli(&["gen", "--config", cfg, "--out", &p("train.artg")])?;
    cli(&["gen", "--config", cfg, "--eval-split", "--out", &p("eval.artg")])?;
    cli(&["train", "--config", cfg, "--data", &p("train.artg"), "--out", &p("run")])?;
    let ck = p("run/model.ckpt");
    cli(&["eval", "--config", cfg, "--checkpoint", &ck, "--data", &p("eval.artg"), "--out", &p("report.json")])?;
    cli(&["ground", "--config", cfg, "--checkpoint", &ck, "--data", &p("eval.artg"), "--index", "1", "--out", &p("tube.jsonl")])?;
    cli(&["ablate", "--config", cfg, "--out", &p("ablation")])?;
    let files = [
        "train.artg",
        "train.artg.manifest",
        "eval.artg",
        "eval.artg.manifest",
        "run/model.ckpt",
        "run/train_log.csv",
        "run/config.toml",
        "report.json",
        "tube.jsonl",
        "ablation/ablation.txt",
        "ablation/ablation.json",
        "ablation/ns_sweep.txt",
        "ablation/ns_sweep.json",
    ];
    files.iter().map(|f| Ok((f.to_string(), digest(&dir.join(f))?))).collect()
}

fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, CLI_CONFIG).map_err(err)?;
    let cfg = cfg.to_str().expect("utf-8 path");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).map_err(err)?;
    fs::create_dir_all(&b).map_err(err)?;
    let first = cli_round(&a, cfg)?;
    let second = cli_round(&b, cfg)?;
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    ensure(differing.is_empty(), || format!("artifacts differ: {}", differing.join(", ")))?;
    Ok(format!("gen, train, eval, ground and ablate: {} artifacts hash-identical across two runs", first.len()))
}
