mod common;

use common::{add, param, self_block, Mat};
use proptest::prelude::*;
use tubestream::config::ModelConfig;
use tubestream::encoder::Encoder;
use tubestream::params::{Graph, ParamStore};
use tubestream::train::{episode_gradients, TrainForward};
use tubestream::world::generate_episode;
use tubestream::Model;
use tubestream_tensor::{rng, Rng, Tensor};

fn toy(h: usize, w: usize, n_t: usize, blocks: usize) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        encoder_blocks: blocks,
        grid_h: h,
        grid_w: w,
        appearance_dim: 3,
        motion_dim: 5,
        text_dim: 4,
        text_len: n_t,
        ..ModelConfig::default()
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Encoder) {
    let mut store = ParamStore::new();
    let mut r = rng::seeded(seed);
    let enc = Encoder::new(&mut store, cfg, &mut r);
    (store, enc)
}

fn randvec(n: usize, r: &mut Rng) -> Vec<f64> {
    Tensor::randn([n], 1.0, r).into_data()
}

fn randomize_biases(store: &mut ParamStore, r: &mut Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".b")).collect();
    for id in ids {
        let n = store.get(id).numel();
        store.get_mut(id).data_mut().copy_from_slice(&randvec(n, r));
    }
}

struct Inputs {
    app: Vec<f64>,
    mot: Vec<f64>,
    tokens: Vec<usize>,
    mask: Vec<bool>,
}

fn inputs(cfg: &ModelConfig, words: usize, r: &mut Rng) -> Inputs {
    let cells = cfg.grid_h * cfg.grid_w;
    let tokens: Vec<usize> = (0..cfg.text_len).map(|i| if i < words { 1 + i % (cfg.vocab_size - 1) } else { 0 }).collect();
    Inputs {
        app: randvec(cells * cfg.appearance_dim, r),
        mot: randvec(cells * cfg.motion_dim, r),
        mask: tokens.iter().map(|&t| t != 0).collect(),
        tokens,
    }
}

#[test]
fn zero_grids_give_bias_rows() {
    let cfg = toy(3, 4, 5, 1);
    let (mut store, enc) = build(&cfg, 1);
    let mut r = rng::seeded(2);
    randomize_biases(&mut store, &mut r);
    let x = inputs(&cfg, 2, &mut r);
    let mut g = Graph::new(&store, false);
    let (fa, fm, _) = enc
        .embed_modalities(&mut g, &vec![0.0; 12 * 3], &vec![0.0; 12 * 5], &x.tokens, &x.mask)
        .unwrap();
    let ba = store.get(enc.appearance.b.unwrap()).data();
    let bm = store.get(enc.motion.b.unwrap()).data();
    for row in 0..12 {
        assert_eq!(g.value(fa).row(row), ba);
        assert_eq!(g.value(fm).row(row), bm);
    }
}

#[test]
fn padding_rows_are_zeroed() {
    let cfg = toy(2, 2, 6, 1);
    let (mut store, enc) = build(&cfg, 1);
    let mut r = rng::seeded(3);
    randomize_biases(&mut store, &mut r);
    let x = inputs(&cfg, 2, &mut r);
    let mut g = Graph::new(&store, false);
    let (_, _, ft) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    for row in 0..6 {
        let zero = g.value(ft).row(row).iter().all(|&v| v == 0.0);
        assert_eq!(zero, row >= 2, "row {row}");
    }
}

#[test]
fn reference_scale_is_accepted() {
    let cfg = ModelConfig { encoder_blocks: 1, ..ModelConfig::reference_scale() };
    cfg.validate().unwrap();
    let (store, enc) = build(&cfg, 0);
    let mut r = rng::seeded(1);
    let x = inputs(&cfg, 3, &mut r);
    let mut g = Graph::new(&store, false);
    let mm = enc.forward(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    assert_eq!(g.shape(mm.appearance), &[64, 256]);
    assert_eq!(g.shape(mm.motion), &[64, 256]);
    assert_eq!(g.shape(mm.text), &[30, 256]);
}

#[test]
fn permuting_cells_permutes_embedded_rows() {
    let cfg = toy(3, 3, 4, 1);
    let (store, enc) = build(&cfg, 4);
    let mut r = rng::seeded(5);
    let x = inputs(&cfg, 2, &mut r);
    let (i, j) = (1, 7);
    let swap = |v: &[f64], c: usize| {
        let mut out = v.to_vec();
        for k in 0..c {
            out.swap(i * c + k, j * c + k);
        }
        out
    };
    let mut g = Graph::new(&store, false);
    let (a0, m0, _) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    let (a1, m1, _) = enc
        .embed_modalities(&mut g, &swap(&x.app, 3), &swap(&x.mot, 5), &x.tokens, &x.mask)
        .unwrap();
    for (before, after) in [(a0, a1), (m0, m1)] {
        for row in 0..9 {
            let src = if row == i { j } else if row == j { i } else { row };
            assert_eq!(g.value(after).row(row), g.value(before).row(src));
        }
    }
}

#[test]
fn default_fused_length_is_158() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.fused_len(), 2 * 8 * 8 + 30);
    let (store, enc) = build(&cfg, 0);
    assert_eq!(store.get(enc.pos).shape(), &[158, cfg.width]);
    assert_eq!(enc.key_mask(&[true; 30]).len(), 158);
}

#[test]
fn wrong_lengths_are_rejected() {
    let cfg = toy(2, 2, 3, 1);
    let (store, enc) = build(&cfg, 0);
    let mut r = rng::seeded(1);
    let x = inputs(&cfg, 1, &mut r);
    let mut g = Graph::new(&store, false);
    assert!(enc.embed_modalities(&mut g, &x.app[1..], &x.mot, &x.tokens, &x.mask).is_err());
    assert!(enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens[1..], &x.mask[1..]).is_err());
    assert!(enc.embed_modalities(&mut g, &x.app, &x.mot, &[999, 0, 0], &x.mask).is_err());
    let (fa, fm, ft) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    let short = g.slice_rows(ft, 0, 2).unwrap();
    assert!(enc.fuse(&mut g, fa, fm, short, &x.mask).is_err());
    assert!(enc.fuse(&mut g, fa, fa, ft, &x.mask[..2]).is_err());
}

#[test]
fn zero_blocks_add_only_embeddings() {
    let cfg = toy(2, 3, 4, 0);
    let (store, enc) = build(&cfg, 7);
    let mut r = rng::seeded(8);
    let x = inputs(&cfg, 2, &mut r);
    let mut g = Graph::new(&store, false);
    let (fa, fm, ft) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    let mm = enc.fuse(&mut g, fa, fm, ft, &x.mask).unwrap();
    let pos = store.get(enc.pos);
    let typ = store.get(enc.typ);
    let segments = [(fa, mm.appearance, 0, 0), (fm, mm.motion, 6, 1), (ft, mm.text, 12, 2)];
    for (input, output, offset, t) in segments {
        let rows = g.shape(input)[0];
        for row in 0..rows {
            for c in 0..8 {
                let want = g.value(input).row(row)[c] + pos.row(offset + row)[c] + typ.row(t)[c];
                assert!((g.value(output).row(row)[c] - want).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn fused_output_matches_reference_blocks() {
    let cfg = toy(2, 2, 5, 2);
    let (mut store, enc) = build(&cfg, 9);
    let mut r = rng::seeded(10);
    randomize_biases(&mut store, &mut r);
    let x = inputs(&cfg, 3, &mut r);
    let mut g = Graph::new(&store, false);
    let (fa, fm, ft) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
    let mm = enc.fuse(&mut g, fa, fm, ft, &x.mask).unwrap();

    let m = |v| Mat::new(g.shape(v)[0], 8, g.value(v).data().to_vec());
    let mut seq = Mat::stack(&[&m(fa), &m(fm), &m(ft)]);
    seq = add(&seq, &param(&store, enc.pos));
    let typ = param(&store, enc.typ);
    for row in 0..seq.rows {
        let t = if row < 4 { 0 } else if row < 8 { 1 } else { 2 };
        for c in 0..8 {
            seq.data[row * 8 + c] += typ.at(t, c);
        }
    }
    let key_mask = enc.key_mask(&x.mask);
    for block in &enc.blocks {
        seq = self_block(&store, block, &seq, Some(&key_mask));
    }
    let got: Vec<f64> = [mm.appearance, mm.motion, mm.text]
        .iter()
        .flat_map(|&v| g.value(v).data().to_vec())
        .collect();
    assert!(seq.max_abs_diff(&got) < 1e-9, "{}", seq.max_abs_diff(&got));
}

#[test]
fn padded_columns_receive_zero_attention() {
    let cfg = toy(2, 2, 6, 1);
    let (store, enc) = build(&cfg, 11);
    let mut r = rng::seeded(12);
    let x = inputs(&cfg, 2, &mut r);
    let mut g = Graph::new(&store, true);
    let seq = Tensor::randn([14, 8], 1.0, &mut r);
    let seq = g.constant(seq);
    let key_mask = enc.key_mask(&x.mask);
    let (_, att) = enc.blocks[0].forward_with_attention(&mut g, seq, Some(&key_mask)).unwrap();
    let probs = g.attention_weights(att).unwrap();
    // heads × rows × keys
    assert_eq!(probs.len(), 2 * 14 * 14);
    for (i, p) in probs.iter().enumerate() {
        let key = i % 14;
        if key_mask[key] {
            assert!(*p > 0.0);
        } else {
            assert_eq!(*p, 0.0, "key {key}");
        }
    }
    for row in probs.chunks(14) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn swapping_appearance_and_motion_changes_output() {
    let mut cfg = toy(2, 3, 4, 1);
    cfg.motion_dim = cfg.appearance_dim;
    let (store, enc) = build(&cfg, 13);
    let mut r = rng::seeded(14);
    for _ in 0..5 {
        let x = inputs(&cfg, 2, &mut r);
        let mut g = Graph::new(&store, false);
        let (fa, fm, ft) = enc.embed_modalities(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
        let a = enc.fuse(&mut g, fa, fm, ft, &x.mask).unwrap();
        let b = enc.fuse(&mut g, fm, fa, ft, &x.mask).unwrap();
        assert!(g.value(a.appearance).max_abs_diff(g.value(b.motion)) > 1e-6);
        assert!(g.value(a.motion).max_abs_diff(g.value(b.appearance)) > 1e-6);
    }
}

#[test]
fn every_encoder_parameter_receives_gradient() {
    let cfg = common::tiny_config();
    let model = Model::new(cfg.model.clone()).unwrap();
    let ep = generate_episode(&cfg.world, 3).unwrap();
    let (_, grads) = episode_gradients(&model, &ep, &cfg.loss, TrainForward::for_model(&model, false)).unwrap();
    let mut checked = 0;
    for (id, grad) in model.params.ids().zip(&grads) {
        let name = model.params.name(id);
        if name.starts_with("enc.") {
            checked += 1;
            assert!(grad.data().iter().any(|&v| v != 0.0), "{name} has zero gradient");
        }
    }
    assert!(checked > 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn segment_shapes_follow_grid_and_text(h in 1usize..5, w in 1usize..5, n_t in 1usize..7, words in 0usize..7) {
        let cfg = toy(h, w, n_t, 1);
        let (store, enc) = build(&cfg, 0);
        let mut r = rng::seeded((h * 100 + w * 10 + n_t) as u64);
        let x = inputs(&cfg, words.min(n_t), &mut r);
        let mut g = Graph::new(&store, false);
        let mm = enc.forward(&mut g, &x.app, &x.mot, &x.tokens, &x.mask).unwrap();
        prop_assert_eq!(g.shape(mm.appearance), &[h * w, 8]);
        prop_assert_eq!(g.shape(mm.motion), &[h * w, 8]);
        prop_assert_eq!(g.shape(mm.text), &[n_t, 8]);
    }
}
