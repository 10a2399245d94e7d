mod common;

use common::Rows;
use fusioncc::diffcore::{ParamStore, Tape, Tensor};
use fusioncc::encoder::{cat_tokens, extract_summary, mfavbs_forward, split_tokens, vit_block_forward, BlockParams, EncoderParams};
use fusioncc::pipeline::TokenSequence;
use fusioncc::rng::SeedStream;
use fusioncc::runner::{Model, TrainConfig};

/// Replaces every weight with seeded noise so no parameter sits at its
/// structured initial value (unit gains, zero biases).
fn scramble(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    for (i, p) in store.iter_mut().enumerate() {
        let n = common::noise(seed * 1000 + i as u64, p.tensor.len());
        let gain = p.name.ends_with("gamma");
        for (v, r) in p.tensor.data_mut().iter_mut().zip(n) {
            *v = if gain { 1.0 + 0.3 * r } else { scale * r };
        }
    }
}

fn to_rows(data: &[f64], batch: usize, t: usize, e: usize) -> Vec<Rows> {
    (0..batch)
        .map(|b| (0..t).map(|i| data[(b * t + i) * e..(b * t + i + 1) * e].to_vec()).collect())
        .collect()
}

fn tokens(tape: &mut Tape<f64>, data: Vec<f64>, shape: [usize; 3]) -> TokenSequence {
    let v = tape.constant(Tensor::new(shape, data).unwrap());
    TokenSequence::from_var(tape, v).unwrap()
}

fn max_diff(got: &[f64], want: impl IntoIterator<Item = f64>) -> f64 {
    let want: Vec<f64> = want.into_iter().collect();
    assert_eq!(got.len(), want.len());
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn vit_block_matches_straight_line_oracle() {
    let (b, t, e, h) = (2, 5, 8, 2);
    let mut store = ParamStore::new();
    let p = BlockParams::init("blk", e, h, &mut store, &mut SeedStream::new(11).rng()).unwrap();
    scramble(&mut store, 11, 0.4);
    let x = common::noise(111, b * t * e);

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let xs = tokens(&mut tape, x.clone(), [b, t, e]);
    let (y, attn) = vit_block_forward(&mut tape, &bind, &p, xs).unwrap();

    let mut want_y = Vec::new();
    let mut want_attn = Vec::new();
    for sample in to_rows(&x, b, t, e) {
        let (rows, maps) = common::vit_block(&store, "blk", h, &sample);
        want_y.extend(rows.into_iter().flatten());
        want_attn.extend(maps.into_iter().flatten().flatten());
    }
    assert_eq!(tape.shape(attn), &[b * h, t, t]);
    assert!(max_diff(tape.value(y.var), want_y) <= 1e-10);
    assert!(max_diff(tape.value(attn), want_attn) <= 1e-10);
}

#[test]
fn single_token_attention_is_one() {
    let mut store = ParamStore::new();
    let p = BlockParams::init("blk", 4, 2, &mut store, &mut SeedStream::new(1).rng()).unwrap();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let xs = tokens(&mut tape, common::noise(4, 3 * 4), [3, 1, 4]);
    let (_, attn) = vit_block_forward(&mut tape, &bind, &p, xs).unwrap();
    assert!(tape.value(attn).iter().all(|&w| w == 1.0));
}

#[test]
fn vit_block_is_token_permutation_equivariant_in_f32() {
    let (b, t, e, h) = (2, 6, 8, 2);
    let mut store64 = ParamStore::new();
    let p = BlockParams::init("blk", e, h, &mut store64, &mut SeedStream::new(3).rng()).unwrap();
    scramble(&mut store64, 3, 0.4);
    let store = store64.cast::<f32>();
    let x = common::noise(33, b * t * e);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut permuted = vec![0.0; x.len()];
    for s in 0..b {
        for (i, &src) in perm.iter().enumerate() {
            permuted[(s * t + i) * e..(s * t + i + 1) * e].copy_from_slice(&x[(s * t + src) * e..(s * t + src + 1) * e]);
        }
    }
    let run = |data: &[f64]| {
        let mut tape = Tape::<f32>::new();
        let bind = store.bind(&mut tape);
        let v = tape.constant(Tensor::new([b, t, e], data.iter().map(|&v| v as f32).collect()).unwrap());
        let xs = TokenSequence::from_var(&tape, v).unwrap();
        let (y, _) = vit_block_forward(&mut tape, &bind, &p, xs).unwrap();
        tape.value(y.var).to_vec()
    };
    let (y, yp) = (run(&x), run(&permuted));
    for s in 0..b {
        for (i, &src) in perm.iter().enumerate() {
            for j in 0..e {
                let d = (yp[(s * t + i) * e + j] - y[(s * t + src) * e + j]).abs();
                assert!(d <= 1e-5, "token {i} channel {j}: {d}");
            }
        }
    }
}

#[test]
fn fusion_stack_matches_oracle() {
    let (b, t, e, h, n) = (2, 6, 16, 2, 2);
    let mut store = ParamStore::new();
    let p = EncoderParams::init(e, h, n, &mut store, &mut SeedStream::new(5).rng()).unwrap();
    scramble(&mut store, 5, 0.3);
    let (xa, xb) = (common::noise(51, b * t * e), common::noise(52, b * t * e));

    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let ya = tokens(&mut tape, xa.clone(), [b, t, e]);
    let yb = tokens(&mut tape, xb.clone(), [b, t, e]);
    let out = mfavbs_forward(&mut tape, &bind, &p, ya, yb, false, true).unwrap();

    let (mut want_a, mut want_b, mut want_ha) = (Vec::new(), Vec::new(), Vec::new());
    for (ra, rb) in to_rows(&xa, b, t, e).into_iter().zip(to_rows(&xb, b, t, e)) {
        let (oa, ob) = common::fusion_stack(&store, n, h, &ra, &rb);
        want_ha.extend(oa[0].clone());
        want_a.extend(oa.into_iter().flatten());
        want_b.extend(ob.into_iter().flatten());
    }
    assert!(max_diff(tape.value(out.tokens_a.var), want_a) <= 1e-9);
    assert!(max_diff(tape.value(out.tokens_b.var), want_b) <= 1e-9);
    assert!(max_diff(tape.value(out.h_a), want_ha) <= 1e-9);

    assert_eq!(out.attention.len(), 3 * n);
    for map in &out.attention {
        let expect = if map.layer % 2 == 1 { 2 * t } else { t };
        assert_eq!(map.tokens(), expect);
        assert!(map.max_row_error() <= 1e-12);
    }
}

#[test]
fn passthrough_is_final_norm_of_summary() {
    let (b, t, e) = (3, 4, 8);
    let mut store = ParamStore::new();
    let p = EncoderParams::init(e, 2, 0, &mut store, &mut SeedStream::new(2).rng()).unwrap();
    scramble(&mut store, 2, 0.5);
    let x = common::noise(21, b * t * e);
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let ya = tokens(&mut tape, x.clone(), [b, t, e]);
    let out = mfavbs_forward(&mut tape, &bind, &p, ya, ya, false, false).unwrap();
    let g = common::param(&store, "encoder.final_ln.gamma");
    let be = common::param(&store, "encoder.final_ln.beta");
    let want: Vec<f64> = to_rows(&x, b, t, e)
        .iter()
        .flat_map(|s| common::layer_norm(&s[0], &g, &be))
        .collect();
    assert!(max_diff(tape.value(out.h_a), want) <= 1e-12);
    assert!(out.attention.is_empty());
}

#[test]
fn branch_swap_is_equivariant_in_f32() {
    let (b, t, e, h, n) = (2, 6, 16, 2, 2);
    let mut store64 = ParamStore::new();
    let p = EncoderParams::init(e, h, n, &mut store64, &mut SeedStream::new(8).rng()).unwrap();
    scramble(&mut store64, 8, 0.3);
    let store = store64.cast::<f32>();
    let xa: Vec<f32> = common::noise(81, b * t * e).into_iter().map(|v| v as f32).collect();
    let xb: Vec<f32> = common::noise(82, b * t * e).into_iter().map(|v| v as f32).collect();
    let run = |first: &[f32], second: &[f32]| {
        let mut tape = Tape::<f32>::new();
        let bind = store.bind(&mut tape);
        let a = tape.constant(Tensor::new([b, t, e], first.to_vec()).unwrap());
        let bb = tape.constant(Tensor::new([b, t, e], second.to_vec()).unwrap());
        let (a, bb) = (TokenSequence::from_var(&tape, a).unwrap(), TokenSequence::from_var(&tape, bb).unwrap());
        let out = mfavbs_forward(&mut tape, &bind, &p, a, bb, false, false).unwrap();
        (tape.value(out.h_a).to_vec(), tape.value(out.h_b).to_vec())
    };
    let (ha, hb) = run(&xa, &xb);
    let (ha2, hb2) = run(&xb, &xa);
    let d = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(d(&ha, &hb2) <= 1e-5);
    assert!(d(&hb, &ha2) <= 1e-5);
}

#[test]
fn cat_and_split_layout() {
    let (b, t, e) = (2, 3, 4);
    let mut tape = Tape::<f64>::new();
    let (xa, xb) = (common::noise(1, b * t * e), common::noise(2, b * t * e));
    let a = tokens(&mut tape, xa.clone(), [b, t, e]);
    let bb = tokens(&mut tape, xb.clone(), [b, t, e]);
    let joined = cat_tokens(&mut tape, a, bb).unwrap();
    assert_eq!(joined.shape(), [2, 6, 4]);
    let y = tape.value(joined.var);
    for (m, j, k) in [(0, 0, 1), (1, 2, 3), (0, 1, 0), (1, 0, 2)] {
        assert_eq!(y[(m * 2 * t + t + j) * e + k], xb[(m * t + j) * e + k]);
        assert_eq!(y[(m * 2 * t + j) * e + k], xa[(m * t + j) * e + k]);
    }
    let same = cat_tokens(&mut tape, a, a).unwrap();
    let (l, r) = split_tokens(&mut tape, same).unwrap();
    assert_eq!(tape.value(l.var), tape.value(r.var));

    let mut half_zero = vec![0.0; b * 2 * t * e];
    for m in 0..b {
        for i in t..2 * t {
            for k in 0..e {
                half_zero[(m * 2 * t + i) * e + k] = 1.0 + k as f64;
            }
        }
    }
    let y = tokens(&mut tape, half_zero, [b, 2 * t, e]);
    let (first, _) = split_tokens(&mut tape, y).unwrap();
    assert!(tape.value(first.var).iter().all(|&v| v == 0.0));
}

#[test]
fn split_routes_gradients_to_its_half() {
    let (b, t, e) = (1, 2, 3);
    let mut tape = Tape::<f64>::new();
    let y = tape.leaf(Tensor::new([b, 2 * t, e], common::noise(9, 2 * t * e)).unwrap(), true);
    let seq = TokenSequence::from_var(&tape, y).unwrap();
    let (_, second) = split_tokens(&mut tape, seq).unwrap();
    let loss = tape.sum_all(second.var).unwrap();
    let g = tape.backward(loss).unwrap().wrt(y);
    let (head, tail) = g.data().split_at(t * e);
    assert!(head.iter().all(|&v| v == 0.0));
    assert!(tail.iter().all(|&v| v == 1.0));
}

#[test]
fn summary_index_follows_fusion_switch() {
    let (b, t, e) = (2, 4, 3);
    let mut tape = Tape::<f64>::new();
    let x = common::noise(7, b * t * e);
    let seq = tokens(&mut tape, x.clone(), [b, t, e]);
    for (fusion, index) in [(false, 0), (true, 1)] {
        let s = extract_summary(&mut tape, seq, fusion).unwrap();
        let want: Vec<f64> = (0..b).flat_map(|m| x[(m * t + index) * e..(m * t + index + 1) * e].to_vec()).collect();
        assert_eq!(tape.value(s), want.as_slice());
    }
}

#[test]
fn tiny_pipeline_total_loss_matches_composed_oracle() {
    let config = TrainConfig::parse("batch=4\nside=16\nstem_convs=2\nembed=16\nheads=2\ndepth=2\nclusters=3\nproj_dim=8\nclip_fusion=true\nseed=3\n").unwrap();
    let mut model = Model::<f64>::init(&config).unwrap();
    scramble(&mut model.store, 3, 0.25);
    let (b, s) = (config.batch, config.side);
    let ia = common::noise(31, b * 3 * s * s).into_iter().map(|v| 0.5 + 0.5 * v).collect::<Vec<_>>();
    let ib = common::noise(32, b * 3 * s * s).into_iter().map(|v| 0.5 + 0.5 * v).collect::<Vec<_>>();
    let clip = common::noise(33, b * 512).into_iter().map(|v| v / 20.0).collect::<Vec<_>>();

    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let va = tape.constant(Tensor::new([b, 3, s, s], ia.clone()).unwrap());
    let vb = tape.constant(Tensor::new([b, 3, s, s], ib.clone()).unwrap());
    let vc = tape.constant(Tensor::new([b, 512], clip.clone()).unwrap());
    let fwd = model.forward(&mut tape, &bind, va, vb, Some(vc), true, false).unwrap();
    let total = tape.scalar(fwd.loss.unwrap().total);

    let img = |data: &[f64], i: usize| data[i * 3 * s * s..(i + 1) * 3 * s * s].to_vec();
    let (mut ha, mut hb) = (Vec::new(), Vec::new());
    for i in 0..b {
        let c0 = &clip[i * 512..(i + 1) * 512];
        let ra = common::embed(&model.store, config.stem_convs, s, &img(&ia, i), Some(c0));
        let rb = common::embed(&model.store, config.stem_convs, s, &img(&ib, i), Some(c0));
        assert_eq!(ra.len(), config.tokens());
        let (oa, ob) = common::fusion_stack(&model.store, config.depth, config.heads, &ra, &rb);
        ha.push(oa[1].clone());
        hb.push(ob[1].clone());
    }
    let want = common::heads_loss(&model.store, &ha, &hb, config.tau_instance, config.tau_cluster, config.penalty_weight);
    assert!((total - want[5]).abs() <= 1e-9, "{total} vs {}", want[5]);
}
