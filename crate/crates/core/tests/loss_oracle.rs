mod common;

use common::Rows;
use fusioncc::diffcore::{check_gradients, Tape, Tensor, Var};
use fusioncc::heads::{cluster_loss, cosine_sim, instance_loss, penalty, predict_clusters, LossConfig, LossReport};
use proptest::prelude::*;

fn rows(data: &[f64], n: usize, d: usize) -> Rows {
    (0..n).map(|i| data[i * d..(i + 1) * d].to_vec()).collect()
}

fn stochastic(data: &[f64], n: usize, k: usize) -> Vec<f64> {
    rows(data, n, k).iter().flat_map(|r| common::softmax(&r.iter().map(|v| 3.0 * v).collect::<Vec<_>>())).collect()
}

fn run(za: &[f64], zb: &[f64], n: usize, d: usize, cfg: &LossConfig, cluster: bool) -> (f64, f64) {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new([n, d], za.to_vec()).unwrap());
    let b = tape.constant(Tensor::new([n, d], zb.to_vec()).unwrap());
    let l = if cluster {
        cluster_loss(&mut tape, a, b, cfg).unwrap()
    } else {
        instance_loss(&mut tape, a, b, cfg).unwrap()
    };
    (tape.scalar(l.a), tape.scalar(l.b))
}

#[test]
fn instance_loss_matches_enumeration_over_seeds() {
    for seed in 0..100u64 {
        let n = 2 + (seed % 5) as usize;
        let d = 3 + (seed % 4) as usize;
        let za = common::noise(seed, n * d);
        let zb = common::noise(seed + 500, n * d);
        for strict in [false, true] {
            let cfg = LossConfig {
                tau_instance: 0.2 + 0.1 * (seed % 7) as f64,
                strict_negatives: strict,
                ..LossConfig::default()
            };
            let got = run(&za, &zb, n, d, &cfg, false);
            let want = common::info_nce(&rows(&za, n, d), &rows(&zb, n, d), cfg.tau_instance, strict);
            assert!((got.0 - want.0).abs() <= 1e-10 && (got.1 - want.1).abs() <= 1e-10, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn cluster_loss_matches_enumeration_over_seeds() {
    for seed in 0..100u64 {
        let n = 2 + (seed % 5) as usize;
        let k = 2 + (seed % 5) as usize;
        let ca = stochastic(&common::noise(seed + 1000, n * k), n, k);
        let cb = stochastic(&common::noise(seed + 2000, n * k), n, k);
        for (strict, rowwise) in [(false, false), (true, false), (false, true), (true, true)] {
            let cfg = LossConfig {
                tau_cluster: 0.5 + 0.25 * (seed % 3) as f64,
                strict_negatives: strict,
                rowwise_clusters: rowwise,
                ..LossConfig::default()
            };
            let got = run(&ca, &cb, n, k, &cfg, true);
            let (ra, rb) = (rows(&ca, n, k), rows(&cb, n, k));
            let want = if rowwise {
                common::info_nce(&ra, &rb, cfg.tau_cluster, strict)
            } else {
                common::info_nce(&common::columns(&ra), &common::columns(&rb), cfg.tau_cluster, strict)
            };
            assert!((got.0 - want.0).abs() <= 1e-10 && (got.1 - want.1).abs() <= 1e-10, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn orthogonal_pairs_give_closed_form() {
    // z1a = z1b = e1, z2a = z2b = e2: for each anchor the positive has
    // similarity 1 and the two negatives 0
    let za = [1.0, 0.0, 0.0, 1.0];
    let cfg = LossConfig {
        tau_instance: 1.0,
        ..LossConfig::default()
    };
    let (a, b) = run(&za, &za, 2, 2, &cfg, false);
    let e = std::f64::consts::E;
    let want = -(e / (e + 2.0)).ln();
    assert!((a - want).abs() <= 1e-12 && (b - want).abs() <= 1e-12);
}

#[test]
fn balanced_one_hot_assignments() {
    let (n, k) = (4, 4);
    let onehot: Vec<f64> = (0..n * k).map(|i| if i / k == i % k { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new([n, k], onehot.clone()).unwrap());
    let p = penalty(&mut tape, c).unwrap();
    assert!(tape.scalar(p).abs() <= 1e-9);

    let cfg = LossConfig {
        tau_cluster: 1.0,
        ..LossConfig::default()
    };
    let got = run(&onehot, &onehot, n, k, &cfg, true);
    let r = rows(&onehot, n, k);
    let want = common::info_nce(&common::columns(&r), &common::columns(&r), 1.0, false);
    let e = std::f64::consts::E;
    let closed = -(e / (e + 2.0 * k as f64 - 2.0)).ln();
    assert!((got.0 - want.0).abs() <= 1e-10, "{got:?} vs {want:?}");
    assert!((want.0 - closed).abs() <= 1e-10, "{want:?} vs {closed}");
}

#[test]
fn point_mass_penalty_is_log_k() {
    let k = 5;
    let mut data = vec![0.0; 3 * k];
    for r in 0..3 {
        data[r * k + 2] = 1.0;
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::new([3, k], data).unwrap());
    let p = penalty(&mut tape, c).unwrap();
    assert!((tape.scalar(p) - (k as f64).ln()).abs() <= 1e-9);
}

#[test]
fn cosine_oracle_and_zero_guard() {
    let c = cosine_sim(&[1.0, 2.0], &[3.0, 4.0]);
    assert!((c.value - 11.0 / (5f64.sqrt() * 5.0)).abs() <= 1e-15);
    assert!(!c.zero_norm);
    let z = cosine_sim(&[0.0, 0.0], &[1.0, 1.0]);
    assert_eq!(z.value, 0.0);
    assert!(z.zero_norm);
}

#[test]
fn total_is_the_sum_of_components() {
    let report = LossReport {
        instance_a: 1.0,
        instance_b: 1.0,
        cluster_a: 2.0,
        cluster_b: 2.0,
        penalty: 0.5,
        total: 0.0,
        tau_instance: 0.5,
        tau_cluster: 1.0,
    };
    assert_eq!(report.recompose(1.0), 6.5);
}

#[test]
fn predict_clusters_cases() {
    assert_eq!(predict_clusters(&[0.0, 1.0, 0.0, 1.0, 0.0, 0.0], 3), vec![1, 0]);
    assert_eq!(predict_clusters(&[0.25f64; 4], 4), vec![0]);
    assert_eq!(predict_clusters(&[0.2, 0.5, 0.3], 3), vec![1]);
}

fn loss_of(tape: &mut Tape<f64>, inputs: &[Var], cfg: &LossConfig, cluster: bool) -> fusioncc::Result<Var> {
    let l = if cluster {
        let ca = tape.softmax(inputs[0])?;
        let cb = tape.softmax(inputs[1])?;
        let l = cluster_loss(tape, ca, cb, cfg)?;
        let pa = penalty(tape, ca)?;
        let s = tape.add(l.a, l.b)?;
        return tape.add(s, pa);
    } else {
        instance_loss(tape, inputs[0], inputs[1], cfg)?
    };
    tape.add(l.a, l.b)
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..6u64 {
        for strict in [false, true] {
            for rowwise in [false, true] {
                let cfg = LossConfig {
                    strict_negatives: strict,
                    rowwise_clusters: rowwise,
                    ..LossConfig::default()
                };
                let (n, d) = (3, 4);
                let inputs = [
                    Tensor::new([n, d], common::noise(seed, n * d)).unwrap(),
                    Tensor::new([n, d], common::noise(seed + 9, n * d)).unwrap(),
                ];
                for cluster in [false, true] {
                    let r = check_gradients(&inputs, 1e-5, |t, v| loss_of(t, v, &cfg, cluster)).unwrap();
                    assert!(r.passes(1e-4), "seed {seed} strict {strict} rowwise {rowwise} cluster {cluster}: {r:?}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn instance_loss_is_scale_and_swap_invariant(seed in 0u64..10_000, n in 2usize..6, c in 0.1f64..10.0) {
        let d = 5;
        let za = common::noise(seed, n * d);
        let zb = common::noise(seed ^ 0xabc, n * d);
        let cfg = LossConfig::default();
        let base = run(&za, &zb, n, d, &cfg, false);
        let scaled: (Vec<f64>, Vec<f64>) = (za.iter().map(|v| v * c).collect(), zb.iter().map(|v| v * c).collect());
        let s = run(&scaled.0, &scaled.1, n, d, &cfg, false);
        prop_assert!((base.0 + base.1 - s.0 - s.1).abs() <= 1e-10);
        let sw = run(&zb, &za, n, d, &cfg, false);
        prop_assert!((base.0 + base.1 - sw.0 - sw.1).abs() <= 1e-10);
    }

    #[test]
    fn instance_loss_is_batch_permutation_invariant(seed in 0u64..10_000, n in 2usize..6) {
        let d = 4;
        let za = common::noise(seed, n * d);
        let zb = common::noise(seed + 1, n * d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.sort_by_key(|&i| common::noise(seed + 2 + i as u64, 1)[0].to_bits());
        let pick = |z: &[f64]| perm.iter().flat_map(|&i| z[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
        let cfg = LossConfig::default();
        let a = run(&za, &zb, n, d, &cfg, false);
        let b = run(&pick(&za), &pick(&zb), n, d, &cfg, false);
        prop_assert!((a.0 - b.0).abs() <= 1e-10 && (a.1 - b.1).abs() <= 1e-10);
    }

    #[test]
    fn tighter_positive_lowers_instance_loss(seed in 0u64..10_000) {
        // moving z0b toward z0a raises only the positive similarity of
        // anchor 0; with orthonormal other rows everything else is fixed
        let d = 6;
        let e = |i: usize| (0..d).map(|j| if j == i { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let mix = common::noise(seed, 1)[0].abs() * 0.8 + 0.1;
        let za = [e(0), e(1)].concat();
        let zb = |w: f64| [(0..d).map(|j| w * e(0)[j] + (1.0 - w) * e(5)[j]).collect::<Vec<_>>(), e(2)].concat();
        let cfg = LossConfig::default();
        let lo = run(&za, &zb(mix), 2, d, &cfg, false);
        let hi = run(&za, &zb((mix + 0.05).min(1.0)), 2, d, &cfg, false);
        prop_assert!(hi.0 < lo.0);
    }

    #[test]
    fn penalty_is_nonnegative(seed in 0u64..10_000, n in 1usize..6, k in 2usize..6) {
        let c = stochastic(&common::noise(seed, n * k), n, k);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new([n, k], c).unwrap());
        let p = penalty(&mut tape, v).unwrap();
        prop_assert!(tape.scalar(p) >= -1e-9);
    }

    #[test]
    fn argmax_survives_monotone_transform(seed in 0u64..10_000, n in 1usize..6, k in 2usize..6) {
        let c = stochastic(&common::noise(seed, n * k), n, k);
        let t: Vec<f64> = c.iter().map(|p| (p * 7.0).exp() + p.powi(3)).collect();
        prop_assert_eq!(predict_clusters(&c, k), predict_clusters(&t, k));
    }
}
