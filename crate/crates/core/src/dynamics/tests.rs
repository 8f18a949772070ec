use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::models::CellKind;
use crate::numgrad::grad_check;

fn meta(kind: CellKind, seed: u64) -> MetaModel {
    let mut heads = BTreeMap::new();
    heads.insert(0, 2);
    MetaModel::new(kind, 8, 3, 2, 4, 0, heads, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Vanilla cell with `h' = tanh(0.5 h)`: a contraction onto 0.
fn contraction() -> MetaModel {
    let mut m = meta(CellKind::VanillaRnn, 1);
    m.params.insert("cell.w_x".into(), Tensor::zeros(&[5, 4]));
    let mut w = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        w.data_mut()[i * 4 + i] = 0.5;
    }
    m.params.insert("cell.w_h".into(), w);
    m.params.insert("cell.b".into(), Tensor::zeros(&[4]));
    m
}

/// GRU whose update gate is saturated open, so `h' = h` exactly.
fn identity_gru() -> MetaModel {
    let mut m = meta(CellKind::Gru, 2);
    m.params.insert("cell.w_z".into(), Tensor::zeros(&[9, 4]));
    m.params.insert("cell.b_z".into(), Tensor::vector(vec![60.0; 4]));
    m
}

fn rand_states(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..4).map(|_| rng.random_range(-0.9..0.9)).collect()).collect()
}

fn batch() -> SeqBatch {
    SeqBatch::new(&(0..10).map(|i| vec![i % 8, (i + 3) % 8, (2 * i) % 8]).collect::<Vec<_>>()).unwrap()
}

#[test]
fn candidates_count_and_determinism() {
    let m = meta(CellKind::Gru, 3);
    let a = collect_candidates(&m, &[0.1, 0.2], 0, &batch(), 1, 9).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a, collect_candidates(&m, &[0.1, 0.2], 0, &batch(), 1, 9).unwrap());
    assert_eq!(collect_candidates(&m, &[0.1, 0.2], 0, &batch(), 3, 9).unwrap().len(), 30);
    let mut zero = m.clone();
    zero.params.values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let c = collect_candidates(&zero, &[0.1, 0.2], 0, &batch(), 2, 1).unwrap();
    assert!(c.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn contraction_has_a_single_fixed_point() {
    let m = contraction();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [1, 7, 40] {
        let fps = find_fixed_points(&m, &[0.0, 0.0], &[0.0; 3], &rand_states(n, &mut rng), &FixedPointOptions::default()).unwrap();
        assert_eq!(fps.len(), 1);
        assert!(fps.points[0].iter().all(|v| v.abs() < 1e-4));
        assert!(fps.residuals[0] <= 1e-4);
    }
}

#[test]
fn identity_map_keeps_every_candidate_until_dedup() {
    let m = identity_gru();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cands = rand_states(20, &mut rng);
    let fps = find_fixed_points(&m, &[0.3, 0.3], &[0.0; 3], &cands, &FixedPointOptions::default()).unwrap();
    assert_eq!(fps.len(), 20);
    assert!(fps.residuals.iter().all(|&r| r == 0.0));
    let opts = FixedPointOptions { radius: 10.0, ..FixedPointOptions::default() };
    let one = find_fixed_points(&m, &[0.3, 0.3], &[0.0; 3], &cands, &opts).unwrap();
    assert_eq!(one.len(), 1);
    let mut dup = cands.clone();
    dup.push(cands[0].iter().map(|v| v + 1e-3).collect());
    assert_eq!(find_fixed_points(&m, &[0.3, 0.3], &[0.0; 3], &dup, &FixedPointOptions::default()).unwrap().len(), 20);
}

#[test]
fn retained_points_pass_independent_reevaluation() {
    let m = meta(CellKind::Gru, 6);
    let cands = collect_candidates(&m, &[0.5, -0.5], 0, &batch(), 4, 2).unwrap();
    let opts = FixedPointOptions { max_steps: 3000, ..FixedPointOptions::default() };
    let fps = find_fixed_points(&m, &[0.5, -0.5], &[0.0; 3], &cands, &opts).unwrap();
    let res = residuals(&m, &fps.theta, &fps.x_star, &fps.points).unwrap();
    assert_eq!(res, fps.residuals);
    assert!(res.iter().all(|&r| r <= opts.tol));
    for i in 0..fps.len() {
        for j in 0..i {
            assert!(dist(&fps.points[i], &fps.points[j]) > opts.radius);
        }
    }
    assert!(find_fixed_points(&m, &[0.5, -0.5], &[0.0; 3], &[], &opts).unwrap().is_empty());
    let bad = FixedPointOptions { tol: 0.0, ..opts };
    assert!(find_fixed_points(&m, &[0.5, -0.5], &[0.0; 3], &cands, &bad).is_err());
}

#[test]
fn fixed_point_objective_passes_grad_check() {
    for kind in [CellKind::Gru, CellKind::VanillaRnn] {
        let m = meta(kind, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut point = Bindings::new();
        for (k, v) in &m.params {
            point.insert(format!("meta.{k}"), v.clone());
        }
        point.insert("h".into(), Tensor::from_rows(&rand_states(3, &mut rng)));
        let err = grad_check(|g| Ok(build_fixed_point_loss(g, &m, &[0.2, 0.9], &[0.1, -0.3, 0.5], 3)), &point, 1e-6).unwrap();
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn segment_has_zero_thickness() {
    let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let readout: Vec<f64> = (0..6).map(|i| -(i as f64)).collect();
    let s = summarize_points(&pts, &readout).unwrap();
    assert!(s.thickness < 1e-7);
    assert!((s.extent - 5.0 * 6f64.sqrt()).abs() < 1e-9);
    assert!(s.readout.windows(2).all(|w| w[0] <= w[1]), "oriented so readout increases");
    assert!((s.spearman - 1.0).abs() < 1e-12);
    assert!(summarize_points(&pts[..1], &readout[..1]).is_err());
}

#[test]
fn isotropic_cloud_aspect_ratio() {
    // 50 standard normal points in 3-D: the expected range of one
    // coordinate is about 4.5 standard deviations, the first principal
    // direction stretches it slightly and the trailing components shrink
    // slightly, so the ratio sits near 5
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ratios = Vec::new();
    for _ in 0..200 {
        let pts: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let s = summarize_points(&pts, &vec![0.0; 50]).unwrap();
        ratios.push(s.aspect_ratio());
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((4.6..6.0).contains(&mean), "{mean}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn summary_ignores_point_order(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-4.0..4.0), rng.random_range(-0.5..0.5)]).collect();
        let readout: Vec<f64> = pts.iter().map(|p| p[0] + rng.random_range(-0.1..0.1)).collect();
        let a = summarize_points(&pts, &readout).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.reverse();
        order.swap(1, 5);
        let pp: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].clone()).collect();
        let rr: Vec<f64> = order.iter().map(|&i| readout[i]).collect();
        let b = summarize_points(&pp, &rr).unwrap();
        prop_assert!((a.extent - b.extent).abs() < 1e-9);
        prop_assert!((a.thickness - b.thickness).abs() < 1e-9);
        prop_assert_eq!(a.readout, b.readout);
    }

    #[test]
    fn word_score_is_additive_over_positive_sets(split in 0usize..5) {
        let m = meta(CellKind::Gru, 12);
        let h = vec![0.1, -0.2, 0.3, 0.0];
        let all: Vec<usize> = vec![0, 1, 2, 3, 4];
        let words = |pos: Vec<usize>, neg: Vec<usize>| WordSets { positive: pos, negative: neg, neutral: vec![] };
        let whole = word_score(&m, &[0.2, 0.1], &h, &words(all.clone(), vec![]), 0).unwrap();
        let left = word_score(&m, &[0.2, 0.1], &h, &words(all[..split].to_vec(), vec![]), 0).unwrap();
        let right = word_score(&m, &[0.2, 0.1], &h, &words(all[split..].to_vec(), vec![]), 0).unwrap();
        prop_assert!((whole - left - right).abs() < 1e-12);
        let neg = word_score(&m, &[0.2, 0.1], &h, &words(vec![], all[split..].to_vec()), 0).unwrap();
        prop_assert!((neg + right).abs() < 1e-12);
    }
}

#[test]
fn neutral_point_selection() {
    assert_eq!(neutral_index(&[-0.5, 0.1], &[0.0, 0.0]).unwrap(), 1);
    assert_eq!(neutral_index(&[3.0], &[1e-5]).unwrap(), 0);
    assert_eq!(neutral_index(&[0.4, -0.4], &[2e-5, 1e-5]).unwrap(), 1);
    assert_eq!(neutral_index(&[-0.4, 0.4], &[1e-5, 2e-5]).unwrap(), 0);
    assert!(neutral_index(&[], &[]).is_err());
}

#[test]
fn word_score_examples() {
    let mut m = meta(CellKind::Gru, 13);
    m.params.insert("head0.w".into(), Tensor::zeros(&[4, 2]));
    m.params.insert("head0.b".into(), Tensor::vector(vec![0.0, 0.0]));
    let h = vec![0.0; 4];
    let sets = WordSets { positive: vec![0, 1], negative: vec![2], neutral: vec![5, 6] };
    assert_eq!(word_score(&m, &[0.0, 0.0], &h, &sets, 0).unwrap(), 0.0);
    m.params.insert("head0.b".into(), Tensor::vector(vec![0.0, 2.0]));
    let one = WordSets { positive: vec![3], negative: vec![], neutral: vec![] };
    assert!((word_score(&m, &[0.0, 0.0], &h, &one, 0).unwrap() - 2.0).abs() < 1e-12);
    let bad = WordSets { positive: vec![30], negative: vec![], neutral: vec![] };
    assert!(matches!(word_score(&m, &[0.0, 0.0], &h, &bad, 0), Err(Error::TokenOutOfRange { .. })));
}

#[test]
fn single_node_score_map_matches_direct_call() {
    let m = meta(CellKind::Gru, 14);
    let words = WordSets { positive: vec![0, 1], negative: vec![3], neutral: vec![6] };
    let b = batch();
    let inp = ScoreMapInputs {
        group: 0,
        words: &words,
        batch: &b,
        samples_per_seq: 2,
        x_star: &[0.0; 3],
        options: FixedPointOptions { max_steps: 2000, ..FixedPointOptions::default() },
        seed: 3,
    };
    let theta = vec![0.4, 0.1];
    let plane = Plane { origin: theta.clone(), u: vec![1.0, 0.0], v: vec![0.0, 1.0] };
    let grid = GridSpec { u_min: 0.0, u_max: 0.0, v_min: 0.0, v_max: 0.0, nu: 1, nv: 1 };
    let map = score_map(&m, &plane, &grid, &inp).unwrap();
    assert_eq!(map.len(), 1);
    assert_eq!(map[0].score, score_at(&m, &theta, &inp).unwrap());
    assert_eq!(map, score_map(&m, &plane, &grid, &inp).unwrap());
}

#[test]
fn spearman_values() {
    assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&[1.0, 1.0], &[0.0, 2.0]), 0.0);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]) - 0.9486832980505138).abs() < 1e-12);
}
