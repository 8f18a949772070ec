use std::collections::BTreeMap;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::models::CellKind;
use crate::tasks::{gen_valence_task, split_dataset, Split, SplitFractions, TaskKind, TaskSpec};

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

fn rand_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

#[test]
fn pca_two_point_instance() {
    let a = fit_pca(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
    assert_eq!(a.spectrum, vec![1.0, 0.0]);
    assert_eq!(a.axes[0], vec![1.0, 0.0]);
    let same = fit_pca(&vec![vec![3.0, 1.0]; 4]).unwrap();
    assert!(same.spectrum.iter().all(|&v| v == 0.0));
    assert!(fit_pca(&[vec![1.0]]).is_err());
}

#[test]
fn pca_axes_are_orthonormal_and_reconstruct() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, d) in [(10, 4), (3, 5), (50, 2)] {
        let pts = rand_points(n, d, &mut rng);
        let a = fit_pca(&pts).unwrap();
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&a.axes[i], &a.axes[j]) - want).abs() < 1e-8);
            }
        }
        let var: f64 = pts.iter().map(|p| dist(p, &a.mean).powi(2)).sum::<f64>() / n as f64;
        assert!((a.spectrum.iter().sum::<f64>() - var).abs() < 1e-8);
        assert!(a.spectrum.windows(2).all(|w| w[0] >= w[1]));
        for p in &pts {
            let back = a.reconstruct(&a.project(p));
            assert!(dist(&back, p) < 1e-8);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn pca_rotates_with_the_data(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        // distinct spread per axis keeps the eigenvalues separated
        let pts: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2)])
            .collect();
        let q = random_orthogonal(d, &mut rng);
        let rot: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| (0..d).map(|j| (0..d).map(|i| p[i] * q[(i, j)]).sum()).collect())
            .collect();
        let a = fit_pca(&pts).unwrap();
        let b = fit_pca(&rot).unwrap();
        for k in 0..d {
            prop_assert!((a.spectrum[k] - b.spectrum[k]).abs() < 1e-8);
            let axis: Vec<f64> = (0..d).map(|j| (0..d).map(|i| a.axes[k][i] * q[(i, j)]).sum()).collect();
            prop_assert!(dot(&axis, &b.axes[k]).abs() > 1.0 - 1e-6);
        }
    }

    #[test]
    fn svcca_is_symmetric(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_rows(&rand_points(40, 5, &mut rng));
        let b = Tensor::from_rows(&rand_points(40, 4, &mut rng));
        let ab = svcca_distance(&a, &b, 4).unwrap();
        let ba = svcca_distance(&b, &a, 4).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
    }
}

#[test]
fn variance_component_counts() {
    assert_eq!(components_for_variance(&[9.0, 1.0], 0.95).unwrap(), 2);
    assert_eq!(components_for_variance(&[19.0, 1.0], 0.95).unwrap(), 1);
    assert_eq!(components_for_variance(&[3.0, 2.0, 1.0, 0.0], 1.0).unwrap(), 3);
    assert_eq!(components_for_variance(&[0.0, 0.0], 0.5).unwrap(), 0);
    assert!(components_for_variance(&[1.0], 0.0).is_err());
}

#[test]
fn averaging() {
    assert_eq!(average_embeddings(&[vec![2.0, 0.0], vec![0.0, 2.0]], None).unwrap(), vec![1.0, 1.0]);
    assert_eq!(average_embeddings(&[vec![0.5, -1.0]], None).unwrap(), vec![0.5, -1.0]);
    let w = average_embeddings(&[vec![2.0, 0.0], vec![0.0, 2.0]], Some(&[1.0, 0.0])).unwrap();
    assert_eq!(w, vec![2.0, 0.0]);
    assert!(average_embeddings(&[], None).is_err());
    assert!(average_embeddings(&[vec![1.0]], Some(&[0.5])).is_err());
}

fn toy_meta() -> (MetaModel, SequenceDataset) {
    let mut heads = BTreeMap::new();
    heads.insert(0, 2);
    let meta = MetaModel::new(CellKind::Gru, 9, 3, 2, 6, 0, heads, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ds = gen_valence_task(&TaskSpec {
        kind: TaskKind::ValenceSentiment,
        vocab_size: 9,
        num_classes: 2,
        num_examples: 300,
        min_len: 3,
        max_len: 8,
        noise_rate: 0.0,
        seed: 4,
    })
    .unwrap();
    (meta, split_dataset(&ds, SplitFractions::protocol(0.8), 5).unwrap())
}

#[test]
fn evaluation_is_deterministic_and_bounded() {
    let (meta, ds) = toy_meta();
    let test = ds.indices(Split::Test);
    let a = evaluate_at(&meta, &[0.3, 0.1], 0, &ds, &test, Some(0.8)).unwrap();
    let b = evaluate_at(&meta, &[0.3, 0.1], 0, &ds, &test, Some(0.8)).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.accuracy));
    assert!((a.relative.unwrap() - a.accuracy / 0.8).abs() < 1e-15);
    let one = evaluate_at(&meta, &[0.3, 0.1], 0, &ds, &test[..1], None).unwrap();
    assert!(one.accuracy == 0.0 || one.accuracy == 1.0);
    assert!(evaluate_at(&meta, &[0.0, 0.0], 0, &ds, &[], None).is_err());
}

#[test]
fn single_node_landscape_equals_direct_evaluation() {
    let (meta, ds) = toy_meta();
    let test = ds.indices(Split::Test);
    let theta = vec![0.7, -0.2];
    let plane = Plane { origin: theta.clone(), u: vec![1.0, 0.0], v: vec![0.0, 1.0] };
    let grid = GridSpec { u_min: 0.0, u_max: 0.0, v_min: 0.0, v_max: 0.0, nu: 1, nv: 1 };
    let land = accuracy_landscape(&meta, &plane, &grid, 0, &ds, &test).unwrap();
    assert_eq!(land.nodes.len(), 1);
    assert_eq!(land.nodes[0].accuracy, evaluate_at(&meta, &theta, 0, &ds, &test, None).unwrap().accuracy);
    let flat = Plane { origin: theta, u: vec![1.0, 1.0], v: vec![2.0, 2.0] };
    assert!(accuracy_landscape(&meta, &flat, &grid, 0, &ds, &test).is_err());
}

#[test]
fn grid_covering_scales_bounding_box() {
    let g = GridSpec::covering(&[(0.0, 0.0), (2.0, 1.0)], 1.5, 3, 2);
    assert_eq!((g.u_min, g.u_max, g.v_min, g.v_max), (-0.5, 2.5, -0.25, 1.25));
    assert_eq!(g.node(1, 1), (1.0, 1.25));
    let p = Plane { origin: vec![1.0, 1.0, 0.0], u: vec![1.0, 0.0, 0.0], v: vec![1.0, 1.0, 0.0] };
    let (a, b) = p.coords(&p.point(0.3, -1.2));
    assert!((a - 0.3).abs() < 1e-12 && (b + 1.2).abs() < 1e-12);
}

#[test]
fn embedding_search_contract() {
    let (meta, ds) = toy_meta();
    let labeled = ds.indices(Split::MetaUnlabeled)[..40].to_vec();
    let before = meta.clone();
    let (th0, tr0) = ssl_optimize(&meta, 0, &ds, &labeled, &[0.0, 0.0], 0, 0.5).unwrap();
    assert_eq!(th0, vec![0.0, 0.0]);
    assert_eq!(tr0.len(), 1);
    let (theta, traj) = ssl_optimize(&meta, 0, &ds, &labeled, &[0.0, 0.0], 15, 5.0).unwrap();
    assert_eq!(meta, before);
    assert_eq!(traj.len(), 16);
    assert!(traj.windows(2).all(|w| w[1].loss <= w[0].loss));
    assert!(traj.last().unwrap().loss < traj[0].loss);
    assert_eq!(traj.last().unwrap().theta, theta);
    assert!(matches!(ssl_optimize(&meta, 0, &ds, &[], &[0.0, 0.0], 3, 0.1), Err(Error::EmptySplit(_))));
}

#[test]
fn search_gradient_matches_finite_differences() {
    let (meta, ds) = toy_meta();
    let idx = ds.indices(Split::Test)[..20].to_vec();
    let theta = [0.4, -0.3];
    let (_, g) = ssl_loss(&meta, 0, &ds, &idx, &theta).unwrap();
    for k in 0..2 {
        let mut p = theta;
        let mut m = theta;
        p[k] += 1e-6;
        m[k] -= 1e-6;
        let num = (ssl_loss(&meta, 0, &ds, &idx, &p).unwrap().0 - ssl_loss(&meta, 0, &ds, &idx, &m).unwrap().0) / 2e-6;
        assert!((num - g[k]).abs() <= 1e-4 * g[k].abs().max(1.0));
    }
}

#[test]
fn svcca_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::from_rows(&rand_points(60, 5, &mut rng));
    assert!(svcca_distance(&a, &a, 5).unwrap() < 1e-8);
    for _ in 0..5 {
        let q = random_orthogonal(5, &mut rng);
        let am = DMatrix::from_row_slice(60, 5, a.data()) * q;
        let aq = Tensor::from_rows(&(0..60).map(|i| am.row(i).iter().copied().collect()).collect::<Vec<_>>());
        assert!(svcca_distance(&a, &aq, 5).unwrap() < 1e-6);
    }
    // independent activations: canonical correlations are small, so the
    // distance approaches sqrt(2)
    let x = Tensor::from_rows(&rand_points(4000, 3, &mut rng));
    let y = Tensor::from_rows(&rand_points(4000, 3, &mut rng));
    let d = svcca_distance(&x, &y, 3).unwrap();
    assert!((d - 2f64.sqrt()).abs() < 0.05, "{d}");
    assert!(svcca_distance(&x, &y, 4).is_err());
}

fn pairwise(points: &[Vec<f64>]) -> Tensor {
    let n = points.len();
    Tensor::matrix(n, n, (0..n * n).map(|k| dist(&points[k / n], &points[k % n])).collect())
}

#[test]
fn mds_recovers_realizable_distances() {
    let pts = vec![vec![0.0], vec![1.0], vec![3.0]];
    let d = pairwise(&pts);
    let y = classical_mds(&d, 1).unwrap();
    let rows: Vec<Vec<f64>> = (0..3).map(|i| y.row(i).to_vec()).collect();
    let back = pairwise(&rows);
    for (a, b) in back.data().iter().zip(d.data()) {
        assert!((a - b).abs() < 1e-8);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pts = rand_points(7, 3, &mut rng);
    let d = pairwise(&pts);
    let y = classical_mds(&d, 3).unwrap();
    let back = pairwise(&(0..7).map(|i| y.row(i).to_vec()).collect::<Vec<_>>());
    for (a, b) in back.data().iter().zip(d.data()) {
        assert!((a - b).abs() < 1e-8);
    }
    // relabeling permutes the output rows, up to axis signs
    let perm = [3, 0, 6, 1, 5, 2, 4];
    let pp: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
    let yp = classical_mds(&pairwise(&pp), 3).unwrap();
    for (r, &i) in perm.iter().enumerate() {
        for k in 0..3 {
            assert!((yp.row(r)[k].abs() - y.row(i)[k].abs()).abs() < 1e-8);
        }
    }
}

#[test]
fn mds_edge_cases() {
    let z = classical_mds(&Tensor::zeros(&[4, 4]), 2).unwrap();
    assert!(z.data().iter().all(|&v| v.abs() < 1e-12));
    let asym = Tensor::matrix(2, 2, vec![0.0, 1.0, 2.0, 0.0]);
    assert!(classical_mds(&asym, 1).is_err());
}

#[test]
fn silhouette_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for k in 0..20 {
        let c = if k % 2 == 0 { 0.0 } else { 100.0 };
        pts.push(vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        labels.push(k % 2);
    }
    let s = silhouette(&pts, &labels).unwrap();
    assert!(s > 0.9);
    let swapped: Vec<usize> = labels.iter().map(|&l| 7 - l * 3).collect();
    assert!((silhouette(&pts, &swapped).unwrap() - s).abs() < 1e-12);
    assert_eq!(silhouette(&vec![vec![1.0, 1.0]; 4], &[0, 1, 0, 1]).unwrap(), 0.0);
    assert!(silhouette(&pts, &[0; 20]).is_err());
}

#[test]
fn convex_hull_membership() {
    let sq = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0), (0.5, 0.5)];
    assert_eq!(convex_hull(&sq).len(), 4);
    assert!(!outside_convex_hull((0.5, 0.2), &sq));
    assert!(!outside_convex_hull((1.0, 0.5), &sq));
    assert!(outside_convex_hull((1.2, 0.5), &sq));
    assert!(outside_convex_hull((3.0, 0.0), &[(0.0, 0.0), (1.0, 0.0)]));
    assert!(!outside_convex_hull((0.5, 0.0), &[(0.0, 0.0), (1.0, 0.0)]));
}
