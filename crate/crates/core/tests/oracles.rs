mod common;

use common::*;
use fewshot_pc::contrastive::{pointwise_contrastive_loss, ContrastiveBatch};
use fewshot_pc::data::PointCloud;
use fewshot_pc::geometry::{fps, fps_count, knn};
use fewshot_pc::labelprop::{affinity, ce_loss, predict, propagate_affinity, reference_matrix, softmax_map};
use fewshot_pc::prototypes::{center_loss, generate_prototypes};
use fewshot_pc::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn knn_and_fps_match_brute_force() {
    let mut r = rng(1);
    for trial in 0..20 {
        let m = r.random_range(10..=128);
        let pts = random_matrix(&mut r, m, 3, 1.0);
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let k = r.random_range(1..m.min(12));
        let nn = knn(&cloud, k).unwrap();
        for (i, want) in brute_knn(&pts, k).iter().enumerate() {
            assert_eq!(nn.row(i), &want[..], "trial {trial} point {i}");
        }
        let count = r.random_range(1..=m);
        let start = r.random_range(0..m);
        assert_eq!(fps(&cloud, count, start).unwrap().0, brute_fps(&pts, count, start), "trial {trial}");
    }
}

#[test]
fn fps_count_rounding() {
    assert_eq!(fps_count(10, 0.4).unwrap(), 4);
    assert_eq!(fps_count(1024, 0.4).unwrap(), 410);
    assert_eq!(fps_count(7, 1.0).unwrap(), 7);
}

#[test]
fn contrastive_matches_double_loop() {
    let mut r = rng(2);
    for _ in 0..10 {
        let o = random_matrix(&mut r, 8, 4, 1.5);
        let o2 = random_matrix(&mut r, 8, 4, 1.5);
        let got = pointwise_contrastive_loss(&ContrastiveBatch::new(o.clone(), o2.clone()).unwrap()).unwrap();
        assert!((got - naive_contrastive(&o, &o2)).abs() < 1e-12);
    }
}

#[test]
fn center_loss_matches_double_loop() {
    let mut r = rng(3);
    for _ in 0..10 {
        let x = random_matrix(&mut r, 12, 4, 1.0);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let got = center_loss(&x, &labels, 3, 1.0).unwrap();
        assert!((got - naive_center_loss(&x, &labels, 3, 1.0)).abs() < 1e-12);
    }
}

#[test]
fn center_loss_hand_example() {
    let x = Matrix::<f64>::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]);
    assert!((center_loss(&x, &[0, 0], 1, 1.0).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn affinity_and_propagation_match_dense_oracles() {
    let mut r = rng(4);
    for _ in 0..10 {
        let z = r.random_range(8..=40);
        let x = random_matrix(&mut r, z, 5, 1.0);
        let w = affinity(&x, None).unwrap().w;
        assert!(w.max_abs_diff(&naive_affinity(&x)) < 1e-12);
        let l = reference_matrix(3, 2, z - 6);
        let f = propagate_affinity(&w, &l, 0.9).unwrap();
        assert!(f.max_abs_diff(&naive_propagation(&w, &l, 0.9)) < 1e-10);
    }
}

#[test]
fn cross_entropy_matches_double_loop() {
    let mut r = rng(5);
    let f = random_matrix(&mut r, 15, 3, 2.0);
    let labels = vec![(0..6).map(|i| i % 3).collect::<Vec<_>>(), (0..5).map(|i| (i * 2) % 3).collect()];
    let got = ce_loss(&softmax_map(&f.select_rows(&(4..15).collect::<Vec<_>>())), &labels).unwrap();
    assert!((got - naive_ce(&f, 4, &labels)).abs() < 1e-12);
}

#[test]
fn propagation_follows_block_structure() {
    // Two far-apart clusters, each holding the prototypes of one class.
    let x = Matrix::from_rows(&[
        vec![0.0, 0.0],
        vec![10.0, 10.0],
        vec![0.1, 0.0],
        vec![0.0, 0.2],
        vec![10.1, 10.0],
        vec![10.0, 9.8],
    ]);
    let w = affinity(&x, Some(1)).unwrap().w;
    let f = propagate_affinity(&w, &reference_matrix(2, 1, 4), 0.9).unwrap();
    assert_eq!(predict(&softmax_map(&f))[2..], [0, 0, 1, 1]);
}

#[test]
fn prototypes_lie_in_their_class_hull() {
    let mut r = rng(6);
    let x = random_matrix(&mut r, 30, 4, 1.0);
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let set = generate_prototypes(&x, &labels, 3, 4).unwrap();
    for (n, groups) in set.groups.iter().enumerate() {
        for (p, group) in groups.iter().enumerate() {
            assert!(group.iter().all(|&i| labels[i] == n));
            // Each prototype is the mean of its group.
            let row = n * set.count + p;
            for c in 0..4 {
                let mean = group.iter().map(|&i| x[(i, c)]).sum::<f64>() / group.len() as f64;
                assert!((set.prototypes[(row, c)] - mean).abs() < 1e-12);
            }
        }
        // Every point of the class belongs to exactly one group.
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..30).filter(|&i| labels[i] == n).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn knn_rows_are_sorted_and_exclude_self(seed in any::<u64>(), m in 4usize..60, k in 1usize..4) {
        let mut r = rng(seed);
        let pts = random_matrix(&mut r, m, 3, 1.0);
        let nn = knn(&PointCloud::new(pts.clone()).unwrap(), k).unwrap();
        for i in 0..m {
            let row = nn.row(i);
            prop_assert!(!row.contains(&i));
            let d: Vec<f64> = row.iter().map(|&j| (0..3).map(|c| (pts[(i, c)] - pts[(j, c)]).powi(2)).sum()).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fps_is_a_distinct_prefix_sequence(seed in any::<u64>(), m in 2usize..60) {
        let mut r = rng(seed);
        let cloud = PointCloud::new(random_matrix(&mut r, m, 3, 1.0)).unwrap();
        let all = fps(&cloud, m, 0).unwrap().0;
        let mut sorted = all.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..m).collect::<Vec<_>>());
        let half = fps(&cloud, m / 2 + 1, 0).unwrap().0;
        prop_assert_eq!(&all[..half.len()], &half[..]);
    }

    #[test]
    fn softmax_rows_are_stochastic(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut r = rng(seed);
        let h = softmax_map(&random_matrix(&mut r, 10, 4, scale));
        for i in 0..10 {
            let s: f64 = h.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            prop_assert!(h.row(i).iter().all(|&p| p >= 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn center_loss_is_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let x = random_matrix(&mut r, 9, 3, 2.0);
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        prop_assert!(center_loss(&x, &labels, 3, 1.0).unwrap() >= 0.0);
    }

    #[test]
    fn affinity_is_symmetric_with_unit_diagonal(seed in any::<u64>(), z in 3usize..25) {
        let mut r = rng(seed);
        let w = affinity(&random_matrix(&mut r, z, 4, 1.0), None).unwrap().w;
        for i in 0..z {
            prop_assert_eq!(w[(i, i)], 1.0);
            for j in 0..z {
                prop_assert_eq!(w[(i, j)], w[(j, i)]);
                prop_assert!(w[(i, j)] >= 0.0 && w[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn zero_gamma_returns_reference(seed in any::<u64>(), z in 7usize..25) {
        let mut r = rng(seed);
        let w = affinity(&random_matrix(&mut r, z, 4, 1.0), None).unwrap().w;
        let l = reference_matrix(3, 2, z - 6);
        prop_assert_eq!(propagate_affinity(&w, &l, 0.0).unwrap(), l);
    }
}
