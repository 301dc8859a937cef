//! Symmetries the pipeline must respect, checked on random inputs.

use bevloop::dataset::{recall_curve, LoopLabels, RankedQuery};
use bevloop::descriptor::{generate_descriptor, AttentionKind, DescriptorConfig, DescriptorParams};
use bevloop::encoder::FeatureVolume;
use bevloop::overlap::{estimate_overlap, OverlapConfig, OverlapParams};
use bevloop::tensor::ops::{matmul, softmax_rows};
use bevloop::tensor::{ParamStore, Tensor};
use bevloop::voxel::{voxelize, GridConfig, PointCloud};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn voxelization_ignores_point_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = GridConfig::desk();
    for _ in 0..1000 {
        let n = rng.random_range(0..300);
        let mut pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-60.0..60.0),
                    rng.random_range(-4.0..4.0),
                ]
            })
            .collect();
        let a = voxelize(&PointCloud::new(pts.clone()), &grid);
        pts.shuffle(&mut rng);
        let b = voxelize(&PointCloud::new(pts), &grid);
        assert_eq!(a, b);
    }
}

#[test]
fn descriptor_ignores_position_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (8, 4, 4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let mut store = ParamStore::new(trial);
        let head = DescriptorParams::new(
            &mut store,
            DescriptorConfig {
                channels: c,
                clusters: 4,
                dim: 16,
                attention: AttentionKind::SelfAttention,
            },
        );
        let f = random_tensor(&mut rng, &[c, h, w], 1.0);
        let mut perm: Vec<usize> = (0..h * w).collect();
        perm.shuffle(&mut rng);
        let shuffled = Tensor::from_fn([c, h, w], |i| {
            f.data()[(i / (h * w)) * h * w + perm[i % (h * w)]]
        });
        let a = generate_descriptor(&FeatureVolume { scan_id: 0, f }, &head, &store).unwrap();
        let b = generate_descriptor(
            &FeatureVolume {
                scan_id: 0,
                f: shuffled,
            },
            &head,
            &store,
        )
        .unwrap();
        // Relative to the vector norm, which is 1.
        let diff =
            a.v.iter()
                .zip(&b.v)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        worst = worst.max(diff);
    }
    assert!(worst <= 1e-9, "worst relative error {worst}");
}

#[test]
fn overlap_score_is_symmetric_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = 4;
    let mut store = ParamStore::new(0);
    let mut head = OverlapParams::new(&mut store, OverlapConfig::for_channels(c));
    for trial in 0..1000 {
        if trial % 100 == 0 {
            store = ParamStore::new(trial);
            head = OverlapParams::new(&mut store, OverlapConfig::for_channels(c));
        }
        let sparse = |rng: &mut ChaCha8Rng| {
            let f = random_tensor(rng, &[c, 4, 4], 2.0);
            let keep: Vec<bool> = (0..16).map(|i| i == 0 || rng.random_bool(0.7)).collect();
            Tensor::from_fn([c, 4, 4], |i| if keep[i % 16] { f.data()[i] } else { 0.0 })
        };
        let a = FeatureVolume {
            scan_id: 0,
            f: sparse(&mut rng),
        };
        let b = FeatureVolume {
            scan_id: 1,
            f: sparse(&mut rng),
        };
        let ab = estimate_overlap(&a, &b, &head, &store).unwrap().tau;
        let ba = estimate_overlap(&b, &a, &head, &store).unwrap().tau;
        assert!(rel(ab, ba) <= 1e-9, "{ab} vs {ba}");
        assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let (m, n) = (rng.random_range(1..8), rng.random_range(1..12));
        let scale = rng.random_range(0.1..50.0);
        let s = softmax_rows(&random_tensor(&mut rng, &[m, n], scale)).unwrap();
        for row in s.data().chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn matmul_is_associative() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let a = random_tensor(&mut rng, &[8, 8], 1.0);
        let b = random_tensor(&mut rng, &[8, 8], 1.0);
        let c = random_tensor(&mut rng, &[8, 8], 1.0);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
        assert!(left.max_abs_diff(&right) <= 1e-9 * scale);
    }
}

#[test]
fn recall_curve_is_non_decreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let n_q = rng.random_range(1..30);
        let mut matches = vec![Default::default(); 200];
        let mut queries = Vec::new();
        for q in 0..n_q {
            let query_id = 100 + q as u64;
            let mut set = std::collections::BTreeSet::new();
            for _ in 0..rng.random_range(1..4) {
                set.insert(rng.random_range(0..50u64));
            }
            matches[query_id as usize] = set;
            let mut ranked: Vec<u64> = (0..50).collect();
            ranked.shuffle(&mut rng);
            queries.push(RankedQuery {
                query_id,
                ranked,
                eligible: 50,
            });
        }
        let labels = LoopLabels {
            matches,
            d_true: 10.0,
            exclusion: 50,
        };
        let curve = recall_curve(&queries, &labels, 25);
        assert!(curve.windows(2).all(|w| w[0] <= w[1]), "{curve:?}");
    }
}
