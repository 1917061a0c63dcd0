use proptest::prelude::*;

use partfit_core::dataprep::{dbscan, part_from_bytes, part_to_bytes, split_part_group, Part};
use partfit_core::dataprep::dbscan::same_partition;
use partfit_core::geometry::{
    normalize_part, principal_axes, rotation_between, AxisKind, Point, PointCloud, PoseMeta,
};
use partfit_core::partencoder::{EncoderConfig, PartEncoder};
use partfit_core::relnet::{assemble_tokens, log_softmax, RelNet, RelNetConfig};
use partfit_core::selftest::dbscan_reference;
use partfit_core::simloss::{similarity_loss_value, soft_target, target_from_distances, DistanceStats};

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-3.0f32..3.0), n)
}

fn unit(v: [f64; 3]) -> Option<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    (n > 1e-3).then(|| v.map(|x| x / n))
}

fn stats(d_l: f64, gap: f64) -> DistanceStats {
    DistanceStats {
        d_l,
        d_h: d_l + gap,
        subset_size: 2,
        seed: 0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(pts in points(2..60)) {
        let c = PointCloud::new(pts).unwrap();
        prop_assume!(c.max_norm() > 1e-2);
        let Ok((once, _)) = normalize_part(&c) else { return Ok(()) };
        let (twice, _) = normalize_part(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn principal_axes_are_orthonormal(pts in points(4..60)) {
        let c = PointCloud::new(pts).unwrap();
        let axes = principal_axes(&c).unwrap();
        for i in 0..3 {
            let v = axes[i].1;
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
            for j in i + 1..3 {
                let w = axes[j].1;
                prop_assert!((v[0] * w[0] + v[1] * w[1] + v[2] * w[2]).abs() <= 1e-5);
            }
        }
        prop_assert!(axes[0].0 >= axes[1].0 && axes[1].0 >= axes[2].0);
    }

    #[test]
    fn rotation_between_is_orthogonal_and_maps(a in prop::array::uniform3(-1.0f64..1.0), b in prop::array::uniform3(-1.0f64..1.0)) {
        let (Some(a), Some(b)) = (unit(a), unit(b)) else { return Ok(()) };
        let r = rotation_between(a, b);
        let rtr = r.transpose() * r;
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((rtr[(i, j)] - e).abs() <= 1e-6);
            }
        }
        let ra = r * nalgebra::Vector3::from(a);
        for k in 0..3 {
            prop_assert!((ra[k] - b[k]).abs() <= 1e-6);
        }
    }

    #[test]
    fn dbscan_is_order_free_and_matches_reference(
        pts in prop::collection::vec(prop::array::uniform3(0.0f32..1.0), 1..120),
        eps in 0.05f64..0.3,
        min_pts in 1usize..6,
        shift in 0usize..120,
    ) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let c = dbscan(&cloud, eps, min_pts);
        prop_assert!(same_partition(&c.labels, &dbscan_reference(&pts, eps, min_pts)));
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        perm.rotate_left(shift % pts.len());
        perm.reverse();
        let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let d = dbscan(&PointCloud::new(shuffled).unwrap(), eps, min_pts);
        let mut back = vec![d.labels[0]; pts.len()];
        for (pos, &i) in perm.iter().enumerate() {
            back[i] = d.labels[pos];
        }
        prop_assert!(same_partition(&c.labels, &back));
    }

    #[test]
    fn split_is_a_disjoint_cover(pts in prop::collection::vec(prop::array::uniform3(0.0f32..1.0), 2..150)) {
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let pieces = split_part_group(&cloud, 0.05, 5);
        let mut got: Vec<Point> = pieces.iter().flat_map(|p| p.points().iter().copied()).collect();
        let mut want = pts;
        let key = |p: &Point| p.map(f32::to_bits);
        got.sort_by_key(key);
        want.sort_by_key(key);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn soft_target_is_bounded_and_monotone(d_l in 0.0f64..0.5, gap in 1e-3f64..1.0, k in 0.1f64..10.0) {
        let s = stats(d_l, gap);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let d = d_l - 0.1 + (gap + 0.2) * i as f64 / 1000.0;
            let g = soft_target(d, k, &s).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
            prop_assert!(g <= prev);
            prev = g;
        }
        prop_assert_eq!(soft_target(d_l, k, &s).unwrap(), 1.0);
        prop_assert_eq!(soft_target(d_l + gap, k, &s).unwrap(), 0.0);
    }

    #[test]
    fn target_matrix_is_symmetric_with_unit_diagonal(
        labels in prop::collection::vec(0u16..3, 2..10),
        seed_d in prop::collection::vec(0.0f64..2.0, 45),
        k in 0.5f64..10.0,
    ) {
        let n = labels.len();
        let mut dist = vec![0.0; n * n];
        let mut next = seed_d.iter().cycle();
        for i in 0..n {
            for j in i + 1..n {
                let v = *next.next().unwrap();
                dist[i * n + j] = v;
                dist[j * n + i] = v;
            }
        }
        let t = target_from_distances(&dist, &labels, k, &stats(0.2, 1.0)).unwrap();
        for i in 0..n {
            prop_assert_eq!(t.get(i, i), 1.0);
            for j in 0..n {
                prop_assert_eq!(t.get(i, j), t.get(j, i));
                if labels[i] == labels[j] {
                    prop_assert_eq!(t.get(i, j), 1.0);
                }
            }
        }
    }

    #[test]
    fn similarity_loss_is_nonnegative_and_zero_at_target(
        labels in prop::collection::vec(0u16..4, 2..8),
        raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 8),
    ) {
        let n = labels.len();
        // Features one-hot by label reproduce a 0/1 target exactly.
        let onehot: Vec<Vec<f32>> = labels
            .iter()
            .map(|&l| (0..4).map(|i| if i == l as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        let far = vec![5.0; n * n];
        let t = target_from_distances(&far, &labels, 1.0, &stats(0.1, 1.0)).unwrap();
        prop_assert_eq!(similarity_loss_value(&onehot, &t).unwrap(), 0.0);
        let feats: Vec<Vec<f32>> = raw
            .into_iter()
            .take(n)
            .map(|f| {
                let norm = f.iter().map(|v| v * v).sum::<f32>().sqrt();
                if norm < 1e-3 { vec![1.0, 0.0, 0.0, 0.0] } else { f.iter().map(|v| v / norm).collect() }
            })
            .collect();
        prop_assert!(similarity_loss_value(&feats, &t).unwrap() >= 0.0);
    }

    #[test]
    fn log_softmax_normalizes(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let total: f64 = log_softmax(&logits).iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn part_bundle_round_trips(
        pts in points(1..50),
        centroid in prop::array::uniform3(-1.0f32..1.0),
        scale in 0.01f32..2.0,
        label in 0u16..8,
        class in 0u16..3,
        id in any::<u64>(),
    ) {
        let part = Part {
            cloud: PointCloud::new(pts).unwrap(),
            pose: PoseMeta { centroid, scale, axis: [0.0, 1.0, 0.0], axis_kind: AxisKind::Elongated },
            part_label: label,
            object_class: class,
            source_object: String::new(),
            part_id: id,
        };
        let back = part_from_bytes(&part_to_bytes(&part)).unwrap();
        prop_assert_eq!(back.cloud, part.cloud);
        prop_assert_eq!(back.pose, part.pose);
        prop_assert_eq!((back.part_label, back.object_class, back.part_id), (label, class, id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_ignores_point_order(pts in points(3..40), shift in 0usize..40) {
        let cfg = EncoderConfig { point_widths: vec![8, 16], head_widths: vec![16], d: 8, ..Default::default() };
        let enc = PartEncoder::new(cfg, 5).unwrap().snapshot();
        let Ok((norm, _)) = normalize_part(&PointCloud::new(pts).unwrap()) else { return Ok(()) };
        let pts = norm.into_points();
        let a = enc.encode(&PointCloud::new(pts.clone()).unwrap()).unwrap();
        let mut moved = pts;
        let k = shift % moved.len();
        moved.rotate_left(k);
        moved.reverse();
        let b = enc.encode(&PointCloud::new(moved).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn relnet_ignores_token_order(
        feats in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 8), 2..6),
        cents in prop::collection::vec(prop::array::uniform3(-1.0f32..1.0), 6),
        shift in 1usize..6,
    ) {
        let feats: Vec<Vec<f32>> = feats
            .into_iter()
            .map(|f| {
                let n = f.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-3);
                f.iter().map(|v| v / n).collect()
            })
            .collect();
        prop_assume!(feats.iter().all(|f| f.iter().map(|v| v * v).sum::<f32>() > 0.5));
        let cfg = RelNetConfig { d: 8, classes: 3, model_width: 16, ff_width: 32, head_hidden: 16, ..RelNetConfig::default() };
        let rel = RelNet::new(cfg, 9).unwrap().snapshot();
        let toks: Vec<(&[f32], [f32; 3])> = feats.iter().zip(&cents).map(|(f, c)| (f.as_slice(), *c)).collect();
        let a = rel.classify(&assemble_tokens(toks.iter().copied()).unwrap()).unwrap();
        let mut rotated = toks.clone();
        let k = shift % rotated.len();
        rotated.rotate_left(k);
        let b = rel.classify(&assemble_tokens(rotated.iter().copied()).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }
}
