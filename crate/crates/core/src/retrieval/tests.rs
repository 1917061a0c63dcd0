use std::sync::OnceLock;

use super::*;
use crate::dataprep::{build_datasets, generate_synthetic, DataParams, DatasetPair};
use crate::geometry::{canonical_axis, AxisKind};
use crate::partencoder::{EncoderConfig, EncoderSnapshot, PartEncoder};
use crate::relnet::{assemble_tokens, RelNet, RelNetConfig};

struct Fixture {
    data: DatasetPair,
    enc: EncoderSnapshot,
    rel: RelNetSnapshot,
    index: WarehouseIndex,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let classes: Vec<String> = ["table", "chair", "plane"].iter().map(|s| s.to_string()).collect();
        let raw = generate_synthetic(&classes, 4, 21).unwrap();
        let data = build_datasets(&raw, &DataParams::default(), 21).unwrap();
        let cfg = EncoderConfig {
            point_widths: vec![16, 32],
            head_widths: vec![32],
            d: 16,
            ..Default::default()
        };
        let enc = PartEncoder::new(cfg, 1).unwrap().snapshot();
        let rel = RelNet::new(
            RelNetConfig {
                d: 16,
                model_width: 16,
                ff_width: 32,
                head_hidden: 16,
                ..RelNetConfig::default()
            },
            2,
        )
        .unwrap()
        .snapshot();
        let parts: Vec<&Part> = data.warehouse.iter().collect();
        let index = build_index(&parts, &enc).unwrap();
        Fixture { data, enc, rel, index }
    })
}

fn query_without(f: &Fixture, obj: usize, drop: usize) -> (TokenSequence, SlotTarget, u16, &Part) {
    let o = &f.data.items[obj];
    let rest: Vec<(Vec<f32>, [f32; 3])> = o
        .parts
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != drop)
        .map(|(_, p)| (f.enc.encode(&p.cloud).unwrap(), p.pose.centroid))
        .collect();
    let seq = assemble_tokens(rest.iter().map(|(a, c)| (a.as_slice(), *c))).unwrap();
    let part = &o.parts[drop];
    (seq, own_slot(part), o.object_class, part)
}

#[test]
fn index_build_and_io() {
    let f = fixture();
    assert_eq!(f.index.len(), f.data.warehouse.len());
    let parts: Vec<&Part> = f.data.warehouse.iter().rev().collect();
    let again = build_index(&parts, &f.enc).unwrap();
    assert_eq!(again.to_bytes().unwrap(), f.index.to_bytes().unwrap());
    let back = WarehouseIndex::from_bytes(&f.index.to_bytes().unwrap()).unwrap();
    assert_eq!(back, f.index);
    assert!(matches!(build_index(&[], &f.enc), Err(Error::EmptyIndex)));
    let other = "00".repeat(32);
    match f.index.check_encoder(&other) {
        Err(Error::HashMismatch { expected, found }) => {
            assert_eq!(expected, other);
            assert_eq!(found, f.enc.hash());
        }
        r => panic!("{r:?}"),
    }
    f.index.check_encoder(f.enc.hash()).unwrap();
    let mut bytes = f.index.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(matches!(WarehouseIndex::from_bytes(&bytes), Err(Error::BadMagic { .. })));
}

#[test]
fn ranking_is_a_sorted_permutation() {
    let f = fixture();
    let (seq, slot, class, _) = query_without(f, 0, 1);
    let before = f.index.checksum().unwrap();
    let all = rank_candidates(&seq, &slot, class, &f.index, &f.rel, usize::MAX).unwrap();
    assert_eq!(f.index.checksum().unwrap(), before);
    assert_eq!(all.len(), f.index.len());
    let mut ids: Vec<u64> = all.iter().map(|c| c.part_id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), f.index.len());
    for (i, w) in all.windows(2).enumerate() {
        assert!(w[0].suitability >= w[1].suitability);
        assert!(w[0].log_prob > w[1].log_prob || (w[0].log_prob == w[1].log_prob && w[0].part_id < w[1].part_id));
        assert_eq!(w[0].rank, i);
    }
    let top = rank_candidates(&seq, &slot, class, &f.index, &f.rel, 5).unwrap();
    assert_eq!(top[..], all[..5]);
    assert!(rank_candidates(&seq, &slot, class, &f.index, &f.rel, 0).is_err());
}

#[test]
fn equal_scores_break_ties_by_part_id() {
    let f = fixture();
    let p = &f.data.warehouse[0];
    let mut a = p.clone();
    let mut b = p.clone();
    a.part_id = 900;
    b.part_id = 17;
    let idx = build_index(&[&a, &b], &f.enc).unwrap();
    let (seq, slot, class, _) = query_without(f, 1, 0);
    let r = rank_candidates(&seq, &slot, class, &idx, &f.rel, 2).unwrap();
    assert_eq!(r[0].log_prob, r[1].log_prob);
    assert_eq!((r[0].part_id, r[1].part_id), (17, 900));
}

#[test]
fn original_part_scores_like_intact_object() {
    let f = fixture();
    for obj in 0..3 {
        let o = &f.data.items[obj];
        let last = o.parts.len() - 1;
        let (seq, slot, class, part) = query_without(f, obj, last);
        let ranked = rank_candidates(&seq, &slot, class, &f.index, &f.rel, usize::MAX).unwrap();
        let mine = ranked.iter().find(|c| c.part_id == part.part_id).unwrap();
        let mut intact = seq.clone();
        intact.push(&f.enc.encode(&part.cloud).unwrap(), part.pose.centroid).unwrap();
        let p = crate::relnet::log_softmax(&f.rel.classify(&intact).unwrap())[class as usize].exp();
        assert!((mine.suitability - p).abs() < 1e-6);
    }
}

#[test]
fn placement_round_trip_and_alignment() {
    let f = fixture();
    for p in f.data.warehouse.iter().take(10) {
        let placed = place_part(p, &own_slot(p)).unwrap();
        let direct = p.cloud.scaled_translated(p.pose.scale as f64, p.pose.centroid.map(|v| v as f64));
        for (a, b) in placed.points().iter().zip(direct.points()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-5);
            }
        }
        let target = SlotTarget {
            centroid: [0.1, -0.2, 0.3],
            axis: Some([0.0, 0.0, 1.0]),
            scale: Some(0.25),
        };
        let moved = place_part(p, &target).unwrap();
        let c = moved.centroid();
        for k in 0..3 {
            assert!((c[k] - target.centroid[k] as f64).abs() < 1e-6);
        }
        if p.pose.axis_kind == AxisKind::Elongated {
            let (axis, _) = canonical_axis(&moved).unwrap();
            assert!(axis[2].abs() > 1.0 - 1e-3, "{axis:?}");
        }
    }
}

#[test]
fn session_flow() {
    let f = fixture();
    let o = &f.data.items[2];
    let keep = &o.parts[..o.parts.len() - 2];
    let parts: Vec<QueryPart> = keep
        .iter()
        .map(|p| QueryPart {
            part_id: None,
            feature: f.enc.encode(&p.cloud).unwrap(),
            centroid: p.pose.centroid,
            cloud: p.cloud.clone(),
            part_label: Some(p.part_label),
        })
        .collect();
    let slots: Vec<SlotTarget> = o.parts[o.parts.len() - 2..].iter().map(own_slot).collect();
    let mut s = Session::new(o.object_class, parts, slots).unwrap();
    let r1 = s.candidates(&f.index, &f.rel, 10).unwrap();
    assert_eq!(r1, s.candidates(&f.index, &f.rel, 10).unwrap());
    let foreign = f.data.warehouse.iter().find(|p| !r1.iter().any(|c| c.part_id == p.part_id)).unwrap();
    assert!(matches!(advance_session(&mut s, foreign, &f.index), Err(Error::RejectedChoice(_))));
    s.show(r1.clone());
    let snapshot = s.clone();
    assert!(advance_session(&mut s, foreign, &f.index).is_err());
    assert_eq!(s, snapshot);
    let chosen = f.data.warehouse.iter().find(|p| p.part_id == r1[0].part_id).unwrap();
    assert_eq!(advance_session(&mut s, chosen, &f.index).unwrap(), Advance::Placed { slot: 0 });
    assert_eq!(s.parts.len(), keep.len() + 1);
    assert_eq!(s.tokens().unwrap().len(), keep.len() + 2);
    let r2 = s.candidates(&f.index, &f.rel, 10).unwrap();
    s.show(r2.clone());
    let chosen = f.data.warehouse.iter().find(|p| p.part_id == r2[3].part_id).unwrap();
    advance_session(&mut s, chosen, &f.index).unwrap();
    assert!(s.is_complete());
    assert!(s.candidates(&f.index, &f.rel, 10).unwrap().is_empty());
    assert_eq!(advance_session(&mut s, chosen, &f.index).unwrap(), Advance::Complete);
    assert_eq!(s.history.len(), 2);
}

#[test]
fn prepared_query_recovers_the_object_frame() {
    let f = fixture();
    let o = &f.data.items[1];
    let shift = [1.0, -2.0, 0.5];
    let parts: Vec<(PointCloud, Option<u16>)> = o
        .parts
        .iter()
        .map(|p| (place_part(p, &own_slot(p)).unwrap().scaled_translated(3.0, shift), Some(p.part_label)))
        .collect();
    let slot = SlotTarget {
        centroid: std::array::from_fn(|k| o.parts[0].pose.centroid[k] * 3.0 + shift[k] as f32),
        axis: None,
        scale: Some(o.parts[0].pose.scale * 3.0),
    };
    let q = prepare_query(parts, &[slot], &f.enc).unwrap();
    for (qp, p) in q.parts.iter().zip(&o.parts) {
        for k in 0..3 {
            assert!((qp.centroid[k] - p.pose.centroid[k]).abs() < 1e-4);
        }
        let want = &f.index.get(p.part_id).unwrap().feature;
        assert!(qp.feature.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-4));
    }
    for k in 0..3 {
        assert!((q.slots[0].centroid[k] - o.parts[0].pose.centroid[k]).abs() < 1e-4);
    }
    assert!((q.slots[0].scale.unwrap() - o.parts[0].pose.scale).abs() < 1e-4);
    assert!(prepare_query(Vec::new(), &[], &f.enc).is_err());
}
