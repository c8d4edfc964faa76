use proptest::prelude::*;

use geovid_core::annotation::{majority_label, GeoLabel};
use geovid_core::boosted_trees::Posterior;
use geovid_core::dense_flow::FlowField;
use geovid_core::features::{read_features, write_features, SegmentFrameFeatures, FEATURE_DIM};
use geovid_core::inference::fuse_hierarchy_posteriors;

fn simplex() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(0.001f64..1.0).prop_map(|a| {
        let s: f64 = a.iter().sum();
        [a[0] / s, a[1] / s, a[2] / s]
    })
}

fn posterior() -> impl Strategy<Value = Posterior> {
    (simplex(), simplex(), 0.0f64..1.0).prop_map(|(main, sub, homogeneity)| Posterior { main, sub, homogeneity })
}

fn label() -> impl Strategy<Value = GeoLabel> {
    prop::sample::select(GeoLabel::ALL.to_vec())
}

proptest! {
    #[test]
    fn fused_posterior_is_a_convex_combination(levels in prop::collection::vec(posterior(), 1..6)) {
        let f = fuse_hierarchy_posteriors(&levels).unwrap();
        for (fused, pick) in [(f.main, 0usize), (f.sub, 1)] {
            prop_assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for k in 0..3 {
                let vals = levels.iter().map(|p| if pick == 0 { p.main[k] } else { p.sub[k] });
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(fused[k] >= lo - 1e-12 && fused[k] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn fusion_ignores_level_order(levels in prop::collection::vec(posterior(), 2..6)) {
        let a = fuse_hierarchy_posteriors(&levels).unwrap();
        let mut rev = levels.clone();
        rev.reverse();
        let b = fuse_hierarchy_posteriors(&rev).unwrap();
        for k in 0..3 {
            prop_assert!((a.main[k] - b.main[k]).abs() < 1e-12);
            prop_assert!((a.sub[k] - b.sub[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn majority_needs_more_than_ninety_five_percent(votes in prop::collection::vec((label(), 0u64..1000), 0..8)) {
        let got = majority_label(&votes);
        let total: u64 = votes.iter().map(|v| v.1).sum();
        let share = |l: GeoLabel| votes.iter().filter(|v| v.0 == l).map(|v| v.1).sum::<u64>();
        match GeoLabel::ALL.iter().find(|&&l| total > 0 && share(l) * 20 > total * 19) {
            Some(&l) => prop_assert_eq!(got, l),
            None => prop_assert_eq!(got, GeoLabel::Mix),
        }
    }

    #[test]
    fn majority_ignores_vote_order(mut votes in prop::collection::vec((label(), 1u64..50), 1..8)) {
        let a = majority_label(&votes);
        votes.reverse();
        prop_assert_eq!(a, majority_label(&votes));
    }

    #[test]
    fn flow_cache_round_trips(w in 1u32..9, h in 1u32..9, seed in any::<u64>()) {
        let mut f = FlowField::zeros(w, h, 4, 3);
        for (i, x) in f.u.iter_mut().chain(f.v.iter_mut()).enumerate() {
            *x = ((seed.wrapping_mul(i as u64 + 1) % 2001) as f32 - 1000.0) / 7.0;
        }
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 8 + 8 * (w * h) as usize);
        prop_assert_eq!(FlowField::read_from(&buf[..], 4, 3).unwrap(), f);
    }

    #[test]
    fn feature_files_round_trip(ids in prop::collection::vec(any::<u32>(), 0..4), x in -1e6f32..1e6) {
        let recs: Vec<SegmentFrameFeatures> = ids
            .iter()
            .map(|&id| SegmentFrameFeatures { segment_id: id, frame: 2, level: 1, values: vec![x; FEATURE_DIM] })
            .collect();
        let mut buf = Vec::new();
        write_features(&mut buf, &recs).unwrap();
        prop_assert_eq!(read_features(&buf[..], 1, 2).unwrap(), recs);
    }
}
