use std::collections::HashMap;

use hvpr::eval::{average_precision_40, evaluate, Detection, IouKind};
use hvpr::geometry::Box3d;
use proptest::prelude::*;

// Interpolated AP40 straight from the definition: at each recall level take
// the best precision among ranks that reach it.
fn ap40_oracle(flags: &[bool], scores: &[f64], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..flags.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if flags[i] {
            tp += 1.0;
        }
        points.push((tp / num_gt as f64, tp / (rank + 1) as f64));
    }
    (1..=40)
        .map(|r| {
            let level = r as f64 / 40.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= level - 1e-12)
                .map(|p| p.1)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 40.0
}

fn ranked() -> impl Strategy<Value = (Vec<bool>, Vec<f64>, usize)> {
    prop::collection::vec((any::<bool>(), 0.0..1.0f64), 0..60).prop_flat_map(|v| {
        let tps = v.iter().filter(|x| x.0).count();
        let flags: Vec<bool> = v.iter().map(|x| x.0).collect();
        let scores: Vec<f64> = v.iter().map(|x| x.1).collect();
        (Just(flags), Just(scores), tps..tps + 10)
    })
}

proptest! {
    #[test]
    fn ap_matches_definition((flags, scores, gt) in ranked()) {
        let got = average_precision_40(&flags, &scores, gt);
        prop_assert!((got - ap40_oracle(&flags, &scores, gt)).abs() < 1e-12);
    }

    #[test]
    fn ap_depends_only_on_rank((flags, scores, gt) in ranked(), k in 0.01..100.0f64) {
        let scaled: Vec<f64> = scores.iter().map(|s| s * k).collect();
        prop_assert_eq!(average_precision_40(&flags, &scores, gt), average_precision_40(&flags, &scaled, gt));
    }

    #[test]
    fn low_false_positive_never_helps((flags, scores, gt) in ranked()) {
        let base = average_precision_40(&flags, &scores, gt);
        let (mut f, mut s) = (flags.clone(), scores.clone());
        f.push(false);
        s.push(-1.0);
        prop_assert!(average_precision_40(&f, &s, gt) <= base + 1e-12);
    }

    #[test]
    fn extra_true_positive_never_hurts((flags, scores, gt) in ranked(), at in 0.0..1.0f64) {
        prop_assume!(flags.iter().filter(|&&f| f).count() < gt);
        let base = average_precision_40(&flags, &scores, gt);
        let (mut f, mut s) = (flags.clone(), scores.clone());
        f.push(true);
        s.push(at);
        prop_assert!(average_precision_40(&f, &s, gt) >= base - 1e-12);
    }
}

#[test]
fn duplicate_detection_counts_once() {
    let gt = Box3d::new(10.0, 0.0, -1.0, 1.6, 3.9, 1.5, 0.0);
    let gts = HashMap::from([("a".to_string(), vec![gt])]);
    let dets = vec![
        Detection {
            scene: "a".into(),
            bbox: gt,
            score: 0.9,
        },
        Detection {
            scene: "a".into(),
            bbox: gt,
            score: 0.8,
        },
        Detection {
            scene: "b".into(),
            bbox: gt,
            score: 0.7,
        },
    ];
    let r = evaluate(&dets, &gts, 0.7, IouKind::Bev, "Car");
    assert_eq!((r.num_gt, r.num_detections, r.true_positives), (1, 3, 1));
    assert_eq!(r.ap, 1.0);
}
