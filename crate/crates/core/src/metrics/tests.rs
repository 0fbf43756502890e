use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::labels::ClassInfo;

fn palette() -> ClassPalette {
    ClassPalette::new(vec![
        ClassInfo { name: "ground".into(), thing: false },
        ClassInfo { name: "wall".into(), thing: false },
        ClassInfo { name: "car".into(), thing: true },
        ClassInfo { name: "person".into(), thing: true },
    ])
}

fn cfg() -> MetricConfig {
    MetricConfig::new(palette())
}

fn frame(class: &[u16], track: &[u32]) -> FrameLabels {
    FrameLabels::new(class.to_vec(), track.to_vec())
}

/// Tiny random ground truth plus a prediction derived from it by noise.
fn random_instance(rng: &mut ChaCha8Rng) -> (PanopticLabeling, PanopticLabeling) {
    let frames = rng.random_range(1..=3);
    let n_inst = rng.random_range(0..=4);
    let inst_class: Vec<u16> = (0..n_inst).map(|_| rng.random_range(2..4)).collect();
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for _ in 0..frames {
        let n = rng.random_range(1..=20);
        let mut g = FrameLabels::default();
        for _ in 0..n {
            if n_inst > 0 && rng.random_bool(0.6) {
                let k = rng.random_range(0..n_inst);
                g.class.push(inst_class[k]);
                g.track.push(k as u32 + 1);
            } else {
                g.class.push(rng.random_range(0..2));
                g.track.push(0);
            }
        }
        let mut p = g.clone();
        let perm = rng.random_range(0..3u32);
        for i in 0..n {
            if rng.random_bool(0.2) {
                p.class[i] = rng.random_range(0..4);
                p.track[i] = rng.random_range(0..6);
            } else if p.track[i] > 0 {
                p.track[i] = (p.track[i] + perm - 1) % 5 + 1;
            }
        }
        gt.push(g);
        pred.push(p);
    }
    (PanopticLabeling::new(pred), PanopticLabeling::new(gt))
}

#[test]
fn perfect_prediction_is_one_everywhere() {
    let gt = PanopticLabeling::new(vec![frame(&[0, 0, 2, 2, 3], &[0, 0, 5, 5, 9]), frame(&[1, 2, 2, 3, 3], &[0, 5, 5, 9, 9])]);
    let r = evaluate(&gt, &gt, &cfg()).unwrap();
    for (name, v) in r.means.named() {
        assert_eq!(v, 1.0, "{name}");
    }
}

#[test]
fn half_overlap_single_class_iou() {
    // gt: 4 points of class 0; pred marks 2 of them plus 2 others as class 0.
    let gt = PanopticLabeling::new(vec![frame(&[0, 0, 0, 0, 1, 1], &[0; 6])]);
    let pred = PanopticLabeling::new(vec![frame(&[1, 1, 0, 0, 0, 0], &[0; 6])]);
    let (iou, _) = semantic_iou(&pred, &gt, &cfg()).unwrap();
    assert!((iou[0].unwrap() - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(iou[2], None);
}

#[test]
fn one_tp_one_fp() {
    // car 7: gt 5 pts, pred covers 4 of them → IoU 0.8; extra pred car 8 on ground.
    let gt = PanopticLabeling::new(vec![frame(&[2, 2, 2, 2, 2, 0, 0, 0, 0, 0, 0], &[7, 7, 7, 7, 7, 0, 0, 0, 0, 0, 0])]);
    let pred = PanopticLabeling::new(vec![frame(&[2, 2, 2, 2, 0, 0, 0, 0, 0, 0, 2], &[7, 7, 7, 7, 0, 0, 0, 0, 0, 0, 8])]);
    let r = evaluate(&pred, &gt, &cfg()).unwrap();
    let car = &r.classes[2];
    assert_eq!((car.tp, car.fp, car.fn_), (1, 1, 0));
    assert!((car.pq.unwrap() - 0.8 / 1.5).abs() < 1e-12);
}

#[test]
fn iou_of_exactly_half_is_not_a_match() {
    let gt = PanopticLabeling::new(vec![frame(&[2, 2, 0, 0], &[1, 1, 0, 0])]);
    let pred = PanopticLabeling::new(vec![frame(&[2, 0, 0, 0], &[1, 0, 0, 0])]);
    let r = evaluate(&pred, &gt, &cfg()).unwrap();
    assert_eq!(r.classes[2].tp, 0);
    assert_eq!(r.classes[2].pq, Some(0.0));
}

#[test]
fn single_switch_halves_ptq() {
    let gt = PanopticLabeling::new(vec![frame(&[2, 2], &[1, 1]), frame(&[2, 2], &[1, 1])]);
    let pred = PanopticLabeling::new(vec![frame(&[2, 2], &[4, 4]), frame(&[2, 2], &[6, 6])]);
    let r = evaluate(&pred, &gt, &cfg()).unwrap();
    let car = &r.classes[2];
    assert_eq!((car.tp, car.ids), (2, 1));
    assert_eq!(car.ptq, Some(0.5));
    assert_eq!(car.sptq, Some(0.5));
    assert_eq!(car.pq, Some(1.0));
}

#[test]
fn association_covering_one_frame() {
    let gt = PanopticLabeling::new(vec![frame(&[2; 10], &[3; 10]), frame(&[2; 10], &[3; 10])]);
    let pred = PanopticLabeling::new(vec![frame(&[2; 10], &[1; 10]), frame(&[0; 10], &[0; 10])]);
    let (s_assoc, _, _) = lstq(&pred, &gt, &cfg()).unwrap();
    assert!((s_assoc - 0.25).abs() < 1e-15);
}

#[test]
fn empty_prediction_scores_zero() {
    let gt = PanopticLabeling::new(vec![frame(&[2, 2, 3], &[1, 1, 2])]);
    let pred = PanopticLabeling::new(vec![frame(&[0, 0, 0], &[0, 0, 0])]);
    let r = evaluate(&pred, &gt, &cfg()).unwrap();
    assert_eq!(r.means.pq, 0.0);
    assert_eq!(r.means.s_assoc, 0.0);
    assert_eq!(r.means.lstq, 0.0);
    assert_eq!(r.means.pat, 0.0);
}

#[test]
fn harmonic_mean_cases() {
    assert_eq!(harmonic(0.7, 0.7), 0.7);
    assert_eq!(harmonic(0.8, 0.0), 0.0);
    assert_eq!(harmonic(0.0, 0.0), 0.0);
    assert!((harmonic(0.8, 0.6) - 0.96 / 1.4).abs() < 1e-15);
}

#[test]
fn misaligned_inputs_are_rejected() {
    let gt = PanopticLabeling::new(vec![frame(&[0, 0], &[0, 0])]);
    let short = PanopticLabeling::new(vec![frame(&[0], &[0])]);
    assert!(matches!(evaluate(&short, &gt, &cfg()), Err(MetricsError::PointCount { .. })));
    let two = PanopticLabeling::new(vec![gt.frames[0].clone(), gt.frames[0].clone()]);
    assert!(matches!(evaluate(&two, &gt, &cfg()), Err(MetricsError::FrameCount { .. })));
    let bad = PanopticLabeling::new(vec![frame(&[9, 0], &[0, 0])]);
    assert!(matches!(evaluate(&bad, &gt, &cfg()), Err(MetricsError::UnknownClass { class: 9, .. })));
}

#[test]
fn ignore_class_points_are_dropped() {
    let mut c = cfg();
    c.ignore_class = Some(1);
    let gt = PanopticLabeling::new(vec![frame(&[0, 0, 1, 1], &[0; 4])]);
    let pred = PanopticLabeling::new(vec![frame(&[0, 0, 0, 3], &[0, 0, 0, 5])]);
    let r = evaluate(&pred, &gt, &c).unwrap();
    assert_eq!(r.means.miou, 1.0);
    assert_eq!(r.classes[3].iou, None);
}

#[test]
fn oracle_agrees_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (pred, gt) = random_instance(&mut rng);
        let o = oracle_check(&pred, &gt, &cfg()).unwrap();
        assert!(o.max_discrepancy < 1e-9, "{o:?}");
    }
}

#[test]
fn streaming_equals_batch_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (pred, gt) = random_instance(&mut rng);
        let batch = evaluate(&pred, &gt, &cfg()).unwrap();
        let mut acc = MetricAccumulator::new(cfg());
        for (p, g) in pred.frames.iter().zip(&gt.frames) {
            acc.add_frame(p, g).unwrap();
        }
        let streamed = acc.finish();
        assert_eq!(serde_json::to_string(&batch).unwrap(), serde_json::to_string(&streamed).unwrap());
    }
}

proptest! {
    #[test]
    fn identities_hold(seed in 0u64..100_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = random_instance(&mut rng);
        let r = evaluate(&pred, &gt, &cfg()).unwrap();
        for c in &r.classes {
            if let (Some(pq), Some(sq), Some(rq)) = (c.pq, c.sq, c.rq) {
                prop_assert!((pq - sq * rq).abs() <= 1e-12);
            }
            if let (Some(p), Some(s)) = (c.ptq, c.sptq) {
                prop_assert!(s >= p);
            }
        }
        prop_assert!(r.means.sptq >= r.means.ptq);
        for (name, v) in r.means.named() {
            prop_assert!((0.0..=1.0).contains(&v), "{} = {}", name, v);
        }
        let perfect = evaluate(&gt, &gt, &cfg()).unwrap();
        for ((name, a), (_, b)) in perfect.means.named().iter().zip(r.means.named()) {
            prop_assert_eq!(*a, 1.0, "{}", name);
            prop_assert!(*a >= b);
        }
    }

    #[test]
    fn relabeling_tracks_changes_nothing(seed in 0u64..100_000, shift in 1u32..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = random_instance(&mut rng);
        let remap = |l: &PanopticLabeling, k: u32| {
            let mut l = l.clone();
            for f in &mut l.frames {
                for t in &mut f.track {
                    if *t > 0 {
                        *t = (*t * 7919) % 100_003 + k;
                    }
                }
            }
            l
        };
        let base = evaluate(&pred, &gt, &cfg()).unwrap();
        let moved = evaluate(&remap(&pred, shift), &remap(&gt, 2 * shift), &cfg()).unwrap();
        for ((n, a), (_, b)) in base.means.named().iter().zip(moved.means.named()) {
            prop_assert!((a - b).abs() < 1e-12, "{}", n);
        }
    }
}

#[test]
fn pooled_scenes_keep_tracks_apart() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let a = random_instance(&mut rng);
        let b = random_instance(&mut rng);
        // hand-built concatenation with ids of the second sequence moved past 100
        let lift = |l: &PanopticLabeling| -> Vec<FrameLabels> {
            l.frames.iter().map(|f| frame(&f.class, &f.track.iter().map(|&t| if t > 0 { t + 100 } else { 0 }).collect::<Vec<_>>())).collect()
        };
        let pred = PanopticLabeling::new(a.0.frames.iter().cloned().chain(lift(&b.0)).collect());
        let gt = PanopticLabeling::new(a.1.frames.iter().cloned().chain(lift(&b.1)).collect());
        let want = evaluate(&pred, &gt, &cfg()).unwrap();
        let got = evaluate_scenes(&[a, b], &cfg()).unwrap();
        for ((n, x), (_, y)) in got.means.named().iter().zip(want.means.named()) {
            assert!((x - y).abs() < 1e-12, "{n}: {x} vs {y}");
        }
    }
}
