use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;
use crate::nn::Mlp;
use crate::synthworld::{generate_scene, SceneConfig};

fn exhaustive_min(cost: &Tensor) -> f64 {
    fn rec(cost: &Tensor, q: usize, used: &mut Vec<bool>, acc: f64, left: usize, best: &mut f64) {
        if left == 0 {
            *best = best.min(acc);
            return;
        }
        if cost.rows() - q < left {
            return;
        }
        // Skip query q (only possible when there are spare queries).
        rec(cost, q + 1, used, acc, left, best);
        for k in 0..cost.cols() {
            if !used[k] {
                used[k] = true;
                rec(cost, q + 1, used, acc + cost.get(q, k), left - 1, best);
                used[k] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let k = cost.rows().min(cost.cols());
    rec(cost, 0, &mut vec![false; cost.cols()], 0.0, k, &mut best);
    best
}

#[test]
fn two_by_two_example() {
    let m = hungarian_match(&Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]));
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    assert_eq!(m.cost, 2.0);
}

#[test]
fn diagonal_is_chosen() {
    let mut c = Tensor::full(vec![4, 4], 100.0);
    for i in 0..4 {
        c.data_mut()[i * 4 + i] = 0.0;
    }
    assert_eq!(hungarian_match(&c).pairs, (0..4).map(|i| (i, i)).collect::<Vec<_>>());
}

#[test]
fn more_queries_than_targets() {
    let c = Tensor::from_rows(&[vec![5.0, 1.0], vec![2.0, 9.0], vec![0.5, 4.0]]);
    let m = hungarian_match(&c);
    assert_eq!(m.pairs.len(), 2);
    assert_eq!(m.unmatched_queries.len(), 1);
    assert!(m.unmatched_targets.is_empty());
    assert_eq!(m.cost, exhaustive_min(&c));
    assert_eq!(m.pairs, vec![(0, 1), (2, 0)]);
}

fn dyadic_matrix(rng: &mut ChaCha8Rng, t: usize, g: usize) -> Tensor {
    Tensor::matrix(t, g, (0..t * g).map(|_| rng.random_range(-512i32..512) as f64 / 64.0).collect())
}

#[test]
fn matches_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let t = rng.random_range(0..6);
        let g = rng.random_range(0..6);
        let c = dyadic_matrix(&mut rng, t, g);
        let m = hungarian_match(&c);
        assert_eq!(m.pairs.len(), t.min(g));
        if t.min(g) > 0 {
            assert_eq!(m.cost, exhaustive_min(&c), "{c:?}");
        }
    }
}

proptest! {
    #[test]
    fn constant_shift_keeps_assignment(seed in 0u64..10_000, shift in -8i32..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t, g) = (rng.random_range(1..6), rng.random_range(1..6));
        let c = dyadic_matrix(&mut rng, t, g);
        let shifted = Tensor::matrix(t, g, c.data().iter().map(|v| v + shift as f64).collect());
        let a = hungarian_match(&c);
        let b = hungarian_match(&shifted);
        let ca: f64 = a.pairs.iter().map(|&(q, k)| c.get(q, k)).sum();
        let cb: f64 = b.pairs.iter().map(|&(q, k)| c.get(q, k)).sum();
        prop_assert_eq!(ca, cb);
    }

    #[test]
    fn mask_losses_ignore_point_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..12);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
        let losses = |x: &[f64], t: &[f64]| {
            let mut g = Graph::new();
            let xn = g.constant(Tensor::matrix(1, n, x.to_vec()));
            let tn = g.constant(Tensor::matrix(1, n, t.to_vec()));
            let b = bce_mask_loss(&mut g, xn, tn).unwrap();
            let d = dice_loss(&mut g, xn, tn).unwrap();
            (g.value(b).item(), g.value(d).item())
        };
        let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
        let (b1, d1) = losses(&x, &t);
        let (b2, d2) = losses(&rev(&x), &rev(&t));
        prop_assert!((b1 - b2).abs() < 1e-12 && (d1 - d2).abs() < 1e-12);
    }
}

#[test]
fn iou_examples() {
    assert_eq!(mask_iou(&[1.0, 0.0, 1.0], &[true, false, true]), 1.0);
    assert_eq!(mask_iou(&[1.0, 0.0], &[false, true]), 0.0);
    assert_eq!(mask_iou(&[0.0, 0.0], &[false, false]), 0.0);
    let a = [0.9, 0.8, 0.7, 0.6, 0.1, 0.2];
    let b = [true, true, false, false, true, true];
    assert!((mask_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn cost_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 6;
    let masks = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.random_range(0.0..1.0)).collect());
    let classes = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(0.0..1.0)).collect());
    let targets: Vec<Target> =
        (0..3).map(|k| Target { class: (k % 2) as u16, track: k as u32, mask: (0..n).map(|_| rng.random_bool(0.5)).collect() }).collect();
    let c = build_cost(&masks, &classes, &targets);
    for q in 0..4 {
        for (k, tg) in targets.iter().enumerate() {
            let (mut i, mut u) = (0, 0);
            for p in 0..n {
                let a = masks.get(p, q) > 0.5;
                i += (a && tg.mask[p]) as usize;
                u += (a || tg.mask[p]) as usize;
            }
            let iou = if u == 0 { 0.0 } else { i as f64 / u as f64 };
            assert_eq!(c.get(q, k), -classes.get(q, tg.class as usize) - iou);
        }
    }
}

#[test]
fn perfect_prediction_has_minimal_diagonal() {
    let targets: Vec<Target> = (0..3).map(|k| Target { class: k as u16, track: 0, mask: (0..6).map(|p| p / 2 == k).collect() }).collect();
    let masks = Tensor::matrix(6, 3, (0..18).map(|i| ((i / 3) / 2 == i % 3) as u8 as f64).collect());
    let mut classes = Tensor::zeros(vec![3, 4]);
    for q in 0..3 {
        classes.data_mut()[q * 4 + q] = 1.0;
    }
    let c = build_cost(&masks, &classes, &targets);
    for q in 0..3 {
        for k in 0..3 {
            if q != k {
                assert!(c.get(q, q) < c.get(q, k));
            }
        }
    }
    assert_eq!(hungarian_match(&c).pairs, vec![(0, 0), (1, 1), (2, 2)]);
}

fn scalar_loss(f: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId, x: Vec<f64>, t: Vec<f64>) -> f64 {
    let mut g = Graph::new();
    let n = x.len();
    let xn = g.constant(Tensor::matrix(1, n, x));
    let tn = g.constant(Tensor::matrix(1, n, t));
    let l = f(&mut g, xn, tn);
    g.value(l).item()
}

#[test]
fn dice_examples() {
    let dice = |g: &mut Graph, p, t| dice_on_probs(g, p, t).unwrap();
    assert!(scalar_loss(dice, vec![1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0]).abs() < 1e-6);
    assert!((scalar_loss(dice, vec![1.0, 0.0], vec![0.0, 1.0]) - 1.0).abs() < 1e-6);
    let v = scalar_loss(dice, vec![0.5; 4], vec![1.0, 1.0, 0.0, 0.0]);
    assert!((v - 0.5).abs() < 1e-6, "{v}");
}

#[test]
fn bce_examples() {
    let bce = |g: &mut Graph, x, t| bce_mask_loss(g, x, t).unwrap();
    assert!(scalar_loss(bce, vec![40.0, 40.0], vec![1.0, 1.0]) < 1e-15);
    assert!((scalar_loss(bce, vec![0.0; 3], vec![1.0, 0.0, 1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn cls_loss_weights_and_targets() {
    let mut g = Graph::new();
    let logits = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, 0.0, 3.0]]);
    let l = g.constant(logits.clone());
    let loss = cls_loss(&mut g, l, &[1, 2], &[1.0, 0.25]).unwrap();
    let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
    let expect = (1.0 * (lse(logits.row(0)) - 2.0) + 0.25 * (lse(logits.row(1)) - 3.0)) / 1.25;
    assert!((g.value(loss).item() - expect).abs() < 1e-12);
}

#[test]
fn pseudo_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = crate::autodiff::ParamStore::new();
    let pseudo = Mlp::new(&mut store, "p", ParamGroup::Lidar, &[4, 4, 4, 4], &mut rng);
    let z = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let out = pseudo.apply(&store, &z);
    let shifted = Tensor::matrix(3, 4, out.data().iter().map(|v| v + 1.0).collect());
    let mut g = store.bind(false);
    let (zn, same, off) = (g.constant(z.clone()), g.constant(out.clone()), g.constant(shifted));
    let a = pseudo_fusion_loss(&mut g, zn, same, &pseudo).unwrap();
    let b = pseudo_fusion_loss(&mut g, zn, off, &pseudo).unwrap();
    assert_eq!(g.value(a).item(), 0.0);
    assert!((g.value(b).item() - 1.0).abs() < 1e-12);
    let empty = g.constant(Tensor::zeros(vec![0, 4]));
    let c = pseudo_fusion_loss(&mut g, empty, empty, &pseudo).unwrap();
    assert_eq!(g.value(c).item(), 0.0);
}

#[test]
fn total_loss_weights() {
    assert_eq!(total_loss(&[BlockLosses::default(); 4], 0.0, LossWeights::default()).total, 0.0);
    let unit = BlockLosses { ce: 1.0, dice: 1.0, cls: 1.0 };
    assert_eq!(total_loss(&[unit; 4], 1.0, LossWeights::default()).total, 37.0);
    let base = total_loss(&[unit; 4], 1.0, LossWeights::default()).total;
    for (k, w) in [(0, 5.0), (1, 2.0), (2, 2.0)] {
        let mut b = [unit; 4];
        match k {
            0 => b[2].ce += 0.5,
            1 => b[2].dice += 0.5,
            _ => b[2].cls += 0.5,
        }
        assert!((total_loss(&b, 1.0, LossWeights::default()).total - base - 0.5 * w).abs() < 1e-12);
    }
    assert_eq!(total_loss(&[unit; 4], 1.5, LossWeights::default()).total, 37.5);
}

#[test]
fn targets_cover_tracks_and_stuff() {
    let palette = crate::labels::ClassPalette::driving();
    let labels = FrameLabels::new(vec![0, 3, 3, 1, 4, 0], vec![0, 7, 7, 0, 2, 0]);
    let t = build_targets(&labels, &palette);
    assert_eq!(t.iter().map(|x| (x.class, x.track)).collect::<Vec<_>>(), vec![(4, 2), (3, 7), (0, 0), (1, 0)]);
    assert_eq!(t[1].mask, vec![false, true, true, false, false, false]);
    assert_eq!(t[2].mask, vec![true, false, false, false, false, true]);
}

fn tiny_setup(seed: u64) -> (Model, Vec<PointCloudClip>) {
    let scene = generate_scene(&SceneConfig { frames: 2, ..SceneConfig::default() }, seed).unwrap();
    let cfg = ModelConfig { dim: 16, queries: 8, ..ModelConfig::default() };
    (Model::new(cfg, scene.palette.clone(), seed).unwrap(), training_clips(&[scene]))
}

#[test]
fn zero_steps_keep_initialization() {
    let (mut model, clips) = tiny_setup(1);
    let init = model.store.clone();
    let logs = train_stage1(&mut model, &clips, &TrainConfig { max_steps: Some(0), ..TrainConfig::default() }, |_| {}).unwrap();
    assert!(logs.is_empty());
    assert_eq!(model.store, init);
}

#[test]
fn same_seed_same_curve() {
    let cfg = TrainConfig { max_steps: Some(3), seed: 9, ..TrainConfig::default() };
    let run = || {
        let (mut model, clips) = tiny_setup(2);
        let logs = train_stage1(&mut model, &clips, &cfg, |_| {}).unwrap();
        (logs, model.store)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(a.len(), 3);
}

#[test]
fn small_steps_descend_on_a_fixed_clip() {
    let cfg = TrainConfig { max_steps: Some(2), augment: AugmentParams::none(), lr_lidar: 1e-4, lr_rest: 1e-4, ..TrainConfig::default() };
    let mut gain = 0.0;
    for seed in 0..5 {
        let (mut model, clips) = tiny_setup(10 + seed);
        let logs = train_stage1(&mut model, &clips[..1], &cfg, |_| {}).unwrap();
        gain += logs[0].total - logs[1].total;
    }
    assert!(gain / 5.0 >= 0.0, "{gain}");
}

#[test]
fn invalid_training_config_is_rejected() {
    let (mut model, clips) = tiny_setup(3);
    let cfg = TrainConfig { lr_rest: -1.0, ..TrainConfig::default() };
    assert!(matches!(train_stage1(&mut model, &clips, &cfg, |_| {}), Err(TrainError::InvalidConfig { field: "lr_rest", .. })));
}
