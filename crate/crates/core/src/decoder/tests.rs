use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::labels::ClassInfo;
use crate::model::{Model, ModelConfig};
use crate::nn::zero_params;
use crate::synthworld::{generate_scene, SceneConfig};

const D: usize = 8;

fn rand_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn attn_setup(seed: u64) -> (ParamStore, AttnParams, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = AttnParams::new(&mut store, "a", D, &mut rng);
    (store, p, rng)
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, p, mut rng) = attn_setup(0);
    let mut g = store.bind(false);
    let q = g.constant(rand_tensor(3, D, &mut rng));
    let f = g.constant(rand_tensor(7, D, &mut rng));
    let e = g.constant(rand_tensor(7, D, &mut rng));
    let m = g.constant(rand_tensor(3, 7, &mut rng));
    let a = g.constant(Tensor::full(vec![1, 1], 0.7));
    let w = attention_weights(&mut g, q, f, Some(e), Some(MaskBias { mask: m, alpha: a }), &p).unwrap();
    for r in 0..3 {
        assert!((g.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn identical_keys_average_values() {
    let (store, p, mut rng) = attn_setup(1);
    let mut g = store.bind(false);
    let q = g.constant(rand_tensor(2, D, &mut rng));
    let row = rand_tensor(1, D, &mut rng);
    let feats: Vec<f64> = (0..5).flat_map(|_| row.data().to_vec()).collect();
    let f = g.constant(Tensor::matrix(5, D, feats));
    let out = attention(&mut g, q, f, None, None, &p).unwrap();
    let wv = store.get(p.wv);
    let expect = crate::autodiff::kernels::matmul_nn(row.data(), wv.data(), 1, D, D);
    for r in 0..2 {
        for (a, b) in g.value(out).row(r).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn large_alpha_with_one_hot_mask_selects_row() {
    let (store, p, mut rng) = attn_setup(2);
    let mut g = store.bind(false);
    let q = g.constant(rand_tensor(1, D, &mut rng));
    let ft = rand_tensor(6, D, &mut rng);
    let f = g.constant(ft.clone());
    let mut mask = vec![0.0; 6];
    mask[4] = 1.0;
    let m = g.constant(Tensor::matrix(1, 6, mask));
    let a = g.constant(Tensor::full(vec![1, 1], 1000.0));
    let out = attention(&mut g, q, f, None, Some(MaskBias { mask: m, alpha: a }), &p).unwrap();
    let expect = crate::autodiff::kernels::matmul_nn(ft.row(4), store.get(p.wv).data(), 1, D, D);
    for (x, y) in g.value(out).data().iter().zip(&expect) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn misaligned_rows_are_rejected() {
    let (store, p, mut rng) = attn_setup(3);
    let mut g = store.bind(false);
    let q = g.constant(rand_tensor(2, D, &mut rng));
    let f = g.constant(rand_tensor(4, D, &mut rng));
    let e = g.constant(rand_tensor(3, D, &mut rng));
    assert!(soft_masked_xattn(&mut g, q, f, Some(e), None, &p).is_err());
    let m = g.constant(rand_tensor(2, 3, &mut rng));
    let a = g.constant(Tensor::full(vec![1, 1], 1.0));
    assert!(soft_masked_xattn(&mut g, q, f, None, Some(MaskBias { mask: m, alpha: a }), &p).is_err());
}

fn block_setup(seed: u64, t: usize, n: usize) -> (ParamStore, BlockParams, Tensor, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let p = BlockParams::new(&mut store, "b", D, &mut rng);
    (store, p, rand_tensor(t, D, &mut rng), rand_tensor(n, D, &mut rng), rand_tensor(n, D, &mut rng), rand_tensor(n, D, &mut rng))
}

fn inputs(g: &mut Graph, v: &Tensor, pe: &Tensor, z: &Tensor) -> BlockInputs {
    BlockInputs {
        voxels: g.constant(v.clone()),
        voxel_pe: g.constant(pe.clone()),
        image: g.constant(Tensor::zeros(vec![0, D])),
        image_pe: g.constant(Tensor::zeros(vec![0, D])),
        pooled_z: g.constant(z.clone()),
        tag_gather: Arc::new(RowMix::gather(v.rows(), &[])),
    }
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

#[test]
fn zero_block_is_layer_norm_passthrough() {
    let (mut store, p, q, v, pe, z) = block_setup(4, 3, 5);
    zero_params(&mut store, p.params());
    let mut g = store.bind(false);
    let inp = inputs(&mut g, &v, &pe, &z);
    let qn = g.constant(q.clone());
    let out = fusion_block(&mut g, qn, &inp, &p, true).unwrap();
    assert_eq!(g.value(out).shape(), &[3, D]);
    for r in 0..3 {
        for (a, b) in g.value(out).row(r).iter().zip(layer_norm(q.row(r))) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    (0..w.cols()).map(|j| (0..x.len()).map(|i| x[i] * w.get(i, j)).sum()).collect()
}

fn mlp_oracle(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in mlp.layers.iter().enumerate() {
        h = vec_mat(&h, store.get(l.w)).iter().zip(store.get(l.b).data()).map(|(a, b)| a + b).collect();
        if i + 1 < mlp.layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

#[test]
fn single_query_single_voxel_closed_form() {
    let (store, p, q, v, pe, z) = block_setup(5, 1, 1);
    let mut g = store.bind(false);
    let inp = inputs(&mut g, &v, &pe, &z);
    let qn = g.constant(q.clone());
    let out = fusion_block(&mut g, qn, &inp, &p, true).unwrap();

    // One key → softmax weight 1, so each attention returns its value row.
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let q1 = layer_norm(&add(q.row(0), &vec_mat(v.row(0), store.get(p.voxel_attn.wv))));
    let q2 = layer_norm(&add(&q1, &vec_mat(&q1, store.get(p.self_attn1.wv))));
    let q3 = layer_norm(&add(&q2, &mlp_oracle(&store, &p.ffn1, &q2)));
    let q4 = layer_norm(&add(&q3, &vec_mat(&q3, store.get(p.self_attn2.wv))));
    let q5 = layer_norm(&add(&q4, &mlp_oracle(&store, &p.ffn2, &q4)));
    for (a, b) in g.value(out).data().iter().zip(&q5) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn voxel_storage_order_does_not_matter() {
    let (store, p, q, v, pe, z) = block_setup(6, 4, 9);
    let perm = [3usize, 8, 0, 5, 1, 7, 2, 6, 4];
    let shuffle = |t: &Tensor| Tensor::matrix(9, D, perm.iter().flat_map(|&i| t.row(i).to_vec()).collect());
    let run = |v: &Tensor, pe: &Tensor, z: &Tensor| {
        let mut g = store.bind(false);
        let inp = inputs(&mut g, v, pe, z);
        let qn = g.constant(q.clone());
        let out = fusion_block(&mut g, qn, &inp, &p, true).unwrap();
        g.value(out).clone()
    };
    let a = run(&v, &pe, &z);
    let b = run(&shuffle(&v), &shuffle(&pe), &shuffle(&z));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

fn small_model(cfg: ModelConfig) -> (Model, crate::synthworld::PointCloudClip) {
    let scene = generate_scene(&SceneConfig { frames: 2, ..SceneConfig::default() }, 3).unwrap();
    let model = Model::new(cfg, scene.palette.clone(), 11).unwrap();
    (model, scene.clip(1))
}

fn final_queries(model: &Model, clip: &crate::synthworld::PointCloudClip) -> Vec<Tensor> {
    let geo = model.geometry(clip).unwrap();
    let mut g = model.store.bind(false);
    let out = model.forward(&mut g, &geo).unwrap();
    out.queries.iter().map(|&q| g.value(q).clone()).collect()
}

#[test]
fn decode_returns_one_query_set_per_block_deterministically() {
    let (model, clip) = small_model(ModelConfig { dim: 16, queries: 6, ..ModelConfig::default() });
    let a = final_queries(&model, &clip);
    assert_eq!(a.len(), NUM_BLOCKS);
    assert!(a.iter().all(|q| q.shape() == [6, 16]));
    assert_eq!(a, final_queries(&model, &clip));
}

#[test]
fn zero_alpha_matches_mask_free_decoder_bitwise() {
    let cfg = ModelConfig { dim: 16, queries: 6, ..ModelConfig::default() };
    let (mut model, clip) = small_model(cfg.clone());
    let alphas: Vec<ParamId> = model.decoder.blocks.iter().map(|b| b.alpha).collect();
    zero_params(&mut model.store, alphas);
    let with_bias = final_queries(&model, &clip);
    model.config.mask_bias = false;
    assert_eq!(with_bias, final_queries(&model, &clip));
}

#[test]
fn query_permutation_is_equivariant() {
    let (mut model, clip) = small_model(ModelConfig { dim: 16, queries: 5, ..ModelConfig::default() });
    let base = final_queries(&model, &clip);
    let perm = [2usize, 4, 0, 1, 3];
    let q = model.store.get(model.decoder.queries).clone();
    *model.store.get_mut(model.decoder.queries) = Tensor::matrix(5, 16, perm.iter().flat_map(|&i| q.row(i).to_vec()).collect());
    let permuted = final_queries(&model, &clip);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in permuted[3].row(k).iter().zip(base[3].row(i)) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn mask_logits_match_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = rand_tensor(3, 4, &mut rng);
    let q = rand_tensor(2, 4, &mut rng);
    let mut g = Graph::new();
    let (zn, qn) = (g.constant(z.clone()), g.constant(q.clone()));
    let m = predict_masks(&mut g, zn, qn).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let expect: f64 = (0..4).map(|k| z.get(i, k) * q.get(j, k)).sum();
            assert!((g.value(m).get(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_class_head_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "h", ParamGroup::Rest, D, 6, &mut rng);
    zero_params(&mut store, [head.w, head.b]);
    let mut g = store.bind(false);
    let q = g.constant(rand_tensor(4, D, &mut rng));
    let logits = predict_classes(&mut g, q, &head).unwrap();
    assert_eq!(g.value(logits).shape(), &[4, 6]);
    let p = g.softmax(logits);
    assert!(g.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-12));
}

fn palette() -> ClassPalette {
    let c = |n: &str, thing| ClassInfo { name: n.into(), thing };
    ClassPalette::new(vec![c("ground", false), c("car", true)])
}

fn source(n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| if i < n / 2 { (4, i) } else { (5, i - n / 2) }).collect()
}

fn xyz(n: usize) -> Vec<Vec3> {
    (0..n).map(|i| [i as f64, 0.0, 1.0]).collect()
}

#[test]
fn single_thing_query_covers_everything() {
    let masks = Tensor::matrix(4, 2, vec![3.0, -1.0, 2.0, -1.0, 5.0, -1.0, 1.0, -1.0]);
    let classes = Tensor::from_rows(&[vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]]);
    let qs = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
    let a = assemble_panoptic(&masks, &classes, &qs, &palette(), 0, &xyz(4), &source(4));
    assert_eq!(a.class, vec![1; 4]);
    assert_eq!(a.tracklet, vec![Some(0); 4]);
    assert_eq!(a.tracklets.len(), 1);
    let t = &a.tracklets[0];
    assert_eq!(t.frames, (4, 5));
    assert_eq!(t.masks, vec![(4, vec![0, 1]), (5, vec![0, 1])]);
    assert_eq!(t.centroid, [2.5, 0.0, 1.0]);
    assert_eq!(t.embedding, vec![1.0, 2.0]);
}

#[test]
fn all_no_object_falls_back() {
    let masks = Tensor::zeros(vec![3, 2]);
    let classes = Tensor::from_rows(&[vec![0.0, 0.0, 4.0], vec![0.0, 0.0, 4.0]]);
    let a = assemble_panoptic(&masks, &classes, &Tensor::zeros(vec![2, 2]), &palette(), 0, &xyz(3), &source(3));
    assert_eq!(a.class, vec![0; 3]);
    assert!(a.tracklets.is_empty() && a.tracklet.iter().all(Option::is_none));
}

/// Brute force: score every (point, query) pair from scratch.
fn assemble_oracle(masks: &Tensor, classes: &Tensor) -> Vec<Option<usize>> {
    let c1 = classes.cols();
    let probs: Vec<Vec<f64>> = (0..classes.rows())
        .map(|q| {
            let r = classes.row(q);
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v.exp() / z).collect()
        })
        .collect();
    (0..masks.rows())
        .map(|n| {
            let mut best: Option<(usize, f64)> = None;
            for (q, p) in probs.iter().enumerate() {
                let k = (0..c1).fold(0, |b, k| if p[k] > p[b] { k } else { b });
                if k == c1 - 1 {
                    continue;
                }
                let s = p[k] / (1.0 + (-masks.get(n, q)).exp());
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((q, s));
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

#[test]
fn disjoint_masks_partition_points() {
    let masks = Tensor::from_rows(&[vec![9.0, -9.0], vec![9.0, -9.0], vec![-9.0, 9.0], vec![-9.0, 9.0], vec![-9.0, 9.0]]);
    let classes = Tensor::from_rows(&[vec![0.0, 3.0, 0.0], vec![3.0, 0.0, 0.0]]);
    let a = assemble_panoptic(&masks, &classes, &Tensor::zeros(vec![2, 2]), &palette(), 0, &xyz(5), &source(5));
    let oracle = assemble_oracle(&masks, &classes);
    assert_eq!(oracle, vec![Some(0), Some(0), Some(1), Some(1), Some(1)]);
    assert_eq!(a.class, vec![1, 1, 0, 0, 0]);
    assert_eq!(a.tracklet, vec![Some(0), Some(0), None, None, None]);
}

proptest! {
    #[test]
    fn assembly_matches_oracle_and_ignores_logit_shift(
        m in proptest::collection::vec(-4.0f64..4.0, 12),
        c in proptest::collection::vec(-3.0f64..3.0, 9),
        shift in -5.0f64..5.0,
    ) {
        let masks = Tensor::matrix(4, 3, m);
        let classes = Tensor::matrix(3, 3, c);
        let qs = Tensor::zeros(vec![3, 2]);
        let a = assemble_panoptic(&masks, &classes, &qs, &palette(), 0, &xyz(4), &source(4));
        let oracle = assemble_oracle(&masks, &classes);
        for (i, o) in oracle.iter().enumerate() {
            match o {
                Some(q) => {
                    let k = (0..3).fold(0, |b, k| if classes.get(*q, k) > classes.get(*q, b) { k } else { b });
                    prop_assert_eq!(a.class[i] as usize, k);
                    if k == 1 {
                        let t = a.tracklet[i].unwrap();
                        prop_assert_eq!(a.tracklets[t].query, *q);
                    } else {
                        prop_assert!(a.tracklet[i].is_none());
                    }
                }
                None => prop_assert_eq!(a.class[i], 0),
            }
        }
        let shifted = Tensor::matrix(3, 3, classes.data().iter().map(|v| v + shift).collect());
        let b = assemble_panoptic(&masks, &shifted, &qs, &palette(), 0, &xyz(4), &source(4));
        prop_assert_eq!(a.class, b.class);
        prop_assert_eq!(a.tracklet, b.tracklet);
    }
}
