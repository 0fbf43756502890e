use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;

const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn optical_cam() -> CameraModel {
    CameraModel::new(100.0, 100.0, 50.0, 30.0, IDENTITY, [0.0; 3], 100, 60).unwrap()
}

#[test]
fn optical_axis_hits_principal_point() {
    let p = project(&[[0.0, 0.0, 5.0]], &optical_cam());
    assert_eq!(p.pixels[0], [50.0, 30.0]);
    assert!(p.valid[0]);
}

#[test]
fn off_axis_pinhole() {
    let p = project(&[[1.0, 0.0, 5.0]], &optical_cam());
    // u = 100 * 1/5 + 50
    assert_eq!(p.pixels[0], [70.0, 30.0]);
}

#[test]
fn behind_camera_is_invalid_not_dropped() {
    let p = project(&[[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]], &optical_cam());
    assert_eq!(p.valid, vec![false, true]);
    assert_eq!(p.pixels.len(), 2);
}

#[test]
fn outside_image_is_invalid() {
    let p = project(&[[10.0, 0.0, 1.0]], &optical_cam());
    assert!(!p.valid[0]);
}

#[test]
fn camera_validation() {
    assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, IDENTITY, [0.0; 3], 4, 4).is_err());
    let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
    assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, reflect, [0.0; 3], 4, 4).is_err());
    let skewed = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, skewed, [0.0; 3], 4, 4).is_err());
}

#[test]
fn matrices_round_trip() {
    let cam = CameraModel::looking_along(0.7, [0.1, 0.0, 1.5], 40.0, 40.0, 64, 32).unwrap();
    let back = CameraModel::from_matrices(&cam.intrinsics(), &cam.extrinsics(), 64, 32).unwrap();
    assert_eq!(back, cam);
}

#[test]
fn looking_along_sees_forward_points() {
    let cam = CameraModel::looking_along(std::f64::consts::FRAC_PI_2, [0.0, 0.0, 1.0], 40.0, 40.0, 64, 32).unwrap();
    // A point 10 m to the left (+y) at camera height projects to the center.
    let (px, z) = cam.project_point([0.0, 10.0, 1.0]).unwrap();
    assert!((px[0] - 32.0).abs() < 1e-9 && (px[1] - 16.0).abs() < 1e-9);
    assert!((z - 10.0).abs() < 1e-9);
    // Higher points land higher in the image (smaller v).
    let (up, _) = cam.project_point([0.0, 10.0, 2.0]).unwrap();
    assert!(up[1] < 16.0);
    assert!(cam.project_point([0.0, -10.0, 1.0]).is_none());
}

#[test]
fn rotated_world_keeps_projection() {
    let cam = CameraModel::looking_along(0.3, [0.2, -0.1, 1.6], 50.0, 50.0, 64, 48).unwrap();
    let yaw = 1.1;
    let rotated = cam.rotated_world(yaw);
    let p = [8.0, 2.0, 0.5];
    let (s, c) = f64::sin_cos(yaw);
    let q = [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]];
    let a = cam.project_point(p).unwrap().0;
    let b = rotated.project_point(q).unwrap().0;
    assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
}

proptest! {
    #[test]
    fn projection_round_trip(yaw in -3.1f64..3.1, x in -20.0f64..20.0, y in -20.0f64..20.0, z in -1.0f64..4.0) {
        let cam = CameraModel::looking_along(yaw, [0.3, -0.2, 1.7], 60.0, 55.0, 128, 64).unwrap();
        let p = [x, y, z];
        if let Some((px, depth)) = cam.project_point(p) {
            let back = cam.unproject(px[0], px[1], depth);
            for k in 0..3 {
                prop_assert!((back[k] - p[k]).abs() < 1e-9, "{:?} vs {:?}", back, p);
            }
        }
    }

    #[test]
    fn voxelize_is_translation_consistent(seed in 0u64..5000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = 0.1;
        // Keep points away from cell borders so the shift is exact.
        let pts: Vec<Vec3> = (0..40)
            .map(|_| {
                let mut p = [0.0; 3];
                for v in &mut p {
                    *v = (rng.random_range(-50i64..50) as f64 + rng.random_range(0.05..0.95)) * size;
                }
                p
            })
            .collect();
        let shifted: Vec<Vec3> = pts.iter().map(|p| [p[0] + size, p[1] + size, p[2] + size]).collect();
        let a = voxelize(&pts, size);
        let b = voxelize(&shifted, size);
        prop_assert_eq!(a.len(), b.len());
        for (ca, cb) in a.coords.iter().zip(&b.coords) {
            prop_assert_eq!([ca[0] + 1, ca[1] + 1, ca[2] + 1], *cb);
        }
        prop_assert_eq!(&a.point_to_voxel, &b.point_to_voxel);
    }

    #[test]
    fn range_encoding_is_lipschitz(r1 in 0.0f64..80.0, r2 in 0.0f64..80.0) {
        let enc = PositionalEncoder::new(32).unwrap();
        let a = enc.encode_range(r1);
        let b = enc.encode_range(r2);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        prop_assert!(dist <= enc.range_lipschitz() * (r1 - r2).abs() + 1e-12);
    }
}

#[test]
fn floor_rule_including_negatives() {
    assert_eq!(voxel_of([0.25, -0.05, 0.31], 0.1), [2, -1, 3]);
    assert_eq!(parent_of([3, -1, 2]), [1, -1, 1]);
    assert_eq!(parent_of([-2, -3, 0]), [-1, -2, 0]);
}

#[test]
fn points_in_one_voxel() {
    let pts: Vec<Vec3> = (0..5).map(|i| [0.01 + 0.01 * i as f64, 0.02, 0.03]).collect();
    let g = voxelize(&pts, 0.1);
    assert_eq!(g.len(), 1);
    assert_eq!(g.point_to_voxel, vec![0; 5]);
    assert_eq!(g.features.shape(), &[1, 0]);
}

#[test]
fn empty_input_gives_empty_grid() {
    let g = voxelize(&[], 0.1);
    assert!(g.is_empty());
}

#[test]
fn pyramid_counts_are_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<Vec3> = (0..300).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.0..1.0)]).collect();
    let pyr = VoxelPyramid::build(&pts, 0.1, 4);
    let counts: Vec<usize> = pyr.levels.iter().map(|g| g.len()).collect();
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    assert_eq!(pyr.levels.iter().map(|g| g.stride).collect::<Vec<_>>(), vec![1, 2, 4, 8]);
    // Parent maps are total and consistent with the floor-halving rule.
    for (l, parents) in pyr.parents.iter().enumerate() {
        for (i, &p) in parents.iter().enumerate() {
            assert_eq!(parent_of(pyr.levels[l].coords[i]), pyr.levels[l + 1].coords[p]);
        }
    }
    let m8 = pyr.point_map(3);
    for (i, p) in pts.iter().enumerate() {
        assert_eq!(pyr.levels[3].coords[m8[i]], voxel_of(*p, 0.8));
    }
}

#[test]
fn scatter_mean_of_two_points() {
    let f = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 3.0]]);
    assert_eq!(p2v_scatter_mean(&f, &[0, 0], 1).data(), &[2.0, 2.0]);
}

#[test]
fn scatter_then_gather_is_identity_for_singletons() {
    let f = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0], vec![7.0, 0.0]]);
    let map = [2, 0, 1];
    let v = p2v_scatter_mean(&f, &map, 3);
    assert_eq!(v2p_gather(&v, &map), f);
}

#[test]
fn single_voxel_gathers_identical_rows() {
    let v = Tensor::from_rows(&[vec![1.5, 2.5]]);
    let p = v2p_gather(&v, &[0, 0, 0]);
    assert!(p.data().chunks(2).all(|r| r == [1.5, 2.5]));
}

#[test]
fn scatter_and_gather_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(1..100);
        let nv = rng.random_range(1..=n);
        let mut map: Vec<usize> = (0..n).map(|_| rng.random_range(0..nv)).collect();
        map[..nv.min(n)].iter_mut().enumerate().for_each(|(i, m)| *m = i);
        let d = rng.random_range(1..6);
        let f = Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let got = p2v_scatter_mean(&f, &map, nv);
        for v in 0..nv {
            for c in 0..d {
                let members: Vec<f64> = (0..n).filter(|&i| map[i] == v).map(|i| f.get(i, c)).collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                assert!((got.get(v, c) - mean).abs() < 1e-12);
            }
        }
        let back = v2p_gather(&got, &map);
        for i in 0..n {
            assert_eq!(back.row(i), got.row(map[i]));
        }
    }
}

fn map_2x3() -> (Tensor, MapShape) {
    let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 10.0 * i as f64]).collect();
    (Tensor::from_rows(&rows), MapShape { height: 2, width: 3, stride: 4 })
}

#[test]
fn bilinear_at_cell_center() {
    let (m, s) = map_2x3();
    // Cell (1, 2) centered at pixel (10, 6).
    let out = sample_image_features(&m, s, &[[10.0, 6.0]]);
    assert_eq!(out.data(), m.row(5));
}

#[test]
fn bilinear_midpoint_is_mean() {
    let (m, s) = map_2x3();
    let out = sample_image_features(&m, s, &[[4.0, 2.0]]);
    assert_eq!(out.data(), &[0.5, 5.0]);
}

#[test]
fn bilinear_matches_four_term_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w, stride) = (5, 7, 4);
    let m = Tensor::matrix(h * w, 3, (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
    let shape = MapShape { height: h, width: w, stride };
    for _ in 0..50 {
        let u = rng.random_range(2.0..(w * stride) as f64 - 2.0);
        let v = rng.random_range(2.0..(h * stride) as f64 - 2.0);
        let got = sample_image_features(&m, shape, &[[u, v]]);
        let x = u / stride as f64 - 0.5;
        let y = v / stride as f64 - 0.5;
        let (x0, y0) = (x.floor(), y.floor());
        let (dx, dy) = (x - x0, y - y0);
        let at = |r: f64, c: f64, k: usize| m.get(r as usize * w + c as usize, k);
        for k in 0..3 {
            let expect = at(y0, x0, k) * (1.0 - dx) * (1.0 - dy)
                + at(y0, x0 + 1.0, k) * dx * (1.0 - dy)
                + at(y0 + 1.0, x0, k) * (1.0 - dx) * dy
                + at(y0 + 1.0, x0 + 1.0, k) * dx * dy;
            assert!((got.data()[k] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn range_zero_depth_half_alternates() {
    let enc = PositionalEncoder::new(32).unwrap();
    let e = enc.encode([1.0, 2.0, 0.5], [1.0, 2.0, 0.5]);
    let depth = &e[16..];
    for (i, v) in depth.iter().enumerate() {
        assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
    }
}

#[test]
fn encoding_length_and_determinism() {
    for d in [32, 128] {
        let a = positional_encoding([3.0, -4.0, 1.0], [0.0; 3], d).unwrap();
        assert_eq!(a.len(), d);
        assert_eq!(a, positional_encoding([3.0, -4.0, 1.0], [0.0; 3], d).unwrap());
    }
    assert!(positional_encoding([0.0; 3], [0.0; 3], 30).is_err());
}

#[test]
fn sinusoidal_expand_contract() {
    let z = sinusoidal_expand(&[0.0, 0.0, 0.0], 64).unwrap();
    assert_eq!(z.len(), 64);
    assert!(z[..32].iter().all(|&v| v == 0.0));
    assert!(z[32..].iter().all(|&v| v == 1.0));
    for k in 1..5 {
        let v: Vec<f64> = (0..k).map(|i| i as f64 * 0.7 - 1.0).collect();
        let a = sinusoidal_expand(&v, 64).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(a, sinusoidal_expand(&v, 64).unwrap());
    }
    assert!(sinusoidal_expand(&[1.0], 63).is_err());
}
