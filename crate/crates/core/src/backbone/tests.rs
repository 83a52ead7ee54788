use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heads::rotation_from_6d;
use super::*;
use crate::types::validate_scene;

fn images(cfg: &BackboneConfig, views: usize, seed: u64) -> Vec<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..views)
        .map(|_| ImageTensor::from_fn(cfg.image_width, cfg.image_height, |_, _| std::array::from_fn(|_| rng.random())))
        .collect()
}

fn ring_cams(cfg: &BackboneConfig, views: usize) -> Vec<CameraModel> {
    (0..views)
        .map(|v| {
            let a = v as f64 * std::f64::consts::TAU / views as f64;
            CameraModel::look_at([3.0 * a.cos(), 3.0 * a.sin(), 1.0], [0.0; 3], [0.0, 0.0, 1.0], cfg.fov_y_deg, cfg.image_width, cfg.image_height)
        })
        .collect()
}

fn retained<'t>(b: &Backbone, tape: &'t Tape, feats: &PatchFeatures, hook: Option<Hook<'_, 't>>) -> Result<AggregatorOutput> {
    let agg = b.aggregate(tape, feats, hook)?;
    Ok(agg.to_output(b.cfg.final_layer()))
}

fn hook<'t>(f: impl FnMut(usize, Var<'t>) -> Var<'t>) -> impl FnMut(usize, Var<'t>) -> Var<'t> {
    f
}

#[test]
fn feature_shape_for_toy_defaults() {
    let b = Backbone::new(BackboneConfig::default()).unwrap();
    let f = b.extract_features(&images(&b.cfg, 2, 0)).unwrap();
    assert_eq!((f.views, f.patches), (2, 16));
    assert_eq!(f.tokens.shape(), &[32, 128]);
}

#[test]
fn features_are_deterministic_and_view_equivariant() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let ims = images(&b.cfg, 3, 1);
    let f = b.extract_features(&ims).unwrap();
    assert_eq!(f, b.extract_features(&ims).unwrap());
    let swapped = vec![ims[2].clone(), ims[0].clone(), ims[1].clone()];
    let g = b.extract_features(&swapped).unwrap();
    let p = f.patches;
    for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
        for r in 0..p {
            assert_eq!(g.tokens.row(dst * p + r), f.tokens.row(src * p + r));
        }
    }
}

#[test]
fn non_divisible_images_are_rejected() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let bad = vec![ImageTensor::constant(15, 16, [0.5; 3])];
    assert!(matches!(b.extract_features(&bad), Err(Error::Validation(_))));
}

#[test]
fn config_validation() {
    assert!(BackboneConfig::default().validate().is_ok());
    assert!(BackboneConfig::full_scale().validate().is_ok());
    let mut c = BackboneConfig::tiny();
    c.retained = vec![];
    assert!(c.validate().is_err());
    let mut c = BackboneConfig::tiny();
    c.retained = vec![3];
    assert!(c.validate().is_err(), "final layer cannot also be retained");
    let mut c = BackboneConfig::tiny();
    c.schedule.pop();
    assert!(c.validate().is_err());
}

#[test]
fn identity_and_zero_hooks_change_nothing() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let f = b.extract_features(&images(&b.cfg, 2, 2)).unwrap();
    let tape = Tape::no_grad();
    let base = retained(&b, &tape, &f, None).unwrap();
    assert_eq!(base.layers, vec![1, 2, 3]);
    let mut ident = hook(|_, x| x);
    assert_eq!(retained(&b, &tape, &f, Some(&mut ident)).unwrap(), base);
    let zero = tape.constant(Tensor::zeros(&[b.cfg.d_f]));
    let mut add_zero = hook(|_, x| x.add(zero));
    assert_eq!(retained(&b, &tape, &f, Some(&mut add_zero)).unwrap(), base);
}

#[test]
fn constant_at_layer_zero_reaches_every_retained_layer() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let f = b.extract_features(&images(&b.cfg, 2, 3)).unwrap();
    let tape = Tape::no_grad();
    let base = retained(&b, &tape, &f, None).unwrap();
    let c = tape.constant(Tensor::full(&[b.cfg.d_f], 0.5));
    let mut shift = hook(|l, x| if l == 0 { x.add(c) } else { x });
    let shifted = retained(&b, &tape, &f, Some(&mut shift)).unwrap();
    for (a, s) in base.tokens.iter().zip(&shifted.tokens) {
        assert!(a.max_abs_diff(s) > 0.0);
    }
}

#[test]
fn shape_changing_hook_is_a_contract_error() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let f = b.extract_features(&images(&b.cfg, 1, 4)).unwrap();
    let tape = Tape::no_grad();
    let mut cut = hook(|_, x| x.slice(0, 0, 1));
    assert!(matches!(retained(&b, &tape, &f, Some(&mut cut)), Err(Error::Contract(_))));
}

#[test]
fn only_global_layers_mix_views() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    assert_eq!(b.cfg.schedule[0], AttentionKind::Local);
    assert_eq!(b.cfg.schedule[1], AttentionKind::Global);
    let f = b.extract_features(&images(&b.cfg, 2, 5)).unwrap();
    let mut g = f.clone();
    let p = f.patches;
    for v in g.tokens.data_mut()[p * b.cfg.d_f..].iter_mut() {
        *v = 0.0;
    }
    // tokens entering layer l are the outputs of layer l-1
    let entering = |feats: &PatchFeatures, layer: usize| {
        let tape = Tape::no_grad();
        let mut seen = None;
        let mut capture = hook(|l, x| {
            if l == layer {
                seen = Some((*x.value()).clone());
            }
            x
        });
        retained(&b, &tape, feats, Some(&mut capture)).unwrap();
        drop(capture);
        seen.unwrap()
    };
    let view_a = |t: &Tensor| t.data()[..p * b.cfg.d_f].to_vec();
    assert_eq!(view_a(&entering(&f, 1)), view_a(&entering(&g, 1)), "after local layer 0");
    assert_ne!(view_a(&entering(&f, 2)), view_a(&entering(&g, 2)), "after global layer 1");
}

#[test]
fn gaussian_count_for_two_toy_views() {
    let b = Backbone::new(BackboneConfig::default()).unwrap();
    let ims = images(&b.cfg, 2, 6);
    let tape = Tape::no_grad();
    let out = b.forward(&tape, &ims, Some(&ring_cams(&b.cfg, 2)), None).unwrap();
    let scene = out.scene(b.cfg.sh_degree);
    assert_eq!(scene.len(), 2 * 64 * 64);
    assert_eq!(scene.source_view[4096], 1);
    assert!(validate_scene(&scene).is_empty());
}

#[test]
fn zero_tokens_give_identical_gaussians() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let tape = Tape::no_grad();
    let layout = b.layout(2);
    let zero = tape.constant(Tensor::zeros(&[2 * b.cfg.patches_per_view(), b.cfg.d_f]));
    let tokens = vec![zero; b.cfg.retained.len() + 1];
    let rgb = tape.constant(Tensor::full(&[layout.pixels(), 3], 0.3));
    let g = b.gaussian_head.forward(&tape, &tokens, rgb, &layout).unwrap();
    for t in [g.rot.value(), g.scale.value(), g.sh.value()] {
        let n = t.shape()[0];
        let row = t.numel() / n;
        let first = t.data()[..row].to_vec();
        assert!(t.data().chunks(row).all(|r| r == first.as_slice()));
    }
    let again = b.gaussian_head.forward(&tape, &tokens, rgb, &layout).unwrap();
    assert_eq!(*again.sh.value(), *g.sh.value());
}

#[test]
fn head_rejects_wrong_token_count() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let tape = Tape::no_grad();
    let layout = b.layout(1);
    let t = tape.constant(Tensor::zeros(&[b.cfg.patches_per_view(), b.cfg.d_f]));
    let rgb = tape.constant(Tensor::zeros(&[layout.pixels(), 3]));
    assert!(b.gaussian_head.forward(&tape, &[t], rgb, &layout).is_err());
}

#[test]
fn unproject_principal_point_identity_pose() {
    let cam = CameraModel::from_rt(&Matrix3::identity(), &Vector3::zeros(), 20.0, 20.0, 3.0, 2.0, 6, 4);
    let layout = PixelLayout::new(1, 6, 4, 2);
    let tape = Tape::no_grad();
    let pts = unproject(&tape, tape.constant(Tensor::full(&[24, 1], 2.0)), &[cam], &layout);
    let row = 2 * 6 + 3;
    assert_eq!(pts.value().row(row), &[0.0, 0.0, 2.0]);
}

#[test]
fn unproject_then_project_round_trips() {
    let cfg = BackboneConfig::tiny();
    let cams = ring_cams(&cfg, 2);
    let layout = PixelLayout::new(2, cfg.image_width, cfg.image_height, cfg.patch);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let depth = Tensor::from_fn(&[layout.pixels(), 1], |_| rng.random_range(0.5..5.0));
    let tape = Tape::no_grad();
    let pts = unproject(&tape, tape.constant(depth.clone()), &cams, &layout).value();
    let hw = cfg.pixels_per_view();
    for i in (0..layout.pixels()).step_by(7) {
        let cam = &cams[i / hw];
        let (x, y) = ((i % hw) % cfg.image_width, (i % hw) / cfg.image_width);
        let p = pts.row(i);
        let (u, v, z) = cam.project(&Vector3::new(p[0], p[1], p[2]));
        assert!((u - x as f64).abs() < 1e-5 && (v - y as f64).abs() < 1e-5);
        assert!((z - depth.data()[i]).abs() < 1e-9);
    }
}

#[test]
fn identical_depth_maps_differ_by_the_relative_pose() {
    let cfg = BackboneConfig::tiny();
    let cams = ring_cams(&cfg, 2);
    let layout = PixelLayout::new(2, cfg.image_width, cfg.image_height, cfg.patch);
    let hw = cfg.pixels_per_view();
    let tape = Tape::no_grad();
    let pts = unproject(&tape, tape.constant(Tensor::full(&[2 * hw, 1], 1.7)), &cams, &layout).value();
    // camera-1 point -> camera-0 frame via the relative transform
    let rel_r = cams[0].rotation() * cams[1].rotation().transpose();
    let rel_t = cams[0].translation() - rel_r * cams[1].translation();
    for i in (0..hw).step_by(5) {
        let a = pts.row(i);
        let b = pts.row(hw + i);
        let in0_a = cams[0].to_camera(&Vector3::new(a[0], a[1], a[2]));
        let in1_b = cams[1].to_camera(&Vector3::new(b[0], b[1], b[2]));
        assert!((in0_a - in1_b).norm() < 1e-9, "same camera-space point per view");
        let mapped = rel_r * in1_b + rel_t;
        let direct = cams[0].to_camera(&Vector3::new(b[0], b[1], b[2]));
        assert!((mapped - direct).norm() < 1e-9);
    }
}

#[test]
fn gt_camera_bypass_echoes_inputs() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let cams = ring_cams(&b.cfg, 2);
    let tape = Tape::no_grad();
    let out = b.forward(&tape, &images(&b.cfg, 2, 7), Some(&cams), None).unwrap();
    assert_eq!(out.cameras, cams);
}

#[test]
fn gt_depth_injection_is_used() {
    let mut cfg = BackboneConfig::tiny();
    cfg.use_gt_depth = true;
    let b = Backbone::new(cfg).unwrap();
    let cams = ring_cams(&b.cfg, 1);
    let depth = vec![vec![2.5; b.cfg.pixels_per_view()]];
    let tape = Tape::no_grad();
    let out = b.forward(&tape, &images(&b.cfg, 1, 8), Some(&cams), Some(&depth)).unwrap();
    assert!(out.depth.value().data().iter().all(|&d| d == 2.5));
    assert!(b.forward(&tape, &images(&b.cfg, 1, 8), Some(&cams), None).is_err());
}

#[test]
fn predicted_cameras_are_deterministic() {
    let mut cfg = BackboneConfig::tiny();
    cfg.use_gt_cameras = false;
    let b = Backbone::new(cfg).unwrap();
    let ims = images(&b.cfg, 2, 10);
    let tape = Tape::no_grad();
    let a = b.forward(&tape, &ims, None, None).unwrap().cameras;
    let c = b.forward(&tape, &ims, None, None).unwrap().cameras;
    assert_eq!(a, c);
    for cam in &a {
        cam.validate().unwrap();
    }
}

#[test]
fn frozen_forward_is_bit_reproducible() {
    let b = Backbone::new(BackboneConfig::tiny()).unwrap();
    let ims = images(&b.cfg, 2, 11);
    let cams = ring_cams(&b.cfg, 2);
    let run = || {
        let tape = Tape::no_grad();
        b.forward(&tape, &ims, Some(&cams), None).unwrap().scene(0)
    };
    assert_eq!(run(), run());
    let b2 = Backbone::new(BackboneConfig::tiny()).unwrap();
    let tape = Tape::no_grad();
    assert_eq!(b2.forward(&tape, &ims, Some(&cams), None).unwrap().scene(0), run());
}

#[test]
fn voxel_merge_hand_cases() {
    let mut s = GaussianScene::new(0);
    s.push(GaussianPrimitive::isotropic([0.0, 0.0, 0.0], 0.1, 0.5, [0.1, 0.2, 0.3]), 0, 1.0);
    s.push(GaussianPrimitive::isotropic([1.0, 0.0, 0.0], 0.2, 0.7, [0.4, 0.5, 0.6]), 0, 2.0);
    assert_eq!(voxel_merge(&s, 0.5).unwrap(), s, "small voxels are the identity");

    let mut twins = GaussianScene::new(0);
    let mut g = GaussianPrimitive::isotropic([0.3, 0.3, 0.3], 0.1, 0.5, [0.1, 0.2, 0.3]);
    g.rot = [0.5, 0.5, 0.5, 0.5];
    twins.push(g.clone(), 0, 1.0);
    twins.push(g.clone(), 1, 2.0);
    let m = voxel_merge(&twins, 1.0).unwrap();
    assert_eq!(m.gaussians, vec![g]);
}

fn random_scene(seed: u64, n: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GaussianScene::new(1);
    for _ in 0..n {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let qn = crate::types::quat_norm(q).max(1e-9);
        s.push(
            GaussianPrimitive {
                mu: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                rot: q.map(|v| v / qn),
                scale: std::array::from_fn(|_| rng.random_range(0.01..0.2)),
                opacity: rng.random(),
                sh_coeffs: (0..4).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect(),
            },
            rng.random_range(0..4),
            if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..2.0) },
        );
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn voxel_merge_is_idempotent(seed in 0u64..10_000, n in 0usize..200, voxel in 0.05f64..1.5) {
        let s = random_scene(seed, n);
        let once = voxel_merge(&s, voxel).unwrap();
        prop_assert!(once.len() <= s.len());
        prop_assert!(validate_scene(&once).is_empty());
        prop_assert_eq!(voxel_merge(&once, voxel).unwrap(), once);
    }

    #[test]
    fn six_d_rotations_are_orthonormal(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0)) {
        let r = rotation_from_6d(a, b);
        prop_assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-5);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn random_weights_give_valid_gaussians_and_cameras(seed in 0u64..1000) {
        let mut cfg = BackboneConfig::tiny();
        cfg.seed = seed;
        cfg.sh_degree = 1;
        cfg.use_gt_cameras = false;
        let b = Backbone::new(cfg).unwrap();
        let tape = Tape::no_grad();
        let out = b.forward(&tape, &images(&b.cfg, 2, seed), None, None).unwrap();
        prop_assert!(validate_scene(&out.scene(1)).is_empty());
        for cam in &out.cameras {
            let r = cam.rotation();
            prop_assert!((r * r.transpose() - Matrix3::identity()).abs().max() < 1e-5);
        }
        prop_assert!(out.confidence.value().data().iter().all(|&c| c >= 0.0));
    }
}
