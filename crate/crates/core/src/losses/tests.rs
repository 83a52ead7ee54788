use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck;
use crate::style::{embed, neutral_embedding, StyleSignal, ToyProvider};

fn noise(seed: u64, w: usize, h: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, 3], |_| rng.random())
}

fn scalar<'t>(r: Result<Var<'t>>) -> f64 {
    r.unwrap().item()
}

#[test]
fn tap_resolutions_strictly_decrease() {
    let phi = FeatureExtractor::default();
    let tape = Tape::no_grad();
    let taps = phi.taps(&tape, tape.constant(noise(0, 16, 16))).unwrap();
    let sizes: Vec<usize> = taps.iter().map(|t| t.shape()[0]).collect();
    assert_eq!(sizes, vec![16, 8, 4, 2]);
    assert_eq!(taps[3].shape(), vec![2, 2, 32]);
    assert!(phi.taps(&tape, tape.constant(noise(0, 12, 16))).is_err());
}

#[test]
fn content_loss_properties() {
    let phi = FeatureExtractor::default();
    let tape = Tape::no_grad();
    let (a, b) = (tape.constant(noise(1, 16, 16)), tape.constant(noise(2, 16, 16)));
    assert_eq!(scalar(content_loss(&tape, &phi, a, a)), 0.0);
    let ab = scalar(content_loss(&tape, &phi, a, b));
    assert!(ab > 0.0);
    assert_eq!(ab, scalar(content_loss(&tape, &phi, b, a)));
}

#[test]
fn content_loss_gradient() {
    let phi = FeatureExtractor::default();
    let target = noise(4, 16, 16);
    let r = gradcheck(&[noise(3, 16, 16)], 1e-6, |tape, x| {
        content_loss(tape, &phi, x[0], tape.constant(target.clone())).unwrap().output()
    });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

/// Two-pass mean and standard deviation of each channel.
fn oracle_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = *t.shape().last().unwrap();
    let n = t.numel() / c;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            mean[k] += t.data()[i * c + k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            var[k] += (t.data()[i * c + k] - mean[k]).powi(2);
        }
    }
    (mean, var.iter().map(|v| (v / n as f64 + STD_EPS).sqrt()).collect())
}

#[test]
fn channel_stats_match_two_pass_oracle() {
    let phi = FeatureExtractor::default();
    let tape = Tape::no_grad();
    for tap in phi.taps(&tape, tape.constant(noise(5, 16, 16))).unwrap() {
        let (m, s) = channel_stats(tap);
        let (om, os) = oracle_stats(&tap.value());
        for (a, b) in m.value().data().iter().zip(&om).chain(s.value().data().iter().zip(&os)) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn style_loss_properties() {
    let phi = FeatureExtractor::default();
    let tape = Tape::no_grad();
    let a = tape.constant(noise(6, 16, 16));
    assert_eq!(scalar(style_loss(&tape, &phi, a, a)), 0.0);
    let flat = tape.constant(Tensor::new(&[16, 16, 3], [0.3, 0.6, 0.2].repeat(256)));
    assert!(scalar(style_loss(&tape, &phi, flat, flat)).abs() == 0.0);
    assert!(scalar(style_loss(&tape, &phi, a, flat)) > 0.0);

    let target = StyleTarget::new(&phi, &ImageTensor::from_tensor(&noise(7, 40, 24)).unwrap(), 16, 16).unwrap();
    let via_target = scalar(style_loss_to(&tape, &phi, a, &target));
    let resized = ImageTensor::from_tensor(&noise(7, 40, 24)).unwrap().resize(16, 16).to_tensor();
    let direct = scalar(style_loss(&tape, &phi, a, tape.constant(resized)));
    assert!((via_target - direct).abs() < 1e-12);
}

#[test]
fn flat_colours_have_flat_activations() {
    let phi = FeatureExtractor::default();
    let tape = Tape::no_grad();
    let flat = tape.constant(Tensor::new(&[16, 16, 3], [0.8, 0.1, 0.4].repeat(256)));
    for tap in phi.taps(&tape, flat).unwrap() {
        let (_, s) = channel_stats(tap);
        assert!(s.value().data().iter().all(|&v| (v - STD_EPS.sqrt()).abs() < 1e-9));
    }
}

#[test]
fn style_stats_ignore_spatial_order() {
    let tape = Tape::no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let act = Tensor::from_fn(&[4, 4, 5], |_| rng.random());
    let mut rows: Vec<usize> = (0..16).collect();
    rows.reverse();
    rows.swap(3, 9);
    let perm = Tensor::from_fn(&[4, 4, 5], |i| act.data()[rows[i / 5] * 5 + i % 5]);
    let (m1, s1) = channel_stats(tape.constant(act));
    let (m2, s2) = channel_stats(tape.constant(perm));
    assert!(m1.value().max_abs_diff(&m2.value()) < 1e-15);
    assert!(s1.value().max_abs_diff(&s2.value()) < 1e-15);
}

#[test]
fn style_loss_gradient() {
    let phi = FeatureExtractor::default();
    let r = gradcheck(&[noise(9, 16, 16), noise(10, 16, 16)], 1e-6, |tape, x| {
        style_loss(tape, &phi, x[0], x[1]).unwrap().output()
    });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

fn dir_loss(orig: &[f64], styl: &[f64], text: &[f64]) -> f64 {
    let tape = Tape::no_grad();
    let c = |v: &[f64]| tape.constant(Tensor::new(&[v.len()], v.to_vec()));
    directional(&tape, c(orig), c(styl), text).item()
}

#[test]
fn directional_closed_forms() {
    let o = [0.2, 0.1, 0.0];
    assert!(dir_loss(&o, &[1.2, 0.1, 0.0], &[2.0, 0.0, 0.0]).abs() < 1e-7);
    assert!((dir_loss(&o, &[0.2, 1.1, 0.0], &[2.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
    assert!((dir_loss(&o, &[-0.8, 0.1, 0.0], &[2.0, 0.0, 0.0]) - 2.0).abs() < 1e-7);
    assert_eq!(dir_loss(&o, &o, &[2.0, 0.0, 0.0]), 1.0);
}

#[test]
fn directional_loss_gradient() {
    let p = ToyProvider::default();
    let z = embed(&StyleSignal::Text("blue ink".into()), &p).unwrap();
    let photo = neutral_embedding(&p).vec.clone();
    let orig = noise(11, 16, 16);
    let r = gradcheck(&[noise(12, 16, 16)], 1e-6, |tape, x| {
        clip_directional_loss(tape, &p, tape.constant(orig.clone()), x[0], &z.vec, &photo).unwrap().output()
    });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn full_unwarped_patch_equals_global_loss() {
    let p = ToyProvider::default();
    let z = embed(&StyleSignal::Text("gold leaf".into()), &p).unwrap();
    let photo = neutral_embedding(&p).vec.clone();
    let tape = Tape::no_grad();
    let (o, s) = (tape.constant(noise(13, 16, 16)), tape.constant(noise(14, 16, 16)));
    let global = scalar(clip_directional_loss(&tape, &p, o, s, &z.vec, &photo));
    let patch = scalar(clip_patch_loss(&tape, &p, o, s, &z.vec, &photo, &[Crop::axis_aligned(0.0, 0.0, 16)]));
    assert_eq!(global, patch);
}

#[test]
fn patch_loss_is_seeded_and_bounded() {
    let p = ToyProvider::default();
    let z = embed(&StyleSignal::Text("purple haze".into()), &p).unwrap();
    let photo = neutral_embedding(&p).vec.clone();
    let cfg = PatchConfig { n_patch: 3, crop_size: 8, jitter: 0.15 };
    let eval = |seed: u64, a: u64, b: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crops = sample_crops(16, 16, &cfg, &mut rng).unwrap();
        let tape = Tape::no_grad();
        scalar(clip_patch_loss(&tape, &p, tape.constant(noise(a, 16, 16)), tape.constant(noise(b, 16, 16)), &z.vec, &photo, &crops))
    };
    assert_eq!(eval(1, 2, 3), eval(1, 2, 3));
    for i in 0..100 {
        let v = eval(i, 100 + i, 200 + i);
        assert!((0.0..=2.0).contains(&v), "{v}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(sample_crops(16, 16, &PatchConfig { crop_size: 17, ..cfg.clone() }, &mut rng).is_err());
}

#[test]
fn crop_jitter_stays_within_bound() {
    let cfg = PatchConfig { n_patch: 50, crop_size: 20, jitter: 0.15 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in sample_crops(64, 64, &cfg, &mut rng).unwrap() {
        let base = Crop::axis_aligned(c.corners[0].0.round(), c.corners[0].1.round(), 20);
        for (a, b) in c.corners.iter().zip(&base.corners) {
            assert!((a.0 - b.0).abs() <= 2.0 * 0.15 * 20.0 && (a.1 - b.1).abs() <= 2.0 * 0.15 * 20.0);
        }
    }
}

#[test]
fn depth_consistency_cases() {
    let tape = Tape::no_grad();
    let d = Tensor::from_fn(&[16, 1], |i| 1.0 + i as f64 * 0.1);
    let full = Tensor::full(&[16, 1], 1.0);
    assert_eq!(scalar(depth_consistency_loss(&tape, tape.constant(d.clone()), &d, &full)), 0.0);
    let shifted = d.map(|v| v + 0.5);
    assert!((scalar(depth_consistency_loss(&tape, tape.constant(shifted.clone()), &d, &full)) - 0.5).abs() < 1e-12);
    let empty = Tensor::zeros(&[16, 1]);
    assert_eq!(scalar(depth_consistency_loss(&tape, tape.constant(shifted), &d, &empty)), 0.0);
}

#[test]
fn depth_consistency_gradient() {
    let frozen = noise(15, 4, 4).reshape(&[48, 1]);
    let alpha = Tensor::from_fn(&[48, 1], |i| if i % 3 == 0 { 0.2 } else { 0.9 });
    let r = gradcheck(&[noise(16, 4, 4).reshape(&[48, 1])], 1e-6, |tape, x| {
        depth_consistency_loss(tape, x[0], &frozen, &alpha).unwrap().output()
    });
    assert!(r.max_rel_error < 1e-3, "{r:?}");
}

#[test]
fn weighted_totals() {
    let w = LossWeights::default();
    assert_eq!(total_loss(LossTerms::default(), w).unwrap().total, 0.0);
    let zeros = LossTerms {
        content: Some(0.0),
        style: Some(0.0),
        clip_global: Some(0.0),
        clip_patch: Some(0.0),
        depth_consistency: Some(0.0),
    };
    assert_eq!(total_loss(zeros, w).unwrap().total, 0.0);
    let ones = LossTerms {
        content: Some(1.0),
        style: Some(1.0),
        clip_global: Some(1.0),
        clip_patch: Some(1.0),
        depth_consistency: Some(1.0),
    };
    assert!((total_loss(ones, w).unwrap().total - 7.15).abs() < 1e-9);
    let none = LossWeights { content: 0.0, style: 0.0, clip: 0.0, clip_patch: 0.0, depth: 0.0 };
    assert_eq!(total_loss(ones, none).unwrap().total, 0.0);
    assert!(total_loss(ones, LossWeights { style: -1.0, ..w }).is_err());

    let tape = Tape::no_grad();
    let c = |v: f64| Some(tape.constant(Tensor::scalar(v)));
    let vars = LossVars { content: c(0.3), style: c(1.2), clip_global: c(0.9), clip_patch: c(1.1), depth_consistency: c(0.05) };
    let bundle = total_loss(vars.values(), w).unwrap();
    assert!((vars.total(&w).unwrap().item() - bundle.total).abs() < 1e-9);
}
