use std::collections::BTreeMap;
use std::path::Path;

use super::*;
use crate::autograd::{Param, Tape};
use crate::checkpoint::load_scene;
use crate::imageio::encode_png;
use crate::losses::PatchConfig;
use crate::nn::Module;
use crate::render::render;
use crate::style::Modality;

fn small_backbone() -> BackboneConfig {
    BackboneConfig { image_width: 32, image_height: 32, ..BackboneConfig::tiny() }
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { seed, width: 32, height: 32, ..Default::default() }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    scene: SceneData,
    library: StyleLibrary,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = make_synthetic_scene(dir.path().join("scene"), &small_spec(3)).unwrap();
    let library = make_style_library(dir.path().join("styles"), 2, 32).unwrap();
    Fixture { _dir: dir, scene, library }
}

fn small_style_cfg(steps: usize) -> StyleTrainConfig {
    StyleTrainConfig {
        steps,
        patch: PatchConfig { n_patch: 2, crop_size: 16, jitter: 0.15 },
        optim: OptimConfig { lr: 1e-3, ..Default::default() },
        check_frozen_every: 1,
        ..Default::default()
    }
}

fn small_model(all_geom: bool) -> DualBranchModel {
    let mut b = Backbone::new(small_backbone()).unwrap();
    b.round_to_f32();
    DualBranchModel::new(b, ModelConfig { all_geom_features: all_geom, ..Default::default() }).unwrap()
}

#[test]
fn synthetic_scene_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    make_synthetic_scene(a.path(), &small_spec(11)).unwrap();
    make_synthetic_scene(b.path(), &small_spec(11)).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.contains_key("cameras.json") && fa.contains_key("images/view_000.png"));
    assert_eq!(fa, fb);
    let c = tempfile::tempdir().unwrap();
    make_synthetic_scene(c.path(), &small_spec(12)).unwrap();
    assert_ne!(fa["images/view_000.png"], files(c.path())["images/view_000.png"]);
}

#[test]
fn views_rerender_from_saved_ground_truth() {
    let d = tempfile::tempdir().unwrap();
    let s = make_synthetic_scene(d.path(), &small_spec(5)).unwrap();
    let gt = load_scene(&d.path().join("gt_scene")).unwrap();
    for (i, cam) in s.cameras.as_ref().unwrap().iter().enumerate() {
        let r = render(&gt, cam, BACKGROUND).unwrap();
        let on_disk = fs::read(d.path().join(format!("images/view_{i:03}.png"))).unwrap();
        assert_eq!(encode_png(&r.color).unwrap(), on_disk, "view {i}");
    }
}

#[test]
fn ring_cameras_are_equidistant() {
    let spec = SyntheticSpec { n_views: 8, arc_deg: 360.0, ..Default::default() };
    let cams = ring_cameras(&spec);
    assert_eq!(cams.len(), 8);
    let r0 = cams[0].center().norm();
    for c in &cams {
        assert!((c.center().norm() - r0).abs() < 1e-6);
    }
    // a full ring does not repeat its first view
    assert!((cams[0].center() - cams[7].center()).norm() > 1.0);
}

#[test]
fn scene_loading_validates() {
    let f = fixture();
    assert_eq!(f.scene.views(), 4);
    assert_eq!(f.scene.split, "train");
    assert!(f.scene.depth.as_ref().unwrap()[0].iter().any(|&d| d > 0.0));
    let one = f.scene.select(&[1]).unwrap();
    assert!(one.validate().is_err());
    let two = f.scene.select(&[3, 1]).unwrap();
    assert_eq!(two.images[0], f.scene.images[3]);
    assert!(f.scene.select(&[9]).is_err());
    assert!(SceneData::load(f.scene.dir.join("missing")).is_err());
    let ds = SceneDataset::discover(f.scene.dir.parent().unwrap()).unwrap();
    assert_eq!(ds.scenes.len(), 1);
    assert_eq!(ds.split("train").len(), 1);
    assert!(ds.split("test").is_empty());
}

#[test]
fn cosine_schedule() {
    let o = OptimConfig { lr: 2e-3, min_lr_ratio: 0.1, ..Default::default() };
    assert_eq!(o.lr_at(0, 100), 2e-3);
    assert!((o.lr_at(50, 100) - 2e-3 * (0.1 + 0.9 * 0.5)).abs() < 1e-15);
    assert!((o.lr_at(100, 100) - 2e-4).abs() < 1e-15);
    assert!(OptimConfig { lr: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    // After one step m/c1 = g and v/c2 = g^2, so the update is lr * g / (|g| + eps).
    let cfg = OptimConfig::default();
    let mut p = Param::new(Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
    let g = Tensor::new(&[3], vec![0.3, -4.0, 0.0]);
    let mut adam = Adam::default();
    adam.tick();
    adam.update(&cfg, &mut p, &g, 0.01, 1.0);
    let want = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
    for (a, b) in p.value().data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let cfg = OptimConfig::default();
    let mut p = Param::new(Tensor::new(&[2], vec![3.0, -1.5]));
    let mut adam = Adam::default();
    for _ in 0..2000 {
        let tape = Tape::new();
        let x = tape.param(&p);
        let loss = x.add_scalar(-1.0).square().sum();
        let grads = tape.backward(loss);
        let g = grads.param(&p).unwrap().clone();
        adam.tick();
        adam.update(&cfg, &mut p, &g, 0.01, 1.0);
    }
    for v in p.value().data() {
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }
}

#[test]
fn clip_factor_scales_to_limit() {
    let p = Param::new(Tensor::new(&[2], vec![0.0, 0.0]));
    let tape = Tape::new();
    // d/dx of 3x0 + 4x1 is (3, 4), norm 5
    let loss = tape.param(&p).mul(tape.constant(Tensor::new(&[2], vec![3.0, 4.0]))).sum();
    let grads = tape.backward(loss);
    let (n, f) = clip_factor(&grads, &[p.id()], 1.0).unwrap();
    assert!((n - 5.0).abs() < 1e-12 && (f - 0.2).abs() < 1e-12);
    assert_eq!(clip_factor(&grads, &[p.id()], 10.0).unwrap().1, 1.0);
    assert_eq!(clip_factor(&grads, &[p.id()], 0.0).unwrap().1, 1.0);
}

#[test]
fn config_file_round_trip() {
    let text = r#"
        out_dir = "runs/x"
        [data]
        scenes = ["scenes/a", "/abs/b"]
        styles = "styles"
        [geometry]
        steps = 0
        [style]
        steps = 7
        modality_period = 2
        [style.optim]
        lr = 0.001
        [style.ablation]
        no_text = true
    "#;
    let mut cfg = TrainConfig::from_toml(text).unwrap();
    assert_eq!(cfg.style.steps, 7);
    assert_eq!(cfg.style.optim.aggregator_lr_mult, 0.3);
    assert_eq!(cfg.geometry.as_ref().unwrap().steps, 0);
    assert!(cfg.style.ablation.no_text);
    cfg.resolve(Path::new("/base"));
    assert_eq!(cfg.out_dir, Path::new("/base/runs/x"));
    assert_eq!(cfg.data.scenes[0], Path::new("/base/scenes/a"));
    assert_eq!(cfg.data.scenes[1], Path::new("/abs/b"));
    assert!(matches!(TrainConfig::from_toml("[style]\nstepz = 3"), Err(Error::Config(_))));
    let back = TrainConfig::from_toml(&toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn modality_alternation() {
    let mut c = StyleTrainConfig::default();
    let seq = |c: &StyleTrainConfig| (0..6).map(|s| c.modality(s)).collect::<Vec<_>>();
    use Modality::{Image as I, Text as T};
    assert_eq!(seq(&c), [I, T, I, T, I, T]);
    c.modality_period = 2;
    assert_eq!(seq(&c), [I, I, T, T, I, I]);
    c.ablation.no_text = true;
    assert_eq!(seq(&c), [I; 6]);
    c.modality_period = 0;
    assert!(c.validate().is_err());
}

#[test]
fn zero_geometry_steps_keep_initialization() {
    let f = fixture();
    let mut b = Backbone::new(small_backbone()).unwrap();
    let before = b.to_checkpoint("b").digest();
    let log = pretrain_geometry(&mut b, &[f.scene.clone()], &GeometryConfig { steps: 0, ..Default::default() }, |_| {}).unwrap();
    assert!(log.is_empty());
    assert_eq!(b.to_checkpoint("b").digest(), before);
}

#[test]
fn geometry_training_is_deterministic_and_moves_only_trained_parts() {
    let f = fixture();
    let cfg = GeometryConfig { steps: 3, ..Default::default() };
    let run = || {
        let mut b = Backbone::new(small_backbone()).unwrap();
        let log = pretrain_geometry(&mut b, &[f.scene.clone()], &cfg, |_| {}).unwrap();
        (b, log)
    };
    let (b1, l1) = run();
    let (b2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(b1.to_checkpoint("b").digest(), b2.to_checkpoint("b").digest());
    let init = Backbone::new(small_backbone()).unwrap();
    assert_eq!(b1.embedder.to_checkpoint("e").digest(), init.embedder.to_checkpoint("e").digest());
    assert_eq!(b1.camera_head.to_checkpoint("c").digest(), init.camera_head.to_checkpoint("c").digest());
    assert_ne!(b1.gaussian_head.to_checkpoint("g").digest(), init.gaussian_head.to_checkpoint("g").digest());
    assert!(l1.iter().all(|s| s.depth.is_some() && s.total.is_finite()));
}

#[test]
fn geometry_needs_cameras() {
    let f = fixture();
    let mut s = f.scene.clone();
    s.cameras = None;
    let mut b = Backbone::new(small_backbone()).unwrap();
    assert!(pretrain_geometry(&mut b, &[s], &GeometryConfig { steps: 1, ..Default::default() }, |_| {}).is_err());
}

#[test]
fn first_style_step_sees_identity() {
    let f = fixture();
    let p = ToyProvider::default();
    let mut t = StyleTrainer::new(small_model(false), &[f.scene.clone()], &f.library, &p, small_style_cfg(4)).unwrap();
    let l = t.step().unwrap();
    assert_eq!(l.step, 0);
    assert_eq!(l.content, Some(0.0));
    assert_eq!(l.clip_global, Some(1.0));
    assert_eq!(l.depth_consistency, Some(0.0));
    assert_eq!(l.modality, Modality::Image);
    assert!(l.style.unwrap() > 0.0);
    let second = t.step().unwrap();
    assert_eq!(second.modality, Modality::Text);
    assert!(second.content.unwrap() > 0.0);
    assert_eq!(t.model().current_frozen_digest().unwrap(), t.model().frozen_digest());
}

#[test]
fn style_training_is_reproducible() {
    let f = fixture();
    let p = ToyProvider::default();
    let run = || {
        let mut t = StyleTrainer::new(small_model(false), &[f.scene.clone()], &f.library, &p, small_style_cfg(3)).unwrap();
        (0..3).map(|_| t.step().unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().zip(&b) {
        assert!((x.total - y.total).abs() < 1e-6);
        assert_eq!(x.styles, y.styles);
    }
}

#[test]
fn ablations_change_the_logged_terms() {
    let f = fixture();
    let p = ToyProvider::default();
    let first = |all_geom: bool, edit: &dyn Fn(&mut Ablation)| {
        let mut cfg = small_style_cfg(2);
        edit(&mut cfg.ablation);
        let mut t = StyleTrainer::new(small_model(all_geom), &[f.scene.clone()], &f.library, &p, cfg).unwrap();
        t.step().unwrap();
        t.step().unwrap()
    };
    let base = first(false, &|_| {});
    let no_style = first(false, &|a| a.no_style_loss = true);
    let no_clip = first(false, &|a| a.no_clip_losses = true);
    let drop = first(false, &|a| a.text_drops_style_loss = true);
    assert!(base.style.is_some() && base.clip_global.is_some());
    assert!(no_style.style.is_none() && no_style.clip_global.is_some());
    assert!(no_clip.clip_global.is_none() && no_clip.clip_patch.is_none() && no_clip.style.is_some());
    assert_eq!(drop.modality, Modality::Text);
    assert!(drop.style.is_none());
    let no_text = first(false, &|a| a.no_text = true);
    assert_eq!(no_text.modality, Modality::Image);
    let geom = first(true, &|a| a.all_geom_features = true);
    assert!(geom.depth_consistency.unwrap() > 0.0);
    // the flag must agree with the model
    let mut cfg = small_style_cfg(1);
    cfg.ablation.all_geom_features = true;
    assert!(StyleTrainer::new(small_model(false), &[f.scene.clone()], &f.library, &p, cfg).is_err());
}

#[test]
fn non_finite_loss_restores_last_good_parameters() {
    let f = fixture();
    let p = ToyProvider::default();
    let mut cfg = small_style_cfg(5);
    cfg.optim.lr = 1e200;
    cfg.optim.grad_clip = 0.0;
    let model = small_model(false);
    let before = model.styled_branch().to_checkpoint("m").digest();
    let mut t = StyleTrainer::new(model, &[f.scene.clone()], &f.library, &p, cfg).unwrap();
    t.step().unwrap();
    let err = (0..4).find_map(|_| t.step().err()).expect("training must halt");
    assert!(matches!(err, Error::Numerical(_)), "{err}");
    assert!(err.to_string().contains("restored"));
    // the only finite step was the first, taken from the initial weights
    assert_eq!(t.model().styled_branch().to_checkpoint("m").digest(), before);
}

#[test]
fn full_run_writes_outputs() {
    let f = fixture();
    let out = f.scene.dir.parent().unwrap().join("run");
    let cfg = TrainConfig {
        out_dir: out.clone(),
        data: DataConfig { scenes: vec![f.scene.dir.clone()], styles: f.library.root.clone() },
        backbone: small_backbone(),
        geometry: Some(GeometryConfig { steps: 2, ..Default::default() }),
        style: small_style_cfg(3),
        ..Default::default()
    };
    let summary = run(&cfg).unwrap();
    assert_eq!((summary.geometry_steps, summary.style_steps), (2, 3));
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for k in ["step", "content", "style", "clip_global", "clip_patch", "total", "lr"] {
        assert!(lines[0].get(k).is_some(), "missing {k}");
    }
    assert_eq!(fs::read_to_string(out.join("geometry.jsonl")).unwrap().lines().count(), 2);
    let m = DualBranchModel::load(out.join("model")).unwrap();
    assert_eq!(m.frozen_digest(), summary.frozen_digest);
}
