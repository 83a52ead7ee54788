use std::path::Path;

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use zerostyle::backbone::{Backbone, BackboneConfig};
use zerostyle::imageio::encode_png;
use zerostyle::model::{backbone_checkpoint, DualBranchModel, ModelConfig};
use zerostyle::nn::Module;
use zerostyle::tensor::Tensor;
use zerostyle::train::{make_style_library, synthetic_views, SyntheticSpec};
use zerostyle_cli::server::{router, AppState, ServerConfig};

const BOUNDARY: &str = "zerostyle-test-boundary";

fn save_model(dir: &Path) {
    let mut b = Backbone::new(BackboneConfig { image_width: 32, image_height: 32, ..BackboneConfig::tiny() }).unwrap();
    b.round_to_f32();
    backbone_checkpoint(&b).unwrap().save(&dir.join("backbone")).unwrap();
    let mut m = DualBranchModel::new(b, ModelConfig::default()).unwrap();
    // leave the zero initialization so that styles actually differ
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    m.styled_branch_mut().visit_mut(&mut |_, p| {
        let noise = Tensor::uniform(p.shape(), 0.05, &mut rng);
        p.value_mut().add_assign(&noise);
    });
    m.save(dir.join("model"), "../backbone").unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
}

fn fixture(with_model: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    save_model(dir.path());
    make_style_library(dir.path().join("styles"), 3, 32).unwrap();
    let cfg = ServerConfig {
        checkpoint: with_model.then(|| dir.path().join("model")),
        styles_dir: Some(dir.path().join("styles")),
        cache_dir: Some(dir.path().join("cache")),
        ..Default::default()
    };
    let state = AppState::new(cfg).unwrap();
    Fixture { _dir: dir, app: router(state) }
}

fn upload_body(seed: u64, with_cameras: bool) -> Vec<u8> {
    let (_, cams, renders) = synthetic_views(&SyntheticSpec { seed, width: 32, height: 32, ..Default::default() }).unwrap();
    let mut body = Vec::new();
    for (i, r) in renders.iter().enumerate() {
        body.extend(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"images\"; filename=\"view_{i}.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend(encode_png(&r.color).unwrap());
        body.extend(b"\r\n");
    }
    if with_cameras {
        body.extend(
            format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"cameras\"; filename=\"cameras.json\"\r\n\r\n")
                .as_bytes(),
        );
        body.extend(serde_json::to_vec(&cams).unwrap());
        body.extend(b"\r\n");
    }
    body.extend(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn upload(app: &Router, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/scenes")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn stylize(app: &Router, id: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::post(format!("/scenes/{id}/stylize"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let (s, b) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn fetch_all(app: &Router, v: &Value) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for u in v["render_urls"].as_array().unwrap() {
        let (s, b) = get(app, u.as_str().unwrap()).await;
        assert_eq!(s, StatusCode::OK);
        assert!(b.starts_with(b"\x89PNG"));
        out.push(b);
    }
    out
}

#[tokio::test]
async fn upload_and_stylize() {
    let f = fixture(true);
    let (s, up) = upload(&f.app, upload_body(1, true)).await;
    assert_eq!(s, StatusCode::OK, "{up}");
    let id = up["scene_id"].as_str().unwrap().to_string();
    assert_eq!(up["views"], 4);
    let (_, again) = upload(&f.app, upload_body(1, true)).await;
    assert_eq!(again["scene_id"], id.as_str());
    let (_, other) = upload(&f.app, upload_body(1, false)).await;
    assert_ne!(other["scene_id"], id.as_str());

    let (_, health) = get(&f.app, "/health").await;
    let health: Value = serde_json::from_slice(&health).unwrap();
    let extractions = health["counters"]["feature_extractions"].clone();

    let (s, r1) = stylize(&f.app, &id, r#"{"style_text": "oil painting"}"#).await;
    assert_eq!(s, StatusCode::OK, "{r1}");
    assert_eq!(r1["render_urls"].as_array().unwrap().len(), 4);
    let (_, r2) = stylize(&f.app, &id, r#"{"style_text": "oil painting"}"#).await;
    assert_eq!(fetch_all(&f.app, &r1).await, fetch_all(&f.app, &r2).await);

    let (_, health) = get(&f.app, "/health").await;
    let health: Value = serde_json::from_slice(&health).unwrap();
    assert_eq!(health["counters"]["feature_extractions"], extractions, "warm stylize re-extracted features");

    let (_, two) = stylize(&f.app, &id, r#"{"style_text": "oil painting", "view_indices": [3, 1]}"#).await;
    let two = fetch_all(&f.app, &two).await;
    let all = fetch_all(&f.app, &r1).await;
    assert_eq!(two, vec![all[3].clone(), all[1].clone()]);

    let (_, img) = stylize(&f.app, &id, r#"{"style_image_id": "orange_dots"}"#).await;
    let (_, a0) = stylize(
        &f.app,
        &id,
        r#"{"style_image_id": "orange_dots", "second": {"style_text": "oil painting"}, "alpha": 0.0}"#,
    )
    .await;
    let (_, a1) = stylize(
        &f.app,
        &id,
        r#"{"style_image_id": "orange_dots", "second": {"style_text": "oil painting"}, "alpha": 1.0}"#,
    )
    .await;
    assert_eq!(fetch_all(&f.app, &a0).await, fetch_all(&f.app, &img).await);
    assert_eq!(fetch_all(&f.app, &a1).await, all);
    assert_ne!(fetch_all(&f.app, &img).await, all);

    let cold = up["timings"]["reconstruct_ms"].as_f64().unwrap();
    let warm = r2["timings"]["stylize_ms"].as_f64().unwrap();
    assert!(warm < cold, "warm stylize {warm} ms vs cold reconstruct {cold} ms");
}

#[tokio::test]
async fn error_statuses() {
    let f = fixture(true);
    let (_, up) = upload(&f.app, upload_body(2, true)).await;
    let id = up["scene_id"].as_str().unwrap();
    let cases: [(&str, &str, StatusCode); 9] = [
        ("nope", r#"{"style_text": "x"}"#, StatusCode::NOT_FOUND),
        (id, r#"{"style_image_id": "missing"}"#, StatusCode::NOT_FOUND),
        (id, r#"{"style_text": "x""#, StatusCode::BAD_REQUEST),
        (id, r#"{"style_txt": "x"}"#, StatusCode::BAD_REQUEST),
        (id, r#"{}"#, StatusCode::BAD_REQUEST),
        (id, r#"{"style_text": "x", "style_image_id": "orange_dots"}"#, StatusCode::BAD_REQUEST),
        (id, r#"{"style_text": "x", "alpha": 0.5}"#, StatusCode::BAD_REQUEST),
        (id, r#"{"style_text": "x", "second": {"style_text": "y"}, "alpha": 2}"#, StatusCode::BAD_REQUEST),
        (id, r#"{"style_text": "x", "view_indices": [9]}"#, StatusCode::BAD_REQUEST),
    ];
    for (scene, body, want) in cases {
        let (s, v) = stylize(&f.app, scene, body).await;
        assert_eq!(s, want, "{body}: {v}");
        assert!(v["error"].is_string());
    }
    assert_eq!(get(&f.app, "/renders/ffff.png").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&f.app, "/styles/missing.png").await.0, StatusCode::NOT_FOUND);

    let (s, _) = upload(&f.app, format!("--{BOUNDARY}--\r\n").into_bytes()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn styles_listing() {
    let f = fixture(true);
    let (s, b) = get(&f.app, "/styles").await;
    assert_eq!(s, StatusCode::OK);
    let v: Value = serde_json::from_slice(&b).unwrap();
    let styles = v["styles"].as_array().unwrap();
    assert_eq!(styles.len(), 3);
    assert_eq!(styles[0]["id"], "blue_stripes");
    let (s, png) = get(&f.app, styles[0]["image_url"].as_str().unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(b"\x89PNG"));
}

#[tokio::test]
async fn missing_model_is_a_conflict() {
    let f = fixture(false);
    let (s, v) = upload(&f.app, upload_body(3, true)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let (s, _) = stylize(&f.app, "anything", &json!({"style_text": "x"}).to_string()).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(get(&f.app, "/styles").await.0, StatusCode::OK);
}

#[tokio::test]
async fn cache_dir_survives_restart() {
    let f = fixture(true);
    let (_, up) = upload(&f.app, upload_body(4, true)).await;
    assert_eq!(up["cached"], false);
    let id = up["scene_id"].as_str().unwrap().to_string();
    let (_, r) = stylize(&f.app, &id, r#"{"style_text": "ink"}"#).await;
    let first = fetch_all(&f.app, &r).await;

    // a fresh server over the same directories
    let state = AppState::new(ServerConfig {
        checkpoint: Some(f._dir.path().join("model")),
        styles_dir: None,
        cache_dir: Some(f._dir.path().join("cache")),
        ..Default::default()
    })
    .unwrap();
    let app = router(state);
    assert_eq!(fetch_all(&app, &r).await, first);
    let (_, up2) = upload(&app, upload_body(4, true)).await;
    assert_eq!(up2["cached"], true);
    assert_eq!(up2["scene_id"], id.as_str());
    let (_, r2) = stylize(&app, &id, r#"{"style_text": "ink"}"#).await;
    assert_eq!(fetch_all(&app, &r2).await, first);
}
