use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use sha2::{Digest, Sha256};
use stylenerf_core::adain::{LayerStatistics, StyleStatistics};
use stylenerf_core::data::checkpoint::{save_checkpoint, Stage};
use stylenerf_core::data::images::load_image;
use stylenerf_core::data::scene::{load_scene, SceneDefaults};
use stylenerf_core::data::synthetic::{write_cube_scene, CubeSceneConfig};
use stylenerf_core::multistyle::{
    stylized_path, train_multistyle, MultiStyleConfig, StyleEntry, StyleRegistry, StylizedDataset, CONTENT_STYLE_ID,
};
use stylenerf_core::nerf::{NerfConfig, NerfModel, NerfNetworkConfig, SamplingConfig, SceneBounds};
use stylenerf_service::{router, AppState, ServiceConfig, ServiceError};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    checkpoint: PathBuf,
}

fn stats(level: f32) -> StyleStatistics {
    StyleStatistics::new(vec![LayerStatistics {
        mean: vec![level, 1.0 - level],
        std: vec![0.2 + level, 0.4],
    }])
    .unwrap()
}

/// A one-step multi-style model over a tiny cube scene, laid out like a run directory.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene_dir = dir.path().join("scene");
    let scene_cfg = CubeSceneConfig {
        train_views: 3,
        val_views: 1,
        resolution: 8,
        supersample: 1,
        ..CubeSceneConfig::default()
    };
    write_cube_scene(&scene_dir, &scene_cfg).unwrap();
    let scene = load_scene(&scene_dir, SceneDefaults::default()).unwrap();
    let root = dir.path().join("run");

    let mut registry = StyleRegistry::default();
    let mut images = BTreeMap::new();
    for (id, level) in [("style_00", 0.0), ("style_01", 1.0), (CONTENT_STYLE_ID, 0.5)] {
        let s = stats(level);
        registry.styles.insert(
            id.to_string(),
            StyleEntry {
                name: id.replace('_', " "),
                image_path: None,
                layer_channels: s.layer_channels(),
                statistics: s.flatten(),
            },
        );
        for (img, frame) in scene.images.iter().zip(&scene.frame_ids) {
            img.save_png(&stylized_path(&root, id, frame)).unwrap();
        }
        images.insert(id.to_string(), scene.images.clone());
    }
    let data = StylizedDataset {
        registry,
        frame_ids: scene.frame_ids.clone(),
        poses: scene.poses.clone(),
        splits: scene.splits.clone(),
        near: scene.near,
        far: scene.far,
        background: scene.background(),
        images,
    };
    let nerf_cfg = NerfConfig {
        network: NerfNetworkConfig {
            depth: 2,
            width: 16,
            skips: vec![1],
            color_width: 8,
            ..NerfNetworkConfig::default()
        },
        ..NerfConfig::default()
    };
    let nerf = NerfModel::init(&nerf_cfg, SceneBounds::of(&scene), &candle_core::Device::Cpu).unwrap();
    let ms_cfg = MultiStyleConfig {
        style_hidden: 8,
        style_dim: 8,
        view_dim: 8,
        rgb_hidden: 8,
        sampling: SamplingConfig {
            n_coarse: 4,
            n_fine: 4,
            perturb: true,
        },
        batch_rays: 16,
        steps: 1,
        ..MultiStyleConfig::default()
    };
    let model = train_multistyle(&data, &nerf, &ms_cfg, &mut |_| {}, None).unwrap();
    let checkpoint = root.join("checkpoints").join("multistyle.ckpt");
    save_checkpoint(&model.to_checkpoint().unwrap(), &checkpoint).unwrap();
    Fixture {
        _dir: dir,
        root,
        checkpoint,
    }
}

fn app(f: &Fixture, max_in_flight: usize) -> (AppState, Router) {
    let state = AppState::load(&ServiceConfig {
        checkpoint: Some(f.checkpoint.clone()),
        max_in_flight,
        ..ServiceConfig::default()
    })
    .unwrap();
    (state.clone(), router(state))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<serde_json::Value>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let headers = response.headers().clone();
    let bytes = to_bytes(response.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, bytes)
}

async fn render(app: &Router, body: serde_json::Value) -> Vec<u8> {
    let (status, _, bytes) = call(app, "POST", "/render", Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    bytes
}

fn error_field(bytes: &[u8]) -> Option<String> {
    let v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    v.get("field").and_then(|f| f.as_str()).map(str::to_string)
}

fn tree_digest(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.clone(), hex::encode(Sha256::digest(std::fs::read(&path).unwrap())));
            }
        }
    }
    out
}

#[test]
fn refuses_to_start_without_a_checkpoint() {
    let err = AppState::load(&ServiceConfig::default()).err().unwrap();
    assert!(matches!(err, ServiceError::NoCheckpoint));
    assert!(err.to_string().contains("--checkpoint"));

    let missing = ServiceConfig {
        checkpoint: Some("/nonexistent/multistyle.ckpt".into()),
        ..ServiceConfig::default()
    };
    assert!(matches!(AppState::load(&missing).err().unwrap(), ServiceError::Checkpoint { .. }));
}

#[tokio::test]
async fn lists_styles_with_thumbnails() {
    let f = fixture();
    let (_, app) = app(&f, 2);
    let (status, _, first) = call(&app, "GET", "/styles", None).await;
    assert_eq!(status, StatusCode::OK);
    let listing: Vec<serde_json::Value> = serde_json::from_slice(&first).unwrap();
    let ids: Vec<&str> = listing.iter().map(|s| s["style_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["content", "style_00", "style_01"]);
    assert_eq!(call(&app, "GET", "/styles", None).await.2, first);

    let url = listing[0]["thumbnail_url"].as_str().unwrap();
    let (status, headers, png) = call(&app, "GET", url, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    let tmp = tempfile::NamedTempFile::with_suffix(".png").unwrap();
    std::fs::write(tmp.path(), &png).unwrap();
    let thumb = load_image(tmp.path()).unwrap().rgb;
    assert_eq!((thumb.width, thumb.height), (64, 64));
    assert_eq!(call(&app, "GET", "/styles/nope/thumbnail", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn renders_png_at_the_requested_resolution() {
    let f = fixture();
    let (_, app) = app(&f, 2);
    let (status, headers, png) =
        call(&app, "POST", "/render", Some(serde_json::json!({"pose_index": 0, "style_id": "style_00", "resolution": 64}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    assert!(headers["x-render-time-ms"].to_str().unwrap().parse::<u64>().is_ok());
    let tmp = tempfile::NamedTempFile::with_suffix(".png").unwrap();
    std::fs::write(tmp.path(), &png).unwrap();
    let image = load_image(tmp.path()).unwrap().rgb;
    assert_eq!((image.width, image.height), (64, 64));

    let orbit = render(&app, serde_json::json!({"orbit": {"azimuth": 30.0, "elevation": 20.0}, "style_id": "style_01", "resolution": 64})).await;
    assert_ne!(orbit, png);
}

#[tokio::test]
async fn style_forms_resolve_through_interpolation() {
    let f = fixture();
    let (_, app) = app(&f, 2);
    let single = |id: &str| serde_json::json!({"pose_index": 1, "style_id": id, "resolution": 64, "seed": 9});
    let a = render(&app, single("style_00")).await;
    let pair_same = render(
        &app,
        serde_json::json!({"pose_index": 1, "style_a": "style_00", "style_b": "style_00", "lambda": 0.5, "resolution": 64, "seed": 9}),
    )
    .await;
    assert_eq!(pair_same, a);
    let pair_start = render(
        &app,
        serde_json::json!({"pose_index": 1, "style_a": "style_00", "style_b": "style_01", "lambda": 0.0, "resolution": 64, "seed": 9}),
    )
    .await;
    assert_eq!(pair_start, a);
    let no_intensity = render(&app, serde_json::json!({"pose_index": 1, "style_id": "style_01", "intensity": 0.0, "resolution": 64, "seed": 9})).await;
    assert_eq!(no_intensity, render(&app, single("content")).await);
    let full = render(&app, serde_json::json!({"pose_index": 1, "style_id": "style_01", "intensity": 1.0, "resolution": 64, "seed": 9})).await;
    assert_eq!(full, render(&app, single("style_01")).await);
    assert_ne!(full, a);
}

#[tokio::test]
async fn invalid_requests_are_rejected_with_the_field() {
    let f = fixture();
    let (_, app) = app(&f, 2);
    let cases = [
        (serde_json::json!({"pose_index": 0, "style_id": "style_00", "resolution": 100}), "resolution"),
        (serde_json::json!({"pose_index": 0, "orbit": {"azimuth": 0.0, "elevation": 0.0}, "style_id": "style_00", "resolution": 64}), "pose"),
        (serde_json::json!({"style_id": "style_00", "resolution": 64}), "pose"),
        (serde_json::json!({"pose_index": 0, "resolution": 64}), "style"),
        (serde_json::json!({"pose_index": 0, "style_a": "style_00", "style_b": "style_01", "lambda": 2.0, "resolution": 64}), "lambda"),
        (serde_json::json!({"pose_index": 0, "style_id": "style_00", "intensity": -1.0, "resolution": 64}), "intensity"),
        (serde_json::json!({"pose_index": 99, "style_id": "style_00", "resolution": 64}), "pose_index"),
        (serde_json::json!({"pose_matrix": [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 4.0], [0.0, 0.0, 0.0, 1.0]], "style_id": "style_00", "resolution": 64}), "pose_matrix"),
        (serde_json::json!({"pose_index": 0, "style_id": "style_00", "resolution": 64, "colour": 1}), "body"),
    ];
    for (body, field) in cases {
        let (status, _, bytes) = call(&app, "POST", "/render", Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(error_field(&bytes).as_deref(), Some(field), "{body}");
    }
    let (status, _, _) = call(&app, "POST", "/render", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _, _) = call(&app, "POST", "/render", Some(serde_json::json!({"pose_index": 0, "style_id": "style_99", "resolution": 64}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let pair = serde_json::json!({"pose_index": 0, "style_a": "style_00", "style_b": "ghost", "lambda": 0.5, "resolution": 64});
    assert_eq!(call(&app, "POST", "/render", Some(pair)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn saturated_budget_answers_503() {
    let f = fixture();
    let (state, app) = app(&f, 1);
    let body = serde_json::json!({"pose_index": 0, "style_id": "style_00", "resolution": 64});
    let held = state.try_reserve().unwrap();
    let (status, headers, _) = call(&app, "POST", "/render", Some(body.clone())).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(headers["retry-after"], "1");
    drop(held);
    assert_eq!(call(&app, "POST", "/render", Some(body)).await.0, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_identical_requests_agree_and_files_stay_untouched() {
    let f = fixture();
    let before = tree_digest(&f.root);
    let (_, app) = app(&f, 2);
    let body = serde_json::json!({"pose_index": 2, "style_id": "style_01", "resolution": 64, "seed": 3});
    let (x, y) = tokio::join!(render(&app, body.clone()), render(&app, body.clone()));
    assert_eq!(x, y);
    let _ = call(&app, "GET", "/styles", None).await;
    let _ = call(&app, "GET", "/healthz", None).await;
    assert_eq!(tree_digest(&f.root), before);
}

#[tokio::test]
async fn health_reports_checkpoint_digests() {
    let f = fixture();
    let (state, app) = app(&f, 2);
    let (status, _, bytes) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["stage"], Stage::Multistyle.to_string());
    assert_eq!(v["styles"], 3);
    assert_eq!(v["digests"]["trunk"], state.model().trunk_digest().unwrap());
    assert!(v["digests"]["registry"].is_string());
}
