use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use tower::ServiceExt;

use geovid_cli::layout::VideoDir;
use geovid_cli::server::{router, AppState, LabelsPutResponse, RegionMap, VideoInfo};
use geovid_cli::stages;
use geovid_core::annotation::{GeoLabel, GroundTruth};
use geovid_core::pipeline::ModelConfig;

fn segmented_root() -> (tempfile::TempDir, VideoDir) {
    let tmp = tempfile::tempdir().unwrap();
    let videos = stages::synth_corpus(tmp.path(), 1, 3, 32, 32, 6).unwrap();
    let v = videos[0].clone();
    stages::segment(&v, None, &ModelConfig::default(), false).unwrap();
    (tmp, v)
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b)).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

#[tokio::test(flavor = "current_thread")]
async fn labelling_a_coarse_region_labels_its_supervoxels() {
    let (tmp, v) = segmented_root();
    let h = v.load_hierarchy().unwrap();
    assert!(h.num_levels() >= 3, "hierarchy too shallow: {}", h.num_levels());
    let app = router(Arc::new(AppState::load(tmp.path()).unwrap()));
    let id = v.id();

    let (s, body) = call(&app, "GET", "/api/v1/videos", None).await;
    assert_eq!(s, StatusCode::OK);
    let list: Vec<VideoInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.len(), 1);
    assert_eq!(list[0].id, id);
    assert_eq!(list[0].regions[0], h.base.num_supervoxels);

    // region with the most supervoxels at level 2
    let map = h.supervoxel_map(2);
    let mut counts = std::collections::BTreeMap::new();
    for &r in map.iter() {
        *counts.entry(r).or_insert(0usize) += 1;
    }
    let (&region, &members) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
    let put = format!(r#"{{"region_id": {region}, "level": 2, "label": "porous"}}"#);
    let (s, body) = call(&app, "PUT", &format!("/api/v1/videos/{id}/labels"), Some(put)).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: LabelsPutResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp.affected_supervoxels, members);
    for (sv, &r) in map.iter().enumerate() {
        let got = resp.labels.labels.get(&(sv as u32)).copied();
        if r == region {
            assert_eq!(got, Some(GeoLabel::Porous));
        } else {
            assert_eq!(got, None);
        }
    }

    // persisted and served back
    let on_disk = GroundTruth::load(&v.gt_labels()).unwrap();
    assert_eq!(on_disk.labels.len(), members);
    let (s, body) = call(&app, "GET", &format!("/api/v1/videos/{id}/labels"), None).await;
    assert_eq!(s, StatusCode::OK);
    let served: GroundTruth = serde_json::from_slice(&body).unwrap();
    assert_eq!(served, on_disk);
}

#[tokio::test(flavor = "current_thread")]
async fn region_maps_and_frames() {
    let (tmp, v) = segmented_root();
    let h = v.load_hierarchy().unwrap();
    let app = router(Arc::new(AppState::load(tmp.path()).unwrap()));
    let id = v.id();

    let (s, body) = call(&app, "GET", &format!("/api/v1/videos/{id}/seg/1/2"), None).await;
    assert_eq!(s, StatusCode::OK);
    let m: RegionMap = serde_json::from_slice(&body).unwrap();
    assert_eq!(m.ids.len(), 32 * 32);
    let map = h.supervoxel_map(1);
    let base = h.base.frame_labels(2);
    assert!(m.ids.iter().zip(base).all(|(&r, &sv)| r == map[sv as usize]));

    let (s, body) = call(&app, "GET", &format!("/api/v1/videos/{id}/frames/3.png"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&body[1..4], b"PNG");

    let (s, _) = call(&app, "GET", &format!("/api/v1/videos/{id}/frames/99.png"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/v1/videos/nope/labels", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "current_thread")]
async fn bad_label_writes_are_rejected() {
    let (tmp, v) = segmented_root();
    let app = router(Arc::new(AppState::load(tmp.path()).unwrap()));
    let uri = format!("/api/v1/videos/{}/labels", v.id());

    let cases = [
        r#"{"region_id": 0, "level": 0, "label": "vertical"}"#,
        r#"{"region_id": 4000000, "level": 0, "label": "sky"}"#,
        r#"{"region_id": 0, "level": 0, "label": "lava"}"#,
        r#"{"video_id": "other", "labels": {}}"#,
    ];
    for body in cases {
        let (s, resp) = call(&app, "PUT", &uri, Some(body.to_string())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}: {}", String::from_utf8_lossy(&resp));
    }
    assert!(!v.gt_labels().exists());
}
