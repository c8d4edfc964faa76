//! Annotation API under `/api/v1`.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | GET | `/videos` | list of videos with size and hierarchy levels |
//! | GET | `/videos/{id}/frames/{j}.png` | frame `j` |
//! | GET | `/videos/{id}/seg/{level}/{j}` | region id of every pixel of frame `j` |
//! | GET | `/videos/{id}/labels` | supervoxel labels (`gt/labels.json`) |
//! | PUT | `/videos/{id}/labels` | `{region_id, level, label}` or a whole label document |

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use geovid_core::annotation::{AnnotationError, AnnotationSession, GeoLabel, GroundTruth};

use crate::error::{CliError, Result};
use crate::layout::VideoDir;

struct VideoEntry {
    dir: VideoDir,
    session: AnnotationSession,
}

pub struct AppState {
    videos: BTreeMap<String, Mutex<VideoEntry>>,
}

impl AppState {
    /// Every segmented video directly below `root`.
    pub fn load(root: &Path) -> Result<Self> {
        let mut videos = BTreeMap::new();
        for e in fs::read_dir(root).map_err(|e| CliError::io(root, e))? {
            let p: PathBuf = e.map_err(|e| CliError::io(root, e))?.path();
            let dir = VideoDir::new(p);
            if !dir.hierarchy_file().exists() {
                continue;
            }
            let h = dir.load_hierarchy()?;
            let session = AnnotationSession::open(&dir.id(), h, dir.gt_labels())?;
            videos.insert(dir.id(), Mutex::new(VideoEntry { dir, session }));
        }
        if videos.is_empty() {
            return Err(CliError::MissingDependency(format!(
                "no segmented videos under {}",
                root.display()
            )));
        }
        Ok(AppState { videos })
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct VideoInfo {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    /// Region count per level; level 0 holds the supervoxels.
    pub regions: Vec<usize>,
    pub labeled_supervoxels: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RegionMap {
    pub level: usize,
    pub frame: usize,
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelsPut {
    Region { region_id: u32, level: usize, label: GeoLabel },
    Document(GroundTruth),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelsPutResponse {
    pub affected_supervoxels: usize,
    pub labels: GroundTruth,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let code = match e {
            AnnotationError::UnknownRegion { .. }
            | AnnotationError::InvalidLabelForLevel { .. }
            | AnnotationError::UnknownLabel(_)
            | AnnotationError::VideoMismatch { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn entry<'a>(s: &'a AppState, id: &str) -> ApiResult<&'a Mutex<VideoEntry>> {
    s.videos
        .get(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown video {id:?}")))
}

fn lock(m: &Mutex<VideoEntry>) -> std::sync::MutexGuard<'_, VideoEntry> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

async fn list_videos(State(s): State<Arc<AppState>>) -> Json<Vec<VideoInfo>> {
    Json(
        s.videos
            .iter()
            .map(|(id, m)| {
                let e = lock(m);
                let h = e.session.hierarchy();
                VideoInfo {
                    id: id.clone(),
                    width: h.base.width,
                    height: h.base.height,
                    frames: h.base.frames,
                    regions: (0..h.num_levels()).map(|l| h.num_regions(l)).collect(),
                    labeled_supervoxels: e.session.ground_truth().labels.len(),
                }
            })
            .collect(),
    )
}

async fn get_frame(State(s): State<Arc<AppState>>, UrlPath((id, file)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let bad = || ApiError(StatusCode::NOT_FOUND, format!("no frame {file:?}"));
    let j: usize = file.strip_suffix(".png").ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let path = lock(entry(&s, &id)?).dir.frames().join(format!("frame_{j:06}.png"));
    let bytes = fs::read(&path).map_err(|_| bad())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(bytes)).into_response())
}

async fn get_seg(
    State(s): State<Arc<AppState>>,
    UrlPath((id, level, frame)): UrlPath<(String, usize, usize)>,
) -> ApiResult<Json<RegionMap>> {
    let e = lock(entry(&s, &id)?);
    let h = e.session.hierarchy();
    if level >= h.num_levels() || frame >= h.base.frames {
        return Err(ApiError(
            StatusCode::NOT_FOUND,
            format!("no level {level} / frame {frame}"),
        ));
    }
    let map = h.supervoxel_map(level);
    Ok(Json(RegionMap {
        level,
        frame,
        width: h.base.width,
        height: h.base.height,
        ids: h.base.frame_labels(frame).iter().map(|&sv| map[sv as usize]).collect(),
    }))
}

async fn get_labels(State(s): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<GroundTruth>> {
    Ok(Json(lock(entry(&s, &id)?).session.ground_truth().clone()))
}

async fn put_labels(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<LabelsPutResponse>> {
    let req: LabelsPut =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::BAD_REQUEST, format!("bad body: {e}")))?;
    let mut e = lock(entry(&s, &id)?);
    let affected = match req {
        LabelsPut::Region { region_id, level, label } => {
            e.session.handle_label_update(region_id, level, label)?.affected_supervoxels
        }
        LabelsPut::Document(gt) => {
            let n = gt.labels.len();
            e.session.replace_labels(gt)?;
            n
        }
    };
    Ok(Json(LabelsPutResponse {
        affected_supervoxels: affected,
        labels: e.session.ground_truth().clone(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/videos", get(list_videos))
        .route("/api/v1/videos/{id}/frames/{file}", get(get_frame))
        .route("/api/v1/videos/{id}/seg/{level}/{frame}", get(get_seg))
        .route("/api/v1/videos/{id}/labels", get(get_labels).put(put_labels))
        .with_state(state)
}

/// Serves the API until interrupted.
pub fn serve(root: &Path, addr: SocketAddr) -> Result<()> {
    let state = Arc::new(AppState::load(root)?);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io(root, e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Config(format!("cannot bind {addr}: {e}")))?;
        log::info!("annotation API on http://{}/api/v1", listener.local_addr().unwrap_or(addr));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::io(root, e))
    })
}
