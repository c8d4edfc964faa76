//! Files of one video directory:
//!
//! ```text
//! <video>/frames/frame_%06d.png, frames/sequence.json
//! <video>/hierarchy.json, seg/L0/frame_%06d.png
//! <video>/gt/labels.json            supervoxel labels (annotation)
//! <video>/gt/pixels/frame_%06d.png  pixel label codes (synthetic)
//! <video>/features/<level>/<frame>.bin
//! <video>/pred/labels.json, pred/labels/, pred/confidence/<class>/
//! <video>/manifests/<stage>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use geovid_core::annotation::{annotate_from_voxel_labels, GeoLabel, GroundTruth};
use geovid_core::eval::synthetic::PixelGroundTruth;
use geovid_core::frame_store::{load_sequence, FrameSequence, FRAME_PATTERN};
use geovid_core::segmentation::SegmentationHierarchy;

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct VideoDir {
    pub root: PathBuf,
}

impl VideoDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        VideoDir { root: root.into() }
    }

    pub fn id(&self) -> String {
        self.root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "video".to_string())
    }

    pub fn frames(&self) -> PathBuf {
        self.root.join("frames")
    }
    pub fn hierarchy_file(&self) -> PathBuf {
        self.root.join("hierarchy.json")
    }
    pub fn gt_labels(&self) -> PathBuf {
        self.root.join("gt").join("labels.json")
    }
    pub fn gt_pixels(&self) -> PathBuf {
        self.root.join("gt").join("pixels")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn pred(&self) -> PathBuf {
        self.root.join("pred")
    }
    pub fn manifest(&self, stage: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{stage}.json"))
    }

    pub fn load_frames(&self) -> Result<FrameSequence> {
        if !self.frames().is_dir() {
            return Err(CliError::MissingDependency(format!("no frames in {}", self.frames().display())));
        }
        Ok(load_sequence(&self.frames(), FRAME_PATTERN)?)
    }

    pub fn load_hierarchy(&self) -> Result<SegmentationHierarchy> {
        if !self.hierarchy_file().exists() {
            return Err(CliError::MissingDependency(format!(
                "{} is not segmented (run `geovid segment`)",
                self.root.display()
            )));
        }
        Ok(SegmentationHierarchy::load(&self.root)?)
    }

    pub fn has_labels(&self) -> bool {
        self.gt_labels().exists() || self.gt_pixels().is_dir()
    }

    /// One label per supervoxel: the annotation file when present, otherwise
    /// the 95% rule applied to pixel labels.
    pub fn supervoxel_labels(&self, h: &SegmentationHierarchy) -> Result<Vec<GeoLabel>> {
        if self.gt_labels().exists() {
            let gt = GroundTruth::load(&self.gt_labels())?;
            return Ok(gt.to_dense(h.base.num_supervoxels)?);
        }
        if self.gt_pixels().is_dir() {
            let px = PixelGroundTruth::load(&self.gt_pixels(), h.base.frames)?;
            return Ok(annotate_from_voxel_labels(h, &px.voxels()));
        }
        Err(CliError::MissingDependency(format!("no ground truth in {}", self.root.display())))
    }

    /// Pixel labels: the pixel files when present, otherwise supervoxel
    /// labels painted onto their pixels.
    pub fn pixel_labels(&self, h: &SegmentationHierarchy) -> Result<PixelGroundTruth> {
        if self.gt_pixels().is_dir() {
            return Ok(PixelGroundTruth::load(&self.gt_pixels(), h.base.frames)?);
        }
        let sv = self.supervoxel_labels(h)?;
        Ok(PixelGroundTruth {
            width: h.base.width,
            height: h.base.height,
            frames: (0..h.base.frames)
                .map(|j| h.base.frame_labels(j).iter().map(|&s| sv[s as usize]).collect())
                .collect(),
        })
    }
}

/// Video directories of a corpus (sub-directories holding `frames/`), by name.
pub fn corpus_videos(corpus: &Path) -> Result<Vec<VideoDir>> {
    let mut out = Vec::new();
    for e in fs::read_dir(corpus).map_err(|e| CliError::io(corpus, e))? {
        let p = e.map_err(|e| CliError::io(corpus, e))?.path();
        if p.join("frames").is_dir() {
            out.push(VideoDir::new(p));
        }
    }
    out.sort_by(|a, b| a.root.cmp(&b.root));
    Ok(out)
}

/// Creates `<runs>/<UTC timestamp>/`, adding a suffix when it exists.
pub fn new_run_dir(runs: &Path) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    fs::create_dir_all(runs).map_err(|e| CliError::io(runs, e))?;
    let mut dir = runs.join(&stamp);
    let mut k = 1;
    while dir.exists() {
        dir = runs.join(format!("{stamp}-{k}"));
        k += 1;
    }
    fs::create_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}
