//! Ground-truth geometric labels: the label taxonomy, majority propagation up
//! the segmentation hierarchy, class statistics and the annotation session
//! backing the labelling service.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segmentation::SegmentationHierarchy;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("supervoxel {0} has no label")]
    UnlabeledSupervoxel(u32),
    #[error("region {region} does not exist at level {level}")]
    UnknownRegion { region: u32, level: usize },
    #[error("label `{label}` cannot be assigned at level {level}")]
    InvalidLabelForLevel { label: GeoLabel, level: usize },
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("labels belong to video `{found}`, expected `{expected}`")]
    VideoMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoLabel {
    Sky,
    Ground,
    Vertical,
    Solid,
    Porous,
    Object,
    Mix,
}

/// Main classes in argmax tie-break order.
pub const MAIN_CLASSES: [GeoLabel; 3] = [GeoLabel::Sky, GeoLabel::Ground, GeoLabel::Vertical];
/// Sub-vertical classes in argmax tie-break order.
pub const SUB_CLASSES: [GeoLabel; 3] = [GeoLabel::Solid, GeoLabel::Porous, GeoLabel::Object];
/// Labels an annotator may put on a supervoxel.
pub const LEAF_LABELS: [GeoLabel; 6] = [
    GeoLabel::Sky,
    GeoLabel::Ground,
    GeoLabel::Solid,
    GeoLabel::Porous,
    GeoLabel::Object,
    GeoLabel::Mix,
];

impl GeoLabel {
    pub const ALL: [GeoLabel; 7] = [
        GeoLabel::Sky,
        GeoLabel::Ground,
        GeoLabel::Vertical,
        GeoLabel::Solid,
        GeoLabel::Porous,
        GeoLabel::Object,
        GeoLabel::Mix,
    ];

    /// Collapses the sub-vertical classes onto `Vertical`.
    pub fn main(self) -> GeoLabel {
        match self {
            GeoLabel::Solid | GeoLabel::Porous | GeoLabel::Object => GeoLabel::Vertical,
            other => other,
        }
    }

    pub fn is_leaf(self) -> bool {
        self != GeoLabel::Vertical
    }

    pub fn is_sub_vertical(self) -> bool {
        SUB_CLASSES.contains(&self)
    }

    /// Position in [`MAIN_CLASSES`] of the main class, `None` for `Mix`.
    pub fn main_index(self) -> Option<usize> {
        MAIN_CLASSES.iter().position(|&c| c == self.main())
    }

    pub fn sub_index(self) -> Option<usize> {
        SUB_CLASSES.iter().position(|&c| c == self)
    }

    /// Compact code used in label PNGs; 0 means unlabelled.
    pub fn code(self) -> u8 {
        GeoLabel::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<GeoLabel> {
        (code as usize)
            .checked_sub(1)
            .and_then(|i| GeoLabel::ALL.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            GeoLabel::Sky => "sky",
            GeoLabel::Ground => "ground",
            GeoLabel::Vertical => "vertical",
            GeoLabel::Solid => "solid",
            GeoLabel::Porous => "porous",
            GeoLabel::Object => "object",
            GeoLabel::Mix => "mix",
        }
    }

    /// Display colour of the label in overlays.
    pub fn color(self) -> [u8; 3] {
        match self {
            GeoLabel::Sky => [70, 130, 230],
            GeoLabel::Ground => [150, 100, 40],
            GeoLabel::Vertical => [60, 180, 60],
            GeoLabel::Solid => [220, 60, 50],
            GeoLabel::Porous => [40, 200, 90],
            GeoLabel::Object => [240, 200, 30],
            GeoLabel::Mix => [128, 128, 128],
        }
    }
}

impl fmt::Display for GeoLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeoLabel {
    type Err = AnnotationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GeoLabel::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AnnotationError::UnknownLabel(s.to_string()))
    }
}

/// Supervoxel labels of one video, as stored in `labels.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub video_id: String,
    pub labels: BTreeMap<u32, GeoLabel>,
}

impl GroundTruth {
    pub fn new(video_id: impl Into<String>) -> Self {
        GroundTruth {
            video_id: video_id.into(),
            labels: BTreeMap::new(),
        }
    }

    pub fn from_dense(video_id: impl Into<String>, labels: &[GeoLabel]) -> Self {
        GroundTruth {
            video_id: video_id.into(),
            labels: labels.iter().enumerate().map(|(i, &l)| (i as u32, l)).collect(),
        }
    }

    /// One label per supervoxel, failing on the first unlabelled id.
    pub fn to_dense(&self, num_supervoxels: usize) -> Result<Vec<GeoLabel>, AnnotationError> {
        (0..num_supervoxels as u32)
            .map(|s| {
                self.labels
                    .get(&s)
                    .copied()
                    .ok_or(AnnotationError::UnlabeledSupervoxel(s))
            })
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self, AnnotationError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Writes via a temporary file and rename so readers never observe a
    /// partial file.
    pub fn save_atomic(&self, path: &Path) -> Result<(), AnnotationError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Majority label of a set of (label, volume) votes: `L` when strictly more
/// than 95% of the volume carries `L`, otherwise `Mix`.
pub fn majority_label(votes: &[(GeoLabel, u64)]) -> GeoLabel {
    let mut tally: BTreeMap<GeoLabel, u64> = BTreeMap::new();
    let mut total = 0u64;
    for &(l, v) in votes {
        *tally.entry(l).or_default() += v;
        total += v;
    }
    match tally.into_iter().max_by_key(|&(l, v)| (v, std::cmp::Reverse(l))) {
        // v / total > 0.95, in exact integer arithmetic
        Some((l, v)) if total > 0 && (v as u128) * 100 > (total as u128) * 95 => l,
        _ => GeoLabel::Mix,
    }
}

/// Labels of every region at every level, derived from supervoxel labels.
/// Index 0 is the supervoxel level itself.
pub fn propagate_labels(
    h: &SegmentationHierarchy,
    gt0: &[GeoLabel],
) -> Result<Vec<Vec<GeoLabel>>, AnnotationError> {
    let n = h.base.num_supervoxels;
    if gt0.len() < n {
        return Err(AnnotationError::UnlabeledSupervoxel(gt0.len() as u32));
    }
    let gt0 = &gt0[..n];
    let mut out = vec![gt0.to_vec()];
    for level in 1..h.num_levels() {
        let mut votes: Vec<BTreeMap<GeoLabel, u64>> = vec![BTreeMap::new(); h.num_regions(level)];
        for (s, &r) in h.supervoxel_map(level).iter().enumerate() {
            *votes[r as usize].entry(gt0[s]).or_default() += h.base.volumes[s];
        }
        out.push(
            votes
                .into_iter()
                .map(|v| majority_label(&v.into_iter().collect::<Vec<_>>()))
                .collect(),
        );
    }
    Ok(out)
}

/// Supervoxel labels from a per-voxel label volume (same layout as the
/// supervoxel label volume), using the same 95% rule.
pub fn annotate_from_voxel_labels(h: &SegmentationHierarchy, voxel_labels: &[GeoLabel]) -> Vec<GeoLabel> {
    let mut votes: Vec<BTreeMap<GeoLabel, u64>> = vec![BTreeMap::new(); h.base.num_supervoxels];
    for (&s, &l) in h.base.labels.iter().zip(voxel_labels) {
        *votes[s as usize].entry(l).or_default() += 1;
    }
    votes
        .into_iter()
        .map(|v| majority_label(&v.into_iter().collect::<Vec<_>>()))
        .collect()
}

/// Share of segments and of voxel area per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStatistics {
    /// Sky, Ground, Vertical, Mix.
    pub main_segments: [f64; 4],
    pub main_area: [f64; 4],
    /// Solid, Porous, Object, relative to the sub-labelled vertical segments.
    pub sub_segments: [f64; 3],
    pub sub_area: [f64; 3],
    pub total_segments: u64,
}

fn normalize<const N: usize>(xs: [f64; N]) -> [f64; N] {
    let s: f64 = xs.iter().sum();
    if s > 0.0 {
        xs.map(|x| x / s)
    } else {
        xs
    }
}

/// Statistics over `(label, volume)` pairs of labelled supervoxels from any
/// number of videos.
pub fn class_statistics<I: IntoIterator<Item = (GeoLabel, u64)>>(segments: I) -> ClassStatistics {
    let mut ms = [0.0; 4];
    let mut ma = [0.0; 4];
    let mut ss = [0.0; 3];
    let mut sa = [0.0; 3];
    let mut total = 0;
    for (l, vol) in segments {
        total += 1;
        let mi = l.main_index().unwrap_or(3);
        ms[mi] += 1.0;
        ma[mi] += vol as f64;
        if let Some(si) = l.sub_index() {
            ss[si] += 1.0;
            sa[si] += vol as f64;
        }
    }
    ClassStatistics {
        main_segments: normalize(ms),
        main_area: normalize(ma),
        sub_segments: normalize(ss),
        sub_area: normalize(sa),
        total_segments: total,
    }
}

impl ClassStatistics {
    /// Two small tables of segment percentages, one class per line.
    pub fn render_segments(&self) -> String {
        let mut s = String::from("Main classes\n");
        for (name, v) in ["Sky", "Ground", "Vertical", "Mix"].iter().zip(self.main_segments) {
            s.push_str(&format!("{name} {:.1}%\n", v * 100.0));
        }
        s.push_str("Sub-vertical classes\n");
        for (name, v) in ["Solid", "Porous", "Object"].iter().zip(self.sub_segments) {
            s.push_str(&format!("{name} {:.1}%\n", v * 100.0));
        }
        s
    }
}

/// Result of one label write.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelUpdate {
    pub region_id: u32,
    pub level: usize,
    pub label: GeoLabel,
    pub affected_supervoxels: usize,
}

/// Labels of one video being annotated. Writes resolve to supervoxels and are
/// persisted before returning.
#[derive(Debug)]
pub struct AnnotationSession {
    hierarchy: SegmentationHierarchy,
    gt: GroundTruth,
    path: Option<PathBuf>,
}

impl AnnotationSession {
    pub fn new(video_id: impl Into<String>, hierarchy: SegmentationHierarchy, path: Option<PathBuf>) -> Self {
        AnnotationSession {
            hierarchy,
            gt: GroundTruth::new(video_id),
            path,
        }
    }

    /// Opens a session, loading existing labels from `path` when present.
    pub fn open(video_id: &str, hierarchy: SegmentationHierarchy, path: PathBuf) -> Result<Self, AnnotationError> {
        let gt = if path.exists() {
            let gt = GroundTruth::load(&path)?;
            if gt.video_id != video_id {
                return Err(AnnotationError::VideoMismatch {
                    expected: video_id.to_string(),
                    found: gt.video_id,
                });
            }
            gt
        } else {
            GroundTruth::new(video_id)
        };
        Ok(AnnotationSession {
            hierarchy,
            gt,
            path: Some(path),
        })
    }

    pub fn hierarchy(&self) -> &SegmentationHierarchy {
        &self.hierarchy
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.gt
    }

    pub fn handle_label_update(
        &mut self,
        region_id: u32,
        level: usize,
        label: GeoLabel,
    ) -> Result<LabelUpdate, AnnotationError> {
        if level >= self.hierarchy.num_levels() || region_id as usize >= self.hierarchy.num_regions(level) {
            return Err(AnnotationError::UnknownRegion { region: region_id, level });
        }
        if !label.is_leaf() {
            return Err(AnnotationError::InvalidLabelForLevel { label, level });
        }
        let members: Vec<u32> = self
            .hierarchy
            .supervoxel_map(level)
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region_id)
            .map(|(s, _)| s as u32)
            .collect();
        let mut next = self.gt.clone();
        for &s in &members {
            next.labels.insert(s, label);
        }
        if let Some(path) = &self.path {
            next.save_atomic(path)?;
        }
        self.gt = next;
        Ok(LabelUpdate {
            region_id,
            level,
            label,
            affected_supervoxels: members.len(),
        })
    }

    /// Replaces all labels at once (PUT of a whole label document).
    pub fn replace_labels(&mut self, gt: GroundTruth) -> Result<(), AnnotationError> {
        if gt.video_id != self.gt.video_id {
            return Err(AnnotationError::VideoMismatch {
                expected: self.gt.video_id.clone(),
                found: gt.video_id,
            });
        }
        let n = self.hierarchy.base.num_supervoxels as u32;
        for (&s, &l) in &gt.labels {
            if s >= n {
                return Err(AnnotationError::UnknownRegion { region: s, level: 0 });
            }
            if !l.is_leaf() {
                return Err(AnnotationError::InvalidLabelForLevel { label: l, level: 0 });
            }
        }
        if let Some(path) = &self.path {
            gt.save_atomic(path)?;
        }
        self.gt = gt;
        Ok(())
    }
}
