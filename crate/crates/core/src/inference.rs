//! Supervoxel labelling: per-frame posteriors of the regions containing a
//! supervoxel are fused across hierarchy levels by homogeneity, then averaged
//! over the first frames of the supervoxel's lifetime.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{GeoLabel, MAIN_CLASSES, SUB_CLASSES};
use crate::boosted_trees::{argmax, BoostError, ClassifierBundle, Posterior};
use crate::features::{extract_level_features_where, FeatureError, VideoFeatureContext, FEATURE_DIM, FEATURE_LAYOUT_VERSION};
use crate::segmentation::{write_id_png, SegError, SegmentationHierarchy};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no posteriors to combine")]
    Empty,
    #[error("hierarchy has no level for fraction {0}")]
    MissingLevel(f64),
    #[error("model was trained for feature layout {found} ({found_dim} values), expected {expected} ({expected_dim})")]
    ModelMismatch {
        expected: u32,
        found: u32,
        expected_dim: usize,
        found_dim: usize,
    },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub level_fractions: Vec<f64>,
    pub window: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            level_fractions: vec![0.1, 0.2],
            window: 25,
        }
    }
}

/// Main and sub-vertical class distributions of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPosterior {
    pub main: [f64; 3],
    pub sub: [f64; 3],
}

impl ClassPosterior {
    pub fn uniform() -> Self {
        ClassPosterior {
            main: [1.0 / 3.0; 3],
            sub: [1.0 / 3.0; 3],
        }
    }

    pub fn main_label(&self) -> GeoLabel {
        MAIN_CLASSES[argmax(&self.main)]
    }

    pub fn sub_label(&self) -> GeoLabel {
        SUB_CLASSES[argmax(&self.sub)]
    }

    /// The main label, refined to a sub-vertical class for Vertical.
    pub fn label(&self) -> GeoLabel {
        match self.main_label() {
            GeoLabel::Vertical => self.sub_label(),
            l => l,
        }
    }
}

impl From<Posterior> for ClassPosterior {
    fn from(p: Posterior) -> Self {
        ClassPosterior { main: p.main, sub: p.sub }
    }
}

fn renormalize(p: [f64; 3]) -> [f64; 3] {
    let s: f64 = p.iter().sum();
    p.map(|x| x / s)
}

/// `sum_j p_j h_j / sum_j h_j` per class. When every homogeneity is zero
/// the plain mean is used.
pub fn fuse_hierarchy_posteriors(per_level: &[Posterior]) -> Result<ClassPosterior, InferenceError> {
    if per_level.is_empty() {
        return Err(InferenceError::Empty);
    }
    let hs: f64 = per_level.iter().map(|p| p.homogeneity).sum();
    let weights: Vec<f64> = if hs > 0.0 {
        per_level.iter().map(|p| p.homogeneity / hs).collect()
    } else {
        log::warn!("all homogeneities are zero, using the unweighted mean");
        vec![1.0 / per_level.len() as f64; per_level.len()]
    };
    let mut main = [0.0; 3];
    let mut sub = [0.0; 3];
    for (p, w) in per_level.iter().zip(&weights) {
        for k in 0..3 {
            main[k] += w * p.main[k];
            sub[k] += w * p.sub[k];
        }
    }
    Ok(ClassPosterior {
        main: renormalize(main),
        sub: renormalize(sub),
    })
}

/// Mean of the first `min(window, len)` per-frame posteriors, which must be
/// in frame order starting at the supervoxel's first frame.
pub fn temporal_aggregate(per_frame: &[ClassPosterior], window: usize) -> Result<ClassPosterior, InferenceError> {
    let n = per_frame.len().min(window.max(1));
    if n == 0 {
        return Err(InferenceError::Empty);
    }
    let mut main = [0.0; 3];
    let mut sub = [0.0; 3];
    for p in &per_frame[..n] {
        for k in 0..3 {
            main[k] += p.main[k];
            sub[k] += p.sub[k];
        }
    }
    Ok(ClassPosterior {
        main: renormalize(main.map(|x| x / n as f64)),
        sub: renormalize(sub.map(|x| x / n as f64)),
    })
}

/// First and last frame of every supervoxel.
pub fn supervoxel_lifetimes(h: &SegmentationHierarchy) -> Vec<(usize, usize)> {
    supervoxel_frames(h)
        .iter()
        .map(|f| match (f.first(), f.last()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => (usize::MAX, 0),
        })
        .collect()
}

/// Frames in which each supervoxel has pixels, ascending.
pub fn supervoxel_frames(h: &SegmentationHierarchy) -> Vec<Vec<usize>> {
    let mut frames = vec![Vec::new(); h.base.num_supervoxels];
    let mut seen = vec![usize::MAX; h.base.num_supervoxels];
    for j in 0..h.base.frames {
        for &s in h.base.frame_labels(j) {
            if seen[s as usize] != j {
                seen[s as usize] = j;
                frames[s as usize].push(j);
            }
        }
    }
    frames
}

/// The first `window` frames in which a supervoxel appears.
fn window_frames(frames: &[usize], window: usize) -> &[usize] {
    &frames[..frames.len().min(window.max(1))]
}

/// Resolves configured fractions to hierarchy levels.
pub fn resolve_levels(h: &SegmentationHierarchy, fractions: &[f64]) -> Result<Vec<usize>, InferenceError> {
    fractions
        .iter()
        .map(|&f| h.level_for_fraction(f).ok_or(InferenceError::MissingLevel(f)))
        .collect()
}

/// The `(frame, region)` pairs at each of `levels` that labelling with
/// `window` needs.
pub fn required_pairs(h: &SegmentationHierarchy, levels: &[usize], window: usize) -> Vec<BTreeSet<(usize, u32)>> {
    let frames = supervoxel_frames(h);
    levels
        .iter()
        .map(|&l| {
            let map = h.supervoxel_map(l);
            let mut set = BTreeSet::new();
            for (s, f) in frames.iter().enumerate() {
                for &j in window_frames(f, window) {
                    set.insert((j, map[s]));
                }
            }
            set
        })
        .collect()
}

/// Posteriors of `(frame, region)` pairs, one map per fused level.
#[derive(Debug, Clone, Default)]
pub struct PosteriorTable {
    pub levels: Vec<usize>,
    pub entries: Vec<HashMap<(usize, u32), Posterior>>,
    /// Number of classifier evaluations made while filling the table.
    pub classifier_calls: usize,
}

fn check_model(bundle: &ClassifierBundle) -> Result<(), InferenceError> {
    if bundle.meta.layout_version != FEATURE_LAYOUT_VERSION || bundle.meta.feature_dim != FEATURE_DIM {
        return Err(InferenceError::ModelMismatch {
            expected: FEATURE_LAYOUT_VERSION,
            found: bundle.meta.layout_version,
            expected_dim: FEATURE_DIM,
            found_dim: bundle.meta.feature_dim,
        });
    }
    Ok(())
}

/// Evaluates the classifiers once per pair needed for `window` (all pairs
/// when `window` is `usize::MAX`).
pub fn compute_posteriors(
    ctx: &VideoFeatureContext,
    h: &SegmentationHierarchy,
    bundle: &ClassifierBundle,
    levels: &[usize],
    window: usize,
) -> Result<PosteriorTable, InferenceError> {
    check_model(bundle)?;
    let needed = required_pairs(h, levels, window);
    let calls = AtomicUsize::new(0);
    let mut entries = Vec::with_capacity(levels.len());
    for (&level, need) in levels.iter().zip(&needed) {
        let keep = |j: usize, r: u32| need.contains(&(j, r));
        let feats = extract_level_features_where(ctx, h, level, &keep)?;
        let map: HashMap<(usize, u32), Posterior> = feats
            .par_iter()
            .flatten()
            .map(|f| {
                calls.fetch_add(1, Ordering::Relaxed);
                Ok(((f.frame, f.segment_id), bundle.predict_posterior(&f.values)?))
            })
            .collect::<Result<_, BoostError>>()?;
        entries.push(map);
    }
    Ok(PosteriorTable {
        levels: levels.to_vec(),
        entries,
        classifier_calls: calls.into_inner(),
    })
}

/// Final labels of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLabeling {
    pub posteriors: Vec<ClassPosterior>,
    pub labels: Vec<GeoLabel>,
    pub classifier_calls: usize,
}

/// Labels supervoxels from a filled table, fusing the table levels at
/// positions `use_levels` (indices into `table.levels`).
pub fn label_from_table(
    h: &SegmentationHierarchy,
    table: &PosteriorTable,
    use_levels: &[usize],
    window: usize,
) -> Result<VideoLabeling, InferenceError> {
    let frames = supervoxel_frames(h);
    let posteriors = frames
        .par_iter()
        .enumerate()
        .map(|(s, f)| {
            if f.is_empty() {
                return Ok(ClassPosterior::uniform());
            }
            let per_frame = window_frames(f, window)
                .iter()
                .map(|&j| {
                    let per_level: Vec<Posterior> = use_levels
                        .iter()
                        .map(|&li| {
                            let r = h.region_of(table.levels[li], s as u32);
                            table.entries[li].get(&(j, r)).copied().ok_or(InferenceError::Empty)
                        })
                        .collect::<Result<_, _>>()?;
                    fuse_hierarchy_posteriors(&per_level)
                })
                .collect::<Result<Vec<_>, _>>()?;
            temporal_aggregate(&per_frame, window)
        })
        .collect::<Result<Vec<_>, InferenceError>>()?;
    Ok(VideoLabeling {
        labels: posteriors.iter().map(|p| p.label()).collect(),
        posteriors,
        classifier_calls: table.classifier_calls,
    })
}

pub fn label_video(
    ctx: &VideoFeatureContext,
    h: &SegmentationHierarchy,
    bundle: &ClassifierBundle,
    config: &InferenceConfig,
) -> Result<VideoLabeling, InferenceError> {
    let levels = resolve_levels(h, &config.level_fractions)?;
    let table = compute_posteriors(ctx, h, bundle, &levels, config.window)?;
    let all: Vec<usize> = (0..levels.len()).collect();
    label_from_table(h, &table, &all, config.window)
}

impl VideoLabeling {
    /// Label of every pixel of frame `j`.
    pub fn pixel_labels(&self, h: &SegmentationHierarchy, j: usize) -> Vec<GeoLabel> {
        h.base.frame_labels(j).iter().map(|&s| self.labels[s as usize]).collect()
    }

    /// Posterior of `class` (a main or sub-vertical class) per pixel of frame `j`.
    pub fn confidence_map(&self, h: &SegmentationHierarchy, j: usize, class: GeoLabel) -> Vec<f64> {
        let pick = |p: &ClassPosterior| {
            if let Some(k) = MAIN_CLASSES.iter().position(|&c| c == class) {
                p.main[k]
            } else if let Some(k) = SUB_CLASSES.iter().position(|&c| c == class) {
                p.sub[k]
            } else {
                0.0
            }
        };
        h.base
            .frame_labels(j)
            .iter()
            .map(|&s| pick(&self.posteriors[s as usize]))
            .collect()
    }

    /// Writes `labels.json`, `labels/frame_%06d.png` colour maps and
    /// `confidence/<class>/frame_%06d.png` greyscale posteriors.
    pub fn save(&self, dir: &Path, video_id: &str, h: &SegmentationHierarchy) -> Result<(), InferenceError> {
        fs::create_dir_all(dir.join("labels"))?;
        let file = LabelsFile {
            video_id: video_id.to_string(),
            supervoxels: self
                .labels
                .iter()
                .zip(&self.posteriors)
                .enumerate()
                .map(|(id, (&label, p))| SupervoxelLabel {
                    id: id as u32,
                    label,
                    main: *p,
                })
                .collect(),
        };
        fs::write(dir.join("labels.json"), serde_json::to_vec_pretty(&file)?)?;
        let (w, hgt) = (h.base.width, h.base.height);
        for j in 0..h.base.frames {
            let rgb: Vec<u8> = self.pixel_labels(h, j).iter().flat_map(|l| l.color()).collect();
            image::save_buffer(
                dir.join("labels").join(format!("frame_{j:06}.png")),
                &rgb,
                w,
                hgt,
                image::ColorType::Rgb8,
            )?;
            for class in MAIN_CLASSES.iter().chain(SUB_CLASSES.iter()) {
                let d = dir.join("confidence").join(class.name());
                fs::create_dir_all(&d)?;
                let g: Vec<u8> = self
                    .confidence_map(h, j, *class)
                    .iter()
                    .map(|p| (p * 255.0).round() as u8)
                    .collect();
                image::save_buffer(d.join(format!("frame_{j:06}.png")), &g, w, hgt, image::ColorType::L8)?;
            }
        }
        Ok(())
    }
}

/// Writes the supervoxel id maps used to align predictions with frames.
pub fn save_supervoxel_maps(dir: &Path, h: &SegmentationHierarchy) -> Result<(), InferenceError> {
    fs::create_dir_all(dir)?;
    for j in 0..h.base.frames {
        write_id_png(
            &dir.join(format!("frame_{j:06}.png")),
            h.base.width,
            h.base.height,
            h.base.frame_labels(j),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervoxelLabel {
    pub id: u32,
    pub label: GeoLabel,
    #[serde(flatten)]
    pub main: ClassPosterior,
}

/// Contents of a prediction `labels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub video_id: String,
    pub supervoxels: Vec<SupervoxelLabel>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Oversegmentation;

    fn post(main: [f64; 3], h: f64) -> Posterior {
        Posterior {
            main,
            sub: main,
            homogeneity: h,
        }
    }

    #[test]
    fn single_level_identity() {
        let p = post([0.2, 0.5, 0.3], 0.4);
        let f = fuse_hierarchy_posteriors(&[p]).unwrap();
        for k in 0..3 {
            assert!((f.main[k] - p.main[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn two_level_weighting() {
        let f = fuse_hierarchy_posteriors(&[post([1.0, 0.0, 0.0], 0.8), post([0.0, 1.0, 0.0], 0.2)]).unwrap();
        assert!((f.main[0] - 0.8).abs() < 1e-12 && (f.main[1] - 0.2).abs() < 1e-12 && f.main[2] == 0.0);
    }

    #[test]
    fn equal_homogeneity_is_plain_mean_and_zero_falls_back() {
        let a = post([0.6, 0.3, 0.1], 0.5);
        let b = post([0.2, 0.2, 0.6], 0.5);
        let f = fuse_hierarchy_posteriors(&[a, b]).unwrap();
        assert!((f.main[0] - 0.4).abs() < 1e-12 && (f.main[2] - 0.35).abs() < 1e-12);
        let z = fuse_hierarchy_posteriors(&[post([0.6, 0.3, 0.1], 0.0), post([0.2, 0.2, 0.6], 0.0)]).unwrap();
        assert_eq!(z, f);
        assert!(matches!(fuse_hierarchy_posteriors(&[]), Err(InferenceError::Empty)));
    }

    #[test]
    fn temporal_examples() {
        let a = ClassPosterior {
            main: [1.0, 0.0, 0.0],
            sub: [0.0, 0.0, 1.0],
        };
        let b = ClassPosterior {
            main: [0.0, 1.0, 0.0],
            sub: [0.0, 0.0, 1.0],
        };
        let m = temporal_aggregate(&[a, b], 2).unwrap();
        assert_eq!(m.main, [0.5, 0.5, 0.0]);
        assert_eq!(temporal_aggregate(&[a, b], 1).unwrap(), a);
        assert_eq!(temporal_aggregate(&vec![b; 10], 25).unwrap(), b);
        let mut frames = vec![a; 10];
        frames[9] = b;
        let m = temporal_aggregate(&frames, 25).unwrap();
        assert!((m.main[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_first_class() {
        let u = ClassPosterior::uniform();
        assert_eq!(u.label(), GeoLabel::Sky);
        let v = ClassPosterior {
            main: [0.2, 0.2, 0.6],
            sub: [0.4, 0.4, 0.2],
        };
        assert_eq!(v.label(), GeoLabel::Solid);
    }

    #[test]
    fn required_pairs_follow_window() {
        // supervoxel 0 lives in frames 0..4, supervoxel 1 in frames 2..4
        let mut labels = Vec::new();
        for j in 0..5 {
            labels.extend_from_slice(&[0, if j >= 2 { 1 } else { 0 }]);
        }
        let base = Oversegmentation::from_labels(2, 1, 5, labels).unwrap();
        let h = SegmentationHierarchy::from_parts(base, vec![0.5], 1, vec![1], vec![vec![0, 0]]).unwrap();
        let p = required_pairs(&h, &[0, 1], 2);
        assert_eq!(p[0].iter().copied().collect::<Vec<_>>(), vec![(0, 0), (1, 0), (2, 1), (3, 1)]);
        assert_eq!(p[1].iter().copied().collect::<Vec<_>>(), vec![(0, 0), (1, 0), (2, 0), (3, 0)]);
        assert_eq!(supervoxel_lifetimes(&h), vec![(0, 4), (2, 4)]);
    }

    #[test]
    fn window_skips_frames_without_the_supervoxel() {
        // supervoxel 1 is in frames 0, 3 and 4 only
        let rows: [[u32; 2]; 5] = [[0, 1], [0, 0], [0, 0], [0, 1], [0, 1]];
        let labels: Vec<u32> = rows.iter().flatten().copied().collect();
        let base = Oversegmentation::from_labels(2, 1, 5, labels).unwrap();
        let h = SegmentationHierarchy::from_parts(base, vec![1.0], 1, vec![1], vec![vec![0, 1]]).unwrap();
        assert_eq!(supervoxel_frames(&h), vec![vec![0, 1, 2, 3, 4], vec![0, 3, 4]]);
        let p = required_pairs(&h, &[1], 2);
        assert_eq!(p[0].iter().copied().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 0), (3, 1)]);
    }
}
