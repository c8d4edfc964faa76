//! Stage plumbing shared by the CLI, the bootstrap loop and experiments:
//! preparing a video (flow, segmentation, feature context), turning labels
//! into training examples, and scoring predictions against pixel labels.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{annotate_from_voxel_labels, propagate_labels, AnnotationError, GeoLabel};
use crate::boosted_trees::{train_bundle, BoostError, BoostParams, ClassifierBundle, LabeledExample};
use crate::dense_flow::FlowParams;
use crate::eval::synthetic::PixelGroundTruth;
use crate::eval::{EvalError, PixelEvaluation};
use crate::features::{
    backward_flows, extract_level_features, extract_level_features_where, FeatureError, SegmentFrameFeatures,
    VideoFeatureContext, APPEARANCE_DIM, FEATURE_DIM,
};
use crate::frame_store::FrameSequence;
use crate::inference::{
    compute_posteriors, label_from_table, resolve_levels, InferenceConfig, InferenceError, PosteriorTable, VideoLabeling,
};
use crate::segmentation::{build_hierarchy, oversegment, SegError, SegParams, SegmentationHierarchy};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Algorithm parameters of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seg: SegParams,
    pub flow: FlowParams,
    /// Hierarchy levels used to build training examples.
    pub level_fractions: Vec<f64>,
    pub boost: BoostParams,
    pub inference: InferenceConfig,
    /// Use every n-th frame when collecting training examples.
    pub train_frame_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seg: SegParams::default(),
            flow: FlowParams::default(),
            level_fractions: vec![0.1, 0.2],
            boost: BoostParams::default(),
            inference: InferenceConfig::default(),
            train_frame_stride: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        let fr_ok = |fr: &[f64]| !fr.is_empty() && fr.iter().all(|&f| f > 0.0 && f <= 1.0);
        if !fr_ok(&self.level_fractions) || !fr_ok(&self.inference.level_fractions) {
            return bad("level fractions must be non-empty and in (0, 1]");
        }
        if self.inference.window == 0 {
            return bad("window must be at least 1");
        }
        if self.train_frame_stride == 0 {
            return bad("train_frame_stride must be at least 1");
        }
        if !(self.boost.shrinkage > 0.0 && self.boost.shrinkage <= 1.0) {
            return bad("shrinkage must be in (0, 1]");
        }
        if self.flow.pyr_scale <= 0.0 || self.flow.pyr_scale >= 1.0 || self.flow.window == 0 {
            return bad("flow pyramid scale must be in (0, 1) and window positive");
        }
        if self.seg.k <= 0.0 || self.seg.region_k <= 0.0 {
            return bad("segmentation constants must be positive");
        }
        Ok(())
    }

    /// Sorted union of training and inference fractions: the levels every
    /// hierarchy is built with.
    pub fn hierarchy_fractions(&self) -> Vec<f64> {
        let mut f: Vec<f64> = self
            .level_fractions
            .iter()
            .chain(&self.inference.level_fractions)
            .copied()
            .collect();
        f.sort_by(f64::total_cmp);
        f.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        f
    }
}

/// A segmented video ready for feature extraction.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub id: String,
    pub hierarchy: SegmentationHierarchy,
    pub context: VideoFeatureContext,
}

/// Flow, over-segmentation, hierarchy and feature context of `seq`.
pub fn prepare_video(id: &str, seq: &FrameSequence, config: &ModelConfig) -> Result<PreparedVideo, PipelineError> {
    let flows = backward_flows(seq, &config.flow)?;
    let base = oversegment(seq, &flows, &config.seg)?;
    let hierarchy = build_hierarchy(base, seq, &flows, &config.hierarchy_fractions(), &config.seg)?;
    let context = VideoFeatureContext::new(seq, &flows)?;
    Ok(PreparedVideo {
        id: id.to_string(),
        hierarchy,
        context,
    })
}

impl PreparedVideo {
    /// Feature context for an already segmented video.
    pub fn with_hierarchy(
        id: &str,
        seq: &FrameSequence,
        hierarchy: SegmentationHierarchy,
        flow: &FlowParams,
    ) -> Result<PreparedVideo, PipelineError> {
        let (w, h, n) = (hierarchy.base.width, hierarchy.base.height, hierarchy.base.frames);
        if (seq.width, seq.height, seq.count()) != (w, h, n) {
            return Err(PipelineError::Config(format!(
                "frames are {}x{}x{} but the segmentation is {w}x{h}x{n}",
                seq.width,
                seq.height,
                seq.count()
            )));
        }
        Ok(PreparedVideo {
            id: id.to_string(),
            hierarchy,
            context: VideoFeatureContext::compute(seq, flow)?,
        })
    }
}

/// Which frames and features go into training examples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    MotionAndAppearance,
    AppearanceOnly,
    MotionOnly,
}

impl FeatureSet {
    /// Zeroes the columns outside the set; constant columns are never split on.
    pub fn apply(self, x: &mut [f32]) {
        match self {
            FeatureSet::MotionAndAppearance => {}
            FeatureSet::AppearanceOnly => x[APPEARANCE_DIM..FEATURE_DIM].iter_mut().for_each(|v| *v = 0.0),
            FeatureSet::MotionOnly => x[..APPEARANCE_DIM].iter_mut().for_each(|v| *v = 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleOptions {
    pub frame_stride: usize,
    /// Keep only the first frame in which each region appears.
    pub first_frame_only: bool,
    pub features: FeatureSet,
}

impl Default for ExampleOptions {
    fn default() -> Self {
        ExampleOptions {
            frame_stride: 1,
            first_frame_only: false,
            features: FeatureSet::MotionAndAppearance,
        }
    }
}

impl ExampleOptions {
    /// All features, every `train_frame_stride`-th frame.
    pub fn from_config(config: &ModelConfig) -> Self {
        ExampleOptions {
            frame_stride: config.train_frame_stride,
            ..Default::default()
        }
    }

    /// Which (frame, region) pairs of `level` become examples.
    pub fn selector(&self, h: &SegmentationHierarchy, level: usize) -> impl Fn(usize, u32) -> bool + Sync {
        let first_seen = self.first_frame_only.then(|| {
            let mut first = vec![usize::MAX; h.num_regions(level)];
            for j in (0..h.base.frames).rev() {
                for s in h.frame_slices(level, j) {
                    first[s.region as usize] = j;
                }
            }
            first
        });
        let stride = self.frame_stride.max(1);
        move |j: usize, r: u32| match &first_seen {
            Some(first) => first[r as usize] == j,
            None => j.is_multiple_of(stride),
        }
    }
}

/// Features of one segment in one frame, with its share of the frame area.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSample {
    pub level: usize,
    pub frame: usize,
    pub segment: u32,
    pub features: Vec<f32>,
    pub weight: f64,
}

/// Turns per-frame feature records of `level` into samples weighted by
/// area share, masking columns per `features`.
pub fn samples_from_features(
    h: &SegmentationHierarchy,
    level: usize,
    frames: Vec<Vec<SegmentFrameFeatures>>,
    features: FeatureSet,
) -> Vec<SegmentSample> {
    let area = h.base.frame_area() as f64;
    let mut out = Vec::new();
    for frame in frames {
        let Some(j) = frame.first().map(|f| f.frame) else { continue };
        let areas: HashMap<u32, usize> = h.frame_slices(level, j).iter().map(|s| (s.region, s.area)).collect();
        for f in frame {
            let mut values = f.values;
            features.apply(&mut values);
            out.push(SegmentSample {
                level,
                frame: j,
                segment: f.segment_id,
                features: values,
                weight: areas.get(&f.segment_id).copied().unwrap_or(0) as f64 / area,
            });
        }
    }
    out
}

/// Segment-frames of one video at `levels`, selected and masked by `opts`.
pub fn segment_samples(video: &PreparedVideo, levels: &[usize], opts: &ExampleOptions) -> Result<Vec<SegmentSample>, PipelineError> {
    let h = &video.hierarchy;
    let mut out = Vec::new();
    for &level in levels {
        let keep = opts.selector(h, level);
        let feats = extract_level_features_where(&video.context, h, level, &keep)?;
        out.extend(samples_from_features(h, level, feats, opts.features));
    }
    Ok(out)
}

/// Labelled segment-frames of one video at `levels`. Each example weighs
/// its share of the frame area, so every frame contributes equally.
pub fn training_examples(
    video: &PreparedVideo,
    supervoxel_labels: &[GeoLabel],
    levels: &[usize],
    opts: &ExampleOptions,
) -> Result<Vec<LabeledExample>, PipelineError> {
    let propagated = propagate_labels(&video.hierarchy, supervoxel_labels)?;
    Ok(segment_samples(video, levels, opts)?
        .into_iter()
        .map(|s| LabeledExample {
            label: propagated[s.level][s.segment as usize],
            features: s.features,
            weight: s.weight,
        })
        .collect())
}

/// A video with pixel labels, e.g. from the synthetic generator.
#[derive(Debug, Clone)]
pub struct LabeledVideo {
    pub video: PreparedVideo,
    pub pixels: PixelGroundTruth,
    /// Supervoxel labels derived from the pixels by the 95% rule.
    pub supervoxels: Vec<GeoLabel>,
}

impl LabeledVideo {
    pub fn new(video: PreparedVideo, pixels: PixelGroundTruth) -> Self {
        let supervoxels = annotate_from_voxel_labels(&video.hierarchy, &pixels.voxels());
        LabeledVideo {
            video,
            pixels,
            supervoxels,
        }
    }
}

/// Trains a bundle on the labelled videos.
pub fn train_on(videos: &[LabeledVideo], config: &ModelConfig, opts: &ExampleOptions) -> Result<ClassifierBundle, PipelineError> {
    let per_video = videos
        .par_iter()
        .map(|v| {
            let levels = resolve_levels(&v.video.hierarchy, &config.level_fractions)?;
            training_examples(&v.video, &v.supervoxels, &levels, opts)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let examples: Vec<LabeledExample> = per_video.into_iter().flatten().collect();
    Ok(train_bundle(&examples, &config.boost, config.level_fractions.clone())?)
}

/// Scores a labelling against pixel labels.
pub fn evaluate_labeling(
    h: &SegmentationHierarchy,
    labeling: &VideoLabeling,
    gt: &PixelGroundTruth,
) -> Result<PixelEvaluation, PipelineError> {
    let mut e = PixelEvaluation::default();
    let main: Vec<GeoLabel> = labeling.posteriors.iter().map(|p| p.main_label()).collect();
    let sub: Vec<GeoLabel> = labeling.posteriors.iter().map(|p| p.sub_label()).collect();
    for (j, g) in gt.frames.iter().enumerate() {
        let sv = h.base.frame_labels(j);
        let pm: Vec<GeoLabel> = sv.iter().map(|&s| main[s as usize]).collect();
        let ps: Vec<GeoLabel> = sv.iter().map(|&s| sub[s as usize]).collect();
        e.add_frame(&pm, &ps, g)?;
    }
    Ok(e)
}

/// Posterior tables of every test video at all `fractions` for windows up
/// to `max_window`, from which labellings for any subset of those levels
/// and any smaller window can be derived without new classifier calls.
pub fn posterior_tables(
    videos: &[LabeledVideo],
    bundle: &ClassifierBundle,
    fractions: &[f64],
    max_window: usize,
) -> Result<Vec<PosteriorTable>, PipelineError> {
    videos
        .iter()
        .map(|v| {
            let levels = resolve_levels(&v.video.hierarchy, fractions)?;
            Ok(compute_posteriors(&v.video.context, &v.video.hierarchy, bundle, &levels, max_window)?)
        })
        .collect()
}

/// Aggregate evaluation over videos for one level subset and window.
pub fn evaluate_tables(
    videos: &[LabeledVideo],
    tables: &[PosteriorTable],
    use_levels: &[usize],
    window: usize,
) -> Result<PixelEvaluation, PipelineError> {
    let mut total = PixelEvaluation::default();
    for (v, t) in videos.iter().zip(tables) {
        let lab = label_from_table(&v.video.hierarchy, t, use_levels, window)?;
        total.merge(&evaluate_labeling(&v.video.hierarchy, &lab, &v.pixels)?);
    }
    Ok(total)
}

/// Labels and scores `videos` with the configured inference settings.
pub fn evaluate_bundle(
    videos: &[LabeledVideo],
    bundle: &ClassifierBundle,
    inference: &InferenceConfig,
) -> Result<PixelEvaluation, PipelineError> {
    let tables = posterior_tables(videos, bundle, &inference.level_fractions, inference.window)?;
    let all: Vec<usize> = (0..inference.level_fractions.len()).collect();
    evaluate_tables(videos, &tables, &all, inference.window)
}

/// One row of the feature-importance experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCondition {
    pub features: FeatureSet,
    pub first_frame_only: bool,
}

impl AblationCondition {
    /// The five feature rows of the importance table, in order.
    pub fn standard() -> [AblationCondition; 5] {
        let c = |features, first_frame_only| AblationCondition {
            features,
            first_frame_only,
        };
        [
            c(FeatureSet::MotionAndAppearance, false),
            c(FeatureSet::AppearanceOnly, false),
            c(FeatureSet::MotionOnly, false),
            c(FeatureSet::MotionAndAppearance, true),
            c(FeatureSet::AppearanceOnly, true),
        ]
    }

    pub fn name(&self) -> String {
        let base = match self.features {
            FeatureSet::MotionAndAppearance => "Motion & Appearance",
            FeatureSet::AppearanceOnly if self.first_frame_only => "Appearance",
            FeatureSet::AppearanceOnly => "Appearance only",
            FeatureSet::MotionOnly => "Motion only",
        };
        if self.first_frame_only {
            format!("{base} (first frame)")
        } else {
            base.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub condition: String,
    pub window: usize,
    pub levels: String,
    pub main: f64,
    pub sub_vertical: f64,
    pub object: Option<f64>,
}

/// Trains one bundle per condition and scores it for every window and
/// level set. First-frame conditions use only a segment's first frame for
/// training and labelling, so they are scored with window 1 only.
pub fn run_ablation(
    train: &[LabeledVideo],
    test: &[LabeledVideo],
    config: &ModelConfig,
    conditions: &[AblationCondition],
    windows: &[usize],
    level_sets: &[Vec<f64>],
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut fractions: Vec<f64> = level_sets.iter().flatten().copied().collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let max_window = windows.iter().copied().max().unwrap_or(1);
    let mut rows = Vec::new();
    for cond in conditions {
        let opts = ExampleOptions {
            frame_stride: config.train_frame_stride,
            first_frame_only: cond.first_frame_only,
            features: cond.features,
        };
        let bundle = train_on(train, config, &opts)?;
        let win = if cond.first_frame_only { 1 } else { max_window };
        let tables = posterior_tables(test, &bundle, &fractions, win)?;
        let cond_windows: Vec<usize> = if cond.first_frame_only { vec![1] } else { windows.to_vec() };
        for &w in &cond_windows {
            for set in level_sets {
                let use_levels: Vec<usize> = set
                    .iter()
                    .map(|f| fractions.iter().position(|g| (g - f).abs() < 1e-9).unwrap())
                    .collect();
                let e = evaluate_tables(test, &tables, &use_levels, w)?;
                rows.push(AblationRow {
                    condition: cond.name(),
                    window: w,
                    levels: set.iter().map(|f| f.to_string()).collect::<Vec<_>>().join(" "),
                    main: e.main.accuracy()?,
                    sub_vertical: e.sub.accuracy()?,
                    object: e.sub.class_accuracy(GeoLabel::Object),
                });
            }
        }
    }
    Ok(rows)
}

/// Features of every segment-frame at a level, for callers that cache them.
pub fn all_level_features(
    video: &PreparedVideo,
    level: usize,
) -> Result<Vec<Vec<SegmentFrameFeatures>>, PipelineError> {
    Ok(extract_level_features(&video.context, &video.hierarchy, level)?)
}
