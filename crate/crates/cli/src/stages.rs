//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use geovid_core::annotation::{propagate_labels, LEAF_LABELS};
use geovid_core::boosted_trees::{train_bundle, ClassifierBundle, LabeledExample};
use geovid_core::bootstrap::{run_bootstrap, write_metrics_csv, BootstrapState, Candidate, RoundMetrics, SegmentRef};
use geovid_core::eval::synthetic::{generate_synthetic_video, SyntheticSceneSpec};
use geovid_core::eval::PixelEvaluation;
use geovid_core::features::{layout_table, load_feature_cache, save_feature_cache, feature_cache_path, backward_flows, FEATURE_LAYOUT_VERSION};
use geovid_core::frame_store::load_sequence;
use geovid_core::inference::{label_video, resolve_levels, LabelsFile, VideoLabeling};
use geovid_core::pipeline::{
    all_level_features, evaluate_bundle, evaluate_labeling, run_ablation, samples_from_features, AblationCondition,
    AblationRow, ExampleOptions, LabeledVideo, ModelConfig, PreparedVideo, SegmentSample,
};
use geovid_core::segmentation::{build_hierarchy, oversegment, SegmentationHierarchy};

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};
use crate::layout::{corpus_videos, new_run_dir, VideoDir};
use crate::manifest::StageManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

fn fresh(m: &StageManifest, path: &Path, force: bool) -> bool {
    let skip = !force && m.matches_existing(path);
    if skip {
        log::info!("{}: inputs unchanged, skipping (use --force to rerun)", path.display());
    }
    skip
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn remove_dir(p: &Path) -> Result<()> {
    if p.exists() {
        fs::remove_dir_all(p).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| CliError::io(path, e))
}

/// Copies frames from `src` into the video (when given) and builds the
/// segmentation hierarchy.
pub fn segment(video: &VideoDir, src: Option<(&Path, &str)>, cfg: &ModelConfig, force: bool) -> Result<Outcome> {
    if let Some((dir, pattern)) = src {
        let same = fs::canonicalize(dir).ok() == fs::canonicalize(video.frames()).ok();
        if !same {
            let seq = load_sequence(dir, pattern)?;
            remove_dir(&video.frames())?;
            seq.save(&video.frames())?;
        }
    }
    let params = (&cfg.seg, &cfg.flow, cfg.hierarchy_fractions());
    let mut m = StageManifest::new("segment", &params, &[("frames", &video.frames())]).or_else(|e| match e {
        CliError::Io { .. } => Err(CliError::MissingDependency(format!("no frames in {}", video.frames().display()))),
        e => Err(e),
    })?;
    m.outputs = vec![video.hierarchy_file()];
    let mpath = video.manifest("segment");
    if fresh(&m, &mpath, force) {
        return Ok(Outcome::Skipped);
    }
    let seq = video.load_frames()?;
    let flows = backward_flows(&seq, &cfg.flow)?;
    let base = oversegment(&seq, &flows, &cfg.seg)?;
    let h = build_hierarchy(base, &seq, &flows, &cfg.hierarchy_fractions(), &cfg.seg)?;
    remove_dir(&video.root.join("seg"))?;
    h.save(&video.root)?;
    log::info!(
        "{}: {} supervoxels, hierarchy height {}",
        video.id(),
        h.base.num_supervoxels,
        h.hierarchy_height
    );
    m.write(&mpath)?;
    Ok(Outcome::Ran)
}

/// Caches features of every segment-frame at the configured levels.
pub fn extract(video: &VideoDir, cfg: &ModelConfig, force: bool) -> Result<Outcome> {
    let h = video.load_hierarchy()?;
    let params = (&cfg.flow, cfg.hierarchy_fractions(), FEATURE_LAYOUT_VERSION);
    let mut m = StageManifest::new(
        "extract",
        &params,
        &[("frames", &video.frames()), ("hierarchy", &video.hierarchy_file())],
    )?;
    let layout = video.features().join("layout.txt");
    m.outputs = vec![layout.clone()];
    let mpath = video.manifest("extract");
    if fresh(&m, &mpath, force) {
        return Ok(Outcome::Skipped);
    }
    let seq = video.load_frames()?;
    let levels = resolve_levels(&h, &cfg.hierarchy_fractions())?;
    let pv = PreparedVideo::with_hierarchy(&video.id(), &seq, h, &cfg.flow)?;
    remove_dir(&video.features())?;
    for &level in &levels {
        for (j, recs) in all_level_features(&pv, level)?.iter().enumerate() {
            save_feature_cache(&video.root, level, j, recs)?;
        }
    }
    fs::write(&layout, layout_table()).map_err(|e| CliError::io(&layout, e))?;
    m.write(&mpath)?;
    Ok(Outcome::Ran)
}

/// Samples of `levels` read back from the feature cache.
fn cached_samples(video: &VideoDir, h: &SegmentationHierarchy, levels: &[usize], opts: &ExampleOptions) -> Result<Vec<SegmentSample>> {
    let mut out = Vec::new();
    for &level in levels {
        if !feature_cache_path(&video.root, level, 0).exists() {
            return Err(CliError::MissingDependency(format!(
                "{} has no features for hierarchy level {level} (run `geovid extract`)",
                video.root.display()
            )));
        }
        let keep = opts.selector(h, level);
        let frames = (0..h.base.frames)
            .map(|j| {
                let mut recs = load_feature_cache(&video.root, level, j)?;
                recs.retain(|r| keep(j, r.segment_id));
                Ok(recs)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(samples_from_features(h, level, frames, opts.features));
    }
    Ok(out)
}

/// Labelled examples of one video from its cached features.
pub fn video_examples(video: &VideoDir, cfg: &ModelConfig, opts: &ExampleOptions) -> Result<Vec<LabeledExample>> {
    let h = video.load_hierarchy()?;
    let labels = video.supervoxel_labels(&h)?;
    let propagated = propagate_labels(&h, &labels)?;
    let levels = resolve_levels(&h, &cfg.level_fractions)?;
    Ok(cached_samples(video, &h, &levels, opts)?
        .into_iter()
        .map(|s| LabeledExample {
            label: propagated[s.level][s.segment as usize],
            features: s.features,
            weight: s.weight,
        })
        .collect())
}

fn all_examples(videos: &[VideoDir], cfg: &ModelConfig) -> Result<Vec<LabeledExample>> {
    let opts = ExampleOptions::from_config(cfg);
    let per_video = videos
        .par_iter()
        .map(|v| video_examples(v, cfg, &opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn train(videos: &[VideoDir], cfg: &ModelConfig, out: &Path) -> Result<ClassifierBundle> {
    if videos.is_empty() {
        return Err(CliError::Config("no training videos".into()));
    }
    let examples = all_examples(videos, cfg)?;
    log::info!("training on {} examples from {} videos", examples.len(), videos.len());
    let bundle = train_bundle(&examples, &cfg.boost, cfg.level_fractions.clone())?;
    if let Some(p) = out.parent() {
        create_dir(p)?;
    }
    bundle.save(out)?;
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    for v in videos {
        inputs.push((format!("{}/hierarchy", v.id()), v.hierarchy_file()));
        inputs.push((format!("{}/features", v.id()), v.features()));
        let gt = if v.gt_labels().exists() { v.gt_labels() } else { v.gt_pixels() };
        inputs.push((format!("{}/gt", v.id()), gt));
    }
    let refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
    let mut m = StageManifest::new("train", &(&cfg.level_fractions, &cfg.boost, cfg.train_frame_stride), &refs)?;
    m.outputs = vec![out.to_path_buf()];
    m.write(&out.with_extension("manifest.json"))?;
    Ok(bundle)
}

pub fn load_model(path: &Path) -> Result<ClassifierBundle> {
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "no model at {} (run `geovid train`)",
            path.display()
        )));
    }
    Ok(ClassifierBundle::load(path)?)
}

/// Labels every supervoxel of the video and writes `pred/`.
pub fn predict(video: &VideoDir, model: &Path, cfg: &ModelConfig, force: bool) -> Result<Outcome> {
    let bundle = load_model(model)?;
    let h = video.load_hierarchy()?;
    let mut m = StageManifest::new(
        "predict",
        &(&cfg.flow, &cfg.inference),
        &[
            ("frames", &video.frames()),
            ("hierarchy", &video.hierarchy_file()),
            ("model", model),
        ],
    )?;
    m.outputs = vec![video.pred().join("labels.json")];
    let mpath = video.manifest("predict");
    if fresh(&m, &mpath, force) {
        return Ok(Outcome::Skipped);
    }
    let seq = video.load_frames()?;
    let pv = PreparedVideo::with_hierarchy(&video.id(), &seq, h, &cfg.flow)?;
    let lab = label_video(&pv.context, &pv.hierarchy, &bundle, &cfg.inference)?;
    log::info!(
        "{}: {} classifier calls for {} supervoxels",
        video.id(),
        lab.classifier_calls,
        pv.hierarchy.base.num_supervoxels
    );
    remove_dir(&video.pred())?;
    lab.save(&video.pred(), &video.id(), &pv.hierarchy)?;
    m.write(&mpath)?;
    Ok(Outcome::Ran)
}

fn load_prediction(video: &VideoDir) -> Result<VideoLabeling> {
    let path = video.pred().join("labels.json");
    if !path.exists() {
        return Err(CliError::MissingDependency(format!(
            "{} has no predictions (run `geovid predict`)",
            video.root.display()
        )));
    }
    let file: LabelsFile = serde_json::from_slice(&fs::read(&path).map_err(|e| CliError::io(&path, e))?)?;
    Ok(VideoLabeling {
        posteriors: file.supervoxels.iter().map(|s| s.main).collect(),
        labels: file.supervoxels.iter().map(|s| s.label).collect(),
        classifier_calls: 0,
    })
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    headline: String,
    main_accuracy: f64,
    sub_vertical_accuracy: f64,
    main_mean_class_accuracy: f64,
    sub_vertical_mean_class_accuracy: f64,
    videos: Vec<String>,
    confusion: &'a PixelEvaluation,
}

/// Scores predictions against ground truth and writes `eval.json`,
/// `confusion.txt` and `per_video.csv` into `run_dir`.
pub fn evaluate(videos: &[VideoDir], run_dir: &Path) -> Result<PixelEvaluation> {
    let mut total = PixelEvaluation::default();
    let mut per_video = String::from("video,main_accuracy,sub_vertical_accuracy\n");
    for v in videos {
        let h = v.load_hierarchy()?;
        let lab = load_prediction(v)?;
        let gt = v.pixel_labels(&h)?;
        let e = evaluate_labeling(&h, &lab, &gt)?;
        let fmt = |r: std::result::Result<f64, _>| r.map(|x: f64| format!("{x:.6}")).unwrap_or_default();
        per_video.push_str(&format!("{},{},{}\n", v.id(), fmt(e.main.accuracy()), fmt(e.sub.accuracy())));
        total.merge(&e);
    }
    let report = EvalReport {
        headline: total.headline()?,
        main_accuracy: total.main.accuracy()?,
        sub_vertical_accuracy: total.sub.accuracy()?,
        main_mean_class_accuracy: total.main.mean_class_accuracy()?,
        sub_vertical_mean_class_accuracy: total.sub.mean_class_accuracy()?,
        videos: videos.iter().map(|v| v.id()).collect(),
        confusion: &total,
    };
    create_dir(run_dir)?;
    write_json(&run_dir.join("eval.json"), &report)?;
    let text = format!("{}\n\n{}\n{}", report.headline, total.main.render(), total.sub.render());
    let p = run_dir.join("confusion.txt");
    fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    let p = run_dir.join("per_video.csv");
    fs::write(&p, per_video).map_err(|e| CliError::io(&p, e))?;
    Ok(total)
}

/// A segmented, labelled video with its feature context.
pub fn load_labeled(video: &VideoDir, cfg: &ModelConfig) -> Result<LabeledVideo> {
    let h = video.load_hierarchy()?;
    let supervoxels = video.supervoxel_labels(&h)?;
    let pixels = video.pixel_labels(&h)?;
    let seq = video.load_frames()?;
    Ok(LabeledVideo {
        video: PreparedVideo::with_hierarchy(&video.id(), &seq, h, &cfg.flow)?,
        pixels,
        supervoxels,
    })
}

fn load_labeled_all(videos: &[VideoDir], cfg: &ModelConfig) -> Result<Vec<LabeledVideo>> {
    videos.par_iter().map(|v| load_labeled(v, cfg)).collect()
}

/// Feature-importance, window and level experiment; writes `ablation.csv`.
pub fn ablate(train: &[VideoDir], test: &[VideoDir], cfg: &PipelineConfig, run_dir: &Path) -> Result<Vec<AblationRow>> {
    let tr = load_labeled_all(train, &cfg.model)?;
    let te = load_labeled_all(test, &cfg.model)?;
    let rows = run_ablation(
        &tr,
        &te,
        &cfg.model,
        &AblationCondition::standard(),
        &cfg.ablation.windows,
        &cfg.ablation.level_sets,
    )?;
    create_dir(run_dir)?;
    let mut text = String::from("condition,window,levels,main,sub_vertical,object\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.condition,
            r.window,
            r.levels,
            r.main,
            r.sub_vertical,
            r.object.map(|o| format!("{o:.6}")).unwrap_or_default()
        ));
    }
    let p = run_dir.join("ablation.csv");
    fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct PoolSummary {
    original: usize,
    added: usize,
    unlabeled_left: usize,
    added_per_class: BTreeMap<String, usize>,
}

/// Self-training from `train` over `unlabeled`, scored on `test` when
/// given. Writes `bootstrap_metrics.csv`, `model.gvbt` and `pool.json`.
pub fn bootstrap(
    train: &[VideoDir],
    unlabeled: &[VideoDir],
    test: &[VideoDir],
    cfg: &PipelineConfig,
    model: Option<&Path>,
    run_dir: &Path,
) -> Result<Vec<RoundMetrics>> {
    let originals = all_examples(train, &cfg.model)?;
    let opts = ExampleOptions::from_config(&cfg.model);
    let mut candidates = Vec::new();
    for (i, v) in unlabeled.iter().enumerate() {
        let h = v.load_hierarchy()?;
        let levels = resolve_levels(&h, &cfg.model.level_fractions)?;
        candidates.extend(cached_samples(v, &h, &levels, &opts)?.into_iter().map(|s| Candidate {
            source: SegmentRef {
                video: i as u32,
                level: s.level as u32,
                frame: s.frame as u32,
                segment: s.segment,
            },
            features: s.features,
            weight: s.weight,
        }));
    }
    candidates.sort_by_key(|c| c.source);
    let bundle = match model {
        Some(p) => load_model(p)?,
        None => train_bundle(&originals, &cfg.model.boost, cfg.model.level_fractions.clone())?,
    };
    let test_videos = load_labeled_all(test, &cfg.model)?;
    let mut state = BootstrapState::new(cfg.bootstrap.clone(), originals, candidates)?;
    let (bundle, rows) = run_bootstrap(&mut state, bundle, &cfg.model.boost, &cfg.model.level_fractions, |b| {
        if test_videos.is_empty() {
            return Ok(None);
        }
        let e = evaluate_bundle(&test_videos, b, &cfg.model.inference)?;
        Ok(Some((
            e.main.accuracy().map_err(geovid_core::pipeline::PipelineError::from)?,
            e.sub.accuracy().map_err(geovid_core::pipeline::PipelineError::from)?,
        )))
    })?;
    create_dir(run_dir)?;
    let p = run_dir.join("bootstrap_metrics.csv");
    let f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
    write_metrics_csv(f, &rows)?;
    bundle.save(&run_dir.join("model.gvbt"))?;
    let mut per_class: BTreeMap<String, usize> = LEAF_LABELS.iter().map(|l| (l.name().to_string(), 0)).collect();
    for e in state.pool.iter().filter(|e| !e.is_original()) {
        *per_class.entry(e.example.label.name().to_string()).or_default() += 1;
    }
    write_json(
        &run_dir.join("pool.json"),
        &PoolSummary {
            original: state.original_count(),
            added: state.added_count(),
            unlabeled_left: state.unlabeled.len(),
            added_per_class: per_class,
        },
    )?;
    Ok(rows)
}

/// Renders one synthetic video into `out` (frames, pixel labels, spec).
pub fn synth_one(spec: &SyntheticSceneSpec, out: &VideoDir) -> Result<()> {
    let (seq, gt) = generate_synthetic_video(spec)?;
    remove_dir(&out.frames())?;
    remove_dir(&out.gt_pixels())?;
    seq.save(&out.frames())?;
    gt.save(&out.gt_pixels())?;
    write_json(&out.root.join("synth_spec.json"), spec)
}

/// `count` random videos `synth_000`, `synth_001`, ... under `out`, video i
/// seeded with `seed + i`.
pub fn synth_corpus(out: &Path, count: usize, seed: u64, width: u32, height: u32, frames: usize) -> Result<Vec<VideoDir>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let v = VideoDir::new(out.join(format!("synth_{i:03}")));
            synth_one(&SyntheticSceneSpec::random(seed + i as u64, width, height, frames), &v)?;
            Ok(v)
        })
        .collect()
}

/// Train / test / unlabelled videos of the corpus per the configuration.
pub fn split_corpus(corpus: &Path, cfg: &PipelineConfig) -> Result<(Vec<VideoDir>, Vec<VideoDir>, Vec<VideoDir>)> {
    let all = corpus_videos(corpus)?;
    let by_id: BTreeMap<String, VideoDir> = all.iter().map(|v| (v.id(), v.clone())).collect();
    let pick = |ids: &[String]| -> Result<Vec<VideoDir>> {
        ids.iter()
            .map(|id| {
                by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| CliError::Config(format!("video {id:?} not found in {}", corpus.display())))
            })
            .collect()
    };
    let unlabeled = pick(&cfg.paths.unlabeled)?;
    if !cfg.paths.train.is_empty() || !cfg.paths.test.is_empty() {
        return Ok((pick(&cfg.paths.train)?, pick(&cfg.paths.test)?, unlabeled));
    }
    let labeled: Vec<VideoDir> = all
        .into_iter()
        .filter(|v| v.has_labels() && !cfg.paths.unlabeled.contains(&v.id()))
        .collect();
    let n_train = (labeled.len() * 2).div_ceil(3);
    let test = labeled[n_train..].to_vec();
    let train = labeled[..n_train].to_vec();
    Ok((train, test, unlabeled))
}

/// Every stage over a corpus: synthesise (when empty and configured),
/// segment, extract, train, predict, eval, and bootstrap when unlabelled
/// videos are listed. Returns the run directory.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<PathBuf> {
    let corpus = cfg
        .paths
        .corpus
        .clone()
        .ok_or_else(|| CliError::Config("paths.corpus is required".into()))?;
    create_dir(&corpus)?;
    if corpus_videos(&corpus)?.is_empty() && cfg.synth.count > 0 {
        log::info!("generating {} synthetic videos in {}", cfg.synth.count, corpus.display());
        synth_corpus(&corpus, cfg.synth.count, cfg.seed, cfg.synth.width, cfg.synth.height, cfg.synth.frames)?;
    }
    let (train_v, test_v, unlabeled_v) = split_corpus(&corpus, cfg)?;
    if train_v.is_empty() {
        return Err(CliError::MissingDependency(format!(
            "no labelled videos in {}",
            corpus.display()
        )));
    }
    let every: Vec<&VideoDir> = train_v.iter().chain(&test_v).chain(&unlabeled_v).collect();
    every
        .par_iter()
        .map(|v| {
            segment(v, None, &cfg.model, force)?;
            extract(v, &cfg.model, force)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let run_dir = new_run_dir(&cfg.paths.runs)?;
    write_json(&run_dir.join("config.json"), cfg)?;
    let model = run_dir.join("model.gvbt");
    train(&train_v, &cfg.model, &model)?;
    test_v
        .par_iter()
        .map(|v| predict(v, &model, &cfg.model, force).map(|_| ()))
        .collect::<Result<Vec<()>>>()?;
    if !test_v.is_empty() {
        let e = evaluate(&test_v, &run_dir)?;
        log::info!("{}", e.headline()?);
    }
    if !unlabeled_v.is_empty() {
        bootstrap(&train_v, &unlabeled_v, &test_v, cfg, Some(&model), &run_dir.join("bootstrap"))?;
    }
    Ok(run_dir)
}

