//! Python module `geovid`: videos, segmentation hierarchies, flow, the
//! boosted classifier bundle and video labelling.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;

use geovid_core::annotation::{annotate_from_voxel_labels, GeoLabel};
use geovid_core::boosted_trees::{ClassifierBundle, Posterior};
use geovid_core::dense_flow::estimate_flow;
use geovid_core::eval::pixel_accuracy as core_pixel_accuracy;
use geovid_core::eval::synthetic::{generate_synthetic_video, PixelGroundTruth, SyntheticSceneSpec};
use geovid_core::features::{layout_table, APPEARANCE_DIM, FEATURE_DIM, MOTION_DIM};
use geovid_core::frame_store::{load_sequence, Frame, FrameSequence, FRAME_PATTERN};
use geovid_core::inference::{fuse_hierarchy_posteriors, label_video, VideoLabeling};
use geovid_core::pipeline::{train_on, ExampleOptions, LabeledVideo, ModelConfig, PreparedVideo};
use geovid_core::segmentation::SegmentationHierarchy;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(config: Option<&str>) -> PyResult<ModelConfig> {
    let cfg: ModelConfig = match config {
        Some(s) => serde_json::from_str(s).map_err(err)?,
        None => ModelConfig::default(),
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn parse_labels(labels: &[String]) -> PyResult<Vec<GeoLabel>> {
    labels.iter().map(|s| s.parse::<GeoLabel>().map_err(err)).collect()
}

fn names(labels: &[GeoLabel]) -> Vec<String> {
    labels.iter().map(|l| l.to_string()).collect()
}

fn pixel_truth(video: &FrameSequence, frames: &[Vec<String>]) -> PyResult<PixelGroundTruth> {
    if frames.len() != video.count() {
        return Err(err(format!("{} label frames for {} video frames", frames.len(), video.count())));
    }
    let frames = frames
        .iter()
        .map(|f| {
            let l = parse_labels(f)?;
            if l.len() != video.frame_area() {
                return Err(err(format!("label frame has {} pixels, expected {}", l.len(), video.frame_area())));
            }
            Ok(l)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(PixelGroundTruth {
        width: video.width,
        height: video.height,
        frames,
    })
}

/// A sequence of RGB frames.
#[pyclass(module = "geovid")]
pub struct Video {
    id: String,
    seq: FrameSequence,
}

#[pymethods]
impl Video {
    /// Frames `frame_%06d.png` of a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let seq = load_sequence(&dir, FRAME_PATTERN).map_err(err)?;
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Video { id, seq })
    }

    /// Frames given as packed RGB bytes, `3 * width * height` each.
    #[staticmethod]
    #[pyo3(signature = (frames, width, height, id = "video".to_string()))]
    fn from_rgb(frames: Vec<Vec<u8>>, width: u32, height: u32, id: String) -> PyResult<Self> {
        let n = 3 * width as usize * height as usize;
        let frames = frames
            .into_iter()
            .enumerate()
            .map(|(j, rgb)| {
                if rgb.len() != n {
                    return Err(err(format!("frame {j} has {} bytes, expected {n}", rgb.len())));
                }
                Ok(Frame::new(j, width, height, rgb))
            })
            .collect::<PyResult<Vec<_>>>()?;
        let seq = FrameSequence::from_frames(id.clone(), frames).map_err(err)?;
        Ok(Video { id, seq })
    }

    /// A random synthetic scene and its per-pixel labels (one list per frame).
    #[staticmethod]
    #[pyo3(signature = (seed, width = 64, height = 64, frames = 30))]
    fn synthetic(seed: u64, width: u32, height: u32, frames: usize) -> PyResult<(Video, Vec<Vec<String>>)> {
        let spec = SyntheticSceneSpec::random(seed, width, height, frames);
        let (seq, gt) = generate_synthetic_video(&spec).map_err(err)?;
        let labels = gt.frames.iter().map(|f| names(f)).collect();
        Ok((Video { id: format!("synth_{seed}"), seq }, labels))
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.seq.save(&dir).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.id.clone()
    }
    #[getter]
    fn width(&self) -> u32 {
        self.seq.width
    }
    #[getter]
    fn height(&self) -> u32 {
        self.seq.height
    }
    fn __len__(&self) -> usize {
        self.seq.count()
    }

    /// Packed RGB bytes of frame `j`.
    fn frame(&self, j: usize) -> PyResult<Vec<u8>> {
        if j >= self.seq.count() {
            return Err(PyIndexError::new_err(format!("frame {j} out of range")));
        }
        Ok(self.seq.frame(j).rgb.clone())
    }

    /// Dense flow from frame `a` to frame `b` as `(u, v)` row-major lists.
    #[pyo3(signature = (a, b, config = None))]
    fn flow(&self, py: Python<'_>, a: usize, b: usize, config: Option<&str>) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let cfg = parse_config(config)?;
        if a >= self.seq.count() || b >= self.seq.count() {
            return Err(PyIndexError::new_err("frame out of range"));
        }
        let (fa, fb) = (self.seq.frame(a), self.seq.frame(b));
        let f = py.detach(|| estimate_flow(fa, fb, &cfg.flow)).map_err(err)?;
        Ok((f.u, f.v))
    }

    fn __repr__(&self) -> String {
        format!("Video({:?}, {}x{}x{})", self.id, self.seq.width, self.seq.height, self.seq.count())
    }
}

/// Supervoxels and their merge hierarchy.
#[pyclass(module = "geovid")]
pub struct Hierarchy {
    h: SegmentationHierarchy,
}

#[pymethods]
impl Hierarchy {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Hierarchy {
            h: SegmentationHierarchy::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.h.save(&dir).map_err(err)
    }

    #[getter]
    fn num_supervoxels(&self) -> usize {
        self.h.base.num_supervoxels
    }
    #[getter]
    fn num_levels(&self) -> usize {
        self.h.num_levels()
    }

    fn num_regions(&self, level: usize) -> PyResult<usize> {
        self.check_level(level)?;
        Ok(self.h.num_regions(level))
    }

    /// Finest level with at most `fraction` of the supervoxel count.
    fn level_for_fraction(&self, fraction: f64) -> Option<usize> {
        self.h.level_for_fraction(fraction)
    }

    /// Region id of every pixel of frame `j` at `level`.
    fn region_map(&self, level: usize, j: usize) -> PyResult<Vec<u32>> {
        self.check_level(level)?;
        if j >= self.h.base.frames {
            return Err(PyIndexError::new_err(format!("frame {j} out of range")));
        }
        Ok(self.h.region_map(level, j))
    }

    /// Supervoxels of `region` at `level`.
    fn descendants(&self, level: usize, region: u32) -> PyResult<Vec<u32>> {
        self.h.descendants(level, region).map_err(err)
    }

    /// One label per supervoxel from per-pixel labels: the majority label
    /// when it covers at least 95% of the supervoxel, `mix` otherwise.
    fn supervoxel_labels(&self, pixel_labels: Vec<Vec<String>>) -> PyResult<Vec<String>> {
        let b = &self.h.base;
        if pixel_labels.len() != b.frames {
            return Err(err(format!("{} label frames for {} frames", pixel_labels.len(), b.frames)));
        }
        let mut voxels = Vec::with_capacity(b.labels.len());
        for f in &pixel_labels {
            if f.len() != b.frame_area() {
                return Err(err(format!("label frame has {} pixels, expected {}", f.len(), b.frame_area())));
            }
            voxels.extend(parse_labels(f)?);
        }
        Ok(names(&annotate_from_voxel_labels(&self.h, &voxels)))
    }

    fn __repr__(&self) -> String {
        format!(
            "Hierarchy({} supervoxels, {} levels)",
            self.h.base.num_supervoxels,
            self.h.num_levels()
        )
    }
}

impl Hierarchy {
    fn check_level(&self, level: usize) -> PyResult<()> {
        if level >= self.h.num_levels() {
            return Err(PyIndexError::new_err(format!("level {level} out of range")));
        }
        Ok(())
    }
}

/// Over-segments `video` and builds its hierarchy. `config` is a JSON
/// model configuration; defaults are used when omitted.
#[pyfunction]
#[pyo3(signature = (video, config = None))]
fn segment(py: Python<'_>, video: &Video, config: Option<&str>) -> PyResult<Hierarchy> {
    let cfg = parse_config(config)?;
    let pv = py
        .detach(|| geovid_core::pipeline::prepare_video(&video.id, &video.seq, &cfg))
        .map_err(err)?;
    Ok(Hierarchy { h: pv.hierarchy })
}

/// Labels and posteriors of every supervoxel.
#[pyclass(module = "geovid")]
pub struct Labeling {
    inner: VideoLabeling,
}

#[pymethods]
impl Labeling {
    #[getter]
    fn labels(&self) -> Vec<String> {
        names(&self.inner.labels)
    }

    /// `(main, sub)` class distributions per supervoxel; main is
    /// sky/ground/vertical, sub is solid/porous/object.
    #[getter]
    fn posteriors(&self) -> Vec<([f64; 3], [f64; 3])> {
        self.inner.posteriors.iter().map(|p| (p.main, p.sub)).collect()
    }

    #[getter]
    fn classifier_calls(&self) -> usize {
        self.inner.classifier_calls
    }

    fn pixel_labels(&self, hierarchy: &Hierarchy, j: usize) -> PyResult<Vec<String>> {
        if j >= hierarchy.h.base.frames || self.inner.labels.len() != hierarchy.h.base.num_supervoxels {
            return Err(err("labelling does not match the hierarchy"));
        }
        Ok(names(&self.inner.pixel_labels(&hierarchy.h, j)))
    }
}

/// The trained classifier bundle.
#[pyclass(module = "geovid")]
pub struct Model {
    bundle: ClassifierBundle,
    config: ModelConfig,
}

#[pymethods]
impl Model {
    /// Trains on `(video, hierarchy, pixel_labels)` triples.
    #[staticmethod]
    #[pyo3(signature = (videos, config = None))]
    fn train(py: Python<'_>, videos: Vec<(PyRef<'_, Video>, PyRef<'_, Hierarchy>, Vec<Vec<String>>)>, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let mut inputs = Vec::with_capacity(videos.len());
        for (v, h, px) in &videos {
            inputs.push((v.id.clone(), v.seq.clone(), h.h.clone(), pixel_truth(&v.seq, px)?));
        }
        let bundle = py
            .detach(|| {
                let labeled = inputs
                    .into_iter()
                    .map(|(id, seq, h, px)| {
                        let pv = PreparedVideo::with_hierarchy(&id, &seq, h, &cfg.flow)?;
                        Ok(LabeledVideo::new(pv, px))
                    })
                    .collect::<Result<Vec<_>, geovid_core::pipeline::PipelineError>>()?;
                train_on(&labeled, &cfg, &ExampleOptions::from_config(&cfg))
            })
            .map_err(err)?;
        Ok(Model { bundle, config: cfg })
    }

    #[staticmethod]
    #[pyo3(signature = (path, config = None))]
    fn load(path: PathBuf, config: Option<&str>) -> PyResult<Self> {
        Ok(Model {
            bundle: ClassifierBundle::load(&path).map_err(err)?,
            config: parse_config(config)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.bundle.save(&path).map_err(err)
    }

    /// Posterior `(main, sub, homogeneity)` of one feature vector.
    fn predict_features(&self, features: Vec<f32>) -> PyResult<([f64; 3], [f64; 3], f64)> {
        let p = self.bundle.predict_posterior(&features).map_err(err)?;
        Ok((p.main, p.sub, p.homogeneity))
    }

    /// Labels every supervoxel of `video`.
    #[pyo3(signature = (video, hierarchy, window = None))]
    fn predict(&self, py: Python<'_>, video: &Video, hierarchy: &Hierarchy, window: Option<usize>) -> PyResult<Labeling> {
        let mut inf = self.config.inference.clone();
        if let Some(w) = window {
            inf.window = w;
        }
        let inner = py
            .detach(|| -> Result<VideoLabeling, String> {
                let pv = PreparedVideo::with_hierarchy(&video.id, &video.seq, hierarchy.h.clone(), &self.config.flow)
                    .map_err(|e| e.to_string())?;
                label_video(&pv.context, &pv.hierarchy, &self.bundle, &inf).map_err(|e| e.to_string())
            })
            .map_err(err)?;
        Ok(Labeling { inner })
    }
}

/// Homogeneity-weighted fusion of per-level `(main, sub, homogeneity)`
/// posteriors.
#[pyfunction]
fn fuse_posteriors(per_level: Vec<([f64; 3], [f64; 3], f64)>) -> PyResult<([f64; 3], [f64; 3])> {
    let ps: Vec<Posterior> = per_level
        .into_iter()
        .map(|(main, sub, homogeneity)| Posterior { main, sub, homogeneity })
        .collect();
    let f = fuse_hierarchy_posteriors(&ps).map_err(err)?;
    Ok((f.main, f.sub))
}

/// Fraction of pixels whose predicted label equals the ground truth.
#[pyfunction]
fn pixel_accuracy(pred: Vec<String>, gt: Vec<String>) -> PyResult<f64> {
    core_pixel_accuracy(&parse_labels(&pred)?, &parse_labels(&gt)?).map_err(err)
}

/// Feature vector layout, one block per line.
#[pyfunction]
fn feature_layout() -> String {
    layout_table()
}

/// Default model configuration as JSON.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&ModelConfig::default()).unwrap_or_default()
}

#[pymodule]
fn geovid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Video>()?;
    m.add_class::<Hierarchy>()?;
    m.add_class::<Labeling>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(segment, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_posteriors, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(feature_layout, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add("FEATURE_DIM", FEATURE_DIM)?;
    m.add("APPEARANCE_DIM", APPEARANCE_DIM)?;
    m.add("MOTION_DIM", MOTION_DIM)?;
    m.add("LABELS", GeoLabel::ALL.iter().map(|l| l.to_string()).collect::<Vec<_>>())?;
    Ok(())
}
