//! Per-segment, per-frame feature vectors: an appearance block followed by a
//! motion block computed against frames `j-1`, `j-3` and `j-5`.
//!
//! The layout is fixed; see [`layout`] and `FORMATS.md`.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::dense_flow::{
    estimate_flow_pyramids, flow_differentials, FlowDifferential, FlowError, FlowField, FlowParams, FlowPyramid,
    SOBEL_SIZES,
};
use crate::frame_store::{to_working_colorspace, Frame, FrameSequence, LabFrame};
use crate::segmentation::{orientation_bin, SegmentSlice, SegmentationHierarchy};

pub const OFFSETS: [usize; 3] = [1, 3, 5];
pub const HIST_BINS: usize = 16;
pub const APPEARANCE_DIM: usize = 78;
pub const MOTION_DIM: usize = 363;
pub const FEATURE_DIM: usize = APPEARANCE_DIM + MOTION_DIM;
/// Bumped whenever the layout changes; stored in model files.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

const LAB_HIST_BINS: usize = 10;
const TEXTURE_BINS: usize = 12;
const PADDING: usize = 17;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("segment {0} is empty")]
    EmptySegment(u32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("feature file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A named contiguous range of the feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub start: usize,
    pub len: usize,
}

const BLOCK_SPECS: [(&str, usize); 18] = [
    ("rgb_mean", 3),
    ("lab_mean", 3),
    ("hue_sat_mean", 2),
    ("lab_histogram", 3 * LAB_HIST_BINS),
    ("texture_histogram", TEXTURE_BINS),
    ("texture_entropy", 1),
    ("centroid", 2),
    ("bounding_box", 4),
    ("area_fraction", 1),
    ("y_percentiles", 2),
    ("perspective", 1),
    ("padding", PADDING),
    ("flow_histogram", HIST_BINS * 3),
    ("differential_histogram", HIST_BINS * 2 * 3 * 3),
    ("relative_mean_flow", 2 * 3),
    ("mean_location_change", 2 * 3),
    ("location_change_percentiles", 2 * 2 * 3),
    ("location_change_magnitude", 3),
];

/// Blocks of the full feature vector in order.
pub fn layout() -> Vec<Block> {
    let mut start = 0;
    BLOCK_SPECS
        .iter()
        .map(|&(name, len)| {
            let b = Block { name, start, len };
            start += len;
            b
        })
        .collect()
}

pub fn block(name: &str) -> Option<Block> {
    layout().into_iter().find(|b| b.name == name)
}

/// `start len name` per block, one per line.
pub fn layout_table() -> String {
    layout()
        .iter()
        .map(|b| format!("{} {} {}\n", b.start, b.len, b.name))
        .collect()
}

/// Features of one segment in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentFrameFeatures {
    pub segment_id: u32,
    pub frame: usize,
    pub level: usize,
    pub values: Vec<f32>,
}

impl SegmentFrameFeatures {
    pub fn appearance(&self) -> &[f32] {
        &self.values[..APPEARANCE_DIM]
    }

    pub fn motion(&self) -> &[f32] {
        &self.values[APPEARANCE_DIM..]
    }
}

/// Magnitude-weighted 16-bin orientation histogram of a vector field over
/// `pixels`, divided by the pixel count. Zero vectors are skipped.
pub fn oriented_histogram(u: &[f32], v: &[f32], pixels: &[u32]) -> [f64; HIST_BINS] {
    let mut hist = [0.0f64; HIST_BINS];
    for &p in pixels {
        let (a, b) = (u[p as usize], v[p as usize]);
        if a == 0.0 && b == 0.0 {
            continue;
        }
        hist[orientation_bin(a, b, HIST_BINS)] += (a as f64).hypot(b as f64);
    }
    let n = pixels.len().max(1) as f64;
    hist.iter_mut().for_each(|x| *x /= n);
    hist
}

pub fn flow_histogram(flow: &FlowField, slice: &SegmentSlice) -> Result<[f64; HIST_BINS], FeatureError> {
    if slice.pixels.is_empty() {
        return Err(FeatureError::EmptySegment(slice.region));
    }
    Ok(oriented_histogram(&flow.u, &flow.v, &slice.pixels))
}

/// Motion of frame `j` relative to frame `j - offset`, per pixel of frame `j`,
/// with its Sobel differentials at every kernel size.
#[derive(Debug, Clone)]
pub struct OffsetMotion {
    pub offset: usize,
    /// Displacement each pixel of frame `j` underwent since frame `j - offset`
    /// (the negated flow from `j` to `j - offset`).
    pub motion: FlowField,
    pub diffs: Vec<FlowDifferential>,
}

/// Everything about a video that feature extraction reads besides the
/// segmentation.
#[derive(Debug, Clone)]
pub struct VideoFeatureContext {
    pub width: u32,
    pub height: u32,
    pub frames: Vec<Frame>,
    pub lab: Vec<LabFrame>,
    /// `motion[j]`: entries for the valid offsets of frame `j`, ascending.
    pub motion: Vec<Vec<OffsetMotion>>,
}

/// The flows from frame `j` to `j - o` for all frames and offsets, the raw
/// input of [`VideoFeatureContext::new`]. The `o = 1` entries also serve
/// as the temporal flows of the over-segmentation.
pub fn backward_flows(seq: &FrameSequence, params: &FlowParams) -> Result<Vec<FlowField>, FeatureError> {
    let pyramids: Vec<FlowPyramid> = seq.frames().par_iter().map(|f| FlowPyramid::new(f, params)).collect();
    let pairs: Vec<(usize, usize)> = (0..seq.count())
        .flat_map(|j| OFFSETS.iter().filter(move |&&o| o <= j).map(move |&o| (j, j - o)))
        .collect();
    pairs
        .par_iter()
        .map(|&(a, b)| Ok(estimate_flow_pyramids(&pyramids[a], &pyramids[b], params)?))
        .collect()
}

impl VideoFeatureContext {
    /// Builds the context from flows as produced by [`backward_flows`].
    pub fn new(seq: &FrameSequence, flows: &[FlowField]) -> Result<Self, FeatureError> {
        let by_pair: HashMap<(usize, usize), &FlowField> =
            flows.iter().map(|f| ((f.from_index, f.to_index), f)).collect();
        let motion = (0..seq.count())
            .into_par_iter()
            .map(|j| {
                OFFSETS
                    .iter()
                    .filter(|&&o| o <= j)
                    .map(|&o| {
                        let f = by_pair
                            .get(&(j, j - o))
                            .ok_or_else(|| FeatureError::DimensionMismatch(format!("no flow {}->{}", j, j - o)))?;
                        if (f.width, f.height) != (seq.width, seq.height) {
                            return Err(FeatureError::DimensionMismatch(format!(
                                "flow {}->{} is {}x{}",
                                j,
                                j - o,
                                f.width,
                                f.height
                            )));
                        }
                        let motion = f.scaled(-1.0);
                        let diffs = SOBEL_SIZES
                            .iter()
                            .map(|&k| flow_differentials(&motion, k))
                            .collect::<Result<Vec<_>, _>>()?;
                        Ok(OffsetMotion { offset: o, motion, diffs })
                    })
                    .collect::<Result<Vec<_>, FeatureError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VideoFeatureContext {
            width: seq.width,
            height: seq.height,
            frames: seq.frames().to_vec(),
            lab: seq.frames().par_iter().map(to_working_colorspace).collect(),
            motion,
        })
    }

    pub fn compute(seq: &FrameSequence, params: &FlowParams) -> Result<Self, FeatureError> {
        let flows = backward_flows(seq, params)?;
        Self::new(seq, &flows)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Nearest-rank percentile of sorted data.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Location summary of one region in one frame, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Location {
    mean: [f64; 2],
    p10: [f64; 2],
    p90: [f64; 2],
}

fn location(pixels: &[u32], width: usize) -> Location {
    let mut xs: Vec<f64> = pixels.iter().map(|&p| (p as usize % width) as f64).collect();
    let mut ys: Vec<f64> = pixels.iter().map(|&p| (p as usize / width) as f64).collect();
    let n = pixels.len() as f64;
    let mean = [xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n];
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    Location {
        mean,
        p10: [nearest_rank(&xs, 0.1), nearest_rank(&ys, 0.1)],
        p90: [nearest_rank(&xs, 0.9), nearest_rank(&ys, 0.9)],
    }
}

fn rgb_to_hue_sat(c: [u8; 3]) -> (f64, f64) {
    let r = c[0] as f64 / 255.0;
    let g = c[1] as f64 / 255.0;
    let b = c[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let sat = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, sat);
    }
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    (h / 6.0, sat)
}

#[inline]
fn hist_bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let t = ((v - lo) / (hi - lo) * bins as f64).floor();
    (t.max(0.0) as usize).min(bins - 1)
}

/// The 78 appearance values of `slice` in frame `frame`. `region_map` gives
/// the region of every pixel of the frame so texture gradients can stay
/// inside the segment.
pub fn appearance_features(
    slice: &SegmentSlice,
    frame: &Frame,
    lab: &LabFrame,
    region_map: &[u32],
) -> Result<Vec<f64>, FeatureError> {
    if slice.pixels.is_empty() {
        return Err(FeatureError::EmptySegment(slice.region));
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    if region_map.len() != w * h || lab.lab.len() != w * h {
        return Err(FeatureError::DimensionMismatch("region map or Lab frame size".into()));
    }
    let n = slice.pixels.len() as f64;
    let mut out = Vec::with_capacity(APPEARANCE_DIM);

    let mut rgb = [0.0f64; 3];
    let mut labm = [0.0f64; 3];
    let mut hs = [0.0f64; 2];
    let mut lab_hist = [[0.0f64; LAB_HIST_BINS]; 3];
    for &p in &slice.pixels {
        let p = p as usize;
        let c = [frame.rgb[3 * p], frame.rgb[3 * p + 1], frame.rgb[3 * p + 2]];
        for k in 0..3 {
            rgb[k] += c[k] as f64 / 255.0;
        }
        let l = lab.lab[p];
        for k in 0..3 {
            labm[k] += l[k] as f64 / 100.0;
        }
        let (hue, sat) = rgb_to_hue_sat(c);
        hs[0] += hue;
        hs[1] += sat;
        lab_hist[0][hist_bin(l[0] as f64, 0.0, 100.0, LAB_HIST_BINS)] += 1.0;
        lab_hist[1][hist_bin(l[1] as f64, -100.0, 100.0, LAB_HIST_BINS)] += 1.0;
        lab_hist[2][hist_bin(l[2] as f64, -100.0, 100.0, LAB_HIST_BINS)] += 1.0;
    }
    out.extend(rgb.iter().map(|x| x / n));
    out.extend(labm.iter().map(|x| x / n));
    out.extend(hs.iter().map(|x| x / n));
    for hist in &lab_hist {
        out.extend(hist.iter().map(|x| x / n));
    }

    // Gradient of L using only neighbours inside the segment.
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && region_map[y as usize * w + x as usize] == slice.region
    };
    let lum = |x: isize, y: isize| lab.lab[y as usize * w + x as usize][0] as f64;
    let diff = |x: isize, y: isize, dx: isize, dy: isize| -> f64 {
        match (inside(x - dx, y - dy), inside(x + dx, y + dy)) {
            (true, true) => (lum(x + dx, y + dy) - lum(x - dx, y - dy)) / 2.0,
            (false, true) => lum(x + dx, y + dy) - lum(x, y),
            (true, false) => lum(x, y) - lum(x - dx, y - dy),
            (false, false) => 0.0,
        }
    };
    let mut tex = [0.0f64; TEXTURE_BINS];
    for &p in &slice.pixels {
        let (x, y) = ((p as usize % w) as isize, (p as usize / w) as isize);
        let gx = diff(x, y, 1, 0);
        let gy = diff(x, y, 0, 1);
        let mag = gx.hypot(gy);
        if mag == 0.0 {
            continue;
        }
        let a = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
        let b = ((a / std::f64::consts::PI * TEXTURE_BINS as f64).floor() as usize).min(TEXTURE_BINS - 1);
        tex[b] += mag;
    }
    out.extend(tex.iter().map(|x| x / n));
    let total: f64 = tex.iter().sum();
    let entropy = if total > 0.0 {
        -tex.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| {
                let q = x / total;
                q * q.ln()
            })
            .sum::<f64>()
    } else {
        0.0
    };
    out.push(entropy.max(0.0));

    let (wf, hf) = (w as f64, h as f64);
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut persp = 0.0;
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut ys = Vec::with_capacity(slice.pixels.len());
    for &p in &slice.pixels {
        let (x, y) = (p as usize % w, p as usize / w);
        let nx = (x as f64 + 0.5) / wf;
        let ny = (y as f64 + 0.5) / hf;
        cx += nx;
        cy += ny;
        persp += (nx - 0.5).abs();
        ys.push(ny);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    ys.sort_by(f64::total_cmp);
    out.extend([cx / n, cy / n]);
    out.extend([x0 as f64 / wf, y0 as f64 / hf, (x1 + 1) as f64 / wf, (y1 + 1) as f64 / hf]);
    out.push(n / (wf * hf));
    out.extend([nearest_rank(&ys, 0.1), nearest_rank(&ys, 0.9)]);
    out.push(persp / n);
    out.extend([0.0; PADDING]);
    debug_assert_eq!(out.len(), APPEARANCE_DIM);
    Ok(out)
}

fn mean_flow(f: &FlowField, pixels: &[u32]) -> [f64; 2] {
    let n = pixels.len() as f64;
    let mut m = [0.0; 2];
    for &p in pixels {
        m[0] += f.u[p as usize] as f64;
        m[1] += f.v[p as usize] as f64;
    }
    [m[0] / n, m[1] / n]
}

/// Per-offset motion values of one segment, before layout.
#[derive(Debug, Clone, Copy)]
struct OffsetValues {
    flow_hist: [f64; HIST_BINS],
    diff_hist: [[[f64; HIST_BINS]; 2]; 3],
    mean_flow: [f64; 2],
    loc_mean: [f64; 2],
    loc_p10: [f64; 2],
    loc_p90: [f64; 2],
}

impl OffsetValues {
    fn zero() -> Self {
        OffsetValues {
            flow_hist: [0.0; HIST_BINS],
            diff_hist: [[[0.0; HIST_BINS]; 2]; 3],
            mean_flow: [0.0; 2],
            loc_mean: [0.0; 2],
            loc_p10: [0.0; 2],
            loc_p90: [0.0; 2],
        }
    }
}

/// Lays out per-offset values (one entry per offset in [`OFFSETS`]) into the
/// 363 motion values. `min_flow[o]` is the componentwise minimum mean flow
/// over the segments of the frame.
fn motion_layout(per: &[OffsetValues; 3], min_flow: &[[f64; 2]; 3], magnitude_from: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(MOTION_DIM);
    for v in per {
        out.extend(v.flow_hist);
    }
    for v in per {
        for k in &v.diff_hist {
            for axis in k {
                out.extend(axis.iter());
            }
        }
    }
    for (v, m) in per.iter().zip(min_flow) {
        out.extend([v.mean_flow[0] - m[0], v.mean_flow[1] - m[1]]);
    }
    for v in per {
        out.extend(v.loc_mean);
    }
    for v in per {
        out.extend([v.loc_p10[0], v.loc_p10[1], v.loc_p90[0], v.loc_p90[1]]);
    }
    let m = &per[magnitude_from];
    out.extend([
        m.loc_mean[0].hypot(m.loc_mean[1]),
        m.loc_p10[0].hypot(m.loc_p10[1]),
        m.loc_p90[0].hypot(m.loc_p90[1]),
    ]);
    debug_assert_eq!(out.len(), MOTION_DIM);
    out
}

/// Region locations of every frame at one level.
fn level_locations(h: &SegmentationHierarchy, level: usize) -> Vec<HashMap<u32, Location>> {
    let w = h.base.width as usize;
    (0..h.base.frames)
        .into_par_iter()
        .map(|j| {
            h.frame_slices(level, j)
                .iter()
                .map(|s| (s.region, location(&s.pixels, w)))
                .collect()
        })
        .collect()
}

/// Features of the segments of frame `j` at `level` accepted by `keep`.
fn frame_features(
    ctx: &VideoFeatureContext,
    h: &SegmentationHierarchy,
    level: usize,
    j: usize,
    locs: &[HashMap<u32, Location>],
    keep: &(dyn Fn(usize, u32) -> bool + Sync),
) -> Result<Vec<SegmentFrameFeatures>, FeatureError> {
    let slices = h.frame_slices(level, j);
    let region_map = h.region_map(level, j);
    let motions = &ctx.motion[j];
    // The minimum runs over every segment of the frame, kept or not.
    let mut min_flow = [[f64::INFINITY; 2]; 3];
    let mut mean_flows: Vec<Vec<[f64; 2]>> = Vec::with_capacity(motions.len());
    for (oi, om) in motions.iter().enumerate() {
        let means: Vec<[f64; 2]> = slices.iter().map(|s| mean_flow(&om.motion, &s.pixels)).collect();
        for m in &means {
            min_flow[oi][0] = min_flow[oi][0].min(m[0]);
            min_flow[oi][1] = min_flow[oi][1].min(m[1]);
        }
        mean_flows.push(means);
    }
    for oi in motions.len()..3 {
        min_flow[oi] = if oi == 0 { [0.0; 2] } else { min_flow[oi - 1] };
    }

    let mut out = Vec::new();
    for (si, s) in slices.iter().enumerate() {
        if !keep(j, s.region) {
            continue;
        }
        let mut values = appearance_features(s, &ctx.frames[j], &ctx.lab[j], &region_map)?;
        let here = locs[j][&s.region];
        let mut per = [OffsetValues::zero(); 3];
        for (oi, om) in motions.iter().enumerate() {
            let mut v = OffsetValues::zero();
            v.flow_hist = oriented_histogram(&om.motion.u, &om.motion.v, &s.pixels);
            for (ki, d) in om.diffs.iter().enumerate() {
                v.diff_hist[ki][0] = oriented_histogram(&d.dxu, &d.dxv, &s.pixels);
                v.diff_hist[ki][1] = oriented_histogram(&d.dyu, &d.dyv, &s.pixels);
            }
            v.mean_flow = mean_flows[oi][si];
            let then = (j - om.offset..j).find_map(|k| locs[k].get(&s.region));
            if let Some(t) = then {
                for c in 0..2 {
                    v.loc_mean[c] = here.mean[c] - t.mean[c];
                    v.loc_p10[c] = here.p10[c] - t.p10[c];
                    v.loc_p90[c] = here.p90[c] - t.p90[c];
                }
            }
            per[oi] = v;
        }
        // Offsets reaching before the first frame reuse the nearest valid one.
        for oi in motions.len().max(1)..3 {
            per[oi] = per[oi - 1];
        }
        let magnitude_from = motions.len().max(1) - 1;
        values.extend(motion_layout(&per, &min_flow, magnitude_from));
        out.push(SegmentFrameFeatures {
            segment_id: s.region,
            frame: j,
            level,
            values: values.into_iter().map(|x| x as f32).collect(),
        });
    }
    Ok(out)
}

/// Features of every segment in every frame at `level`, grouped by frame.
pub fn extract_level_features(
    ctx: &VideoFeatureContext,
    h: &SegmentationHierarchy,
    level: usize,
) -> Result<Vec<Vec<SegmentFrameFeatures>>, FeatureError> {
    extract_level_features_where(ctx, h, level, &|_, _| true)
}

/// As [`extract_level_features`] but only for the `(frame, segment)` pairs
/// accepted by `keep`.
pub fn extract_level_features_where(
    ctx: &VideoFeatureContext,
    h: &SegmentationHierarchy,
    level: usize,
    keep: &(dyn Fn(usize, u32) -> bool + Sync),
) -> Result<Vec<Vec<SegmentFrameFeatures>>, FeatureError> {
    check_context(ctx, h)?;
    let locs = level_locations(h, level);
    (0..ctx.num_frames())
        .into_par_iter()
        .map(|j| frame_features(ctx, h, level, j, &locs, keep))
        .collect()
}

fn check_context(ctx: &VideoFeatureContext, h: &SegmentationHierarchy) -> Result<(), FeatureError> {
    if (ctx.width, ctx.height, ctx.num_frames()) != (h.base.width, h.base.height, h.base.frames) {
        return Err(FeatureError::DimensionMismatch(format!(
            "video {}x{}x{} vs segmentation {}x{}x{}",
            ctx.width,
            ctx.height,
            ctx.num_frames(),
            h.base.width,
            h.base.height,
            h.base.frames
        )));
    }
    Ok(())
}

/// Path of the cache file for `(level, frame)` under `root`.
pub fn feature_cache_path(root: &Path, level: usize, frame: usize) -> PathBuf {
    root.join("features").join(level.to_string()).join(format!("{frame}.bin"))
}

/// Little-endian: record count `u32`, then per record the segment id `u32`
/// and [`FEATURE_DIM`] `f32` values.
pub fn write_features<W: Write>(mut w: W, records: &[SegmentFrameFeatures]) -> Result<(), FeatureError> {
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        if r.values.len() != FEATURE_DIM {
            return Err(FeatureError::DimensionMismatch(format!(
                "record has {} values, expected {FEATURE_DIM}",
                r.values.len()
            )));
        }
        w.write_all(&r.segment_id.to_le_bytes())?;
        for x in &r.values {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features<R: Read>(mut r: R, level: usize, frame: usize) -> Result<Vec<SegmentFrameFeatures>, FeatureError> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    let mut buf = vec![0u8; 4 * FEATURE_DIM];
    for _ in 0..count {
        r.read_exact(&mut b4)
            .map_err(|_| FeatureError::Corrupt("truncated record header".into()))?;
        let segment_id = u32::from_le_bytes(b4);
        r.read_exact(&mut buf)
            .map_err(|_| FeatureError::Corrupt("truncated record".into()))?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(SegmentFrameFeatures {
            segment_id,
            frame,
            level,
            values,
        });
    }
    if r.read(&mut b4)? != 0 {
        return Err(FeatureError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_feature_cache(root: &Path, level: usize, frame: usize, records: &[SegmentFrameFeatures]) -> Result<(), FeatureError> {
    let path = feature_cache_path(root, level, frame);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = BufWriter::new(fs::File::create(&path)?);
    write_features(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_feature_cache(root: &Path, level: usize, frame: usize) -> Result<Vec<SegmentFrameFeatures>, FeatureError> {
    let f = fs::File::open(feature_cache_path(root, level, frame))?;
    read_features(BufReader::new(f), level, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::Oversegmentation;

    fn gray_frame(w: u32, h: u32, g: u8) -> Frame {
        Frame::filled(0, w, h, [g, g, g])
    }

    fn full_slice(w: u32, h: u32) -> SegmentSlice {
        SegmentSlice {
            region: 0,
            pixels: (0..w * h).collect(),
            area: (w * h) as usize,
        }
    }

    #[test]
    fn layout_dimensions() {
        let l = layout();
        let motion: Vec<usize> = l.iter().skip_while(|b| b.name != "flow_histogram").map(|b| b.len).collect();
        assert_eq!(motion, vec![48, 288, 6, 6, 12, 3]);
        assert_eq!(motion.iter().sum::<usize>(), MOTION_DIM);
        let last = l.last().unwrap();
        assert_eq!(last.start + last.len, FEATURE_DIM);
        assert_eq!(block("flow_histogram").unwrap().start, APPEARANCE_DIM);
    }

    #[test]
    fn flow_histogram_examples() {
        let s = full_slice(8, 8);
        let h = flow_histogram(&FlowField::uniform(8, 8, 1.0, 0.0), &s).unwrap();
        assert_eq!(h[0], 1.0);
        assert!(h[1..].iter().all(|&x| x == 0.0));
        let h = flow_histogram(&FlowField::uniform(8, 8, 0.0, 0.0), &s).unwrap();
        assert!(h.iter().all(|&x| x == 0.0));
        let h = flow_histogram(&FlowField::uniform(8, 8, 0.0, 2.0), &s).unwrap();
        assert_eq!(h[4], 2.0);
        assert_eq!(h.iter().sum::<f64>(), 2.0);
        let empty = SegmentSlice {
            region: 3,
            pixels: vec![],
            area: 0,
        };
        assert!(matches!(
            flow_histogram(&FlowField::uniform(8, 8, 1.0, 0.0), &empty),
            Err(FeatureError::EmptySegment(3))
        ));
    }

    #[test]
    fn full_frame_gray_appearance() {
        let f = gray_frame(16, 12, 90);
        let lab = to_working_colorspace(&f);
        let a = appearance_features(&full_slice(16, 12), &f, &lab, &vec![0; 16 * 12]).unwrap();
        assert_eq!(a.len(), APPEARANCE_DIM);
        assert_eq!(a[0], a[1]);
        assert_eq!(a[1], a[2]);
        let c = block("centroid").unwrap().start;
        assert!((a[c] - 0.5).abs() < 1e-12 && (a[c + 1] - 0.5).abs() < 1e-12);
        let b = block("bounding_box").unwrap().start;
        assert_eq!(&a[b..b + 4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(a[block("area_fraction").unwrap().start], 1.0);
        assert_eq!(a[block("texture_entropy").unwrap().start], 0.0);
        let lh = block("lab_histogram").unwrap();
        for c in 0..3 {
            let s: f64 = a[lh.start + 10 * c..lh.start + 10 * (c + 1)].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_band_location() {
        let (w, h) = (20u32, 50u32);
        let f = gray_frame(w, h, 200);
        let lab = to_working_colorspace(&f);
        let mut map = vec![1u32; (w * h) as usize];
        let pixels: Vec<u32> = (0..w * 5).collect();
        pixels.iter().for_each(|&p| map[p as usize] = 0);
        let s = SegmentSlice {
            region: 0,
            area: pixels.len(),
            pixels,
        };
        let a = appearance_features(&s, &f, &lab, &map).unwrap();
        assert!(a[block("centroid").unwrap().start + 1] <= 0.1);
        let yp = block("y_percentiles").unwrap().start;
        assert!(a[yp] <= 0.1 && a[yp + 1] <= 0.1);
    }

    #[test]
    fn constant_slice_next_to_texture_has_zero_entropy() {
        let (w, h) = (10u32, 10u32);
        let mut f = gray_frame(w, h, 50);
        for y in 0..h {
            for x in 5..w {
                let g = if (x + y) % 2 == 0 { 0 } else { 255 };
                f.set_pixel(x, y, [g, g, g]);
            }
        }
        let lab = to_working_colorspace(&f);
        let map: Vec<u32> = (0..w * h).map(|p| if p % w < 5 { 0 } else { 1 }).collect();
        let pixels: Vec<u32> = (0..w * h).filter(|p| p % w < 5).collect();
        let s = SegmentSlice {
            region: 0,
            area: pixels.len(),
            pixels,
        };
        let a = appearance_features(&s, &f, &lab, &map).unwrap();
        assert_eq!(a[block("texture_entropy").unwrap().start], 0.0);
        let tex = block("texture_histogram").unwrap();
        assert!(a[tex.start..tex.start + tex.len].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let d: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        assert_eq!(nearest_rank(&d, 0.1), 1.0);
        assert_eq!(nearest_rank(&d, 0.9), 9.0);
        assert_eq!(nearest_rank(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn hue_sat() {
        assert_eq!(rgb_to_hue_sat([255, 0, 0]), (0.0, 1.0));
        let (h, s) = rgb_to_hue_sat([0, 0, 255]);
        assert!((h - 2.0 / 3.0).abs() < 1e-12 && s == 1.0);
        assert_eq!(rgb_to_hue_sat([9, 9, 9]), (0.0, 0.0));
    }

    /// A static textured video segmented into left/right halves.
    fn halves_hierarchy(w: u32, h: u32, frames: usize) -> SegmentationHierarchy {
        let labels: Vec<u32> = (0..frames)
            .flat_map(|_| (0..w * h).map(move |p| if p % w < w / 2 { 0 } else { 1 }))
            .collect();
        let base = Oversegmentation::from_labels(w, h, frames, labels).unwrap();
        SegmentationHierarchy::from_parts(base, vec![1.0], 1, vec![1], vec![vec![0, 1]]).unwrap()
    }

    #[test]
    fn static_video_has_zero_motion() {
        let (w, h) = (32u32, 32u32);
        let mut f = gray_frame(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let g = (128.0 + 60.0 * ((x as f32) * 0.7).sin() * ((y as f32) * 0.5).cos()) as u8;
                f.set_pixel(x, y, [g, g / 2, 255 - g]);
            }
        }
        let frames: Vec<Frame> = (0..7)
            .map(|i| {
                let mut g = f.clone();
                g.index = i;
                g
            })
            .collect();
        let seq = FrameSequence::from_frames("static", frames).unwrap();
        let ctx = VideoFeatureContext::compute(&seq, &FlowParams::default()).unwrap();
        let hier = halves_hierarchy(w, h, 7);
        for level in 0..2 {
            for frame in extract_level_features(&ctx, &hier, level).unwrap() {
                for seg in frame {
                    assert_eq!(seg.values.len(), FEATURE_DIM);
                    assert!(seg.motion().iter().all(|&x| x == 0.0), "frame {}", seg.frame);
                }
            }
        }
    }

    #[test]
    fn missing_offsets_copy_nearest_valid() {
        let (w, h) = (16u32, 16u32);
        let frames: Vec<Frame> = (0..4)
            .map(|i| {
                let mut f = Frame::filled(i, w, h, [0, 0, 0]);
                for y in 0..h {
                    for x in 0..w {
                        let g = ((x * 37 + y * 11 + i as u32 * 5) % 256) as u8;
                        f.set_pixel(x, y, [g, 255 - g, 128]);
                    }
                }
                f
            })
            .collect();
        let seq = FrameSequence::from_frames("v", frames).unwrap();
        let ctx = VideoFeatureContext::compute(&seq, &FlowParams::default()).unwrap();
        let hier = halves_hierarchy(w, h, 4);
        let feats = extract_level_features(&ctx, &hier, 0).unwrap();
        let m = feats[3][0].motion();
        // offsets 1 and 3 valid at j = 3; offset 5 copies offset 3
        assert_eq!(&m[32..48], &m[16..32]);
        assert_eq!(&m[48 + 192..48 + 288], &m[48 + 96..48 + 192]);
        let rel = 48 + 288;
        assert_eq!(&m[rel + 4..rel + 6], &m[rel + 2..rel + 4]);
        let pct = rel + 12;
        assert_eq!(&m[pct + 8..pct + 12], &m[pct + 4..pct + 8]);
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let rec = |id: u32| SegmentFrameFeatures {
            segment_id: id,
            frame: 4,
            level: 2,
            values: (0..FEATURE_DIM).map(|i| i as f32 * 0.5 - id as f32).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![rec(3), rec(9)];
        save_feature_cache(dir.path(), 2, 4, &recs).unwrap();
        assert!(dir.path().join("features/2/4.bin").exists());
        assert_eq!(load_feature_cache(dir.path(), 2, 4).unwrap(), recs);

        let mut bytes = Vec::new();
        write_features(&mut bytes, &recs).unwrap();
        assert_eq!(bytes.len(), 4 + 2 * (4 + 4 * FEATURE_DIM));
        assert!(matches!(
            read_features(&bytes[..bytes.len() - 1], 2, 4),
            Err(FeatureError::Corrupt(_))
        ));
        let short = SegmentFrameFeatures {
            values: vec![0.0; 5],
            ..rec(1)
        };
        assert!(write_features(Vec::new(), &[short]).is_err());
    }
}
