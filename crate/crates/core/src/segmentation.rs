//! Spatio-temporal over-segmentation of the voxel volume and the hierarchy of
//! super-regions built on top of it.
//!
//! Level 0 is a Felzenszwalb-Huttenlocher segmentation of the voxel graph
//! (4-connected in space, motion-compensated edges in time). Coarser levels
//! come from repeatedly segmenting the region graph, whose edge weights are
//! chi-squared distances between region colour and motion histograms.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense_flow::FlowField;
use crate::frame_store::{to_working_colorspace, FrameSequence, LabFrame};

#[derive(Debug, Error)]
pub enum SegError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("no flow field connects frames {0} and {1}")]
    MissingFlow(usize, usize),
    #[error("level fractions must be strictly increasing in (0, 1]: {0:?}")]
    BadFractions(Vec<f64>),
    #[error("level {0} does not exist")]
    BadLevel(usize),
    #[error("corrupt segmentation data: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegParams {
    /// Threshold constant of the voxel-graph pass, in Lab units.
    pub k: f32,
    /// Minimum supervoxel volume in voxels.
    pub min_size: usize,
    /// Spatial Gaussian pre-smoothing of the Lab frames (0 disables).
    pub smooth_sigma: f32,
    /// Threshold constant of the first region-graph round; doubles each round.
    pub region_k: f64,
}

impl Default for SegParams {
    fn default() -> Self {
        SegParams {
            k: 150.0,
            min_size: 40,
            smooth_sigma: 0.0,
            region_k: 0.1,
        }
    }
}

/// Disjoint sets with union by size; tracks the Felzenszwalb internal
/// difference of each set.
#[derive(Debug, Clone)]
struct DisjointSets {
    parent: Vec<u32>,
    size: Vec<u64>,
    internal: Vec<f64>,
}

impl DisjointSets {
    fn new(sizes: impl IntoIterator<Item = u64>) -> Self {
        let size: Vec<u64> = sizes.into_iter().collect();
        DisjointSets {
            parent: (0..size.len() as u32).collect(),
            internal: vec![0.0; size.len()],
            size,
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    /// Joins two roots; the larger set (ties: smaller id) becomes the root.
    fn union_roots(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = {
            let (sa, sb) = (self.size[a as usize], self.size[b as usize]);
            if sa > sb || (sa == sb && a < b) {
                (a, b)
            } else {
                (b, a)
            }
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        let int = self.internal[a as usize]
            .max(self.internal[b as usize])
            .max(weight);
        self.internal[big as usize] = int;
        big
    }

    /// Dense labels numbered by first occurrence of each set.
    fn dense_labels(&mut self) -> (Vec<u32>, usize) {
        let n = self.parent.len();
        let mut map = vec![u32::MAX; n];
        let mut next = 0u32;
        let mut out = Vec::with_capacity(n);
        for i in 0..n as u32 {
            let r = self.find(i) as usize;
            if map[r] == u32::MAX {
                map[r] = next;
                next += 1;
            }
            out.push(map[r]);
        }
        (out, next as usize)
    }
}

#[derive(Debug, Clone, Copy)]
struct Edge {
    w: f64,
    a: u32,
    b: u32,
}

fn sort_edges(edges: &mut [Edge]) {
    edges.sort_by(|x, y| {
        x.w.total_cmp(&y.w)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
}

/// Felzenszwalb merge pass with threshold `k / |C|`.
fn felzenszwalb(sets: &mut DisjointSets, edges: &[Edge], k: f64) {
    for e in edges {
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra == rb {
            continue;
        }
        let ta = sets.internal[ra as usize] + k / sets.size[ra as usize] as f64;
        let tb = sets.internal[rb as usize] + k / sets.size[rb as usize] as f64;
        if e.w <= ta.min(tb) {
            sets.union_roots(ra, rb, e.w);
        }
    }
}

/// Level-0 supervoxel labelling of a `width x height x frames` volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Oversegmentation {
    pub width: u32,
    pub height: u32,
    pub frames: usize,
    /// Supervoxel id per voxel, index `t * w * h + y * w + x`.
    pub labels: Vec<u32>,
    pub num_supervoxels: usize,
    /// Voxel count per supervoxel.
    pub volumes: Vec<u64>,
}

impl Oversegmentation {
    pub fn from_labels(width: u32, height: u32, frames: usize, labels: Vec<u32>) -> Result<Self, SegError> {
        if labels.len() != width as usize * height as usize * frames || labels.is_empty() {
            return Err(SegError::Corrupt("label volume size".into()));
        }
        let n = *labels.iter().max().unwrap() as usize + 1;
        let mut volumes = vec![0u64; n];
        for &l in &labels {
            volumes[l as usize] += 1;
        }
        if volumes.contains(&0) {
            return Err(SegError::Corrupt("supervoxel ids are not dense".into()));
        }
        Ok(Oversegmentation {
            width,
            height,
            frames,
            labels,
            num_supervoxels: n,
            volumes,
        })
    }

    pub fn frame_area(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn frame_labels(&self, j: usize) -> &[u32] {
        let a = self.frame_area();
        &self.labels[j * a..(j + 1) * a]
    }
}

fn smooth_lab(lab: &LabFrame, sigma: f32) -> LabFrame {
    if sigma <= 0.0 {
        return lab.clone();
    }
    let radius = (sigma * 3.0).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    let (w, h) = (lab.width as isize, lab.height as isize);
    let at = |data: &[[f32; 3]], x: isize, y: isize| data[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut tmp = vec![[0.0f32; 3]; lab.lab.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, c) in k.iter().enumerate() {
                let p = at(&lab.lab, x + i as isize - radius, y);
                for ch in 0..3 {
                    acc[ch] += c * p[ch];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![[0.0f32; 3]; lab.lab.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f32; 3];
            for (i, c) in k.iter().enumerate() {
                let p = at(&tmp, x, y + i as isize - radius);
                for ch in 0..3 {
                    acc[ch] += c * p[ch];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    LabFrame {
        width: lab.width,
        height: lab.height,
        lab: out,
    }
}

#[inline]
fn lab_dist(a: [f32; 3], b: [f32; 3]) -> f64 {
    let d0 = (a[0] - b[0]) as f64;
    let d1 = (a[1] - b[1]) as f64;
    let d2 = (a[2] - b[2]) as f64;
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

/// Finds the flow joining frames `t` and `t + 1`, in either direction.
fn pair_flow(flows: &[FlowField], t: usize) -> Option<&FlowField> {
    flows.iter().find(|f| {
        (f.from_index == t && f.to_index == t + 1) || (f.from_index == t + 1 && f.to_index == t)
    })
}

/// Temporal neighbour of pixel `i` in `flow`'s source frame: the rounded
/// flow-displaced position, limited to the 3x3 neighbourhood so that every
/// graph edge joins 26-adjacent voxels.
#[inline]
fn temporal_target(flow: &FlowField, x: usize, y: usize) -> usize {
    let w = flow.width as usize;
    let h = flow.height as usize;
    let i = y * w + x;
    let dx = flow.u[i].round().clamp(-1.0, 1.0) as isize;
    let dy = flow.v[i].round().clamp(-1.0, 1.0) as isize;
    let tx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
    let ty = (y as isize + dy).clamp(0, h as isize - 1) as usize;
    ty * w + tx
}

/// Over-segments the space-time volume of `seq` into supervoxels.
pub fn oversegment(
    seq: &FrameSequence,
    flows: &[FlowField],
    params: &SegParams,
) -> Result<Oversegmentation, SegError> {
    let t_count = seq.count();
    if t_count == 0 {
        return Err(SegError::EmptySequence);
    }
    let (w, h) = (seq.width as usize, seq.height as usize);
    let area = w * h;
    let labs: Vec<LabFrame> = seq
        .frames()
        .iter()
        .map(|f| smooth_lab(&to_working_colorspace(f), params.smooth_sigma))
        .collect();

    let mut edges = Vec::with_capacity(t_count * area * 3);
    for t in 0..t_count {
        let lab = &labs[t].lab;
        let base = (t * area) as u32;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    edges.push(Edge {
                        w: lab_dist(lab[i], lab[i + 1]),
                        a: base + i as u32,
                        b: base + i as u32 + 1,
                    });
                }
                if y + 1 < h {
                    edges.push(Edge {
                        w: lab_dist(lab[i], lab[i + w]),
                        a: base + i as u32,
                        b: base + (i + w) as u32,
                    });
                }
            }
        }
        if t + 1 < t_count {
            let flow = pair_flow(flows, t).ok_or(SegError::MissingFlow(t, t + 1))?;
            let (src, dst) = (flow.from_index, flow.to_index);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let j = temporal_target(flow, x, y);
                    let a = (src * area + i) as u32;
                    let b = (dst * area + j) as u32;
                    edges.push(Edge {
                        w: lab_dist(labs[src].lab[i], labs[dst].lab[j]),
                        a: a.min(b),
                        b: a.max(b),
                    });
                }
            }
        }
    }
    sort_edges(&mut edges);

    let mut sets = DisjointSets::new(std::iter::repeat_n(1, t_count * area));
    felzenszwalb(&mut sets, &edges, params.k as f64);
    let min_size = params.min_size as u64;
    for e in &edges {
        let ra = sets.find(e.a);
        let rb = sets.find(e.b);
        if ra != rb && (sets.size[ra as usize] < min_size || sets.size[rb as usize] < min_size) {
            sets.union_roots(ra, rb, e.w);
        }
    }
    let (labels, _) = sets.dense_labels();
    Oversegmentation::from_labels(seq.width, seq.height, t_count, labels)
}

pub const LAB_BINS: usize = 20;
pub const FLOW_BINS: usize = 16;

/// Normalised colour and motion histograms of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    /// 20 L bins, then 20 a bins, then 20 b bins; sums to 1.
    pub lab_histogram: Vec<f64>,
    /// Magnitude-weighted orientation histogram; sums to 1 (uniform for a
    /// motionless region).
    pub flow_histogram: Vec<f64>,
}

const CHI2_EPS: f64 = 1e-10;

/// `0.5 * sum((a - b)^2 / (a + b + eps))`.
pub fn chi_squared(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y) / (x + y + CHI2_EPS))
        .sum::<f64>()
}

impl RegionDescriptor {
    /// Combined distance `1 - (1 - d_colour)(1 - d_motion)`, in [0, 1].
    pub fn distance(&self, other: &RegionDescriptor) -> f64 {
        let dc = chi_squared(&self.lab_histogram, &other.lab_histogram).clamp(0.0, 1.0);
        let dm = chi_squared(&self.flow_histogram, &other.flow_histogram).clamp(0.0, 1.0);
        1.0 - (1.0 - dc) * (1.0 - dm)
    }
}

/// Unnormalised histogram mass of a region; sums under merging.
#[derive(Debug, Clone)]
struct DescriptorMass {
    lab: [f64; 3 * LAB_BINS],
    flow: [f64; FLOW_BINS],
}

impl DescriptorMass {
    fn zero() -> Self {
        DescriptorMass {
            lab: [0.0; 3 * LAB_BINS],
            flow: [0.0; FLOW_BINS],
        }
    }

    fn add(&mut self, o: &DescriptorMass) {
        for (a, b) in self.lab.iter_mut().zip(o.lab.iter()) {
            *a += b;
        }
        for (a, b) in self.flow.iter_mut().zip(o.flow.iter()) {
            *a += b;
        }
    }

    fn normalized(&self) -> RegionDescriptor {
        let ls: f64 = self.lab.iter().sum();
        let fs: f64 = self.flow.iter().sum();
        RegionDescriptor {
            lab_histogram: self.lab.iter().map(|x| x / ls.max(1e-300)).collect(),
            flow_histogram: if fs > 1e-9 {
                self.flow.iter().map(|x| x / fs).collect()
            } else {
                vec![1.0 / FLOW_BINS as f64; FLOW_BINS]
            },
        }
    }
}

#[inline]
fn lab_bin(value: f32, lo: f32, hi: f32) -> usize {
    let t = ((value - lo) / (hi - lo) * LAB_BINS as f32).floor();
    (t.max(0.0) as usize).min(LAB_BINS - 1)
}

/// Orientation bin in `[0, bins)` of a non-zero vector; angle measured
/// counter-clockwise from +x in `[0, 2pi)`.
#[inline]
pub fn orientation_bin(dx: f32, dy: f32, bins: usize) -> usize {
    let mut a = (dy as f64).atan2(dx as f64);
    if a < 0.0 {
        a += std::f64::consts::TAU;
    }
    ((a / std::f64::consts::TAU * bins as f64).floor() as usize).min(bins - 1)
}

/// Per-frame motion used by the region descriptors: displacement towards the
/// next frame (or away from the previous one for the last frame).
fn frame_motion(flows: &[FlowField], t: usize, area: usize) -> Option<(Vec<f32>, Vec<f32>)> {
    for f in flows {
        if f.from_index == t && f.to_index.abs_diff(t) == 1 {
            let sign = if f.to_index > t { 1.0 } else { -1.0 };
            return Some((
                f.u.iter().map(|x| x * sign).collect(),
                f.v.iter().map(|x| x * sign).collect(),
            ));
        }
    }
    for f in flows {
        if f.to_index == t && f.from_index.abs_diff(t) == 1 && f.u.len() == area {
            let sign = if f.to_index > f.from_index { 1.0 } else { -1.0 };
            return Some((
                f.u.iter().map(|x| x * sign).collect(),
                f.v.iter().map(|x| x * sign).collect(),
            ));
        }
    }
    None
}

fn supervoxel_masses(base: &Oversegmentation, seq: &FrameSequence, flows: &[FlowField]) -> Vec<DescriptorMass> {
    let area = base.frame_area();
    let mut mass = vec![DescriptorMass::zero(); base.num_supervoxels];
    for t in 0..base.frames {
        let lab = to_working_colorspace(seq.frame(t));
        let motion = frame_motion(flows, t, area);
        let labels = base.frame_labels(t);
        for i in 0..area {
            let m = &mut mass[labels[i] as usize];
            let [l, a, b] = lab.lab[i];
            m.lab[lab_bin(l, 0.0, 100.0)] += 1.0;
            m.lab[LAB_BINS + lab_bin(a, -100.0, 100.0)] += 1.0;
            m.lab[2 * LAB_BINS + lab_bin(b, -100.0, 100.0)] += 1.0;
            if let Some((u, v)) = &motion {
                let mag = (u[i] as f64).hypot(v[i] as f64);
                if mag > 0.0 {
                    m.flow[orientation_bin(u[i], v[i], FLOW_BINS)] += mag;
                }
            }
        }
    }
    mass
}

/// Unique adjacent supervoxel pairs under 6-connectivity.
fn supervoxel_adjacency(base: &Oversegmentation) -> Vec<(u32, u32)> {
    let (w, h) = (base.width as usize, base.height as usize);
    let area = w * h;
    let mut pairs = BTreeSet::new();
    let mut push = |a: u32, b: u32| {
        if a != b {
            pairs.insert((a.min(b), a.max(b)));
        }
    };
    for t in 0..base.frames {
        for y in 0..h {
            for x in 0..w {
                let i = t * area + y * w + x;
                let l = base.labels[i];
                if x + 1 < w {
                    push(l, base.labels[i + 1]);
                }
                if y + 1 < h {
                    push(l, base.labels[i + w]);
                }
                if t + 1 < base.frames {
                    push(l, base.labels[i + area]);
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Supervoxels plus nested coarser levels addressed by fraction of the
/// hierarchy height.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationHierarchy {
    pub base: Oversegmentation,
    pub level_fractions: Vec<f64>,
    /// Number of region-graph rounds needed to reach a single region.
    pub hierarchy_height: usize,
    /// Round index selected by each fraction.
    pub level_rounds: Vec<usize>,
    /// `parents[l][r]`: id at level `l + 1` of region `r` at level `l`
    /// (level 0 is the supervoxel level).
    pub parents: Vec<Vec<u32>>,
    /// `maps[l][s]`: region at level `l` containing supervoxel `s`.
    maps: Vec<Vec<u32>>,
    region_counts: Vec<usize>,
}

/// One region's footprint in one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentSlice {
    pub region: u32,
    /// Linear pixel indices `y * width + x`, ascending.
    pub pixels: Vec<u32>,
    pub area: usize,
}

fn validate_fractions(fr: &[f64]) -> Result<(), SegError> {
    let ok = fr.iter().all(|&f| f > 0.0 && f <= 1.0) && fr.windows(2).all(|p| p[0] < p[1]);
    if ok {
        Ok(())
    } else {
        Err(SegError::BadFractions(fr.to_vec()))
    }
}

/// Builds the super-region hierarchy over `base`.
pub fn build_hierarchy(
    base: Oversegmentation,
    seq: &FrameSequence,
    flows: &[FlowField],
    level_fractions: &[f64],
    params: &SegParams,
) -> Result<SegmentationHierarchy, SegError> {
    validate_fractions(level_fractions)?;
    let mut mass = supervoxel_masses(&base, seq, flows);
    let mut adjacency = supervoxel_adjacency(&base);
    let mut sizes: Vec<u64> = vec![1; base.num_supervoxels];

    // rounds[r] maps regions of round r to round r + 1.
    let mut rounds: Vec<Vec<u32>> = Vec::new();
    let mut k = params.region_k;
    while mass.len() > 1 {
        let descriptors: Vec<RegionDescriptor> = mass.iter().map(|m| m.normalized()).collect();
        let mut edges: Vec<Edge> = adjacency
            .iter()
            .map(|&(a, b)| Edge {
                w: descriptors[a as usize].distance(&descriptors[b as usize]),
                a,
                b,
            })
            .collect();
        sort_edges(&mut edges);
        let mut sets = DisjointSets::new(sizes.iter().copied());
        felzenszwalb(&mut sets, &edges, k);
        let (map, n) = sets.dense_labels();

        let mut next_mass = vec![DescriptorMass::zero(); n];
        let mut next_sizes = vec![0u64; n];
        for (r, &p) in map.iter().enumerate() {
            next_mass[p as usize].add(&mass[r]);
            next_sizes[p as usize] += sizes[r];
        }
        let next_adj: BTreeSet<(u32, u32)> = adjacency
            .iter()
            .filter_map(|&(a, b)| {
                let (pa, pb) = (map[a as usize], map[b as usize]);
                (pa != pb).then(|| (pa.min(pb), pa.max(pb)))
            })
            .collect();
        rounds.push(map);
        mass = next_mass;
        sizes = next_sizes;
        adjacency = next_adj.into_iter().collect();
        k *= 2.0;
        if rounds.len() > 4096 {
            return Err(SegError::Corrupt("region graph failed to converge".into()));
        }
        if adjacency.is_empty() && mass.len() > 1 {
            // disconnected volume cannot happen for a grid, but never loop forever
            return Err(SegError::Corrupt("region graph is disconnected".into()));
        }
    }
    let height = rounds.len();
    let level_rounds: Vec<usize> = level_fractions
        .iter()
        .map(|&f| {
            if height == 0 {
                0
            } else {
                ((f * height as f64).round() as usize).clamp(1, height)
            }
        })
        .collect();

    // Compose round maps between consecutive selected rounds.
    let mut parents = Vec::with_capacity(level_rounds.len());
    let mut prev_round = 0usize;
    let mut prev_count = base.num_supervoxels;
    for &r in &level_rounds {
        let mut map: Vec<u32> = (0..prev_count as u32).collect();
        for round in &rounds[prev_round..r] {
            for m in map.iter_mut() {
                *m = round[*m as usize];
            }
        }
        prev_count = map.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
        parents.push(map);
        prev_round = r;
    }
    SegmentationHierarchy::from_parts(base, level_fractions.to_vec(), height, level_rounds, parents)
}

impl SegmentationHierarchy {
    pub fn from_parts(
        base: Oversegmentation,
        level_fractions: Vec<f64>,
        hierarchy_height: usize,
        level_rounds: Vec<usize>,
        parents: Vec<Vec<u32>>,
    ) -> Result<Self, SegError> {
        validate_fractions(&level_fractions)?;
        if parents.len() != level_fractions.len() || level_rounds.len() != level_fractions.len() {
            return Err(SegError::Corrupt("one parent map per level fraction".into()));
        }
        let mut maps = vec![(0..base.num_supervoxels as u32).collect::<Vec<u32>>()];
        let mut region_counts = vec![base.num_supervoxels];
        for (l, p) in parents.iter().enumerate() {
            if p.len() != region_counts[l] {
                return Err(SegError::Corrupt(format!("parent map {l} has wrong length")));
            }
            let n = p.iter().map(|&x| x as usize + 1).max().unwrap_or(0);
            let mut seen = vec![false; n];
            p.iter().for_each(|&x| seen[x as usize] = true);
            if seen.iter().any(|s| !s) {
                return Err(SegError::Corrupt(format!("level {} ids not dense", l + 1)));
            }
            let prev = maps.last().unwrap();
            maps.push(prev.iter().map(|&r| p[r as usize]).collect());
            region_counts.push(n);
        }
        Ok(SegmentationHierarchy {
            base,
            level_fractions,
            hierarchy_height,
            level_rounds,
            parents,
            maps,
            region_counts,
        })
    }

    /// Number of levels including the supervoxel level.
    pub fn num_levels(&self) -> usize {
        self.maps.len()
    }

    pub fn num_regions(&self, level: usize) -> usize {
        self.region_counts[level]
    }

    /// Level index (1-based) whose fraction equals `fraction`.
    pub fn level_for_fraction(&self, fraction: f64) -> Option<usize> {
        self.level_fractions
            .iter()
            .position(|&f| (f - fraction).abs() < 1e-9)
            .map(|i| i + 1)
    }

    /// Map from supervoxel id to region id at `level`.
    pub fn supervoxel_map(&self, level: usize) -> &[u32] {
        &self.maps[level]
    }

    #[inline]
    pub fn region_of(&self, level: usize, supervoxel: u32) -> u32 {
        self.maps[level][supervoxel as usize]
    }

    /// Supervoxels making up `region` at `level`.
    pub fn descendants(&self, level: usize, region: u32) -> Result<Vec<u32>, SegError> {
        if level >= self.num_levels() {
            return Err(SegError::BadLevel(level));
        }
        Ok(self.maps[level]
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == region)
            .map(|(s, _)| s as u32)
            .collect())
    }

    /// Region id per pixel of frame `j` at `level`.
    pub fn region_map(&self, level: usize, j: usize) -> Vec<u32> {
        let map = &self.maps[level];
        self.base.frame_labels(j).iter().map(|&s| map[s as usize]).collect()
    }

    /// The non-empty per-frame footprints of all regions at `level`, sorted
    /// by region id.
    pub fn frame_slices(&self, level: usize, j: usize) -> Vec<SegmentSlice> {
        let map = &self.maps[level];
        let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); self.region_counts[level]];
        for (i, &s) in self.base.frame_labels(j).iter().enumerate() {
            buckets[map[s as usize] as usize].push(i as u32);
        }
        buckets
            .into_iter()
            .enumerate()
            .filter(|(_, p)| !p.is_empty())
            .map(|(r, pixels)| SegmentSlice {
                region: r as u32,
                area: pixels.len(),
                pixels,
            })
            .collect()
    }

    /// Writes `seg/L0/frame_%06d.png` id maps and `hierarchy.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SegError> {
        let l0 = dir.join("seg").join("L0");
        fs::create_dir_all(&l0)?;
        for j in 0..self.base.frames {
            let ids = self.base.frame_labels(j);
            write_id_png(&l0.join(format!("frame_{j:06}.png")), self.base.width, self.base.height, ids)?;
        }
        let doc = HierarchyFile {
            width: self.base.width,
            height: self.base.height,
            frames: self.base.frames,
            num_supervoxels: self.base.num_supervoxels,
            level_fractions: self.level_fractions.clone(),
            hierarchy_height: self.hierarchy_height,
            level_rounds: self.level_rounds.clone(),
            parents: self.parents.clone(),
        };
        fs::write(dir.join("hierarchy.json"), serde_json::to_vec(&doc)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SegError> {
        let doc: HierarchyFile = serde_json::from_slice(&fs::read(dir.join("hierarchy.json"))?)?;
        let l0 = dir.join("seg").join("L0");
        let mut labels = Vec::with_capacity(doc.width as usize * doc.height as usize * doc.frames);
        for j in 0..doc.frames {
            let (w, h, ids) = read_id_png(&l0.join(format!("frame_{j:06}.png")))?;
            if (w, h) != (doc.width, doc.height) {
                return Err(SegError::Corrupt(format!("id map {j} has wrong size")));
            }
            labels.extend(ids);
        }
        let base = Oversegmentation::from_labels(doc.width, doc.height, doc.frames, labels)?;
        if base.num_supervoxels != doc.num_supervoxels {
            return Err(SegError::Corrupt("supervoxel count mismatch".into()));
        }
        Self::from_parts(base, doc.level_fractions, doc.hierarchy_height, doc.level_rounds, doc.parents)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFile {
    width: u32,
    height: u32,
    frames: usize,
    num_supervoxels: usize,
    level_fractions: Vec<f64>,
    hierarchy_height: usize,
    level_rounds: Vec<usize>,
    parents: Vec<Vec<u32>>,
}

/// Packs 24-bit ids into 8-bit RGB (`id = R << 16 | G << 8 | B`).
pub fn encode_ids_rgb(ids: &[u32]) -> Vec<u8> {
    ids.iter()
        .flat_map(|&id| [(id >> 16) as u8, (id >> 8) as u8, id as u8])
        .collect()
}

pub fn write_id_png(path: &Path, width: u32, height: u32, ids: &[u32]) -> Result<(), SegError> {
    image::save_buffer(path, &encode_ids_rgb(ids), width, height, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn read_id_png(path: &Path) -> Result<(u32, u32, Vec<u32>), SegError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let ids = img
        .into_raw()
        .chunks_exact(3)
        .map(|c| (c[0] as u32) << 16 | (c[1] as u32) << 8 | c[2] as u32)
        .collect();
    Ok((w, h, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame_store::Frame;

    fn static_flows(n: usize, w: u32, h: u32) -> Vec<FlowField> {
        (0..n.saturating_sub(1)).map(|t| FlowField::zeros(w, h, t, t + 1)).collect()
    }

    fn halves(frames: usize, w: u32, h: u32, right: [u8; 3]) -> FrameSequence {
        let fr = (0..frames)
            .map(|t| {
                let mut f = Frame::filled(t, w, h, [0, 0, 0]);
                for y in 0..h {
                    for x in w / 2..w {
                        f.set_pixel(x, y, right);
                    }
                }
                f
            })
            .collect();
        FrameSequence::from_frames("hh", fr).unwrap()
    }

    fn half_half(frames: usize, w: u32, h: u32) -> FrameSequence {
        halves(frames, w, h, [255, 255, 255])
    }

    /// Brute-force 26-connected components of a label volume.
    fn components_26(seg: &Oversegmentation) -> usize {
        let (w, h, t) = (seg.width as isize, seg.height as isize, seg.frames as isize);
        let mut seen = vec![false; seg.labels.len()];
        let mut count = 0;
        for start in 0..seg.labels.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            let lab = seg.labels[start];
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (z, y, x) = (i as isize / (w * h), (i as isize / w) % h, i as isize % w);
                for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                            if nz < 0 || ny < 0 || nx < 0 || nz >= t || ny >= h || nx >= w {
                                continue;
                            }
                            let j = (nz * w * h + ny * w + nx) as usize;
                            if !seen[j] && seg.labels[j] == lab {
                                seen[j] = true;
                                stack.push(j);
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn black_white_halves_give_two_supervoxels() {
        let seq = half_half(2, 8, 6);
        let params = SegParams { min_size: 4, ..Default::default() };
        let seg = oversegment(&seq, &static_flows(2, 8, 6), &params).unwrap();
        assert_eq!(seg.num_supervoxels, 2);
        assert_eq!(components_26(&seg), 2);
        assert_eq!(seg.volumes, vec![48, 48]);
    }

    #[test]
    fn uniform_video_is_one_supervoxel() {
        let fr = (0..3).map(|t| Frame::filled(t, 7, 5, [128, 128, 128])).collect();
        let seq = FrameSequence::from_frames("g", fr).unwrap();
        let seg = oversegment(&seq, &static_flows(3, 7, 5), &SegParams::default()).unwrap();
        assert_eq!(seg.num_supervoxels, 1);
    }

    #[test]
    fn oversized_min_size_forces_one_supervoxel() {
        let seq = half_half(2, 8, 6);
        let params = SegParams { min_size: 1000, ..Default::default() };
        let seg = oversegment(&seq, &static_flows(2, 8, 6), &params).unwrap();
        assert_eq!(seg.num_supervoxels, 1);
    }

    #[test]
    fn missing_flow_is_reported() {
        let seq = half_half(3, 4, 4);
        let flows = vec![FlowField::zeros(4, 4, 0, 1)];
        assert!(matches!(
            oversegment(&seq, &flows, &SegParams::default()),
            Err(SegError::MissingFlow(1, 2))
        ));
    }

    #[test]
    fn backward_flows_are_accepted() {
        let seq = half_half(3, 6, 4);
        let flows: Vec<_> = (1..3).map(|t| FlowField::zeros(6, 4, t, t - 1)).collect();
        let params = SegParams { min_size: 4, ..Default::default() };
        assert_eq!(oversegment(&seq, &flows, &params).unwrap().num_supervoxels, 2);
    }

    #[test]
    fn chi_squared_of_disjoint_histograms_is_one() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 0.5, 0.5];
        assert!((chi_squared(&a, &b) - 1.0).abs() < 1e-9);
        assert_eq!(chi_squared(&a, &a), 0.0);
    }

    #[test]
    fn dissimilar_pair_stays_separate_at_half_height() {
        // black vs pure green: L, a and b all land in different bins
        let seq = halves(2, 8, 6, [0, 255, 0]);
        let flows = static_flows(2, 8, 6);
        let params = SegParams { min_size: 4, ..Default::default() };
        let base = oversegment(&seq, &flows, &params).unwrap();
        assert_eq!(base.num_supervoxels, 2);
        let masses = supervoxel_masses(&base, &seq, &flows);
        let d = masses[0].normalized().distance(&masses[1].normalized());
        assert!((d - 1.0).abs() < 1e-9, "distance {d}");
        let h = build_hierarchy(base, &seq, &flows, &[0.5], &params).unwrap();
        assert_eq!(h.num_regions(1), 2);
        assert!(h.hierarchy_height >= 2);
        assert_eq!(h.parents[0], vec![0, 1]);
    }

    #[test]
    fn identical_pair_merges() {
        // Two supervoxels with identical descriptors: split the label volume
        // of a uniform video by hand.
        let fr = (0..2).map(|t| Frame::filled(t, 4, 4, [50, 90, 30])).collect();
        let seq = FrameSequence::from_frames("u", fr).unwrap();
        let labels = (0..32).map(|i| ((i % 4) >= 2) as u32).collect();
        let base = Oversegmentation::from_labels(4, 4, 2, labels).unwrap();
        let flows = static_flows(2, 4, 4);
        let h = build_hierarchy(base, &seq, &flows, &[0.5], &SegParams::default()).unwrap();
        assert_eq!(h.num_regions(1), 1);
        assert_eq!(h.hierarchy_height, 1);
    }

    #[test]
    fn decreasing_fractions_rejected() {
        let seq = half_half(2, 4, 4);
        let flows = static_flows(2, 4, 4);
        let base = oversegment(&seq, &flows, &SegParams::default()).unwrap();
        assert!(matches!(
            build_hierarchy(base, &seq, &flows, &[0.3, 0.2], &SegParams::default()),
            Err(SegError::BadFractions(_))
        ));
    }

    #[test]
    fn slices_partition_each_frame() {
        let seq = half_half(2, 8, 6);
        let flows = static_flows(2, 8, 6);
        let params = SegParams { min_size: 4, ..Default::default() };
        let base = oversegment(&seq, &flows, &params).unwrap();
        let h = build_hierarchy(base, &seq, &flows, &[0.5, 1.0], &params).unwrap();
        let s = h.frame_slices(0, 1);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].area, s[1].area);
        for level in 0..h.num_levels() {
            for j in 0..2 {
                let total: usize = h.frame_slices(level, j).iter().map(|s| s.area).sum();
                assert_eq!(total, 48);
            }
        }
        assert_eq!(h.num_regions(2), 1);
    }

    #[test]
    fn absent_supervoxel_not_listed() {
        // supervoxel 1 only exists in frame 0
        let labels = vec![0, 1, 0, 1, 0, 0, 0, 0];
        let base = Oversegmentation::from_labels(2, 2, 2, labels).unwrap();
        let h = SegmentationHierarchy::from_parts(base, vec![1.0], 1, vec![1], vec![vec![0, 0]]).unwrap();
        let s0 = h.frame_slices(0, 0);
        let s1 = h.frame_slices(0, 1);
        assert_eq!(s0.len(), 2);
        assert_eq!(s1.len(), 1);
        assert_eq!(s1[0].region, 0);
    }

    #[test]
    fn save_and_load_round_trip() {
        let seq = half_half(3, 8, 6);
        let flows = static_flows(3, 8, 6);
        let params = SegParams { min_size: 4, ..Default::default() };
        let base = oversegment(&seq, &flows, &params).unwrap();
        let h = build_hierarchy(base, &seq, &flows, &[0.2, 0.6], &params).unwrap();
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        assert!(dir.path().join("seg/L0/frame_000002.png").exists());
        assert_eq!(SegmentationHierarchy::load(dir.path()).unwrap(), h);
    }

    #[test]
    fn id_packing() {
        let ids = [0u32, 1, 256, 65536 + 2, 0xFF_FFFF];
        let rgb = encode_ids_rgb(&ids);
        assert_eq!(&rgb[9..12], &[1, 0, 2]);
        let back: Vec<u32> = rgb
            .chunks(3)
            .map(|c| (c[0] as u32) << 16 | (c[1] as u32) << 8 | c[2] as u32)
            .collect();
        assert_eq!(back, ids);
    }
}
