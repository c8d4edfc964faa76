//! Boosted regression trees fitted by additive logistic regression
//! (LogitBoost), and the bundle of seven ensembles used for labelling.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{GeoLabel, MAIN_CLASSES, SUB_CLASSES};
use crate::features::{FEATURE_DIM, FEATURE_LAYOUT_VERSION};

pub const MODEL_MAGIC: &[u8; 5] = b"GVBT1";
const MAX_LEAF: f64 = 8.0;
const MAX_RESPONSE: f64 = 4.0;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum BoostError {
    #[error("training data has a single class")]
    DegenerateData,
    #[error("feature {feature} of example {example} is not finite")]
    NonFiniteFeature { example: usize, feature: usize },
    #[error("expected {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} videos for {needed}-fold cross validation, have {have}")]
    TooFewVideos { needed: usize, have: usize },
    #[error("model layout version {found} does not match {expected}")]
    ModelMismatch { expected: u32, found: u32 },
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub shrinkage: f64,
    /// Share of the weight mass, taken from the lowest-weight samples, left
    /// out of split search each round.
    pub trim_fraction: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            rounds: 100,
            max_depth: 2,
            shrinkage: 0.5,
            trim_fraction: 0.1,
        }
    }
}

/// Largest number of candidate cut bins per feature.
pub const MAX_BINS: usize = 256;

/// Column-major feature matrix plus per-feature rank bins used by split
/// search. A feature with at most `MAX_BINS` distinct values gets one bin per
/// value, otherwise bins hold roughly equal sample counts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    cols: Vec<Vec<f32>>,
    /// Features taking more than one value.
    splittable: Vec<usize>,
    /// Row-major bin codes, `splittable.len()` per sample.
    bins: Vec<u8>,
    /// Smallest and largest value of every bin, per splittable feature.
    bin_lo: Vec<Vec<f32>>,
    bin_hi: Vec<Vec<f32>>,
}

/// Upper edges of the bins of one column, each a value of the column.
fn bin_edges(col: &[f32]) -> Vec<f32> {
    let mut v = col.to_vec();
    v.sort_unstable_by(f32::total_cmp);
    let mut distinct = v.clone();
    distinct.dedup();
    if distinct.len() <= MAX_BINS {
        return distinct;
    }
    let n = v.len();
    let mut edges: Vec<f32> = (1..MAX_BINS).map(|b| v[b * n / MAX_BINS - 1]).collect();
    edges.push(v[n - 1]);
    edges.dedup();
    edges
}

impl Dataset {
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, BoostError> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.as_ref().len());
        let mut cols = vec![Vec::with_capacity(n); d];
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != d {
                return Err(BoostError::DimensionMismatch { expected: d, got: r.len() });
            }
            for (f, &x) in r.iter().enumerate() {
                if !x.is_finite() {
                    return Err(BoostError::NonFiniteFeature { example: i, feature: f });
                }
                cols[f].push(x);
            }
        }
        Ok(Dataset::from_cols(n, d, cols))
    }

    fn from_cols(n: usize, d: usize, cols: Vec<Vec<f32>>) -> Dataset {
        let edges: Vec<Vec<f32>> = cols.par_iter().map(|c| bin_edges(c)).collect();
        let splittable: Vec<usize> = (0..d).filter(|&f| edges[f].len() > 1).collect();
        let ns = splittable.len();
        let mut bins = vec![0u8; n * ns];
        let mut bin_lo = Vec::with_capacity(ns);
        let mut bin_hi = Vec::with_capacity(ns);
        for (k, &f) in splittable.iter().enumerate() {
            let e = &edges[f];
            let mut lo = vec![f32::INFINITY; e.len()];
            for (i, &x) in cols[f].iter().enumerate() {
                let b = e.partition_point(|&t| t < x);
                bins[i * ns + k] = b as u8;
                lo[b] = lo[b].min(x);
            }
            bin_lo.push(lo);
            bin_hi.push(e.clone());
        }
        Dataset {
            n,
            d,
            cols,
            splittable,
            bins,
            bin_lo,
            bin_hi,
        }
    }

    /// The rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let cols = self.cols.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect();
        Dataset::from_cols(idx.len(), self.d, cols)
    }

    pub fn value(&self, row: usize, feature: usize) -> f32 {
        self.cols[feature][row]
    }

    pub fn row(&self, row: usize) -> Vec<f32> {
        self.cols.iter().map(|c| c[row]).collect()
    }
}

/// Flat binary tree; node 0 is the root. A node is a leaf when `left == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub feature: u32,
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

impl Node {
    fn leaf(value: f64) -> Self {
        Node {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            value,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.left == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    /// Samples with `x[feature] <= threshold` go left.
    pub fn leaf_of<F: Fn(usize) -> f32>(&self, x: F) -> usize {
        let mut i = 0;
        while !self.nodes[i].is_leaf() {
            let n = &self.nodes[i];
            i = if x(n.feature as usize) <= n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
        i
    }

    pub fn eval(&self, x: &[f32]) -> f64 {
        self.nodes[self.leaf_of(|f| x[f])].value
    }

    pub fn depth(&self) -> usize {
        fn rec(t: &DecisionTree, i: usize) -> usize {
            let n = &t.nodes[i];
            if n.is_leaf() {
                0
            } else {
                1 + rec(t, n.left as usize).max(rec(t, n.right as usize))
            }
        }
        rec(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoostedEnsemble {
    pub trees: Vec<DecisionTree>,
    pub learning_rate: f64,
    pub class_of_interest: String,
    /// Training loss before the first round and after each round.
    pub loss_history: Vec<f64>,
}

#[inline]
fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Weighted logistic loss `sum w ln(1 + exp(-y F))` for labels `y` in {-1, 1}.
pub fn logistic_loss(scores: &[f64], y: &[f64], w: &[f64]) -> f64 {
    scores
        .iter()
        .zip(y)
        .zip(w)
        .map(|((f, y), w)| w * softplus(-y * f))
        .sum()
}

impl BoostedEnsemble {
    pub fn empty(class_of_interest: impl Into<String>) -> Self {
        BoostedEnsemble {
            trees: Vec::new(),
            learning_rate: 0.0,
            class_of_interest: class_of_interest.into(),
            loss_history: Vec::new(),
        }
    }

    /// An ensemble with one leaf scoring `score` everywhere.
    pub fn constant(class_of_interest: impl Into<String>, score: f64) -> Self {
        BoostedEnsemble {
            trees: vec![DecisionTree {
                nodes: vec![Node::leaf(score)],
            }],
            learning_rate: 1.0,
            class_of_interest: class_of_interest.into(),
            loss_history: Vec::new(),
        }
    }

    pub fn score(&self, x: &[f32]) -> f64 {
        self.trees.iter().map(|t| t.eval(x)).sum()
    }

    /// Logistic posterior of the class of interest, kept inside (0, 1).
    pub fn posterior(&self, x: &[f32]) -> f64 {
        sigmoid(self.score(x)).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    w: f64,
    wz: f64,
}

#[derive(Clone, Copy)]
struct Split {
    gain: f64,
    feature: usize,
    threshold: f32,
}

fn midpoint(a: f32, b: f32) -> f32 {
    let m = ((a as f64 + b as f64) / 2.0) as f32;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

/// Weights below which samples sit out split search this round, chosen so
/// that at most `fraction` of the total weight mass is left out.
fn trim_threshold(h: &[f64], fraction: f64) -> f64 {
    if fraction <= 0.0 {
        return 0.0;
    }
    let mut sorted: Vec<f64> = h.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    let mut acc = 0.0;
    let mut i = 0;
    // drop whole groups of equal weights only
    while i < sorted.len() {
        let mut j = i;
        let mut group = 0.0;
        while j < sorted.len() && sorted[j] == sorted[i] {
            group += sorted[j];
            j += 1;
        }
        if acc + group > fraction * total {
            return sorted[i];
        }
        acc += group;
        i = j;
    }
    f64::INFINITY
}

/// Grows one regression tree of depth at most `max_depth` on responses `z`
/// with weights `h`, searching splits over the samples with `h >= min_h`.
/// Returns the tree (leaf values unset) and the leaf index of every sample.
fn grow_tree(ds: &Dataset, z: &[f64], h: &[f64], max_depth: usize, min_h: f64) -> (DecisionTree, Vec<u32>) {
    const NONE: u16 = u16::MAX;
    let ns = ds.splittable.len();
    let mut nodes = vec![Node::leaf(0.0)];
    let active: Vec<bool> = h.iter().map(|&x| x >= min_h && x > 0.0).collect();
    let active_idx: Vec<usize> = (0..ds.n).filter(|&i| active[i]).collect();
    // node id of each sample; `slot` is its frontier position or NONE
    let mut node_of: Vec<u32> = vec![0; ds.n];
    let mut slot: Vec<u16> = active.iter().map(|&a| if a { 0 } else { NONE }).collect();
    let mut frontier: Vec<u32> = vec![0];
    let mut hist: Vec<[f64; 2]> = Vec::new();
    for depth in 0..max_depth {
        if frontier.is_empty() {
            break;
        }
        let nf = frontier.len();
        let mut total = vec![Acc::default(); nf];
        hist.clear();
        hist.resize(nf * ns * MAX_BINS, [0.0, 0.0]);
        for &i in &active_idx {
            if slot[i] == NONE {
                continue;
            }
            let s = slot[i] as usize;
            let (w, wz) = (h[i], h[i] * z[i]);
            total[s].w += w;
            total[s].wz += wz;
            let row = &ds.bins[i * ns..(i + 1) * ns];
            let base = s * ns * MAX_BINS;
            for (k, &b) in row.iter().enumerate() {
                let c = &mut hist[base + k * MAX_BINS + b as usize];
                c[0] += w;
                c[1] += wz;
            }
        }
        let parent_score: Vec<f64> = total
            .iter()
            .map(|t| if t.w > 0.0 { t.wz * t.wz / t.w } else { 0.0 })
            .collect();
        let mut best: Vec<Option<Split>> = vec![None; nf];
        for s in 0..nf {
            let t = total[s];
            for (k, &f) in ds.splittable.iter().enumerate() {
                let hk = &hist[(s * ns + k) * MAX_BINS..(s * ns + k + 1) * MAX_BINS];
                let mut left = Acc::default();
                let mut prev: Option<usize> = None;
                for (b, c) in hk.iter().enumerate().take(ds.bin_hi[k].len()) {
                    if c[0] <= 0.0 {
                        continue;
                    }
                    if let Some(pb) = prev {
                        let rw = t.w - left.w;
                        if rw > 0.0 {
                            let rwz = t.wz - left.wz;
                            let gain = left.wz * left.wz / left.w + rwz * rwz / rw - parent_score[s];
                            if best[s].is_none_or(|bs| gain > bs.gain) {
                                best[s] = Some(Split {
                                    gain,
                                    feature: f,
                                    threshold: midpoint(ds.bin_hi[k][pb], ds.bin_lo[k][b]),
                                });
                            }
                        }
                    }
                    left.w += c[0];
                    left.wz += c[1];
                    prev = Some(b);
                }
            }
        }
        let mut next = Vec::new();
        let mut children = vec![(u32::MAX, u32::MAX); nodes.len()];
        for (s, &nd) in frontier.iter().enumerate() {
            if let Some(b) = best[s] {
                if b.gain > 1e-12 * (1.0 + parent_score[s].abs()) {
                    let l = nodes.len() as u32;
                    nodes.push(Node::leaf(0.0));
                    nodes.push(Node::leaf(0.0));
                    let n = &mut nodes[nd as usize];
                    n.feature = b.feature as u32;
                    n.threshold = b.threshold;
                    n.left = l;
                    n.right = l + 1;
                    children[nd as usize] = (l, l + 1);
                    next.push(l);
                    next.push(l + 1);
                }
            }
        }
        let last_depth = depth + 1 == max_depth;
        let mut next_slot = vec![NONE; nodes.len()];
        for (k, &nd) in next.iter().enumerate() {
            next_slot[nd as usize] = k as u16;
        }
        for i in 0..ds.n {
            let nd = node_of[i] as usize;
            let (l, r) = children[nd];
            if l != u32::MAX {
                let n = &nodes[nd];
                node_of[i] = if ds.cols[n.feature as usize][i] <= n.threshold { l } else { r };
            }
            slot[i] = if active[i] && !last_depth {
                next_slot[node_of[i] as usize]
            } else {
                NONE
            };
        }
        frontier = next;
    }
    (DecisionTree { nodes }, node_of)
}

/// Fits a boosted ensemble to labels `y` (each -1 or 1) with example
/// weights `w`. The training loss never increases from one round to the
/// next: a tree whose step would increase it is shrunk, and dropped if
/// shrinking does not help.
pub fn train_boosted(
    ds: &Dataset,
    y: &[f64],
    w: &[f64],
    params: &BoostParams,
    class_of_interest: &str,
) -> Result<BoostedEnsemble, BoostError> {
    if y.len() != ds.n || w.len() != ds.n {
        return Err(BoostError::DimensionMismatch {
            expected: ds.n,
            got: y.len().min(w.len()),
        });
    }
    let pos = y.iter().zip(w).filter(|(&y, &w)| y > 0.0 && w > 0.0).count();
    let neg = y.iter().zip(w).filter(|(&y, &w)| y < 0.0 && w > 0.0).count();
    if pos == 0 || neg == 0 {
        return Err(BoostError::DegenerateData);
    }
    let y01: Vec<f64> = y.iter().map(|&y| if y > 0.0 { 1.0 } else { 0.0 }).collect();
    let mut scores = vec![0.0f64; ds.n];
    let mut loss = logistic_loss(&scores, y, w);
    let mut ens = BoostedEnsemble {
        trees: Vec::with_capacity(params.rounds),
        learning_rate: params.shrinkage,
        class_of_interest: class_of_interest.to_string(),
        loss_history: vec![loss],
    };
    let mut z = vec![0.0f64; ds.n];
    let mut h = vec![0.0f64; ds.n];
    for _ in 0..params.rounds {
        for i in 0..ds.n {
            let p = sigmoid(scores[i]);
            let pq = (p * (1.0 - p)).max(PROB_FLOOR);
            z[i] = ((y01[i] - p) / pq).clamp(-MAX_RESPONSE, MAX_RESPONSE);
            h[i] = w[i] * pq;
        }
        let min_h = trim_threshold(&h, params.trim_fraction);
        let (mut tree, leaf_of) = grow_tree(ds, &z, &h, params.max_depth, min_h);
        // Newton step per leaf on the logistic loss.
        let mut num = vec![0.0f64; tree.nodes.len()];
        let mut den = vec![0.0f64; tree.nodes.len()];
        for i in 0..ds.n {
            let p = sigmoid(scores[i]);
            num[leaf_of[i] as usize] += w[i] * (y01[i] - p);
            den[leaf_of[i] as usize] += h[i];
        }
        let base: Vec<f64> = (0..tree.nodes.len())
            .map(|k| {
                if den[k] > 0.0 {
                    (params.shrinkage * num[k] / den[k]).clamp(-MAX_LEAF, MAX_LEAF)
                } else {
                    0.0
                }
            })
            .collect();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..ds.n).map(|i| scores[i] + step * base[leaf_of[i] as usize]).collect();
            let l = logistic_loss(&trial, y, w);
            if l <= loss {
                accepted = Some((trial, l));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((trial, l)) => {
                for (k, n) in tree.nodes.iter_mut().enumerate() {
                    n.value = if n.is_leaf() { step * base[k] } else { 0.0 };
                }
                scores = trial;
                loss = l;
                ens.trees.push(tree);
            }
            None => {
                tree.nodes = vec![Node::leaf(0.0)];
                ens.trees.push(tree);
            }
        }
        ens.loss_history.push(loss);
    }
    Ok(ens)
}

/// Class posteriors of one segment in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    /// Sky, Ground, Vertical.
    pub main: [f64; 3],
    /// Solid, Porous, Object.
    pub sub: [f64; 3],
    /// Probability of the segment being single-class.
    pub homogeneity: f64,
}

impl Posterior {
    pub fn uniform() -> Self {
        Posterior {
            main: [1.0 / 3.0; 3],
            sub: [1.0 / 3.0; 3],
            homogeneity: 0.5,
        }
    }
}

/// Index of the largest entry; ties go to the first.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Metadata stored in the model file trailer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub feature_dim: usize,
    pub layout_version: u32,
    pub params: BoostParams,
    pub level_fractions: Vec<f64>,
    pub training_examples: usize,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub main: [BoostedEnsemble; 3],
    pub sub: [BoostedEnsemble; 3],
    pub homogeneity: BoostedEnsemble,
    pub meta: BundleMeta,
}

fn normalized(ps: [f64; 3]) -> [f64; 3] {
    let s: f64 = ps.iter().sum();
    ps.map(|p| p / s)
}

fn class_names() -> Vec<String> {
    MAIN_CLASSES
        .iter()
        .chain(SUB_CLASSES.iter())
        .map(|c| c.name().to_string())
        .chain(std::iter::once("homogeneous".to_string()))
        .collect()
}

impl ClassifierBundle {
    /// A bundle whose ensembles are all empty.
    pub fn empty(level_fractions: Vec<f64>) -> Self {
        ClassifierBundle {
            main: MAIN_CLASSES.map(|c| BoostedEnsemble::empty(c.name())),
            sub: SUB_CLASSES.map(|c| BoostedEnsemble::empty(c.name())),
            homogeneity: BoostedEnsemble::empty("homogeneous"),
            meta: BundleMeta {
                feature_dim: FEATURE_DIM,
                layout_version: FEATURE_LAYOUT_VERSION,
                params: BoostParams {
                    rounds: 0,
                    ..BoostParams::default()
                },
                level_fractions,
                training_examples: 0,
                classes: class_names(),
            },
        }
    }

    fn ensembles(&self) -> impl Iterator<Item = &BoostedEnsemble> {
        self.main.iter().chain(self.sub.iter()).chain(std::iter::once(&self.homogeneity))
    }

    pub fn predict_posterior(&self, x: &[f32]) -> Result<Posterior, BoostError> {
        if x.len() != self.meta.feature_dim {
            return Err(BoostError::DimensionMismatch {
                expected: self.meta.feature_dim,
                got: x.len(),
            });
        }
        Ok(Posterior {
            main: normalized([0, 1, 2].map(|k| self.main[k].posterior(x))),
            sub: normalized([0, 1, 2].map(|k| self.sub[k].posterior(x))),
            homogeneity: self.homogeneity.posterior(x),
        })
    }

    /// Encodes the bundle: magic, seven ensembles, then a length-prefixed
    /// JSON metadata trailer. All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&7u32.to_le_bytes());
        for e in self.ensembles() {
            let name = e.class_of_interest.as_bytes();
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name);
            b.extend_from_slice(&e.learning_rate.to_le_bytes());
            b.extend_from_slice(&(e.trees.len() as u32).to_le_bytes());
            for t in &e.trees {
                b.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
                for n in &t.nodes {
                    b.extend_from_slice(&n.feature.to_le_bytes());
                    b.extend_from_slice(&n.threshold.to_le_bytes());
                    b.extend_from_slice(&n.left.to_le_bytes());
                    b.extend_from_slice(&n.right.to_le_bytes());
                    b.extend_from_slice(&n.value.to_le_bytes());
                }
            }
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        b.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        b.extend_from_slice(&meta);
        b
    }

    pub fn from_bytes(mut r: &[u8]) -> Result<Self, BoostError> {
        let corrupt = |m: &str| BoostError::Corrupt(m.to_string());
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| corrupt("too short"))?;
        if &magic != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        fn u32_(r: &mut &[u8]) -> Result<u32, BoostError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| BoostError::Corrupt("truncated".into()))?;
            Ok(u32::from_le_bytes(b))
        }
        fn f64_(r: &mut &[u8]) -> Result<f64, BoostError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| BoostError::Corrupt("truncated".into()))?;
            Ok(f64::from_le_bytes(b))
        }
        if u32_(&mut r)? != 7 {
            return Err(corrupt("expected 7 ensembles"));
        }
        let mut ens = Vec::with_capacity(7);
        for _ in 0..7 {
            let len = u32_(&mut r)? as usize;
            if len > r.len() {
                return Err(corrupt("truncated"));
            }
            let name = String::from_utf8(r[..len].to_vec()).map_err(|_| corrupt("bad class name"))?;
            r = &r[len..];
            let learning_rate = f64_(&mut r)?;
            let nt = u32_(&mut r)? as usize;
            let mut trees = Vec::with_capacity(nt.min(1 << 16));
            for _ in 0..nt {
                let nn = u32_(&mut r)? as usize;
                let mut nodes = Vec::with_capacity(nn.min(1 << 16));
                for _ in 0..nn {
                    let feature = u32_(&mut r)?;
                    let threshold = f32::from_bits(u32_(&mut r)?);
                    let left = u32_(&mut r)?;
                    let right = u32_(&mut r)?;
                    let value = f64_(&mut r)?;
                    nodes.push(Node {
                        feature,
                        threshold,
                        left,
                        right,
                        value,
                    });
                }
                for n in &nodes {
                    if !n.is_leaf() && (n.left as usize >= nn || n.right as usize >= nn) {
                        return Err(corrupt("child index out of range"));
                    }
                }
                if nodes.is_empty() {
                    return Err(corrupt("empty tree"));
                }
                trees.push(DecisionTree { nodes });
            }
            ens.push(BoostedEnsemble {
                trees,
                learning_rate,
                class_of_interest: name,
                loss_history: Vec::new(),
            });
        }
        let len = u32_(&mut r)? as usize;
        if len != r.len() {
            return Err(corrupt("bad trailer length"));
        }
        let meta: BundleMeta = serde_json::from_slice(r)?;
        if meta.layout_version != FEATURE_LAYOUT_VERSION {
            return Err(BoostError::ModelMismatch {
                expected: FEATURE_LAYOUT_VERSION,
                found: meta.layout_version,
            });
        }
        for e in &ens {
            for t in &e.trees {
                if t.nodes.iter().any(|n| !n.is_leaf() && n.feature as usize >= meta.feature_dim) {
                    return Err(corrupt("feature index out of range"));
                }
            }
        }
        let mut it = ens.into_iter();
        let mut next = || it.next().unwrap();
        Ok(ClassifierBundle {
            main: [next(), next(), next()],
            sub: [next(), next(), next()],
            homogeneity: next(),
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), BoostError> {
        if let Some(p) = path.parent() {
            fs::create_dir_all(p)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BoostError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// One labelled segment-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f32>,
    pub label: GeoLabel,
    pub weight: f64,
}

/// Trains one ensemble, falling back to a constant prior score when the
/// data holds a single class.
fn train_or_prior(ds: &Dataset, y: &[f64], w: &[f64], params: &BoostParams, name: &str) -> BoostedEnsemble {
    match train_boosted(ds, y, w, params, name) {
        Ok(e) => e,
        Err(_) => {
            let pos: f64 = y.iter().zip(w).filter(|(&y, _)| y > 0.0).map(|(_, &w)| w).sum();
            let tot: f64 = w.iter().sum();
            // Laplace-smoothed prior log-odds
            let p = (pos + 1.0) / (tot + 2.0);
            if tot > 0.0 {
                log::warn!("{name}: single-class training data, using a constant prior");
                BoostedEnsemble::constant(name, (p / (1.0 - p)).ln())
            } else {
                BoostedEnsemble::empty(name)
            }
        }
    }
}

/// Trains the main, sub-vertical and homogeneity ensembles. Main ensembles
/// see single-label examples, sub-vertical ones the sub-labelled vertical
/// examples, the homogeneity ensemble everything (Mix negative).
pub fn train_bundle(
    examples: &[LabeledExample],
    params: &BoostParams,
    level_fractions: Vec<f64>,
) -> Result<ClassifierBundle, BoostError> {
    let rows: Vec<&[f32]> = examples.iter().map(|e| e.features.as_slice()).collect();
    if let Some(r) = rows.iter().find(|r| r.len() != FEATURE_DIM) {
        return Err(BoostError::DimensionMismatch {
            expected: FEATURE_DIM,
            got: r.len(),
        });
    }
    let all = Dataset::from_rows(&rows)?;
    let main_idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label != GeoLabel::Mix).collect();
    let sub_idx: Vec<usize> = (0..examples.len())
        .filter(|&i| examples[i].label.is_sub_vertical())
        .collect();
    let main_ds = all.subset(&main_idx);
    let sub_ds = all.subset(&sub_idx);
    let w_of = |idx: &[usize]| idx.iter().map(|&i| examples[i].weight).collect::<Vec<_>>();
    let main_w = w_of(&main_idx);
    let sub_w = w_of(&sub_idx);
    let all_w: Vec<f64> = examples.iter().map(|e| e.weight).collect();

    enum Job {
        Main(usize),
        Sub(usize),
        Homog,
    }
    let jobs = [
        Job::Main(0),
        Job::Main(1),
        Job::Main(2),
        Job::Sub(0),
        Job::Sub(1),
        Job::Sub(2),
        Job::Homog,
    ];
    let mut trained: Vec<BoostedEnsemble> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Main(k) => {
                let y: Vec<f64> = main_idx
                    .iter()
                    .map(|&i| if examples[i].label.main() == MAIN_CLASSES[k] { 1.0 } else { -1.0 })
                    .collect();
                train_or_prior(&main_ds, &y, &main_w, params, MAIN_CLASSES[k].name())
            }
            Job::Sub(k) => {
                let y: Vec<f64> = sub_idx
                    .iter()
                    .map(|&i| if examples[i].label == SUB_CLASSES[k] { 1.0 } else { -1.0 })
                    .collect();
                train_or_prior(&sub_ds, &y, &sub_w, params, SUB_CLASSES[k].name())
            }
            Job::Homog => {
                let y: Vec<f64> = examples
                    .iter()
                    .map(|e| if e.label == GeoLabel::Mix { -1.0 } else { 1.0 })
                    .collect();
                train_or_prior(&all, &y, &all_w, params, "homogeneous")
            }
        })
        .collect();
    let homogeneity = trained.pop().unwrap();
    let mut it = trained.into_iter();
    let mut next = || it.next().unwrap();
    Ok(ClassifierBundle {
        main: [next(), next(), next()],
        sub: [next(), next(), next()],
        homogeneity,
        meta: BundleMeta {
            feature_dim: FEATURE_DIM,
            layout_version: FEATURE_LAYOUT_VERSION,
            params: *params,
            level_fractions,
            training_examples: examples.len(),
            classes: class_names(),
        },
    })
}

/// Weighted main and sub-vertical accuracy of `bundle` on `examples`.
/// Returns `None` for a class family without scorable examples.
pub fn example_accuracy(bundle: &ClassifierBundle, examples: &[LabeledExample]) -> Result<(Option<f64>, Option<f64>), BoostError> {
    let (mut mc, mut mt, mut sc, mut st) = (0.0, 0.0, 0.0, 0.0);
    for e in examples {
        if e.label == GeoLabel::Mix {
            continue;
        }
        let p = bundle.predict_posterior(&e.features)?;
        mt += e.weight;
        if MAIN_CLASSES[argmax(&p.main)] == e.label.main() {
            mc += e.weight;
        }
        if e.label.is_sub_vertical() {
            st += e.weight;
            if SUB_CLASSES[argmax(&p.sub)] == e.label {
                sc += e.weight;
            }
        }
    }
    let ratio = |c: f64, t: f64| if t > 0.0 { Some(c / t) } else { None };
    Ok((ratio(mc, mt), ratio(sc, st)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub test_videos: Vec<usize>,
    pub main_accuracy: Option<f64>,
    pub sub_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValidation {
    pub folds: Vec<FoldMetrics>,
    pub mean_main: Option<f64>,
    pub mean_sub: Option<f64>,
}

/// Video `i` goes to test fold `i mod k`.
pub fn fold_assignment(num_videos: usize, k: usize) -> Result<Vec<usize>, BoostError> {
    if k == 0 || num_videos < k {
        return Err(BoostError::TooFewVideos {
            needed: k.max(1),
            have: num_videos,
        });
    }
    Ok((0..num_videos).map(|i| i % k).collect())
}

/// k-fold cross validation with folds split by video.
pub fn cross_validate_bundle(
    videos: &[Vec<LabeledExample>],
    k: usize,
    params: &BoostParams,
) -> Result<CrossValidation, BoostError> {
    let assign = fold_assignment(videos.len(), k)?;
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<LabeledExample> = videos
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a != f)
            .flat_map(|(v, _)| v.iter().cloned())
            .collect();
        let test: Vec<LabeledExample> = videos
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == f)
            .flat_map(|(v, _)| v.iter().cloned())
            .collect();
        let bundle = train_bundle(&train, params, Vec::new())?;
        let (m, s) = example_accuracy(&bundle, &test)?;
        folds.push(FoldMetrics {
            fold: f,
            test_videos: (0..videos.len()).filter(|&i| assign[i] == f).collect(),
            main_accuracy: m,
            sub_accuracy: s,
        });
    }
    let mean = |g: &dyn Fn(&FoldMetrics) -> Option<f64>| {
        let v: Vec<f64> = folds.iter().filter_map(g).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mean_main = mean(&|f| f.main_accuracy);
    let mean_sub = mean(&|f| f.sub_accuracy);
    Ok(CrossValidation {
        folds,
        mean_main,
        mean_sub,
    })
}
