//! Self-training: confident predictions on unlabelled videos join the
//! labelled pool, the classifiers are retrained, and added examples whose
//! confidence later drops are evicted during periodic introspection.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{GeoLabel, LEAF_LABELS};
use crate::boosted_trees::{train_bundle, BoostError, BoostParams, ClassifierBundle, LabeledExample, Posterior};
use crate::pipeline::{segment_samples, ExampleOptions, PipelineError, PreparedVideo};
use crate::inference::resolve_levels;

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error(transparent)]
    Boost(#[from] BoostError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("invalid bootstrap parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapParams {
    pub iterations: usize,
    pub posterior_min: f64,
    pub homogeneity_min: f64,
    /// Most segments admitted per class and round.
    pub per_class_quota: usize,
    pub introspect_every: usize,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams {
            iterations: 10,
            posterior_min: 0.8,
            homogeneity_min: 0.8,
            per_class_quota: 5000,
            introspect_every: 5,
        }
    }
}

impl BootstrapParams {
    pub fn validate(&self) -> Result<(), BootstrapError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.posterior_min) || !unit(self.homogeneity_min) {
            return Err(BootstrapError::Params("thresholds must lie in [0, 1]".into()));
        }
        if self.introspect_every == 0 {
            return Err(BootstrapError::Params("introspect_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// A segment in one frame of one unlabelled video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentRef {
    pub video: u32,
    pub level: u32,
    pub frame: u32,
    pub segment: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Added {
        iteration: usize,
        confidence: f64,
        homogeneity: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolExample {
    pub example: LabeledExample,
    pub provenance: Provenance,
    pub source: Option<SegmentRef>,
}

impl PoolExample {
    pub fn is_original(&self) -> bool {
        self.provenance == Provenance::Original
    }
}

/// An unlabelled segment-frame waiting for admission.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub source: SegmentRef,
    pub features: Vec<f32>,
    pub weight: f64,
}

/// Predicted leaf label of a posterior and the confidence in it: the main
/// posterior for sky and ground, and the smaller of the vertical and the
/// sub-vertical posterior otherwise.
pub fn confidence(p: &Posterior) -> (GeoLabel, f64) {
    let m = crate::boosted_trees::argmax(&p.main);
    if m < 2 {
        return (if m == 0 { GeoLabel::Sky } else { GeoLabel::Ground }, p.main[m]);
    }
    let s = crate::boosted_trees::argmax(&p.sub);
    let label = [GeoLabel::Solid, GeoLabel::Porous, GeoLabel::Object][s];
    (label, p.main[2].min(p.sub[s]))
}

#[derive(Debug, Clone)]
pub struct BootstrapState {
    pub params: BootstrapParams,
    pub pool: Vec<PoolExample>,
    pub unlabeled: Vec<Candidate>,
    pub iteration: usize,
}

/// What one round or introspection changed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoundChange {
    pub admitted: usize,
    pub evicted: usize,
}

impl BootstrapState {
    pub fn new(params: BootstrapParams, originals: Vec<LabeledExample>, unlabeled: Vec<Candidate>) -> Result<Self, BootstrapError> {
        params.validate()?;
        Ok(BootstrapState {
            params,
            pool: originals
                .into_iter()
                .map(|example| PoolExample {
                    example,
                    provenance: Provenance::Original,
                    source: None,
                })
                .collect(),
            unlabeled,
            iteration: 0,
        })
    }

    pub fn original_count(&self) -> usize {
        self.pool.iter().filter(|p| p.is_original()).count()
    }

    pub fn added_count(&self) -> usize {
        self.pool.len() - self.original_count()
    }

    pub fn examples(&self) -> Vec<LabeledExample> {
        self.pool.iter().map(|p| p.example.clone()).collect()
    }

    /// Moves the most confident qualifying candidates into the pool, at most
    /// the quota per predicted class, ranked by (confidence, homogeneity,
    /// segment) descending.
    pub fn admit(&mut self, bundle: &ClassifierBundle) -> Result<usize, BootstrapError> {
        let scored = self
            .unlabeled
            .par_iter()
            .map(|c| bundle.predict_posterior(&c.features))
            .collect::<Result<Vec<_>, _>>()?;
        let p = &self.params;
        let mut per_class: Vec<Vec<(f64, f64, SegmentRef, usize, GeoLabel)>> = vec![Vec::new(); LEAF_LABELS.len()];
        for (i, post) in scored.iter().enumerate() {
            let (label, conf) = confidence(post);
            if conf >= p.posterior_min && post.homogeneity >= p.homogeneity_min {
                let k = LEAF_LABELS.iter().position(|&l| l == label).expect("leaf label");
                per_class[k].push((conf, post.homogeneity, self.unlabeled[i].source, i, label));
            }
        }
        let mut take: Vec<(usize, GeoLabel, f64, f64)> = Vec::new();
        for mut list in per_class {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(b.2.cmp(&a.2)));
            take.extend(list.into_iter().take(p.per_class_quota).map(|(c, h, _, i, l)| (i, l, c, h)));
        }
        take.sort_by_key(|t| t.0);
        let n = take.len();
        let it = self.iteration + 1;
        let mut admitted = Vec::with_capacity(n);
        for (i, label, conf, homog) in take.into_iter().rev() {
            let c = self.unlabeled.swap_remove(i);
            admitted.push(PoolExample {
                example: LabeledExample {
                    features: c.features,
                    label,
                    weight: c.weight,
                },
                provenance: Provenance::Added {
                    iteration: it,
                    confidence: conf,
                    homogeneity: homog,
                },
                source: Some(c.source),
            });
        }
        admitted.sort_by_key(|e| e.source);
        self.pool.extend(admitted);
        // keep candidate order independent of removal history
        self.unlabeled.sort_by_key(|c| c.source);
        Ok(n)
    }

    /// Rescores added examples and returns those whose confidence fell
    /// below `posterior_min` to the unlabelled pool. Originals stay.
    pub fn introspect(&mut self, bundle: &ClassifierBundle) -> Result<usize, BootstrapError> {
        let keep = self
            .pool
            .par_iter()
            .map(|e| {
                if e.is_original() {
                    return Ok(true);
                }
                let post = bundle.predict_posterior(&e.example.features)?;
                Ok(confidence(&post).1 >= self.params.posterior_min)
            })
            .collect::<Result<Vec<bool>, BoostError>>()?;
        let mut evicted = 0;
        let pool = std::mem::take(&mut self.pool);
        for (e, k) in pool.into_iter().zip(keep) {
            if k {
                self.pool.push(e);
            } else {
                evicted += 1;
                self.unlabeled.push(Candidate {
                    source: e.source.expect("added examples have a source"),
                    features: e.example.features,
                    weight: e.example.weight,
                });
            }
        }
        self.unlabeled.sort_by_key(|c| c.source);
        Ok(evicted)
    }

    /// One round: admit with `bundle`, retrain on the expanded pool, and
    /// introspect with the new bundle when the round number is a multiple
    /// of the period. Evictions take effect at the next retraining.
    pub fn round(
        &mut self,
        bundle: &ClassifierBundle,
        boost: &BoostParams,
        level_fractions: &[f64],
    ) -> Result<(ClassifierBundle, RoundChange), BootstrapError> {
        let admitted = self.admit(bundle)?;
        self.iteration += 1;
        let next = if admitted > 0 {
            train_bundle(&self.examples(), boost, level_fractions.to_vec())?
        } else {
            bundle.clone()
        };
        let evicted = if self.iteration.is_multiple_of(self.params.introspect_every) {
            self.introspect(&next)?
        } else {
            0
        };
        Ok((next, RoundChange { admitted, evicted }))
    }
}

/// Candidates from every segment-frame of unlabelled videos at the
/// configured levels.
pub fn unlabeled_candidates(
    videos: &[PreparedVideo],
    level_fractions: &[f64],
    opts: &ExampleOptions,
) -> Result<Vec<Candidate>, BootstrapError> {
    let per_video = videos
        .par_iter()
        .enumerate()
        .map(|(v, video)| {
            let levels = resolve_levels(&video.hierarchy, level_fractions).map_err(PipelineError::from)?;
            Ok(segment_samples(video, &levels, opts)?
                .into_iter()
                .map(|s| Candidate {
                    source: SegmentRef {
                        video: v as u32,
                        level: s.level as u32,
                        frame: s.frame as u32,
                        segment: s.segment,
                    },
                    features: s.features,
                    weight: s.weight,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, BootstrapError>>()?;
    let mut all: Vec<Candidate> = per_video.into_iter().flatten().collect();
    all.sort_by_key(|c| c.source);
    Ok(all)
}

/// One line of the per-round metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub iteration: usize,
    pub pool_size: usize,
    pub added_total: usize,
    pub admitted: usize,
    pub evicted: usize,
    pub main_accuracy: Option<f64>,
    pub sub_accuracy: Option<f64>,
}

/// Runs `params.iterations` rounds from `bundle`. `evaluate` scores each
/// bundle on held-out data, returning (main, sub-vertical) accuracy; the
/// first metrics row describes the starting bundle.
pub fn run_bootstrap<F>(
    state: &mut BootstrapState,
    mut bundle: ClassifierBundle,
    boost: &BoostParams,
    level_fractions: &[f64],
    mut evaluate: F,
) -> Result<(ClassifierBundle, Vec<RoundMetrics>), BootstrapError>
where
    F: FnMut(&ClassifierBundle) -> Result<Option<(f64, f64)>, BootstrapError>,
{
    let mut rows = Vec::new();
    let row = |s: &BootstrapState, c: RoundChange, acc: Option<(f64, f64)>| RoundMetrics {
        iteration: s.iteration,
        pool_size: s.pool.len(),
        added_total: s.added_count(),
        admitted: c.admitted,
        evicted: c.evicted,
        main_accuracy: acc.map(|a| a.0),
        sub_accuracy: acc.map(|a| a.1),
    };
    rows.push(row(state, RoundChange::default(), evaluate(&bundle)?));
    for _ in 0..state.params.iterations {
        let (next, change) = state.round(&bundle, boost, level_fractions)?;
        bundle = next;
        let acc = evaluate(&bundle)?;
        log::info!(
            "bootstrap round {}: admitted {}, evicted {}, pool {}",
            state.iteration,
            change.admitted,
            change.evicted,
            state.pool.len()
        );
        rows.push(row(state, change, acc));
    }
    Ok((bundle, rows))
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[RoundMetrics]) -> Result<(), BootstrapError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boosted_trees::BoostedEnsemble;
    use crate::features::FEATURE_DIM;

    /// Ensemble k scores +4 when feature k is set and -4 otherwise.
    fn echo_bundle() -> ClassifierBundle {
        use crate::boosted_trees::{DecisionTree, Node};
        let stump = |f: u32, name: &str| {
            let mut e = BoostedEnsemble::empty(name);
            e.learning_rate = 1.0;
            e.trees.push(DecisionTree {
                nodes: vec![
                    Node { feature: f, threshold: 0.5, left: 1, right: 2, value: 0.0 },
                    Node { feature: 0, threshold: 0.0, left: 0, right: 0, value: -4.0 },
                    Node { feature: 0, threshold: 0.0, left: 0, right: 0, value: 4.0 },
                ],
            });
            e
        };
        ClassifierBundle {
            main: [stump(0, "sky"), stump(1, "ground"), stump(2, "vertical")],
            sub: [stump(3, "solid"), stump(4, "porous"), stump(5, "object")],
            homogeneity: stump(6, "homogeneous"),
            meta: ClassifierBundle::empty(Vec::new()).meta,
        }
    }

    fn feats(on: &[usize]) -> Vec<f32> {
        let mut x = vec![0.0; FEATURE_DIM];
        for &i in on {
            x[i] = 1.0;
        }
        x
    }

    fn cand(seg: u32, on: &[usize]) -> Candidate {
        Candidate {
            source: SegmentRef { video: 0, level: 1, frame: 0, segment: seg },
            features: feats(on),
            weight: 0.01,
        }
    }

    fn original(label: GeoLabel) -> LabeledExample {
        LabeledExample { features: feats(&[]), label, weight: 0.1 }
    }

    #[test]
    fn confidence_rule() {
        let p = Posterior { main: [0.1, 0.05, 0.85], sub: [0.1, 0.82, 0.08], homogeneity: 0.9 };
        assert_eq!(confidence(&p), (GeoLabel::Porous, 0.82));
        let p = Posterior { main: [0.9, 0.05, 0.05], sub: [0.4, 0.3, 0.3], homogeneity: 0.9 };
        assert_eq!(confidence(&p), (GeoLabel::Sky, 0.9));
    }

    #[test]
    fn uncertain_candidates_are_not_admitted() {
        let params = BootstrapParams::default();
        let mut s = BootstrapState::new(params, vec![original(GeoLabel::Sky)], vec![cand(0, &[]), cand(1, &[0])]).unwrap();
        // all-zero features give equal main posteriors; no homogeneity on 1
        let b = echo_bundle();
        assert_eq!(s.admit(&b).unwrap(), 0);
        assert_eq!(s.pool.len(), 1);
        assert_eq!(s.unlabeled.len(), 2);
    }

    #[test]
    fn admitted_carry_prediction_and_provenance() {
        let mut s = BootstrapState::new(
            BootstrapParams::default(),
            vec![original(GeoLabel::Ground)],
            vec![cand(0, &[0, 6]), cand(1, &[2, 5, 6]), cand(2, &[1])],
        )
        .unwrap();
        assert_eq!(s.admit(&echo_bundle()).unwrap(), 2);
        assert_eq!(s.unlabeled.len(), 1);
        let added: Vec<&PoolExample> = s.pool.iter().filter(|e| !e.is_original()).collect();
        assert_eq!(added[0].example.label, GeoLabel::Sky);
        assert_eq!(added[1].example.label, GeoLabel::Object);
        for a in added {
            match a.provenance {
                Provenance::Added { iteration, confidence, homogeneity } => {
                    assert_eq!(iteration, 1);
                    assert!(confidence >= 0.8 && homogeneity >= 0.8);
                }
                Provenance::Original => panic!("added example marked original"),
            }
        }
    }

    #[test]
    fn quota_keeps_highest_ranked() {
        let params = BootstrapParams { per_class_quota: 3, ..Default::default() };
        // identical posteriors, so the segment id decides
        let cands: Vec<Candidate> = (0..8).map(|i| cand(i, &[0, 6])).collect();
        let mut s = BootstrapState::new(params, vec![], cands).unwrap();
        assert_eq!(s.admit(&echo_bundle()).unwrap(), 3);
        let mut ids: Vec<u32> = s.pool.iter().map(|e| e.source.unwrap().segment).collect();
        ids.sort();
        assert_eq!(ids, vec![5, 6, 7]);
    }

    #[test]
    fn introspection_evicts_only_added() {
        let mut s = BootstrapState::new(
            BootstrapParams::default(),
            vec![original(GeoLabel::Sky)],
            vec![cand(0, &[0, 6]), cand(1, &[1, 6])],
        )
        .unwrap();
        s.admit(&echo_bundle()).unwrap();
        assert_eq!(s.pool.len(), 3);
        // a bundle that is unsure about everything
        let unsure = ClassifierBundle::empty(Vec::new());
        assert_eq!(s.introspect(&unsure).unwrap(), 2);
        assert_eq!(s.pool.len(), 1);
        assert!(s.pool[0].is_original());
        assert_eq!(s.unlabeled.len(), 2);
        // nothing added: nothing changes
        assert_eq!(s.introspect(&unsure).unwrap(), 0);
        assert_eq!(s.pool.len(), 1);
    }

    #[test]
    fn metrics_csv_header() {
        let rows = vec![RoundMetrics {
            iteration: 0,
            pool_size: 10,
            added_total: 0,
            admitted: 0,
            evicted: 0,
            main_accuracy: Some(0.5),
            sub_accuracy: None,
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,pool_size,added_total,admitted,evicted,main_accuracy,sub_accuracy\n0,10,0,0,0,0.5,\n"
        );
    }

    #[test]
    fn params_validated() {
        assert!(BootstrapParams { posterior_min: 1.5, ..Default::default() }.validate().is_err());
        assert!(BootstrapParams { introspect_every: 0, ..Default::default() }.validate().is_err());
        assert!(serde_json::from_str::<BootstrapParams>(r#"{"quota": 1}"#).is_err());
    }
}
