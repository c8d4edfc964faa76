//! Pixel accuracy, confusion matrices and the synthetic video generator.

pub mod synthetic;

use serde::Serialize;
use thiserror::Error;

use crate::annotation::{GeoLabel, MAIN_CLASSES, SUB_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    DimensionMismatch { pred: usize, gt: usize },
    #[error("no scorable pixels")]
    NoScorablePixels,
}

/// Pixel counts, rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<GeoLabel>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: &[GeoLabel]) -> Self {
        ConfusionMatrix {
            classes: classes.to_vec(),
            counts: vec![vec![0; classes.len()]; classes.len()],
        }
    }

    pub fn add(&mut self, gt: usize, pred: usize, n: u64) {
        self.counts[gt][pred] += n;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Rows divided by their sums; rows without pixels stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| if s > 0 { c as f64 / s as f64 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Correct pixels over all scored pixels.
    pub fn accuracy(&self) -> Result<f64, EvalError> {
        let t = self.total();
        if t == 0 {
            return Err(EvalError::NoScorablePixels);
        }
        let d: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        Ok(d as f64 / t as f64)
    }

    /// Mean of the per-class accuracies over classes that have pixels.
    pub fn mean_class_accuracy(&self) -> Result<f64, EvalError> {
        let rows = self.row_normalized();
        let present: Vec<usize> = (0..self.classes.len())
            .filter(|&i| self.counts[i].iter().sum::<u64>() > 0)
            .collect();
        if present.is_empty() {
            return Err(EvalError::NoScorablePixels);
        }
        Ok(present.iter().map(|&i| rows[i][i]).sum::<f64>() / present.len() as f64)
    }

    /// Recall of one class, `None` when it has no pixels.
    pub fn class_accuracy(&self, class: GeoLabel) -> Option<f64> {
        let i = self.classes.iter().position(|&c| c == class)?;
        let s: u64 = self.counts[i].iter().sum();
        (s > 0).then(|| self.counts[i][i] as f64 / s as f64)
    }

    pub fn render(&self) -> String {
        render_confusion(&self.classes, &self.row_normalized())
    }
}

fn title(l: GeoLabel) -> String {
    let n = l.name();
    n[..1].to_uppercase() + &n[1..]
}

/// Row-normalised table as percentages with one decimal.
pub fn render_confusion(classes: &[GeoLabel], rows: &[Vec<f64>]) -> String {
    let mut s = format!("{:<10}", "");
    for c in classes {
        s.push_str(&format!("{:>10}", title(*c)));
    }
    s.push('\n');
    for (c, row) in classes.iter().zip(rows) {
        s.push_str(&format!("{:<10}", title(*c)));
        for v in row {
            s.push_str(&format!("{:>10.1}", v * 100.0));
        }
        s.push('\n');
    }
    s
}

/// Main and sub-vertical confusion of one or more frames.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelEvaluation {
    pub main: ConfusionMatrix,
    pub sub: ConfusionMatrix,
}

impl Default for PixelEvaluation {
    fn default() -> Self {
        PixelEvaluation {
            main: ConfusionMatrix::new(&MAIN_CLASSES),
            sub: ConfusionMatrix::new(&SUB_CLASSES),
        }
    }
}

impl PixelEvaluation {
    /// Scores one frame. `pred_main` holds main labels, `pred_sub` the
    /// sub-vertical argmax of every pixel; the sub-vertical matrix covers
    /// ground-truth pixels with a sub-vertical label. Mix and unlabelled
    /// ground truth are skipped.
    pub fn add_frame(&mut self, pred_main: &[GeoLabel], pred_sub: &[GeoLabel], gt: &[GeoLabel]) -> Result<(), EvalError> {
        if pred_main.len() != gt.len() || pred_sub.len() != gt.len() {
            return Err(EvalError::DimensionMismatch {
                pred: pred_main.len().min(pred_sub.len()),
                gt: gt.len(),
            });
        }
        for ((pm, ps), g) in pred_main.iter().zip(pred_sub).zip(gt) {
            let Some(gi) = g.main_index() else { continue };
            if let Some(pi) = pm.main_index() {
                self.main.add(gi, pi, 1);
            }
            if let (Some(gs), Some(ps)) = (g.sub_index(), ps.sub_index()) {
                self.sub.add(gs, ps, 1);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PixelEvaluation) {
        self.main.merge(&other.main);
        self.sub.merge(&other.sub);
    }

    /// `"96.0% main / 77.4% sub-vertical"`.
    pub fn headline(&self) -> Result<String, EvalError> {
        Ok(format_headline(self.main.accuracy()?, self.sub.accuracy()?))
    }
}

pub fn format_headline(main: f64, sub: f64) -> String {
    format!("{:.1}% main / {:.1}% sub-vertical", main * 100.0, sub * 100.0)
}

/// Overall pixel accuracy of `pred` against `gt` for one label family.
pub fn pixel_accuracy(pred: &[GeoLabel], gt: &[GeoLabel]) -> Result<f64, EvalError> {
    let mut e = PixelEvaluation::default();
    e.add_frame(pred, pred, gt)?;
    e.main.accuracy()
}

#[cfg(test)]
mod tests {
    use super::*;
    use GeoLabel::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![Sky, Ground, Solid, Porous, Object, Object];
        let mut e = PixelEvaluation::default();
        e.add_frame(&gt.iter().map(|l| l.main()).collect::<Vec<_>>(), &gt, &gt).unwrap();
        assert_eq!(e.main.accuracy().unwrap(), 1.0);
        assert_eq!(e.sub.accuracy().unwrap(), 1.0);
        let rows = e.main.row_normalized();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(rows[i][j], if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn always_vertical() {
        let gt = vec![Sky, Ground, Solid, Sky];
        let pred = vec![Vertical; 4];
        let mut e = PixelEvaluation::default();
        e.add_frame(&pred, &[Solid; 4], &gt).unwrap();
        for row in e.main.row_normalized() {
            assert_eq!(row, vec![0.0, 0.0, 1.0]);
        }
        assert_eq!(e.main.total(), 4);
        assert_eq!(e.main.accuracy().unwrap(), 0.25);
    }

    #[test]
    fn mix_is_not_scored() {
        assert_eq!(pixel_accuracy(&[Sky, Sky], &[Mix, Mix]), Err(EvalError::NoScorablePixels));
        assert_eq!(pixel_accuracy(&[Sky, Ground], &[Sky, Mix]).unwrap(), 1.0);
        assert!(matches!(pixel_accuracy(&[Sky], &[Sky, Sky]), Err(EvalError::DimensionMismatch { .. })));
    }

    #[test]
    fn accuracy_two_ways_agree() {
        let gt = [Sky, Sky, Ground, Solid, Object, Porous, Ground];
        let pred = [Sky, Ground, Ground, Vertical, Vertical, Sky, Vertical];
        let mut e = PixelEvaluation::default();
        e.add_frame(&pred, &[Solid; 7], &gt).unwrap();
        let direct = gt.iter().zip(&pred).filter(|(g, p)| g.main() == **p).count() as f64 / 7.0;
        assert_eq!(e.main.accuracy().unwrap(), direct);
        assert_eq!(e.main.total(), 7);
    }

    #[test]
    fn headline_format() {
        assert_eq!(format_headline(0.96, 0.774), "96.0% main / 77.4% sub-vertical");
    }
}
