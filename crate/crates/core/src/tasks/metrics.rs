use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{TaskError, TaskKind};
use crate::traj::{synchronized_distance, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum F1Average {
    /// F1 of one positive class.
    Binary { positive: usize },
    /// Unweighted mean of per-class F1 over every class present in either input.
    Macro,
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn class_f1(pred: &[usize], truth: &[usize], class: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

pub fn f1_score(pred: &[usize], truth: &[usize], average: F1Average) -> Result<f64, TaskError> {
    if pred.len() != truth.len() {
        return Err(TaskError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(TaskError::Empty);
    }
    Ok(match average {
        F1Average::Binary { positive } => class_f1(pred, truth, positive),
        F1Average::Macro => {
            let classes: BTreeSet<usize> = pred.iter().chain(truth).copied().collect();
            classes.iter().map(|&c| class_f1(pred, truth, c)).sum::<f64>() / classes.len() as f64
        }
    })
}

/// Mean, over the original points, of the distance between each point and
/// its time-synchronised position on the simplified polyline (metres).
pub fn sed(simplified: &Trajectory, original: &Trajectory) -> Result<f64, TaskError> {
    let (s, o) = (&simplified.points, &original.points);
    if o.is_empty() || s.is_empty() {
        return Err(TaskError::Empty);
    }
    if s.first() != o.first() || s.last() != o.last() {
        return Err(TaskError::NotSubsequence);
    }
    // Walk both sequences; every simplified point must occur in order.
    let mut k = 0;
    for p in o {
        if k < s.len() && s[k] == *p {
            k += 1;
        }
    }
    if k != s.len() {
        return Err(TaskError::NotSubsequence);
    }
    let proj = original.projection();
    let mut seg = 0;
    let mut total = 0.0;
    for p in o {
        while seg + 1 < s.len() - 1 && s[seg + 1].t <= p.t {
            seg += 1;
        }
        total += if s.len() == 1 {
            0.0
        } else {
            synchronized_distance(&proj, p, &s[seg], &s[seg + 1])
        };
    }
    Ok(total / o.len() as f64)
}

/// Evaluation outcome of one task. Exactly one of `f1`/`sed` is set: SED for
/// simplification, F1 otherwise. `reference` carries the comparison point:
/// the all-positive baseline F1, or the oracle SED at matched compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub f1: Option<f64>,
    pub sed: Option<f64>,
    pub support: usize,
    pub reference: Option<f64>,
}

impl MetricReport {
    pub fn f1(task: TaskKind, f1: f64, support: usize, reference: Option<f64>) -> Self {
        Self { task, f1: Some(f1), sed: None, support, reference }
    }

    pub fn sed(task: TaskKind, sed: f64, support: usize, reference: Option<f64>) -> Self {
        Self { task, f1: None, sed: Some(sed), support, reference }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::{SpatioTemporalPoint, EARTH_RADIUS_M};

    #[test]
    fn f1_perfect_and_wrong() {
        let t = [0, 1, 1, 0];
        assert_eq!(f1_score(&t, &t, F1Average::Binary { positive: 1 }).unwrap(), 1.0);
        assert_eq!(f1_score(&[1, 0, 0, 1], &t, F1Average::Binary { positive: 1 }).unwrap(), 0.0);
        assert_eq!(f1_score(&[1, 0, 0, 1], &t, F1Average::Macro).unwrap(), 0.0);
    }

    #[test]
    fn f1_hand_counts() {
        // TP=1, FP=1, FN=1.
        let pred = [1, 1, 0, 0];
        let truth = [1, 0, 1, 0];
        assert!((f1_score(&pred, &truth, F1Average::Binary { positive: 1 }).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn f1_errors() {
        assert_eq!(f1_score(&[1], &[1, 0], F1Average::Macro), Err(TaskError::LengthMismatch(1, 2)));
        assert_eq!(f1_score(&[], &[], F1Average::Macro), Err(TaskError::Empty));
    }

    #[test]
    fn macro_f1_permutation_symmetric() {
        let pred = [0, 1, 2, 2, 1, 0, 3];
        let truth = [0, 2, 2, 1, 1, 0, 3];
        let perm = |v: &[usize]| v.iter().map(|&c| [3, 0, 1, 2][c]).collect::<Vec<_>>();
        let a = f1_score(&pred, &truth, F1Average::Macro).unwrap();
        let b = f1_score(&perm(&pred), &perm(&truth), F1Average::Macro).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    fn traj(points: &[(f64, f64, i64)]) -> Trajectory {
        Trajectory::new("t", "u", points.iter().map(|&(x, y, t)| SpatioTemporalPoint::new(x, y, t)).collect())
            .unwrap()
    }

    #[test]
    fn sed_identity_and_collinear() {
        let o = traj(&[(0.0, 0.0, 0), (1.0, 1.0, 1), (2.0, 2.0, 2)]);
        assert_eq!(sed(&o, &o).unwrap(), 0.0);
        let s = traj(&[(0.0, 0.0, 0), (2.0, 2.0, 2)]);
        assert!(sed(&s, &o).unwrap() < 1e-9);
    }

    #[test]
    fn sed_hand_geometry() {
        let o = traj(&[(0.0, 0.0, 0), (1.0, 1.0, 1), (2.0, 0.0, 2)]);
        let s = traj(&[(0.0, 0.0, 0), (2.0, 0.0, 2)]);
        // (1,1) vs synchronised (1,0): one degree of latitude, averaged over 3 points.
        let expected = EARTH_RADIUS_M * std::f64::consts::PI / 180.0 / 3.0;
        assert!((sed(&s, &o).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn sed_rejects_non_subsequence() {
        let o = traj(&[(0.0, 0.0, 0), (1.0, 1.0, 1), (2.0, 0.0, 2)]);
        let s = traj(&[(0.0, 0.0, 0), (1.5, 0.0, 1), (2.0, 0.0, 2)]);
        assert_eq!(sed(&s, &o), Err(TaskError::NotSubsequence));
        let s = traj(&[(0.0, 0.0, 0), (1.0, 1.0, 1)]);
        assert_eq!(sed(&s, &o), Err(TaskError::NotSubsequence));
    }
}
