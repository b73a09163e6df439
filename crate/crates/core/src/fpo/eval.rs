use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::items::{positive_token, ItemKey};
use super::report::TaskMetric;
use super::{FpoError, RunConfig, Sample};
use crate::surrogate::Vocab;
use crate::tasks::{f1_score, sed, simplify_mask, F1Average, MetricReport, TaskKind};
use crate::traj::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemPrediction {
    pub key: ItemKey,
    pub client: usize,
    /// Highest-probability candidate token.
    pub pred: usize,
    pub target: usize,
    /// Probability of the positive token (keep, for simplification).
    pub score: f64,
}

fn subset(traj: &Trajectory, keep: &[bool]) -> Trajectory {
    Trajectory {
        traj_id: traj.traj_id.clone(),
        user_id: traj.user_id.clone(),
        points: traj.points.iter().zip(keep).filter_map(|(p, &k)| k.then_some(*p)).collect(),
    }
}

/// SED of keeping the endpoints plus the `k - 2` interior points with the
/// highest scores (earlier index wins ties).
pub fn tsim_sed(traj: &Trajectory, scores: &[f64], k: usize) -> Result<f64, FpoError> {
    let n = traj.len();
    if scores.len() != n {
        return Err(FpoError::Protocol(format!("{} scores for {n} points", scores.len())));
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut interior: Vec<usize> = (1..n.saturating_sub(1)).collect();
    interior.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    for &i in interior.iter().take(k.saturating_sub(2)) {
        keep[i] = true;
    }
    Ok(sed(&subset(traj, &keep), traj)?)
}

/// Majority-class constant predictor, the reference for macro-F1 tasks.
fn majority(truth: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    truth.iter().for_each(|&t| *counts.entry(t).or_default() += 1);
    counts.into_iter().max_by_key(|&(c, n)| (n, std::cmp::Reverse(c))).map_or(0, |(c, _)| c)
}

/// Scores every configured task on the held-out predictions.
pub fn evaluate_predictions(
    preds: &[ItemPrediction],
    samples: &[Sample],
    cfg: &RunConfig,
    vocab: &Vocab,
) -> Result<Vec<TaskMetric>, FpoError> {
    let mut out = Vec::new();
    for task in cfg.all_tasks() {
        let seen = cfg.tasks.contains(&task);
        let mut these: Vec<&ItemPrediction> = preds.iter().filter(|p| p.key.task == task).collect();
        these.sort_by_key(|p| p.key);
        if these.is_empty() {
            continue;
        }
        let report = if task == TaskKind::TSim {
            let (mut model, mut oracle, mut count) = (0.0, 0.0, 0);
            for (ti, s) in samples.iter().enumerate() {
                let scores: Vec<f64> = these.iter().filter(|p| p.key.traj as usize == ti).map(|p| p.score).collect();
                if scores.len() != s.traj.len() || s.traj.len() < 2 {
                    continue;
                }
                let mask = simplify_mask(&s.traj, cfg.thresholds.simplify_epsilon)?;
                let k = mask.iter().filter(|&&m| m).count();
                oracle += sed(&subset(&s.traj, &mask), &s.traj)?;
                model += tsim_sed(&s.traj, &scores, k)?;
                count += 1;
            }
            let c = count.max(1) as f64;
            MetricReport::sed(task, model / c, count, Some(oracle / c))
        } else {
            let pred: Vec<usize> = these.iter().map(|p| p.pred).collect();
            let truth: Vec<usize> = these.iter().map(|p| p.target).collect();
            match positive_token(task, vocab) {
                Some(pos) => {
                    let avg = F1Average::Binary { positive: pos };
                    let baseline = f1_score(&vec![pos; truth.len()], &truth, avg)?;
                    MetricReport::f1(task, f1_score(&pred, &truth, avg)?, truth.len(), Some(baseline))
                }
                None => {
                    let m = majority(&truth);
                    let baseline = f1_score(&vec![m; truth.len()], &truth, F1Average::Macro)?;
                    MetricReport::f1(task, f1_score(&pred, &truth, F1Average::Macro)?, truth.len(), Some(baseline))
                }
            }
        };
        out.push(TaskMetric { seen, report });
    }
    Ok(out)
}
