use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, TensorError};

/// Round `r` is frozen iff `r mod period != 0`; round 0 is always fresh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeSchedule {
    pub period: usize,
}

impl Default for FreezeSchedule {
    fn default() -> Self {
        Self { period: 2 }
    }
}

impl FreezeSchedule {
    pub fn new(period: usize) -> Self {
        Self { period: period.max(1) }
    }
}

pub fn is_frozen(r: usize, schedule: &FreezeSchedule) -> bool {
    r % schedule.period.max(1) != 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Local,
    CrossClient,
}

/// Cross-client iff any point of the task's context window is owned by a
/// client other than `owner`.
pub fn route_task(context_owners: &[usize], owner: usize) -> Route {
    if context_owners.iter().any(|&c| c != owner) {
        Route::CrossClient
    } else {
        Route::Local
    }
}

/// Owners of the points within `radius` of index `i` (inclusive).
pub fn context_window(owners: &[usize], i: usize, radius: usize) -> &[usize] {
    let lo = i.saturating_sub(radius);
    let hi = (i + radius + 1).min(owners.len());
    &owners[lo..hi]
}

/// Unweighted sum of per-task losses on the graph.
pub fn multi_task_loss(g: &mut Graph, losses: &[NodeId]) -> Result<NodeId, TensorError> {
    let (&first, rest) = losses.split_first().ok_or(TensorError::Empty("multi_task_loss"))?;
    rest.iter().try_fold(first, |acc, &l| g.add(acc, l))
}

pub fn multi_task_loss_value(losses: &[f64]) -> f64 {
    losses.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn freeze_examples() {
        let two = FreezeSchedule::new(2);
        assert!(!is_frozen(0, &two));
        assert!(is_frozen(1, &two));
        assert!(!is_frozen(2, &two));
        let one = FreezeSchedule::new(1);
        assert!((0..20).all(|r| !is_frozen(r, &one)));
        let four = FreezeSchedule::new(4);
        let frozen: Vec<usize> = (0..9).filter(|&r| is_frozen(r, &four)).collect();
        assert_eq!(frozen, vec![1, 2, 3, 5, 6, 7]);
        assert_eq!(FreezeSchedule::default().period, 2);
    }

    #[test]
    fn routing_examples() {
        // Gap strictly inside client 1's segment.
        let owners = [0, 0, 1, 1, 1, 1, 1, 2];
        assert_eq!(route_task(&owners[3..5], 1), Route::Local);
        // Gap between indices 1 and 2: neighbours on clients 0 and 1.
        assert_eq!(route_task(&owners[1..3], 0), Route::CrossClient);
        // Classification over a wholly local trajectory.
        assert_eq!(route_task(&[3, 3, 3], 3), Route::Local);
        assert_eq!(context_window(&owners, 0, 2), &[0, 0, 1]);
        assert_eq!(context_window(&owners, 7, 1), &[1, 2]);
    }

    #[test]
    fn multi_task_sum() {
        assert_eq!(multi_task_loss_value(&[0.5, 0.25]), 0.75);
        assert_eq!(multi_task_loss_value(&[0.4]), 0.4);
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.5)).unwrap();
        let b = g.constant(Tensor::scalar(0.25)).unwrap();
        let s = multi_task_loss(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(s).item(), 0.75);
        let one = multi_task_loss(&mut g, &[a]).unwrap();
        assert_eq!(g.value(one).item(), 0.5);
        assert!(multi_task_loss(&mut g, &[]).is_err());
    }
}
