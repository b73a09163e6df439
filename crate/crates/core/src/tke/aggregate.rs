use serde::{Deserialize, Serialize};

use super::TkeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// W̄ = ((|C|−|C′|)·avg + W̄_prev) / (|C|−|C′|+1).
    #[default]
    Blend,
    /// Sample-weighted mean of the updates only.
    FedAvg,
}

/// Combines client updates `(W_j, n_j)` of one layer with the previous
/// global value. `total_clients` is |C|; the number of updates is |C′|.
pub fn aggregate_lora(
    updates: &[(&[f64], f64)],
    previous: &[f64],
    total_clients: usize,
    mode: AggregationMode,
) -> Result<Vec<f64>, TkeError> {
    if updates.is_empty() {
        return Err(TkeError::NoUpdates);
    }
    if updates.len() > total_clients {
        return Err(TkeError::TooManyUpdates { updates: updates.len(), clients: total_clients });
    }
    let len = previous.len();
    let mut weighted = vec![0.0; len];
    let mut n_total = 0.0;
    for &(w, n) in updates {
        if w.len() != len {
            return Err(TkeError::ShapeMismatch(w.len(), len));
        }
        if !(n > 0.0) || !n.is_finite() {
            return Err(TkeError::InvalidWeight(n));
        }
        n_total += n;
        for (acc, v) in weighted.iter_mut().zip(w) {
            *acc += n * v;
        }
    }
    let avg = weighted.into_iter().map(|s| s / n_total);
    Ok(match mode {
        AggregationMode::FedAvg => avg.collect(),
        AggregationMode::Blend => {
            let k = (total_clients - updates.len()) as f64;
            avg.zip(previous).map(|(a, &p)| (k * a + p) / (k + 1.0)).collect()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let w = [2.0];
        let out = aggregate_lora(&[(&w, 10.0)], &[1.0], 3, AggregationMode::Blend).unwrap();
        assert!((out[0] - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn full_participation_keeps_previous() {
        let (a, b) = ([7.0, -1.0], [3.0, 2.0]);
        let prev = [0.5, 0.25];
        let out = aggregate_lora(&[(&a, 1.0), (&b, 4.0)], &prev, 2, AggregationMode::Blend).unwrap();
        assert_eq!(out, prev.to_vec());
    }

    #[test]
    fn fixed_point_and_fedavg() {
        let w = [0.3, 0.3];
        let out = aggregate_lora(&[(&w, 2.0), (&w, 5.0)], &w, 5, AggregationMode::Blend).unwrap();
        for v in out {
            assert!((v - 0.3).abs() < 1e-15);
        }
        let (a, b) = ([1.0], [4.0]);
        let out = aggregate_lora(&[(&a, 1.0), (&b, 2.0)], &[100.0], 2, AggregationMode::FedAvg).unwrap();
        assert!((out[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert_eq!(aggregate_lora(&[], &[1.0], 2, AggregationMode::Blend), Err(TkeError::NoUpdates));
        let w = [1.0];
        assert!(matches!(aggregate_lora(&[(&w, 0.0)], &[1.0], 2, AggregationMode::Blend), Err(TkeError::InvalidWeight(_))));
        assert!(matches!(
            aggregate_lora(&[(&w, 1.0), (&w, 1.0)], &[1.0], 1, AggregationMode::Blend),
            Err(TkeError::TooManyUpdates { .. })
        ));
        assert!(matches!(aggregate_lora(&[(&w, 1.0)], &[1.0, 2.0], 2, AggregationMode::Blend), Err(TkeError::ShapeMismatch(1, 2))));
    }
}
