use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TkeError;

/// Largest layer count for the exact inclusion probabilities (2^N states).
pub const MAX_EXACT_LAYERS: usize = 24;
const CR_EPS: f64 = 1e-12;

/// ‖current − previous‖_F / (‖previous‖_F + ε).
pub fn change_rate(current: &[f64], previous: &[f64]) -> Result<f64, TkeError> {
    if current.len() != previous.len() {
        return Err(TkeError::ShapeMismatch(current.len(), previous.len()));
    }
    let diff = current.iter().zip(previous).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let base = previous.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(diff / (base + CR_EPS))
}

/// Normalized change rates; uniform when every rate is zero.
pub fn ratios(crs: &[f64]) -> Vec<f64> {
    let total: f64 = crs.iter().sum();
    if crs.is_empty() {
        return Vec::new();
    }
    if total > 0.0 && total.is_finite() {
        crs.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / crs.len() as f64; crs.len()]
    }
}

/// Number of layers to train, ⌊m·N⌋.
pub fn layers_to_train(m: f64, n: usize) -> usize {
    ((m * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Probability of drawing `j` next, given the already drawn set `mask`:
/// proportional to ratio over the remaining layers, or uniform among them
/// when none has positive ratio.
fn draw_weight(r: &[f64], mask: u64, j: usize) -> f64 {
    let remaining = (0..r.len()).filter(|&k| mask & (1 << k) == 0);
    let rem_mass: f64 = remaining.clone().map(|k| r[k]).sum();
    if rem_mass > 0.0 {
        r[j] / rem_mass
    } else {
        1.0 / remaining.count() as f64
    }
}

/// Inclusion probability of every layer after `nm` sequential draws without
/// replacement, each proportional to ratio among the layers not yet drawn.
/// Computed exactly over drawn sets: f(S) is the probability that the first
/// |S| draws are S in some order.
pub fn selection_probabilities(r: &[f64], nm: usize) -> Result<Vec<f64>, TkeError> {
    let n = r.len();
    if nm > n {
        return Err(TkeError::InvalidNm { nm, n });
    }
    if n > MAX_EXACT_LAYERS {
        return Err(TkeError::TooManyLayers(n));
    }
    if r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(TkeError::InvalidRatios);
    }
    let mut f = vec![0.0; 1 << n];
    f[0] = 1.0;
    let mut probs = vec![0.0; n];
    for mask in 1u64..(1 << n) {
        let size = mask.count_ones() as usize;
        if size > nm {
            continue;
        }
        let mut p = 0.0;
        for j in (0..n).filter(|&j| mask & (1 << j) != 0) {
            let prev = mask & !(1 << j);
            if f[prev as usize] > 0.0 {
                p += f[prev as usize] * draw_weight(r, prev, j);
            }
        }
        f[mask as usize] = p;
        if size == nm {
            for (i, pr) in probs.iter_mut().enumerate() {
                if mask & (1 << i) != 0 {
                    *pr += p;
                }
            }
        }
    }
    Ok(probs)
}

pub fn selection_probability(r: &[f64], i: usize, nm: usize) -> Result<f64, TkeError> {
    if i >= r.len() {
        return Err(TkeError::UnknownLayer(i));
    }
    Ok(selection_probabilities(r, nm)?[i])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub round: u32,
    pub nm: usize,
    /// Layers in draw order.
    pub selected: Vec<usize>,
    pub probabilities: Vec<f64>,
}

/// `nm` sequential proportional draws without replacement, with the same
/// zero-mass rule as the closed form.
pub fn sample_layers(r: &[f64], nm: usize, rng: &mut impl Rng) -> Result<Vec<usize>, TkeError> {
    let n = r.len();
    if nm > n {
        return Err(TkeError::InvalidNm { nm, n });
    }
    let mut mask = 0u64;
    let mut out = Vec::with_capacity(nm);
    for _ in 0..nm {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        let mut last = None;
        for j in (0..n).filter(|&j| mask & (1 << j) == 0) {
            let w = draw_weight(r, mask, j);
            if w > 0.0 {
                last = Some(j);
            }
            acc += w;
            if u < acc {
                pick = Some(j);
                break;
            }
        }
        // Rounding can leave u just above the final cumulative weight.
        let j = pick.or(last).expect("a remaining layer");
        mask |= 1 << j;
        out.push(j);
    }
    Ok(out)
}

pub fn select_layers(r: &[f64], nm: usize, seed: u64, round: u32) -> Result<SelectionPlan, TkeError> {
    let probabilities = selection_probabilities(r, nm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let selected = sample_layers(r, nm, &mut rng)?;
    Ok(SelectionPlan { round, nm, selected, probabilities })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub cr: f64,
    pub ratio: f64,
}

/// Keeps the previous snapshot of each layer's parameters and turns the
/// next snapshot into change rates and ratios.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ChangeTracker {
    prev: Vec<Option<Vec<f64>>>,
    last: Vec<LayerStats>,
}

impl ChangeTracker {
    pub fn new(n_layers: usize) -> Self {
        Self { prev: vec![None; n_layers], last: Vec::new() }
    }

    /// Ratios from the stats of the last update, uniform before any.
    pub fn ratios(&self) -> Vec<f64> {
        if self.last.is_empty() {
            return vec![1.0 / self.prev.len().max(1) as f64; self.prev.len()];
        }
        self.last.iter().map(|s| s.ratio).collect()
    }

    pub fn stats(&self) -> &[LayerStats] {
        &self.last
    }

    /// Records a new snapshot. A layer without a previous snapshot gets
    /// rate 0; when no layer has one the ratios stay uniform.
    pub fn update(&mut self, snapshots: &[Vec<f64>]) -> Result<&[LayerStats], TkeError> {
        if snapshots.len() != self.prev.len() {
            return Err(TkeError::ShapeMismatch(snapshots.len(), self.prev.len()));
        }
        let have_prev = self.prev.iter().any(Option::is_some);
        let crs = snapshots
            .iter()
            .zip(&self.prev)
            .map(|(cur, prev)| prev.as_ref().map_or(Ok(0.0), |p| change_rate(cur, p)))
            .collect::<Result<Vec<_>, _>>()?;
        let rs = if have_prev { ratios(&crs) } else { vec![1.0 / crs.len().max(1) as f64; crs.len()] };
        self.last = crs.iter().zip(&rs).enumerate().map(|(layer, (&cr, &ratio))| LayerStats { layer, cr, ratio }).collect();
        self.prev = snapshots.iter().cloned().map(Some).collect();
        Ok(&self.last)
    }
}
