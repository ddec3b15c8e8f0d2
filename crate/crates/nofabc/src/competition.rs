//! Bi-level competition over adapter coefficients: intra-task winner-takes-
//! all (or the weighted-sum / top-half ablation strategies), inter-task
//! elimination of the lowest o-percent, and the stability fusion of
//! allocator logits with cosine scores.

use ndarray::Array1;

use crate::allocator::{AllocatorWeights, RlsState};
use crate::error::{NofaError, Result};
use crate::model::{AdapterSet, FrozenBackbone};

/// Per-task adapter coefficients after competition. Eliminated entries are
/// exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationWeights {
    pub alpha: Vec<f64>,
    pub eliminated: Vec<bool>,
}

impl AllocationWeights {
    pub fn uniform(t: usize) -> Self {
        AllocationWeights {
            alpha: vec![1.0; t],
            eliminated: vec![false; t],
        }
    }

    /// Contribution proportions alpha_i / sum(alpha).
    pub fn proportions(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        if total <= 0.0 {
            return vec![0.0; self.alpha.len()];
        }
        self.alpha.iter().map(|a| a / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IntraStrategy {
    /// Sum of all task-class probabilities.
    WeightedSum,
    /// Sum of the top half (ceil) of task-class probabilities.
    TopHalf,
    /// Maximum task-class probability.
    Wta,
}

impl std::str::FromStr for IntraStrategy {
    type Err = NofaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_sum" => Ok(IntraStrategy::WeightedSum),
            "top50" => Ok(IntraStrategy::TopHalf),
            "wta" => Ok(IntraStrategy::Wta),
            other => Err(NofaError::Config(format!("unknown intra strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SeConfig {
    pub beta: f64,
    pub normalize_before_fuse: bool,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            beta: 0.5,
            normalize_before_fuse: false,
        }
    }
}

impl SeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(NofaError::Config("beta must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Reads one adapter's coefficient off its own softmax vector: the slice is
/// the column indices of that adapter's task classes.
pub fn slice_coefficient(probs: &Array1<f64>, slice: &[usize], strategy: IntraStrategy) -> Result<f64> {
    if slice.is_empty() {
        return Err(NofaError::Empty("task class slice"));
    }
    let mut vals: Vec<f64> = slice.iter().map(|&i| probs[i]).collect();
    Ok(match strategy {
        IntraStrategy::Wta => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        IntraStrategy::WeightedSum => vals.iter().sum(),
        IntraStrategy::TopHalf => {
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let keep = vals.len().div_ceil(2);
            vals[..keep].iter().sum()
        }
    })
}

/// Computes per-adapter coefficients: adapter i gets a full-softmax over all
/// seen classes of its own allocator logits, then the chosen aggregation
/// over task i's class slice.
pub fn intra_task_alphas(
    x: &[f64],
    backbone: &FrozenBackbone,
    adapters: &[AdapterSet],
    weights: &AllocatorWeights,
    state: &RlsState,
    partition: &[Vec<usize>],
    strategy: IntraStrategy,
) -> Result<AllocationWeights> {
    if adapters.is_empty() {
        return Err(NofaError::Empty("adapter list"));
    }
    if partition.len() < adapters.len() {
        return Err(NofaError::ShapeMismatch {
            expected: adapters.len(),
            got: partition.len(),
            context: "task partition",
        });
    }
    let mut alpha = Vec::with_capacity(adapters.len());
    for (i, adapter) in adapters.iter().enumerate() {
        let logits = crate::allocator::allocator_logits(x, backbone, adapter, weights, state)?;
        let probs = softmax(&logits);
        alpha.push(slice_coefficient(&probs, &partition[i], strategy)?);
    }
    Ok(AllocationWeights {
        eliminated: vec![false; alpha.len()],
        alpha,
    })
}

/// Winner-takes-all coefficients (the default intra strategy).
pub fn wta(
    x: &[f64],
    backbone: &FrozenBackbone,
    adapters: &[AdapterSet],
    weights: &AllocatorWeights,
    state: &RlsState,
    partition: &[Vec<usize>],
) -> Result<AllocationWeights> {
    intra_task_alphas(x, backbone, adapters, weights, state, partition, IntraStrategy::Wta)
}

/// Zeroes the k = floor(t * o / 100) smallest coefficients, capped so at
/// least one survives. Ties eliminate the lower task index first.
pub fn lof(mut weights: AllocationWeights, o_percent: u32) -> AllocationWeights {
    let t = weights.alpha.len();
    if t == 0 {
        return weights;
    }
    let k = ((t * o_percent.min(100) as usize) / 100).min(t - 1);
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| {
        weights.alpha[a]
            .partial_cmp(&weights.alpha[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    for &idx in order.iter().take(k) {
        weights.alpha[idx] = 0.0;
        weights.eliminated[idx] = true;
    }
    weights
}

/// y_hat = beta * nfa_logits + (1 - beta) * ia_scores, optionally softmaxing
/// both sides first.
pub fn se_fuse(nfa_logits: &Array1<f64>, ia_scores: &Array1<f64>, cfg: &SeConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    if nfa_logits.len() != ia_scores.len() {
        return Err(NofaError::ShapeMismatch {
            expected: nfa_logits.len(),
            got: ia_scores.len(),
            context: "fusion score length",
        });
    }
    let (a, b) = if cfg.normalize_before_fuse {
        (softmax(nfa_logits), softmax(ia_scores))
    } else {
        (nfa_logits.clone(), ia_scores.clone())
    };
    Ok(&a * cfg.beta + &b * (1.0 - cfg.beta))
}

/// Lowest-index argmax, deterministic on exact ties.
pub fn argmax(scores: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn read_off_example_from_single_softmax_vector() {
        // Softmax vector (0.1, 0.3, 0.2, 0.4); task1 = classes {0, 1},
        // task2 = classes {2, 3}.
        let probs = array![0.1, 0.3, 0.2, 0.4];
        let a1 = slice_coefficient(&probs, &[0, 1], IntraStrategy::Wta).unwrap();
        let a2 = slice_coefficient(&probs, &[2, 3], IntraStrategy::Wta).unwrap();
        assert!((a1 - 0.3).abs() < 1e-15);
        assert!((a2 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_sums_the_slice() {
        let probs = array![0.1, 0.3, 0.2, 0.4];
        let a1 = slice_coefficient(&probs, &[0, 1], IntraStrategy::WeightedSum).unwrap();
        let a2 = slice_coefficient(&probs, &[2, 3], IntraStrategy::WeightedSum).unwrap();
        assert!((a1 - 0.4).abs() < 1e-15);
        assert!((a2 - 0.6).abs() < 1e-15);
        assert!((a1 + a2 - 1.0).abs() < 1e-15); // softmax totality
    }

    #[test]
    fn top_half_degenerates_to_wta_on_singleton() {
        let probs = array![0.35, 0.65];
        let top = slice_coefficient(&probs, &[1], IntraStrategy::TopHalf).unwrap();
        let wta = slice_coefficient(&probs, &[1], IntraStrategy::Wta).unwrap();
        assert_eq!(top, wta);
    }

    #[test]
    fn top_half_keeps_top_one_of_two() {
        let probs = array![0.05, 0.25, 0.7];
        let v = slice_coefficient(&probs, &[0, 1], IntraStrategy::TopHalf).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn empty_slice_errors() {
        let probs = array![1.0];
        assert!(slice_coefficient(&probs, &[], IntraStrategy::Wta).is_err());
    }

    fn weights(alpha: &[f64]) -> AllocationWeights {
        AllocationWeights {
            alpha: alpha.to_vec(),
            eliminated: vec![false; alpha.len()],
        }
    }

    #[test]
    fn lof_zero_percent_is_identity() {
        let w = lof(weights(&[0.3, 0.1, 0.6]), 0);
        assert_eq!(w.alpha, vec![0.3, 0.1, 0.6]);
        assert!(w.eliminated.iter().all(|&e| !e));
    }

    #[test]
    fn lof_two_vector_fifty_percent() {
        let w = lof(weights(&[0.3, 0.4]), 50);
        assert_eq!(w.alpha, vec![0.0, 0.4]);
        assert_eq!(w.eliminated, vec![true, false]);
    }

    #[test]
    fn lof_five_vector_fifty_percent_sort_and_zero() {
        let w = lof(weights(&[0.1, 0.5, 0.2, 0.4, 0.3]), 50);
        assert_eq!(w.alpha, vec![0.0, 0.5, 0.0, 0.4, 0.3]);
    }

    #[test]
    fn lof_full_elimination_keeps_one_survivor() {
        let w = lof(weights(&[0.2, 0.9, 0.5]), 100);
        assert_eq!(w.eliminated.iter().filter(|&&e| e).count(), 2);
        assert_eq!(w.alpha, vec![0.0, 0.9, 0.0]);
    }

    #[test]
    fn lof_ties_eliminate_lower_task_index() {
        let w = lof(weights(&[0.5, 0.5, 0.5, 0.5]), 50);
        assert_eq!(w.eliminated, vec![true, true, false, false]);
    }

    #[test]
    fn se_endpoints_are_identities() {
        let nfa = array![1.0, 3.0];
        let ia = array![0.2, -0.1];
        let zero = se_fuse(&nfa, &ia, &SeConfig { beta: 0.0, normalize_before_fuse: false }).unwrap();
        assert_eq!(zero, ia);
        let one = se_fuse(&nfa, &ia, &SeConfig { beta: 1.0, normalize_before_fuse: false }).unwrap();
        assert_eq!(one, nfa);
    }

    #[test]
    fn se_half_blend_arithmetic() {
        let out = se_fuse(
            &array![1.0, 3.0],
            &array![0.2, -0.1],
            &SeConfig { beta: 0.5, normalize_before_fuse: false },
        )
        .unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 1.45).abs() < 1e-15);
    }

    #[test]
    fn se_length_mismatch_errors() {
        assert!(se_fuse(&array![1.0], &array![1.0, 2.0], &SeConfig::default()).is_err());
    }

    #[test]
    fn se_invalid_beta_rejected() {
        let cfg = SeConfig { beta: 1.5, normalize_before_fuse: false };
        assert!(se_fuse(&array![1.0], &array![1.0], &cfg).is_err());
    }

    #[test]
    fn argmax_takes_lowest_index_on_tie() {
        assert_eq!(argmax(&array![0.2, 0.9, 0.9]), 1);
    }
}
