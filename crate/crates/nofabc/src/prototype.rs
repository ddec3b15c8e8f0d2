//! Prototype extraction, adapter-feature integration, and cosine
//! classification.
//!
//! Prototypes are written once at their task and never revisited; later
//! inference compares current integrated features against them as-is.

use std::collections::BTreeMap;

use ndarray::Array1;

use crate::competition::AllocationWeights;
use crate::data::TaskDataset;
use crate::error::{NofaError, Result};
use crate::model::{multi_adapter_features, AdapterSet, FeatureVec, FrozenBackbone};

/// Alpha-weighted feature integration: (sum alpha_i * phi_i) / t.
///
/// The divisor is the adapter count t, not sum(alpha) — weights zeroed by
/// elimination shrink the integrated feature rather than renormalizing it.
/// `None` weights means the uniform alpha_i = 1 case.
pub fn integrate_features(
    features: &[FeatureVec],
    weights: Option<&AllocationWeights>,
) -> Result<FeatureVec> {
    if features.is_empty() {
        return Err(NofaError::Empty("feature list"));
    }
    if let Some(w) = weights {
        if w.alpha.len() != features.len() {
            return Err(NofaError::ShapeMismatch {
                expected: features.len(),
                got: w.alpha.len(),
                context: "allocation weights",
            });
        }
    }
    let t = features.len() as f64;
    let mut acc = Array1::zeros(features[0].len());
    for (i, f) in features.iter().enumerate() {
        let a = weights.map(|w| w.alpha[i]).unwrap_or(1.0);
        acc.zip_mut_with(f, |s, &v| *s += a * v);
    }
    Ok(acc / t)
}

/// Variant dividing by sum(alpha) instead of t (opt-in experiment flag).
pub fn integrate_features_renormalized(
    features: &[FeatureVec],
    weights: &AllocationWeights,
) -> Result<FeatureVec> {
    let raw = integrate_features(features, Some(weights))?;
    let total: f64 = weights.alpha.iter().sum();
    if total <= 0.0 {
        return Err(NofaError::DegenerateNorm("alpha sum"));
    }
    Ok(raw * features.len() as f64 / total)
}

/// One row per seen class, appended at that class's task and immutable
/// afterward. Row order is the global seen-class order.
#[derive(Debug, Clone, Default)]
pub struct PrototypeBank {
    classes: Vec<usize>,
    rows: Vec<Array1<f64>>,
    class_to_task: BTreeMap<usize, usize>,
    counts: Vec<usize>,
}

impl PrototypeBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.class_to_task.get(&class).copied()
    }

    pub fn row(&self, idx: usize) -> &Array1<f64> {
        &self.rows[idx]
    }

    /// Column indices of the score vector grouped by owning task, in task
    /// order 1..=t.
    pub fn task_partition(&self, num_tasks: usize) -> Vec<Vec<usize>> {
        let mut partition = vec![Vec::new(); num_tasks];
        for (idx, class) in self.classes.iter().enumerate() {
            let task = self.class_to_task[class];
            partition[task - 1].push(idx);
        }
        partition
    }

    /// Mean integrated feature per class in the task dataset, using the
    /// uniform integration over all adapters trained so far.
    pub fn build_prototypes(
        &mut self,
        dataset: &TaskDataset,
        adapters: &[AdapterSet],
        backbone: &FrozenBackbone,
        task_id: usize,
    ) -> Result<()> {
        if adapters.is_empty() {
            return Err(NofaError::Empty("adapter list"));
        }
        // Sums keyed by class, in the dataset's sorted label order.
        let task_classes: Vec<usize> = dataset.label_set.iter().copied().collect();
        for c in &task_classes {
            if self.class_to_task.contains_key(c) {
                return Err(NofaError::Dataset(format!(
                    "class {c} already has a prototype (task {})",
                    self.class_to_task[c]
                )));
            }
        }
        let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
        for (x, y) in &dataset.samples {
            let feats = multi_adapter_features(x, backbone, adapters)?;
            let phi = integrate_features(&feats, None)?;
            let entry = sums
                .entry(*y)
                .or_insert_with(|| (Array1::zeros(phi.len()), 0));
            entry.0 += &phi;
            entry.1 += 1;
        }
        for c in task_classes {
            let (sum, n) = sums
                .remove(&c)
                .ok_or_else(|| NofaError::Dataset(format!("class {c} has zero samples")))?;
            self.classes.push(c);
            self.rows.push(sum / n as f64);
            self.counts.push(n);
            self.class_to_task.insert(c, task_id);
        }
        Ok(())
    }

    /// Cosine similarity of `phi` against every prototype row, in bank
    /// order. Scale-invariant in `phi`.
    pub fn cosine_scores(&self, phi: &FeatureVec) -> Result<Array1<f64>> {
        if self.classes.is_empty() {
            return Err(NofaError::Empty("prototype bank"));
        }
        let phi_norm = phi.dot(phi).sqrt();
        if phi_norm <= 0.0 {
            return Err(NofaError::DegenerateNorm("query feature"));
        }
        let mut scores = Array1::zeros(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            let row_norm = row.dot(row).sqrt();
            if row_norm <= 0.0 {
                return Err(NofaError::DegenerateNorm("prototype row"));
            }
            scores[i] = row.dot(phi) / (row_norm * phi_norm);
        }
        Ok(scores)
    }
}
