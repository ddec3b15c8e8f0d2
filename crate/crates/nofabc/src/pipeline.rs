//! End-to-end class-incremental protocol runner and metric computation.
//!
//! Per task: train an adapter, extract prototypes, expand first-adapter
//! features, update the allocator statistics, re-solve, then evaluate every
//! seen test set with the full inference path. Train splits are consumed at
//! their own stage and physically dropped afterward; every read is logged so
//! the exemplar-free constraint is auditable.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::allocator::{self, AllocatorWeights, RlsState};
use crate::competition::{
    self, argmax, AllocationWeights, IntraStrategy, SeConfig,
};
use crate::data::{CilStream, TaskDataset};
use crate::error::{NofaError, Result};
use crate::model::{multi_adapter_features, AdapterSet, FrozenBackbone};
use crate::prototype::{integrate_features, integrate_features_renormalized, PrototypeBank};
use crate::trainer::{train_adapter_with_rank, TrainConfig};

/// Which parts of the inference path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Components {
    /// Uniform feature integration + cosine classifier only.
    Ia,
    /// Allocator-driven weighting with the weighted-sum aggregation, no
    /// elimination, no fusion.
    IaNfa,
    /// Intra-task competition (configured strategy) plus elimination.
    IaNfaBlc,
    /// Allocator logits alone (first-task adapter), no prototype route.
    NfaOnly,
    /// Competition plus stability fusion.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub feature_dim: usize,
    pub num_blocks: usize,
    pub adapter_rank: usize,
    pub expansion_dim: usize,
    pub gamma: f64,
    pub components: Components,
    pub intra: IntraStrategy,
    pub o_percent: u32,
    pub se: SeConfig,
    pub renormalize_alpha: bool,
    pub train: TrainConfig,
    pub max_adapters: Option<usize>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            feature_dim: 64,
            num_blocks: 2,
            adapter_rank: 16,
            expansion_dim: 512,
            gamma: 1.0,
            components: Components::Full,
            intra: IntraStrategy::Wta,
            o_percent: 50,
            se: SeConfig::default(),
            renormalize_alpha: false,
            train: TrainConfig::default(),
            max_adapters: None,
            seed: 1993,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.num_blocks == 0 || self.adapter_rank == 0 {
            return Err(NofaError::Config("model dims must be >= 1".into()));
        }
        if self.expansion_dim == 0 {
            return Err(NofaError::Config("expansion_dim must be >= 1".into()));
        }
        if self.gamma <= 0.0 {
            return Err(NofaError::Config("gamma must be > 0".into()));
        }
        if self.o_percent > 100 {
            return Err(NofaError::Config("o_percent must be in [0, 100]".into()));
        }
        self.se.validate()?;
        self.train.validate()
    }
}

/// One train-split read event; the acceptance audit asserts stage ==
/// train_task for all of them.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AuditEvent {
    pub stage: usize,
    pub train_task: usize,
}

/// Lower-triangular accuracy bookkeeping: entries[j][t] is the accuracy on
/// task t+1's test split after learning task j+1. test_sizes holds per-task
/// test-set sample counts for pooled stage accuracies.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AccuracyMatrix {
    pub entries: Vec<Vec<f64>>,
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    pub fn num_tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.entries.len();
        if t == 0 {
            return Err(NofaError::Empty("accuracy matrix"));
        }
        if self.test_sizes.len() != t {
            return Err(NofaError::ShapeMismatch {
                expected: t,
                got: self.test_sizes.len(),
                context: "test sizes",
            });
        }
        for (j, row) in self.entries.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(NofaError::Dataset(format!(
                    "accuracy matrix row {} has {} entries, expected {}",
                    j + 1,
                    row.len(),
                    j + 1
                )));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(NofaError::Dataset("accuracy outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Pooled accuracy over all seen test samples after stage j (1-based).
    pub fn stage_accuracy(&self, stage: usize) -> f64 {
        let row = &self.entries[stage - 1];
        let mut correct = 0.0;
        let mut total = 0.0;
        for (t, &acc) in row.iter().enumerate() {
            let n = self.test_sizes[t] as f64;
            correct += acc * n;
            total += n;
        }
        correct / total
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CilMetrics {
    /// Mean of the per-stage pooled accuracies.
    pub avg_acc: f64,
    /// Pooled accuracy after the final stage.
    pub last_acc: f64,
    pub bwt: f64,
    /// False when T = 1 and the backward-transfer formula is undefined
    /// (reported as 0 by convention).
    pub bwt_defined: bool,
    /// Sample-averaged own-task contribution proportion, final stage.
    pub p_a: f64,
    pub stage_acc: Vec<f64>,
    /// Final-stage per-task accuracies A_{T,t}.
    pub per_task_final: Vec<f64>,
}

/// Metric arithmetic from a complete matrix plus per-task own-adapter
/// proportion samples gathered at the final stage.
pub fn compute_metrics(matrix: &AccuracyMatrix, p_a_samples: &[Vec<f64>]) -> Result<CilMetrics> {
    matrix.validate()?;
    let t_total = matrix.num_tasks();
    let stage_acc: Vec<f64> = (1..=t_total).map(|j| matrix.stage_accuracy(j)).collect();
    let avg_acc = stage_acc.iter().sum::<f64>() / t_total as f64;
    let last_acc = stage_acc[t_total - 1];
    let final_row = &matrix.entries[t_total - 1];

    let (bwt, bwt_defined) = if t_total > 1 {
        let sum: f64 = (0..t_total - 1)
            .map(|t| final_row[t] - matrix.entries[t][t])
            .sum();
        (sum / (t_total - 1) as f64, true)
    } else {
        (0.0, false)
    };

    let p_a = if p_a_samples.is_empty() {
        0.0
    } else {
        let per_task: Vec<f64> = p_a_samples
            .iter()
            .map(|v| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            })
            .collect();
        per_task.iter().sum::<f64>() / per_task.len() as f64
    };

    Ok(CilMetrics {
        avg_acc,
        last_acc,
        bwt,
        bwt_defined,
        p_a,
        stage_acc,
        per_task_final: final_row.clone(),
    })
}

/// Incremental learner driven one task at a time. Exposed so checkpoint /
/// resume flows can interleave with the task loop.
pub struct CilRunner {
    pub cfg: PipelineConfig,
    pub backbone: FrozenBackbone,
    pub adapters: Vec<AdapterSet>,
    pub bank: PrototypeBank,
    pub state: RlsState,
    pub weights: Option<AllocatorWeights>,
    pub tasks_done: usize,
    pub audit: Vec<AuditEvent>,
}

impl CilRunner {
    pub fn new(input_dim: usize, cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = FrozenBackbone::new(input_dim, cfg.feature_dim, cfg.num_blocks, cfg.seed);
        let state = RlsState::new(
            cfg.feature_dim,
            cfg.expansion_dim,
            cfg.gamma,
            cfg.seed.wrapping_add(0x5eed),
        )?;
        Ok(CilRunner {
            cfg,
            backbone,
            adapters: Vec::new(),
            bank: PrototypeBank::new(),
            state,
            weights: None,
            tasks_done: 0,
            audit: Vec::new(),
        })
    }

    /// Consumes one task's train split: adapter training, prototype
    /// extraction, allocator update, re-solve. The split is dropped on
    /// return, so later stages cannot read it.
    pub fn learn_task(&mut self, train: TaskDataset) -> Result<()> {
        let task_id = self.tasks_done + 1;
        let step = |e: NofaError| e.at_task(task_id);
        self.audit.push(AuditEvent {
            stage: task_id,
            train_task: task_id,
        });

        let capped = self
            .cfg
            .max_adapters
            .map(|cap| self.adapters.len() >= cap)
            .unwrap_or(false);
        if !capped {
            let mut train_cfg = self.cfg.train.clone();
            train_cfg.seed = self.cfg.seed.wrapping_add(task_id as u64 * 7919);
            let outcome = train_adapter_with_rank(
                &train,
                &self.backbone,
                &train_cfg,
                task_id,
                self.cfg.adapter_rank,
            )
            .map_err(step)?;
            self.adapters.push(outcome.adapter);
        }

        self.bank
            .build_prototypes(&train, &self.adapters, &self.backbone, task_id)
            .map_err(step)?;

        let classes: Vec<usize> = train.label_set.iter().copied().collect();
        self.state.add_classes(&classes).map_err(step)?;
        let first = &self.adapters[0];
        let n = train.len();
        let mut expanded = Array2::zeros((n, self.state.expansion_dim()));
        let mut labels = Vec::with_capacity(n);
        for (row, (x, y)) in train.samples.iter().enumerate() {
            let phi = self.backbone.forward_with_adapter(x, first).map_err(step)?;
            expanded.row_mut(row).assign(&self.state.expand(&phi).map_err(step)?);
            labels.push(*y);
        }
        let one_hot = self.state.one_hot(&labels).map_err(step)?;
        self.state.update(&expanded, &one_hot).map_err(step)?;
        if self.cfg.components != Components::Ia {
            self.weights = Some(self.state.solve().map_err(step)?);
        }
        self.tasks_done += 1;
        Ok(())
    }

    fn partition(&self) -> Vec<Vec<usize>> {
        self.bank.task_partition(self.tasks_done)
    }

    /// Allocation weights for one input under the configured components.
    pub fn allocation_for(&self, x: &[f64]) -> Result<AllocationWeights> {
        let t = self.adapters.len();
        match self.cfg.components {
            Components::Ia => Ok(AllocationWeights::uniform(t)),
            Components::IaNfa => competition::intra_task_alphas(
                x,
                &self.backbone,
                &self.adapters,
                self.weights.as_ref().ok_or(NofaError::Empty("allocator weights"))?,
                &self.state,
                &self.partition(),
                IntraStrategy::WeightedSum,
            ),
            Components::IaNfaBlc | Components::Full | Components::NfaOnly => {
                let alphas = competition::intra_task_alphas(
                    x,
                    &self.backbone,
                    &self.adapters,
                    self.weights.as_ref().ok_or(NofaError::Empty("allocator weights"))?,
                    &self.state,
                    &self.partition(),
                    self.cfg.intra,
                )?;
                Ok(competition::lof(alphas, self.cfg.o_percent))
            }
        }
    }

    /// Full inference path: scores over the seen classes (bank order) plus
    /// the allocation used.
    pub fn predict_scores(&self, x: &[f64]) -> Result<(Array1<f64>, AllocationWeights)> {
        if self.tasks_done == 0 {
            return Err(NofaError::Empty("no tasks learned"));
        }
        let allocation = self.allocation_for(x)?;

        if self.cfg.components == Components::NfaOnly {
            let w = self.weights.as_ref().ok_or(NofaError::Empty("allocator weights"))?;
            let logits = allocator_logits_first(x, self, w)?;
            return Ok((logits, allocation));
        }

        let feats = multi_adapter_features(x, &self.backbone, &self.adapters)?;
        let phi = if self.cfg.renormalize_alpha && self.cfg.components != Components::Ia {
            integrate_features_renormalized(&feats, &allocation)?
        } else {
            integrate_features(&feats, Some(&allocation))?
        };
        let ia_scores = self.bank.cosine_scores(&phi)?;

        let scores = match self.cfg.components {
            Components::Full => {
                let w = self.weights.as_ref().ok_or(NofaError::Empty("allocator weights"))?;
                let nfa_logits = allocator_logits_first(x, self, w)?;
                competition::se_fuse(&nfa_logits, &ia_scores, &self.cfg.se)?
            }
            _ => ia_scores,
        };
        Ok((scores, allocation))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let (scores, _) = self.predict_scores(x)?;
        Ok(self.bank.classes()[argmax(&scores)])
    }

    /// Accuracy on one test split.
    pub fn evaluate(&self, test: &TaskDataset) -> Result<f64> {
        let predictions = crate::par::try_map(&test.samples, |(x, _)| self.predict(x))?;
        let correct = predictions
            .iter()
            .zip(&test.samples)
            .filter(|(p, (_, y))| *p == y)
            .count();
        Ok(correct as f64 / test.len() as f64)
    }

    /// Sequential evaluation path, kept alongside the data-parallel default
    /// for benchmarking and reproducibility checks.
    pub fn evaluate_seq(&self, test: &TaskDataset) -> Result<f64> {
        let mut correct = 0;
        for (x, y) in &test.samples {
            if self.predict(x)? == *y {
                correct += 1;
            }
        }
        Ok(correct as f64 / test.len() as f64)
    }

    /// Own-task contribution proportions for every sample of `test`, whose
    /// samples all belong to task `task_id`.
    pub fn own_task_proportions(&self, test: &TaskDataset, task_id: usize) -> Result<Vec<f64>> {
        crate::par::try_map(&test.samples, |(x, _)| {
            let allocation = self.allocation_for(x)?;
            let props = allocation.proportions();
            Ok(props.get(task_id - 1).copied().unwrap_or(0.0))
        })
    }
}

fn allocator_logits_first(x: &[f64], runner: &CilRunner, w: &AllocatorWeights) -> Result<Array1<f64>> {
    allocator::allocator_logits(x, &runner.backbone, &runner.adapters[0], w, &runner.state)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub metrics: CilMetrics,
    pub matrix: AccuracyMatrix,
    pub audit: Vec<AuditEvent>,
    pub num_adapters: usize,
}

/// Supervised protocol loop: learn each task in order, evaluating all seen
/// test splits after every stage.
pub fn run_cil(mut stream: CilStream, cfg: &PipelineConfig) -> Result<(RunOutcome, CilRunner)> {
    stream.validate()?;
    let mut runner = CilRunner::new(stream.input_dim, cfg.clone())?;
    let mut entries: Vec<Vec<f64>> = Vec::new();
    let test_sizes: Vec<usize> = stream.tasks.iter().map(|t| t.test.len()).collect();

    for j in 0..stream.tasks.len() {
        let train = stream.tasks[j]
            .train
            .take()
            .ok_or_else(|| NofaError::Dataset("train split missing".into()).at_task(j + 1))?;
        runner.learn_task(train)?;
        let mut row = Vec::with_capacity(j + 1);
        for t in 0..=j {
            row.push(
                runner
                    .evaluate(&stream.tasks[t].test)
                    .map_err(|e| e.at_task(j + 1))?,
            );
        }
        entries.push(row);
    }

    let matrix = AccuracyMatrix { entries, test_sizes };
    let mut p_a_samples = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        p_a_samples.push(runner.own_task_proportions(&task.test, t + 1)?);
    }
    let metrics = compute_metrics(&matrix, &p_a_samples)?;
    let outcome = RunOutcome {
        metrics,
        matrix,
        audit: runner.audit.clone(),
        num_adapters: runner.adapters.len(),
    };
    Ok((outcome, runner))
}

/// One metrics row per configuration, all rows sharing the stream (cloned
/// before consumption) for paired comparison.
pub fn ablation_suite(
    stream: &CilStream,
    grid: &[(String, PipelineConfig)],
) -> Result<Vec<(String, RunOutcome)>> {
    if grid.is_empty() {
        return Err(NofaError::Empty("ablation grid"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (name, cfg) in grid {
        let (outcome, _) = run_cil(stream.clone(), cfg)?;
        rows.push((name.clone(), outcome));
    }
    Ok(rows)
}
