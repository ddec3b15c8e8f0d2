//! Gradient training of one task-specific adapter against a temporary
//! linear head.
//!
//! The computation graph is fixed (affine+ReLU blocks with a parallel
//! bottleneck branch per block, then a linear head with softmax
//! cross-entropy), so reverse-mode gradients are derived by hand rather
//! than pulling in an autodiff dependency. The head is discarded after
//! training; the backbone is never touched.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::TaskDataset;
use crate::error::{NofaError, Result};
use crate::model::{AdapterSet, FrozenBackbone};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Cosine annealing of the learning rate to zero over the epochs.
    pub cosine_schedule: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Desk-scale defaults: lr 0.05, 20 epochs, batch 32.
        TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            weight_decay: 5.0e-4,
            cosine_schedule: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(NofaError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(NofaError::Config("batch_size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(NofaError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Temporary per-task linear head over the task's classes.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Array2<f64>, // d x k
    pub bias: Array1<f64>,   // k
    pub classes: Vec<usize>, // global class id per local column
}

impl LinearHead {
    pub fn init(feature_dim: usize, classes: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / feature_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        LinearHead {
            weight: Array2::from_shape_fn((feature_dim, classes.len()), |_| normal.sample(&mut rng)),
            bias: Array1::zeros(classes.len()),
            classes,
        }
    }

    fn local_label(&self, class: usize) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or(NofaError::LabelError {
                label: class,
                reason: "class not covered by head",
            })
    }
}

/// Gradients for all trainable parameters (adapter layers plus head).
pub struct Grads {
    pub w_down: Vec<Array2<f64>>,
    pub w_up: Vec<Array2<f64>>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl Grads {
    fn zeros(adapter: &AdapterSet, head: &LinearHead) -> Self {
        Grads {
            w_down: adapter.layers.iter().map(|l| Array2::zeros(l.w_down.dim())).collect(),
            w_up: adapter.layers.iter().map(|l| Array2::zeros(l.w_up.dim())).collect(),
            head_w: Array2::zeros(head.weight.dim()),
            head_b: Array1::zeros(head.bias.len()),
        }
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut e = logits.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e /= sum;
    e
}

/// Mean cross-entropy over the batch plus gradients for every adapter and
/// head parameter. Backbone parameters receive no gradient by construction.
pub fn adapter_loss_and_grads(
    batch: &[(Vec<f64>, usize)],
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
    head: &LinearHead,
) -> Result<(f64, Grads)> {
    if batch.is_empty() {
        return Err(NofaError::Empty("training batch"));
    }
    let mut grads = Grads::zeros(adapter, head);
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;

    for (x, y) in batch {
        let local = head.local_label(*y)?;
        let trace = backbone.forward_traced(x, adapter)?;
        let logits = trace.feature.dot(&head.weight) + &head.bias;
        let probs = softmax(&logits);
        loss -= scale * probs[local].max(1e-300).ln();

        // Head backward: dlogits = probs - onehot.
        let mut dlogits = probs;
        dlogits[local] -= 1.0;
        dlogits *= scale;
        for (i, &f) in trace.feature.iter().enumerate() {
            for (j, &dl) in dlogits.iter().enumerate() {
                grads.head_w[[i, j]] += f * dl;
            }
        }
        grads.head_b += &dlogits;
        let mut dh = head.weight.dot(&dlogits); // dL/d feature

        // Block backward, last to first.
        for (l, step) in trace.steps.iter().enumerate().rev() {
            let layer = &adapter.layers[l];
            // Branch: out += ReLU(input·W_down)·W_up
            for (i, &a) in step.down_act.iter().enumerate() {
                for (j, &d) in dh.iter().enumerate() {
                    grads.w_up[l][[i, j]] += a * d;
                }
            }
            let mut d_down = layer.w_up.dot(&dh);
            for (i, dd) in d_down.iter_mut().enumerate() {
                if step.down_pre[i] <= 0.0 {
                    *dd = 0.0;
                }
            }
            for (i, &inp) in step.input.iter().enumerate() {
                for (j, &dd) in d_down.iter().enumerate() {
                    grads.w_down[l][[i, j]] += inp * dd;
                }
            }
            // Main path: ReLU(input·W + b); W and b are frozen, only the
            // input gradient flows through.
            let mut d_main = dh.clone();
            for (i, dm) in d_main.iter_mut().enumerate() {
                if step.main_pre[i] <= 0.0 {
                    *dm = 0.0;
                }
            }
            let weight = &backbone.blocks()[l].weight;
            dh = weight.dot(&d_main) + layer.w_down.dot(&d_down);
        }
    }
    Ok((loss, grads))
}

/// Per-epoch training loss curve returned alongside the adapter.
pub struct TrainOutcome {
    pub adapter: AdapterSet,
    pub epoch_losses: Vec<f64>,
}

/// Train with the desk-scale default rank (d/4, clamped to [2, 16]).
pub fn train_adapter(
    dataset: &TaskDataset,
    backbone: &FrozenBackbone,
    cfg: &TrainConfig,
    task_id: usize,
) -> Result<TrainOutcome> {
    let rank = (backbone.feature_dim / 4).clamp(2, 16);
    train_adapter_with_rank(dataset, backbone, cfg, task_id, rank)
}

pub fn train_adapter_with_rank(
    dataset: &TaskDataset,
    backbone: &FrozenBackbone,
    cfg: &TrainConfig,
    task_id: usize,
    rank: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NofaError::Empty("task dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (task_id as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut adapter = AdapterSet::init(
        backbone.feature_dim,
        rank,
        backbone.num_blocks(),
        task_id,
        cfg.seed.wrapping_add(task_id as u64),
    );
    let classes: Vec<usize> = dataset.label_set.iter().copied().collect();
    let mut head = LinearHead::init(backbone.feature_dim, classes, cfg.seed.wrapping_add(1000 + task_id as u64));

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = if cfg.cosine_schedule && cfg.epochs > 0 {
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Vec<f64>, usize)> =
                chunk.iter().map(|&i| dataset.samples[i].clone()).collect();
            let (loss, grads) = adapter_loss_and_grads(&batch, backbone, &adapter, &head)?;
            if !loss.is_finite() {
                return Err(NofaError::TrainingDiverged { epoch });
            }
            epoch_loss += loss;
            batches += 1;
            sgd_step(&mut adapter, &mut head, &grads, lr, cfg.weight_decay);
        }
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }
    Ok(TrainOutcome { adapter, epoch_losses })
}

fn sgd_step(adapter: &mut AdapterSet, head: &mut LinearHead, grads: &Grads, lr: f64, wd: f64) {
    for (l, layer) in adapter.layers.iter_mut().enumerate() {
        layer.w_down.zip_mut_with(&grads.w_down[l], |p, &g| *p -= lr * (g + wd * *p));
        layer.w_up.zip_mut_with(&grads.w_up[l], |p, &g| *p -= lr * (g + wd * *p));
    }
    head.weight.zip_mut_with(&grads.head_w, |p, &g| *p -= lr * (g + wd * *p));
    head.bias.zip_mut_with(&grads.head_b, |p, &g| *p -= lr * (g + wd * *p));
}
