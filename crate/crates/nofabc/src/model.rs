//! Frozen feature backbone and task-specific bottleneck adapters.
//!
//! The backbone is a fixed stack of affine+ReLU blocks over an affine input
//! embedding, standing in for a frozen pretrained transformer. Each adapter
//! is a per-block bottleneck (down-project, ReLU, up-project) added in
//! parallel to the block output.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NofaError, Result};

/// Final-block feature vector.
pub type FeatureVec = Array1<f64>;

fn relu_inplace(v: &mut Array1<f64>) {
    v.mapv_inplace(|x| x.max(0.0));
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| normal.sample(rng))
}

/// One frozen block: affine map d -> d followed by ReLU. Bias is fixed zero.
#[derive(Debug, Clone)]
pub struct Block {
    pub weight: Array2<f64>, // d x d, applied as row-vector x · W
    pub bias: Array1<f64>,
}

/// Fixed L-block feature extractor. Parameters never change after
/// construction; two backbones from the same (seed, dims) are identical.
#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    pub input_dim: usize,
    pub feature_dim: usize,
    embed_w: Array2<f64>, // input_dim x d
    embed_b: Array1<f64>,
    blocks: Vec<Block>,
    pub seed: u64,
}

impl FrozenBackbone {
    pub fn new(input_dim: usize, feature_dim: usize, num_blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / feature_dim as f64).sqrt();
        let embed_w = gaussian_matrix(&mut rng, input_dim, feature_dim, std);
        let embed_b = Array1::zeros(feature_dim);
        let blocks = (0..num_blocks)
            .map(|_| Block {
                weight: gaussian_matrix(&mut rng, feature_dim, feature_dim, std),
                bias: Array1::zeros(feature_dim),
            })
            .collect();
        FrozenBackbone {
            input_dim,
            feature_dim,
            embed_w,
            embed_b,
            blocks,
            seed,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(NofaError::ShapeMismatch {
                expected: self.input_dim,
                got: x.len(),
                context: "backbone input",
            });
        }
        Ok(())
    }

    fn embed(&self, x: &[f64]) -> Array1<f64> {
        let xv = ndarray::ArrayView1::from(x);
        xv.dot(&self.embed_w) + &self.embed_b
    }

    /// Adapter-free forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<FeatureVec> {
        self.check_input(x)?;
        let mut h = self.embed(x);
        for block in &self.blocks {
            h = h.dot(&block.weight) + &block.bias;
            relu_inplace(&mut h);
        }
        Ok(h)
    }

    /// Per-block forward with the adapter branch added:
    /// out = ReLU(h·W + b) + ReLU(h·W_down)·W_up.
    pub fn forward_with_adapter(&self, x: &[f64], adapter: &AdapterSet) -> Result<FeatureVec> {
        self.check_input(x)?;
        adapter.check_shapes(self)?;
        let mut h = self.embed(x);
        for (block, layer) in self.blocks.iter().zip(&adapter.layers) {
            let mut main = h.dot(&block.weight) + &block.bias;
            relu_inplace(&mut main);
            let mut down = h.dot(&layer.w_down);
            relu_inplace(&mut down);
            h = main + down.dot(&layer.w_up);
        }
        Ok(h)
    }

    /// Forward with per-block intermediate caches, for backprop.
    pub(crate) fn forward_traced(&self, x: &[f64], adapter: &AdapterSet) -> Result<ForwardTrace> {
        self.check_input(x)?;
        adapter.check_shapes(self)?;
        let mut h = self.embed(x);
        let mut steps = Vec::with_capacity(self.blocks.len());
        for (block, layer) in self.blocks.iter().zip(&adapter.layers) {
            let input = h.clone();
            let pre = input.dot(&block.weight) + &block.bias;
            let main = pre.mapv(|v| v.max(0.0));
            let down_pre = input.dot(&layer.w_down);
            let down_act = down_pre.mapv(|v| v.max(0.0));
            h = &main + &down_act.dot(&layer.w_up);
            steps.push(BlockTrace {
                input,
                main_pre: pre,
                down_pre,
                down_act,
            });
        }
        Ok(ForwardTrace { steps, feature: h })
    }
}

pub(crate) struct BlockTrace {
    pub input: Array1<f64>,
    pub main_pre: Array1<f64>,
    pub down_pre: Array1<f64>,
    pub down_act: Array1<f64>,
}

pub(crate) struct ForwardTrace {
    pub steps: Vec<BlockTrace>,
    pub feature: Array1<f64>,
}

/// One per-block bottleneck pair.
#[derive(Debug, Clone)]
pub struct AdapterLayer {
    pub w_down: Array2<f64>, // d x r
    pub w_up: Array2<f64>,   // r x d
}

/// A full per-block adapter stack for one task. Freshly initialized adapters
/// have W_up = 0 so they start as an exact identity on the backbone output.
#[derive(Debug, Clone)]
pub struct AdapterSet {
    pub layers: Vec<AdapterLayer>,
    pub rank: usize,
    pub task_id: usize,
}

impl AdapterSet {
    pub fn init(feature_dim: usize, rank: usize, num_blocks: usize, task_id: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (2.0 / feature_dim as f64).sqrt();
        let layers = (0..num_blocks)
            .map(|_| AdapterLayer {
                w_down: gaussian_matrix(&mut rng, feature_dim, rank, std),
                w_up: Array2::zeros((rank, feature_dim)),
            })
            .collect();
        AdapterSet {
            layers,
            rank,
            task_id,
        }
    }

    pub fn check_shapes(&self, backbone: &FrozenBackbone) -> Result<()> {
        if self.layers.len() != backbone.num_blocks() {
            return Err(NofaError::ShapeMismatch {
                expected: backbone.num_blocks(),
                got: self.layers.len(),
                context: "adapter layer count",
            });
        }
        let d = backbone.feature_dim;
        for layer in &self.layers {
            if layer.w_down.nrows() != d || layer.w_up.ncols() != d {
                return Err(NofaError::ShapeMismatch {
                    expected: d,
                    got: layer.w_down.nrows(),
                    context: "adapter projection dim",
                });
            }
            if layer.w_down.ncols() != layer.w_up.nrows() {
                return Err(NofaError::ShapeMismatch {
                    expected: layer.w_down.ncols(),
                    got: layer.w_up.nrows(),
                    context: "adapter bottleneck rank",
                });
            }
        }
        Ok(())
    }
}

/// Features from every adapter in order: element i equals
/// `forward_with_adapter(x, adapters[i])`.
pub fn multi_adapter_features(
    x: &[f64],
    backbone: &FrozenBackbone,
    adapters: &[AdapterSet],
) -> Result<Vec<FeatureVec>> {
    if adapters.is_empty() {
        return Err(NofaError::Empty("adapter list"));
    }
    adapters
        .iter()
        .map(|a| backbone.forward_with_adapter(x, a))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    // Independent straight-line re-evaluation of the same graph, plain loops.
    fn oracle_forward(
        x: &[f64],
        embed_w: &Array2<f64>,
        blocks: &[Block],
    ) -> Vec<f64> {
        let d = embed_w.ncols();
        let mut h = vec![0.0; d];
        for j in 0..d {
            for (i, xi) in x.iter().enumerate() {
                h[j] += xi * embed_w[[i, j]];
            }
        }
        for block in blocks {
            let mut next = vec![0.0; d];
            for j in 0..d {
                let mut s = block.bias[j];
                for i in 0..d {
                    s += h[i] * block.weight[[i, j]];
                }
                next[j] = s.max(0.0);
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let bb = FrozenBackbone::new(6, 8, 2, 7);
        let out = bb.forward(&[0.0; 6]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_outputs() {
        let a = FrozenBackbone::new(5, 16, 3, 42);
        let b = FrozenBackbone::new(5, 16, 3, 42);
        let x = [0.3, -1.2, 0.8, 2.0, -0.5];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let bb = FrozenBackbone::new(4, 4, 2, 11);
        let x = [0.7, -0.3, 1.5, 0.2];
        let got = bb.forward(&x).unwrap();
        let want = oracle_forward(&x, &bb.embed_w, &bb.blocks);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "got {g}, want {w}");
        }
    }

    #[test]
    fn input_shape_error() {
        let bb = FrozenBackbone::new(4, 4, 1, 0);
        assert!(matches!(
            bb.forward(&[1.0; 3]),
            Err(NofaError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_up_projection_is_identity_adapter() {
        let bb = FrozenBackbone::new(6, 12, 2, 3);
        let ad = AdapterSet::init(12, 4, 2, 1, 99);
        let x = [0.4, 1.1, -0.2, 0.9, -1.3, 0.5];
        let plain = bb.forward(&x).unwrap();
        let adapted = bb.forward_with_adapter(&x, &ad).unwrap();
        for (a, b) in plain.iter().zip(adapted.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn negative_preactivation_kills_adapter_branch() {
        // One block, W_down chosen so x_in · W_down is entrywise negative.
        let bb = FrozenBackbone::new(2, 2, 1, 5);
        let mut ad = AdapterSet::init(2, 1, 1, 1, 5);
        ad.layers[0].w_up = array![[3.0, -2.0]];
        let x = [1.0, 0.5];
        let h = bb.embed(&x);
        // Point W_down against the embedded input so the pre-activation is negative.
        let col: Vec<f64> = h.iter().map(|&v| if v >= 0.0 { -1.0 } else { 1.0 }).collect();
        ad.layers[0].w_down = Array2::from_shape_vec((2, 1), col).unwrap();
        let pre = h.dot(&ad.layers[0].w_down);
        assert!(pre.iter().all(|&v| v <= 0.0));
        let plain = bb.forward(&x).unwrap();
        let adapted = bb.forward_with_adapter(&x, &ad).unwrap();
        assert_eq!(plain, adapted);
    }

    #[test]
    fn hand_computed_single_block() {
        // d = 2, r = 1, small integers, checked by hand:
        //   embed = identity (weights overwritten), block W = I, bias 0
        //   W_down = [1, 1]^T, W_up = [2, -1]
        //   x = (1, 2): h = (1, 2); main = ReLU(h) = (1, 2)
        //   down = ReLU(1*1 + 2*1) = 3; branch = (6, -3); out = (7, -1)
        let mut bb = FrozenBackbone::new(2, 2, 1, 0);
        bb.embed_w = Array2::eye(2);
        bb.blocks[0].weight = Array2::eye(2);
        let ad = AdapterSet {
            layers: vec![AdapterLayer {
                w_down: array![[1.0], [1.0]],
                w_up: array![[2.0, -1.0]],
            }],
            rank: 1,
            task_id: 1,
        };
        let out = bb.forward_with_adapter(&[1.0, 2.0], &ad).unwrap();
        assert_eq!(out, array![7.0, -1.0]);
    }

    #[test]
    fn adapter_branch_linear_in_w_up() {
        let bb = FrozenBackbone::new(3, 8, 2, 21);
        let mut ad = AdapterSet::init(8, 2, 2, 1, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let normal = Normal::new(0.0, 0.5).unwrap();
        // Only make the last block's W_up nonzero so per-block linearity is
        // visible at the output.
        ad.layers[1].w_up = Array2::from_shape_fn((2, 8), |_| normal.sample(&mut rng));
        let x = [0.9, -0.4, 1.7];
        let base = bb.forward(&x).unwrap();
        let once = bb.forward_with_adapter(&x, &ad).unwrap();
        let mut scaled = ad.clone();
        scaled.layers[1].w_up *= 3.0;
        let thrice = bb.forward_with_adapter(&x, &scaled).unwrap();
        let delta1 = &once - &base;
        let delta3 = &thrice - &base;
        for (a, b) in delta3.iter().zip(delta1.iter()) {
            assert!((a - 3.0 * b).abs() < 1e-10);
        }
    }

    #[test]
    fn multi_adapter_matches_individual_calls() {
        let bb = FrozenBackbone::new(4, 8, 2, 1);
        let adapters: Vec<AdapterSet> = (1..=3)
            .map(|t| {
                let mut a = AdapterSet::init(8, 2, 2, t, 100 + t as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(200 + t as u64);
                let normal = Normal::new(0.0, 0.3).unwrap();
                for layer in &mut a.layers {
                    layer.w_up = Array2::from_shape_fn((2, 8), |_| normal.sample(&mut rng));
                }
                a
            })
            .collect();
        let x = [1.0, -0.5, 0.25, 2.0];
        let feats = multi_adapter_features(&x, &bb, &adapters).unwrap();
        assert_eq!(feats.len(), 3);
        for (f, a) in feats.iter().zip(&adapters) {
            assert_eq!(*f, bb.forward_with_adapter(&x, a).unwrap());
        }
    }

    #[test]
    fn empty_adapter_list_errors() {
        let bb = FrozenBackbone::new(4, 8, 2, 1);
        assert!(multi_adapter_features(&[0.0; 4], &bb, &[]).is_err());
    }
}
