//! Central finite-difference check of the hand-derived adapter gradients.
//! Used by the verification command and the test suite; independent of the
//! backward pass it certifies (it only calls the forward loss).

use crate::model::{AdapterSet, FrozenBackbone};
use crate::trainer::{adapter_loss_and_grads, LinearHead};

enum Param {
    Down(usize, usize),
    Up(usize, usize),
    HeadW(usize),
    HeadB(usize),
}

fn loss_perturbed(
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
    head: &LinearHead,
    batch: &[(Vec<f64>, usize)],
    p: &Param,
    eps: f64,
) -> f64 {
    let mut a = adapter.clone();
    let mut h = head.clone();
    match *p {
        Param::Down(l, i) => a.layers[l].w_down.as_slice_mut().unwrap()[i] += eps,
        Param::Up(l, i) => a.layers[l].w_up.as_slice_mut().unwrap()[i] += eps,
        Param::HeadW(i) => h.weight.as_slice_mut().unwrap()[i] += eps,
        Param::HeadB(i) => h.bias[i] += eps,
    }
    adapter_loss_and_grads(batch, backbone, &a, &h).unwrap().0
}

/// Compares every adapter and head gradient against a central difference
/// with step `h`. Returns (max relative error, parameters checked).
pub fn max_relative_error(
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
    head: &LinearHead,
    batch: &[(Vec<f64>, usize)],
    h: f64,
) -> (f64, usize) {
    let (_, grads) = adapter_loss_and_grads(batch, backbone, adapter, head).unwrap();
    let mut params = Vec::new();
    for l in 0..adapter.layers.len() {
        for i in 0..adapter.layers[l].w_down.len() {
            params.push((Param::Down(l, i), grads.w_down[l].as_slice().unwrap()[i]));
        }
        for i in 0..adapter.layers[l].w_up.len() {
            params.push((Param::Up(l, i), grads.w_up[l].as_slice().unwrap()[i]));
        }
    }
    for i in 0..head.weight.len() {
        params.push((Param::HeadW(i), grads.head_w.as_slice().unwrap()[i]));
    }
    for i in 0..head.bias.len() {
        params.push((Param::HeadB(i), grads.head_b[i]));
    }

    let mut max_rel = 0.0f64;
    let n = params.len();
    for (p, analytic) in &params {
        let plus = loss_perturbed(backbone, adapter, head, batch, p, h);
        let minus = loss_perturbed(backbone, adapter, head, batch, p, -h);
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    (max_rel, n)
}

/// Randomized d=8, r=2 instance for the verification command.
pub fn standard_check(seed: u64) -> (f64, usize) {
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    let backbone = FrozenBackbone::new(5, 8, 3, seed);
    let mut adapter = AdapterSet::init(8, 2, 3, 1, seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    let normal = Normal::new(0.0, 0.4).unwrap();
    for layer in &mut adapter.layers {
        layer.w_up = Array2::from_shape_fn(layer.w_up.dim(), |_| normal.sample(&mut rng));
    }
    let head = LinearHead::init(8, vec![0, 1, 2], seed.wrapping_add(3));
    let sample = Normal::new(0.0, 1.0).unwrap();
    let batch: Vec<(Vec<f64>, usize)> = (0..3)
        .map(|c| ((0..5).map(|_| sample.sample(&mut rng)).collect(), c))
        .collect();
    max_relative_error(&backbone, &adapter, &head, &batch, 1e-5)
}
