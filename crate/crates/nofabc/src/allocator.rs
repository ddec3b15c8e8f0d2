//! Recursive least-squares allocator over randomly expanded first-adapter
//! features.
//!
//! Only the autocorrelation matrix A = sum X_i^T X_i and cross-correlation
//! C = sum X_i^T Y_i are stored across tasks; solving (A + gamma I) W = C
//! after any prefix of the stream yields exactly the weights a joint fit on
//! the pooled data would produce. `joint_oracle` certifies that equivalence
//! through an independent pooled solve.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NofaError, Result};
use crate::model::{AdapterSet, FeatureVec, FrozenBackbone};

/// Solved allocator weight matrix, one column per seen class.
pub type AllocatorWeights = Array2<f64>;

#[derive(Debug, Clone)]
pub struct RlsState {
    /// d_B x d_B autocorrelation, kept symmetric after every update.
    a: Array2<f64>,
    /// d_B x C_seen cross-correlation.
    c: Array2<f64>,
    /// d x d_B fixed expansion matrix, reconstructible from the seed.
    expansion: Array2<f64>,
    expansion_seed: u64,
    pub gamma: f64,
    feature_dim: usize,
    expansion_dim: usize,
    seen: Vec<usize>,
}

fn expansion_matrix(seed: u64, d: usize, d_b: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Unit-scale expanded features: entries ~ N(0, 1/sqrt(d)).
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
    Array2::from_shape_fn((d, d_b), |_| normal.sample(&mut rng))
}

impl RlsState {
    pub fn new(feature_dim: usize, expansion_dim: usize, gamma: f64, seed: u64) -> Result<Self> {
        if gamma <= 0.0 {
            return Err(NofaError::Config("gamma must be > 0".into()));
        }
        Ok(RlsState {
            a: Array2::zeros((expansion_dim, expansion_dim)),
            c: Array2::zeros((expansion_dim, 0)),
            expansion: expansion_matrix(seed, feature_dim, expansion_dim),
            expansion_seed: seed,
            gamma,
            feature_dim,
            expansion_dim,
            seen: Vec::new(),
        })
    }

    pub fn expansion_dim(&self) -> usize {
        self.expansion_dim
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn autocorrelation(&self) -> &Array2<f64> {
        &self.a
    }

    /// Test hook for the negative-control verification path.
    pub fn corrupt_autocorrelation(&mut self, noise: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(0xbad);
        let normal = Normal::new(0.0, noise).unwrap();
        self.a.mapv_inplace(|v| v + normal.sample(&mut rng));
    }

    /// ReLU(phi · B). The feature must come from the first-task adapter.
    pub fn expand(&self, feature: &FeatureVec) -> Result<Array1<f64>> {
        if feature.len() != self.feature_dim {
            return Err(NofaError::ShapeMismatch {
                expected: self.feature_dim,
                got: feature.len(),
                context: "expansion input",
            });
        }
        let mut out = feature.dot(&self.expansion);
        out.mapv_inplace(|v| v.max(0.0));
        Ok(out)
    }

    /// Zero-initialized columns for classes not seen before. Existing
    /// columns are untouched.
    pub fn add_classes(&mut self, classes: &[usize]) -> Result<()> {
        for &cls in classes {
            if self.seen.contains(&cls) {
                return Err(NofaError::LabelError {
                    label: cls,
                    reason: "class already registered",
                });
            }
            self.seen.push(cls);
        }
        let mut c = Array2::zeros((self.expansion_dim, self.seen.len()));
        c.slice_mut(ndarray::s![.., ..self.c.ncols()]).assign(&self.c);
        self.c = c;
        Ok(())
    }

    pub fn one_hot(&self, labels: &[usize]) -> Result<Array2<f64>> {
        let mut y = Array2::zeros((labels.len(), self.seen.len()));
        for (row, &label) in labels.iter().enumerate() {
            let col = self
                .seen
                .iter()
                .position(|&c| c == label)
                .ok_or(NofaError::LabelError {
                    label,
                    reason: "label not registered",
                })?;
            y[[row, col]] = 1.0;
        }
        Ok(y)
    }

    /// A += X^T X, C += X^T Y. Y rows must be one-hot over the seen
    /// classes. An empty batch is a no-op.
    pub fn update(&mut self, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        if x.nrows() != y.nrows() {
            return Err(NofaError::ShapeMismatch {
                expected: x.nrows(),
                got: y.nrows(),
                context: "update batch rows",
            });
        }
        if x.nrows() == 0 {
            return Ok(());
        }
        if x.ncols() != self.expansion_dim {
            return Err(NofaError::ShapeMismatch {
                expected: self.expansion_dim,
                got: x.ncols(),
                context: "expanded feature width",
            });
        }
        if y.ncols() != self.seen.len() {
            return Err(NofaError::ShapeMismatch {
                expected: self.seen.len(),
                got: y.ncols(),
                context: "one-hot width",
            });
        }
        for row in y.axis_iter(Axis(0)) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(NofaError::LabelError {
                    label: 0,
                    reason: "row is not one-hot",
                });
            }
        }
        self.a += &x.t().dot(x);
        // Symmetrize to kill round-off drift.
        let at = self.a.t().to_owned();
        self.a += &at;
        self.a *= 0.5;
        self.c += &x.t().dot(y);
        Ok(())
    }

    /// W = (A + gamma I)^-1 C via Cholesky. The residual is checked against
    /// the documented 1e-8 relative tolerance.
    pub fn solve(&self) -> Result<AllocatorWeights> {
        if self.seen.is_empty() {
            return Err(NofaError::Empty("seen classes"));
        }
        let mut reg = self.a.clone();
        for i in 0..self.expansion_dim {
            reg[[i, i]] += self.gamma;
        }
        let w = cholesky_solve(&reg, &self.c)?;
        let residual = (&reg.dot(&w) - &self.c).mapv(|v| v * v).sum().sqrt();
        let denom = self.c.mapv(|v| v * v).sum().sqrt().max(1.0);
        if residual / denom > 1e-8 {
            return Err(NofaError::Numeric(format!(
                "solve residual {:.3e} exceeds tolerance",
                residual / denom
            )));
        }
        Ok(w)
    }

    pub fn checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_u8(CKPT_VERSION)?;
        w.write_u64::<LittleEndian>(self.expansion_seed)?;
        w.write_f64::<LittleEndian>(self.gamma)?;
        w.write_u32::<LittleEndian>(self.feature_dim as u32)?;
        w.write_u32::<LittleEndian>(self.expansion_dim as u32)?;
        w.write_u32::<LittleEndian>(self.seen.len() as u32)?;
        for &cls in &self.seen {
            w.write_u32::<LittleEndian>(cls as u32)?;
        }
        for &v in self.a.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &v in self.c.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.checkpoint(&mut f)
    }

    pub fn restore<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| NofaError::Format("truncated checkpoint header".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(NofaError::Format("bad checkpoint magic".into()));
        }
        let version = r.read_u8()?;
        if version != CKPT_VERSION {
            return Err(NofaError::Format(format!("unsupported checkpoint version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>()?;
        let gamma = r.read_f64::<LittleEndian>()?;
        let feature_dim = r.read_u32::<LittleEndian>()? as usize;
        let expansion_dim = r.read_u32::<LittleEndian>()? as usize;
        let n_seen = r.read_u32::<LittleEndian>()? as usize;
        let mut seen = Vec::with_capacity(n_seen);
        for _ in 0..n_seen {
            seen.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let mut a = Array2::zeros((expansion_dim, expansion_dim));
        for v in a.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut c = Array2::zeros((expansion_dim, n_seen));
        for v in c.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        Ok(RlsState {
            a,
            c,
            expansion: expansion_matrix(seed, feature_dim, expansion_dim),
            expansion_seed: seed,
            gamma,
            feature_dim,
            expansion_dim,
            seen,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::restore(&mut f)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"NFBCRLS\0";
const CKPT_VERSION: u8 = 1;

/// Pooled one-shot solution W = (sum X^T X + gamma I)^-1 sum X^T Y.
///
/// Test-only in spirit: it retains all data on purpose, existing to certify
/// that the recursive path forgets nothing. Uses Gaussian elimination so the
/// two paths share no factorization code.
pub fn joint_oracle(x_all: &Array2<f64>, y_all: &Array2<f64>, gamma: f64) -> Result<AllocatorWeights> {
    if x_all.nrows() != y_all.nrows() {
        return Err(NofaError::ShapeMismatch {
            expected: x_all.nrows(),
            got: y_all.nrows(),
            context: "joint oracle rows",
        });
    }
    if gamma <= 0.0 {
        return Err(NofaError::Config("gamma must be > 0".into()));
    }
    let d = x_all.ncols();
    let mut gram = x_all.t().dot(x_all);
    for i in 0..d {
        gram[[i, i]] += gamma;
    }
    let rhs = x_all.t().dot(y_all);
    gauss_solve(&gram, &rhs)
}

/// f_B(phi(x, A_i)) · W for the chosen adapter.
pub fn allocator_logits(
    x: &[f64],
    backbone: &FrozenBackbone,
    adapter: &AdapterSet,
    weights: &AllocatorWeights,
    state: &RlsState,
) -> Result<Array1<f64>> {
    if weights.ncols() != state.seen_classes().len() {
        return Err(NofaError::StaleWeights {
            expected: state.seen_classes().len(),
            got: weights.ncols(),
        });
    }
    let phi = backbone.forward_with_adapter(x, adapter)?;
    let expanded = state.expand(&phi)?;
    Ok(expanded.dot(weights))
}

/// Logits from an already-expanded feature.
pub fn logits_from_expanded(expanded: &Array1<f64>, weights: &AllocatorWeights) -> Array1<f64> {
    expanded.dot(weights)
}

// ---------------------------------------------------------------------------
// Dense SPD Cholesky with multi-RHS solve, plus a plain Gaussian-elimination
// route for the oracle.
// ---------------------------------------------------------------------------

fn cholesky_factor(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(NofaError::Numeric(format!(
                        "matrix not positive definite at pivot {i} (s = {s:.3e})"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(a: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let l = cholesky_factor(a)?;
    let n = a.nrows();
    let m = rhs.ncols();
    let mut x = rhs.clone();
    // Forward: L z = rhs.
    for col in 0..m {
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        // Backward: L^T w = z.
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in i + 1..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

fn gauss_solve(a: &Array2<f64>, rhs: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    let m = rhs.ncols();
    let mut aug = Array2::zeros((n, n + m));
    aug.slice_mut(ndarray::s![.., ..n]).assign(a);
    aug.slice_mut(ndarray::s![.., n..]).assign(rhs);
    for col in 0..n {
        // Partial pivot.
        let mut pivot = col;
        for row in col + 1..n {
            if aug[[row, col]].abs() > aug[[pivot, col]].abs() {
                pivot = row;
            }
        }
        if aug[[pivot, col]].abs() < 1e-300 {
            return Err(NofaError::Numeric(format!("singular system at column {col}")));
        }
        if pivot != col {
            for k in 0..n + m {
                aug.swap([pivot, k], [col, k]);
            }
        }
        let diag = aug[[col, col]];
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[[row, col]] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n + m {
                let v = aug[[col, k]];
                aug[[row, k]] -= factor * v;
            }
        }
    }
    let mut x = Array2::zeros((n, m));
    for i in 0..n {
        let diag = aug[[i, i]];
        for j in 0..m {
            x[[i, j]] = aug[[i, n + j]] / diag;
        }
    }
    Ok(x)
}

/// Relative Frobenius distance between two weight matrices.
pub fn relative_frobenius(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let denom = b.mapv(|v| v * v).sum().sqrt().max(f64::MIN_POSITIVE);
    diff / denom
}

/// One randomized recursive-vs-joint equivalence trial: feed `num_tasks`
/// batches of Gaussian features through the recursive update, then compare
/// the solved weights against the pooled one-shot oracle. Returns the
/// relative Frobenius error. `corrupt` injects noise into the
/// autocorrelation before solving (negative-control path).
pub fn non_forgetting_trial(
    num_tasks: usize,
    feature_dim: usize,
    expansion_dim: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    gamma: f64,
    seed: u64,
    corrupt: Option<f64>,
) -> Result<f64> {
    if num_tasks == 0 || classes_per_task == 0 || samples_per_class == 0 {
        return Err(NofaError::Config("trial sizes must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut state = RlsState::new(feature_dim, expansion_dim, gamma, seed ^ 0x9e37)?;
    let mut pooled_x: Vec<Array1<f64>> = Vec::new();
    let mut pooled_labels: Vec<usize> = Vec::new();
    for task in 0..num_tasks {
        let classes: Vec<usize> =
            (task * classes_per_task..(task + 1) * classes_per_task).collect();
        state.add_classes(&classes)?;
        let mut rows: Vec<Array1<f64>> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for &cls in &classes {
            for _ in 0..samples_per_class {
                let feat =
                    Array1::from_shape_fn(feature_dim, |_| normal.sample(&mut rng));
                rows.push(state.expand(&feat)?);
                labels.push(cls);
            }
        }
        let mut x = Array2::zeros((rows.len(), expansion_dim));
        for (i, row) in rows.iter().enumerate() {
            x.row_mut(i).assign(row);
        }
        let y = state.one_hot(&labels)?;
        state.update(&x, &y)?;
        pooled_x.extend(rows);
        pooled_labels.extend(labels);
    }
    if let Some(noise) = corrupt {
        state.corrupt_autocorrelation(noise);
    }
    // A corrupted autocorrelation can fail the solve residual check outright;
    // under the negative-control path that already counts as detection.
    let recursive = match state.solve() {
        Ok(w) => w,
        Err(_) if corrupt.is_some() => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mut x_all = Array2::zeros((pooled_x.len(), expansion_dim));
    for (i, row) in pooled_x.iter().enumerate() {
        x_all.row_mut(i).assign(row);
    }
    let y_all = state.one_hot(&pooled_labels)?;
    let joint = joint_oracle(&x_all, &y_all, gamma)?;
    Ok(relative_frobenius(&recursive, &joint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_feature_expands_to_zero() {
        let state = RlsState::new(4, 16, 1.0, 3).unwrap();
        let out = state.expand(&Array1::zeros(4)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expansion_is_deterministic_and_nonnegative() {
        let s1 = RlsState::new(4, 16, 1.0, 3).unwrap();
        let s2 = RlsState::new(4, 16, 1.0, 3).unwrap();
        let f = array![0.5, -1.0, 2.0, 0.1];
        let e1 = s1.expand(&f).unwrap();
        assert_eq!(e1, s2.expand(&f).unwrap());
        assert!(e1.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn expansion_matches_straight_line_loop() {
        let state = RlsState::new(4, 8, 1.0, 9).unwrap();
        let f = array![1.2, -0.7, 0.3, 2.1];
        let got = state.expand(&f).unwrap();
        for j in 0..8 {
            let mut s = 0.0;
            for i in 0..4 {
                s += f[i] * state.expansion[[i, j]];
            }
            let want = if s > 0.0 { s } else { 0.0 };
            assert!((got[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_is_noop() {
        let mut state = RlsState::new(4, 8, 1.0, 1).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        let before = state.clone();
        state
            .update(&Array2::zeros((0, 8)), &Array2::zeros((0, 2)))
            .unwrap();
        assert_eq!(state.a, before.a);
        assert_eq!(state.c, before.c);
    }

    #[test]
    fn sequential_updates_equal_stacked_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let p = Array2::from_shape_fn((6, 8), |_| normal.sample(&mut rng)).mapv(f64::abs);
        let q = Array2::from_shape_fn((4, 8), |_| normal.sample(&mut rng)).mapv(f64::abs);
        let labels_p = [0, 1, 0, 1, 0, 1];
        let labels_q = [1, 0, 1, 0];

        let mut seq = RlsState::new(4, 8, 1.0, 1).unwrap();
        seq.add_classes(&[0, 1]).unwrap();
        let yp = seq.one_hot(&labels_p).unwrap();
        let yq = seq.one_hot(&labels_q).unwrap();
        seq.update(&p, &yp).unwrap();
        seq.update(&q, &yq).unwrap();

        let mut one = RlsState::new(4, 8, 1.0, 1).unwrap();
        one.add_classes(&[0, 1]).unwrap();
        let mut stacked = Array2::zeros((10, 8));
        stacked.slice_mut(ndarray::s![..6, ..]).assign(&p);
        stacked.slice_mut(ndarray::s![6.., ..]).assign(&q);
        let mut labels = labels_p.to_vec();
        labels.extend(labels_q);
        let y = one.one_hot(&labels).unwrap();
        one.update(&stacked, &y).unwrap();

        assert!((&seq.a - &one.a).iter().all(|&v| v.abs() <= 1e-10));
        assert!((&seq.c - &one.c).iter().all(|&v| v.abs() <= 1e-10));
    }

    #[test]
    fn single_sample_is_rank_one_outer_product() {
        let mut state = RlsState::new(2, 3, 1.0, 7).unwrap();
        state.add_classes(&[10, 20]).unwrap();
        let x = array![[1.5, 0.0, -2.0]];
        let y = state.one_hot(&[20]).unwrap();
        state.update(&x, &y).unwrap();
        // Explicit outer-product loop.
        for i in 0..3 {
            for j in 0..3 {
                assert!((state.a[[i, j]] - x[[0, i]] * x[[0, j]]).abs() < 1e-15);
            }
            assert_eq!(state.c[[i, 0]], 0.0);
            assert!((state.c[[i, 1]] - x[[0, i]]).abs() < 1e-15);
        }
    }

    #[test]
    fn non_one_hot_row_rejected() {
        let mut state = RlsState::new(2, 3, 1.0, 7).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        let y = array![[0.5, 0.5]];
        assert!(matches!(
            state.update(&x, &y),
            Err(NofaError::LabelError { .. })
        ));
    }

    #[test]
    fn identity_case_solves_analytically() {
        // X = I2, Y = I2, gamma = 1 -> A = I, W = (2I)^-1 I = 0.5 I.
        let mut state = RlsState::new(2, 2, 1.0, 0).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        let x = Array2::eye(2);
        let y = Array2::eye(2);
        state.update(&x, &y).unwrap();
        let w = state.solve().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 0.5 } else { 0.0 };
                assert!((w[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn huge_gamma_shrinks_weights() {
        let mut state = RlsState::new(2, 2, 1.0e9, 0).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        state.update(&Array2::eye(2), &Array2::eye(2)).unwrap();
        let w = state.solve().unwrap();
        let norm = w.mapv(|v| v * v).sum().sqrt();
        assert!(norm < 1e-6);
    }

    fn random_expanded(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
        Array2::from_shape_fn((rows, cols), |_| normal.sample(rng).abs())
    }

    #[test]
    fn recursive_solve_matches_joint_oracle_over_three_tasks() {
        let d_b = 64;
        let classes_per_task = 3;
        let n = 50;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut state = RlsState::new(8, d_b, 1.0, 1).unwrap();
        let mut all_x: Vec<Array2<f64>> = Vec::new();
        let mut all_labels: Vec<usize> = Vec::new();
        for t in 0..3 {
            let classes: Vec<usize> = (t * classes_per_task..(t + 1) * classes_per_task).collect();
            state.add_classes(&classes).unwrap();
            let x = random_expanded(&mut rng, n, d_b);
            let labels: Vec<usize> = (0..n).map(|i| classes[i % classes_per_task]).collect();
            let y = state.one_hot(&labels).unwrap();
            state.update(&x, &y).unwrap();
            all_x.push(x);
            all_labels.extend(labels);
        }
        let w_rec = state.solve().unwrap();

        let total: usize = all_x.iter().map(|x| x.nrows()).sum();
        let mut stacked = Array2::zeros((total, d_b));
        let mut row = 0;
        for x in &all_x {
            stacked.slice_mut(ndarray::s![row..row + x.nrows(), ..]).assign(x);
            row += x.nrows();
        }
        let y_all = state.one_hot(&all_labels).unwrap();
        let w_joint = joint_oracle(&stacked, &y_all, 1.0).unwrap();
        assert!(relative_frobenius(&w_rec, &w_joint) <= 1e-8);
    }

    #[test]
    fn single_task_joint_equals_recursive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut state = RlsState::new(4, 16, 0.5, 2).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        let x = random_expanded(&mut rng, 20, 16);
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let y = state.one_hot(&labels).unwrap();
        state.update(&x, &y).unwrap();
        let w = state.solve().unwrap();
        let w_joint = joint_oracle(&x, &y, 0.5).unwrap();
        assert!(relative_frobenius(&w, &w_joint) <= 1e-10);
    }

    #[test]
    fn row_permutation_leaves_solution_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_expanded(&mut rng, 30, 12);
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut state = RlsState::new(4, 12, 1.0, 5).unwrap();
        state.add_classes(&[0, 1, 2]).unwrap();
        let y = state.one_hot(&labels).unwrap();
        state.update(&x, &y).unwrap();

        // Reversed row order.
        let perm: Vec<usize> = (0..30).rev().collect();
        let mut xp = Array2::zeros((30, 12));
        let mut lp = Vec::new();
        for (r, &src) in perm.iter().enumerate() {
            xp.row_mut(r).assign(&x.row(src));
            lp.push(labels[src]);
        }
        let mut state2 = RlsState::new(4, 12, 1.0, 5).unwrap();
        state2.add_classes(&[0, 1, 2]).unwrap();
        let yp = state2.one_hot(&lp).unwrap();
        state2.update(&xp, &yp).unwrap();
        assert!((&state.a - &state2.a).iter().all(|&v| v.abs() <= 1e-10));
        assert!(relative_frobenius(&state.solve().unwrap(), &state2.solve().unwrap()) <= 1e-10);
    }

    #[test]
    fn new_columns_start_zero_and_old_ones_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut state = RlsState::new(4, 8, 1.0, 5).unwrap();
        state.add_classes(&[0]).unwrap();
        let x = random_expanded(&mut rng, 5, 8);
        let y = state.one_hot(&[0, 0, 0, 0, 0]).unwrap();
        state.update(&x, &y).unwrap();
        let col0 = state.c.column(0).to_owned();
        state.add_classes(&[1, 2]).unwrap();
        assert_eq!(state.c.column(0).to_owned(), col0);
        assert!(state.c.column(1).iter().all(|&v| v == 0.0));
        assert!(state.c.column(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut state = RlsState::new(6, 16, 2.5, 77).unwrap();
        state.add_classes(&[3, 1, 4]).unwrap();
        let x = random_expanded(&mut rng, 12, 16);
        let labels: Vec<usize> = (0..12).map(|i| [3, 1, 4][i % 3]).collect();
        let y = state.one_hot(&labels).unwrap();
        state.update(&x, &y).unwrap();

        let mut buf = Vec::new();
        state.checkpoint(&mut buf).unwrap();
        let restored = RlsState::restore(&mut &buf[..]).unwrap();
        assert_eq!(state.a, restored.a);
        assert_eq!(state.c, restored.c);
        assert_eq!(state.seen, restored.seen);
        assert_eq!(state.expansion, restored.expansion);
        assert_eq!(state.gamma, restored.gamma);
    }

    #[test]
    fn allocator_logits_zero_cases() {
        let backbone = FrozenBackbone::new(4, 6, 2, 1);
        let adapter = AdapterSet::init(6, 2, 2, 1, 2);
        let mut state = RlsState::new(6, 8, 1.0, 3).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        // W = 0 -> zero logits.
        let w = Array2::zeros((8, 2));
        let logits = allocator_logits(&[0.3, -0.1, 0.8, 0.2], &backbone, &adapter, &w, &state).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // Zero input -> zero feature -> zero expansion -> zero logits.
        let w = Array2::ones((8, 2));
        let logits = allocator_logits(&[0.0; 4], &backbone, &adapter, &w, &state).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        // Stale weights rejected.
        let w = Array2::ones((8, 5));
        assert!(matches!(
            allocator_logits(&[0.0; 4], &backbone, &adapter, &w, &state),
            Err(NofaError::StaleWeights { .. })
        ));
    }

    #[test]
    fn logits_match_straight_line_loop() {
        let mut state = RlsState::new(3, 5, 1.0, 13).unwrap();
        state.add_classes(&[0, 1]).unwrap();
        let phi = array![0.4, -1.1, 0.9];
        let expanded = state.expand(&phi).unwrap();
        let w = array![
            [0.1, -0.2],
            [0.3, 0.4],
            [-0.5, 0.6],
            [0.7, -0.8],
            [0.9, 1.0]
        ];
        let got = logits_from_expanded(&expanded, &w);
        for j in 0..2 {
            let mut s = 0.0;
            for i in 0..5 {
                s += expanded[i] * w[[i, j]];
            }
            assert!((got[j] - s).abs() < 1e-14);
        }
    }
}
