//! Synthetic class-incremental stream generation and feature-file I/O.
//!
//! Streams are built from isotropic Gaussian class clusters around seeded
//! centroids on a sphere. Each task optionally applies a seeded orthogonal
//! transform plus translation to its inputs, so task distributions differ
//! in a controlled way.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{NofaError, Result};

/// Labeled samples for one task. Labels across tasks are disjoint.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub samples: Vec<(Vec<f64>, usize)>,
    pub label_set: BTreeSet<usize>,
}

impl TaskDataset {
    pub fn new(samples: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(NofaError::Empty("task dataset"));
        }
        let label_set: BTreeSet<usize> = samples.iter().map(|(_, y)| *y).collect();
        Ok(TaskDataset { samples, label_set })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map(|(x, _)| x.len()).unwrap_or(0)
    }
}

/// One incremental stage: a train split (consumed once, exemplar-free) and a
/// test split kept for evaluation after every later stage.
#[derive(Debug, Clone)]
pub struct CilTask {
    pub train: Option<TaskDataset>,
    pub test: TaskDataset,
}

#[derive(Debug, Clone)]
pub struct CilStream {
    pub tasks: Vec<CilTask>,
    pub total_classes: usize,
    pub input_dim: usize,
}

impl CilStream {
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            let train = task.train.as_ref().ok_or_else(|| {
                NofaError::Dataset(format!("task {} train split already consumed", i + 1))
            })?;
            if train.label_set != task.test.label_set {
                return Err(NofaError::Dataset(format!(
                    "task {} train/test label sets differ",
                    i + 1
                )));
            }
            for label in &train.label_set {
                if !seen.insert(*label) {
                    return Err(NofaError::Dataset(format!(
                        "class {} appears in more than one task",
                        label
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    /// Radius of the centroid sphere; cluster noise is unit Gaussian.
    pub separation: f64,
    /// Magnitude of the per-task orthogonal rotation and translation.
    pub task_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tasks: 5,
            classes_per_task: 4,
            train_per_class: 25,
            test_per_class: 15,
            input_dim: 16,
            separation: 6.0,
            task_shift: 0.5,
            seed: 1993,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 {
            return Err(NofaError::Config("tasks and classes_per_task must be >= 1".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(NofaError::Config("samples per class must be >= 1".into()));
        }
        if self.separation <= 0.0 {
            return Err(NofaError::Config("separation must be > 0".into()));
        }
        if self.task_shift < 0.0 {
            return Err(NofaError::Config("task_shift must be >= 0".into()));
        }
        Ok(())
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let normal: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        let n: f64 = v.dot(&v).sqrt();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Orthogonal transform as a product of Givens rotations with angles
/// ~ N(0, shift). shift = 0 yields the identity.
struct TaskTransform {
    rotations: Vec<(usize, usize, f64)>, // (axis i, axis j, angle)
    translation: Array1<f64>,
}

impl TaskTransform {
    fn sample(rng: &mut ChaCha8Rng, dim: usize, shift: f64) -> Self {
        if shift == 0.0 || dim < 2 {
            return TaskTransform {
                rotations: Vec::new(),
                translation: Array1::zeros(dim),
            };
        }
        let angle_dist = Normal::new(0.0, shift).unwrap();
        let trans_dist = Normal::new(0.0, shift).unwrap();
        let rotations = (0..2 * dim)
            .map(|_| {
                let i = rng.gen_range(0..dim);
                let mut j = rng.gen_range(0..dim - 1);
                if j >= i {
                    j += 1;
                }
                (i, j, angle_dist.sample(rng))
            })
            .collect();
        let translation = Array1::from_shape_fn(dim, |_| trans_dist.sample(rng));
        TaskTransform { rotations, translation }
    }

    fn apply(&self, x: &mut Array1<f64>) {
        for &(i, j, angle) in &self.rotations {
            let (s, c) = angle.sin_cos();
            let xi = x[i];
            let xj = x[j];
            x[i] = c * xi - s * xj;
            x[j] = s * xi + c * xj;
        }
        *x += &self.translation;
    }
}

/// Deterministic synthetic stream with disjoint label sets 0..T*n-1 and a
/// shuffled class order.
pub fn generate_stream(spec: &SyntheticSpec) -> Result<CilStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.tasks * spec.classes_per_task;

    let mut class_order: Vec<usize> = (0..total).collect();
    class_order.shuffle(&mut rng);

    let centroids: Vec<Array1<f64>> = (0..total)
        .map(|_| unit_direction(&mut rng, spec.input_dim) * spec.separation)
        .collect();

    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let transform = TaskTransform::sample(&mut rng, spec.input_dim, spec.task_shift);
        let classes = &class_order[t * spec.classes_per_task..(t + 1) * spec.classes_per_task];
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in classes {
            for k in 0..spec.train_per_class + spec.test_per_class {
                let mut x = centroids[c].clone()
                    + Array1::from_shape_fn(spec.input_dim, |_| noise.sample(&mut rng));
                transform.apply(&mut x);
                let sample = (x.to_vec(), c);
                if k < spec.train_per_class {
                    train.push(sample);
                } else {
                    test.push(sample);
                }
            }
        }
        tasks.push(CilTask {
            train: Some(TaskDataset::new(train)?),
            test: TaskDataset::new(test)?,
        });
    }
    Ok(CilStream {
        tasks,
        total_classes: total,
        input_dim: spec.input_dim,
    })
}

// ---------------------------------------------------------------------------
// Feature-file binary format (little-endian):
//   magic "NFBCFEAT" (8 bytes), version u8 (=1), class-id width u8 (=4),
//   dim u32, count u64, then `count` records of (label u32, dim f64s).
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"NFBCFEAT";
const VERSION: u8 = 1;
const CLASS_ID_WIDTH: u8 = 4;

/// Unsplit labeled feature pool loaded from disk.
#[derive(Debug, Clone)]
pub struct FeaturePool {
    pub dim: usize,
    pub samples: Vec<(Vec<f64>, usize)>,
}

pub fn write_feature_file<W: Write>(w: &mut W, dim: usize, samples: &[(Vec<f64>, usize)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u8(CLASS_ID_WIDTH)?;
    w.write_u32::<LittleEndian>(dim as u32)?;
    w.write_u64::<LittleEndian>(samples.len() as u64)?;
    for (x, y) in samples {
        if x.len() != dim {
            return Err(NofaError::ShapeMismatch {
                expected: dim,
                got: x.len(),
                context: "feature record",
            });
        }
        w.write_u32::<LittleEndian>(*y as u32)?;
        for &v in x {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn save_feature_file(path: &Path, dim: usize, samples: &[(Vec<f64>, usize)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_feature_file(&mut f, dim, samples)
}

pub fn read_feature_file<R: Read>(r: &mut R) -> Result<FeaturePool> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| NofaError::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(NofaError::Format("bad magic".into()));
    }
    let version = r.read_u8()?;
    if version != VERSION {
        return Err(NofaError::Format(format!("unsupported version {version}")));
    }
    let width = r.read_u8()?;
    if width != CLASS_ID_WIDTH {
        return Err(NofaError::Format(format!("unsupported class-id width {width}")));
    }
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let count = r.read_u64::<LittleEndian>()? as usize;
    if count == 0 {
        return Err(NofaError::Format("file contains no records".into()));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let label = r
            .read_u32::<LittleEndian>()
            .map_err(|_| NofaError::Format(format!("truncated record {i}")))? as usize;
        let mut x = Vec::with_capacity(dim);
        for _ in 0..dim {
            x.push(
                r.read_f64::<LittleEndian>()
                    .map_err(|_| NofaError::Format(format!("truncated record {i}")))?,
            );
        }
        samples.push((x, label));
    }
    Ok(FeaturePool { dim, samples })
}

pub fn load_feature_file(path: &Path) -> Result<FeaturePool> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_feature_file(&mut f)
}

/// CSV import: one `label,f1,...,fd` row per sample, no header.
pub fn load_feature_csv(path: &Path) -> Result<FeaturePool> {
    let text = std::fs::read_to_string(path)?;
    let mut samples = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| NofaError::Format(format!("line {}: bad label", lineno + 1)))?;
        let feats: Vec<f64> = parts
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| NofaError::Format(format!("line {}: bad feature value", lineno + 1)))?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(NofaError::Format(format!("line {}: inconsistent dim", lineno + 1)))
            }
            _ => {}
        }
        samples.push((feats, label));
    }
    let dim = dim.ok_or_else(|| NofaError::Format("file contains no records".into()))?;
    Ok(FeaturePool { dim, samples })
}

/// Apply a `B-m Inc-n` split to a pool: `base_m` classes in the first task
/// (0 means `inc_n`), `inc_n` per task after. Class order follows first
/// appearance order shuffled by `seed`; per-class samples are split
/// train/test by `test_fraction`.
pub fn apply_split(
    pool: &FeaturePool,
    base_m: usize,
    inc_n: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<CilStream> {
    if inc_n == 0 {
        return Err(NofaError::Config("inc_n must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(NofaError::Config("test_fraction must be in (0, 1)".into()));
    }
    let mut classes: Vec<usize> = pool
        .samples
        .iter()
        .map(|(_, y)| *y)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return Err(NofaError::Dataset("no classes in pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    classes.shuffle(&mut rng);

    let first = if base_m == 0 { inc_n } else { base_m };
    if first > classes.len() {
        return Err(NofaError::Config(format!(
            "initial task needs {first} classes, pool has {}",
            classes.len()
        )));
    }
    if (classes.len() - first) % inc_n != 0 {
        return Err(NofaError::Config(format!(
            "{} classes do not split as B{} Inc{}",
            classes.len(),
            base_m,
            inc_n
        )));
    }

    let mut groups: Vec<Vec<usize>> = vec![classes[..first].to_vec()];
    for chunk in classes[first..].chunks(inc_n) {
        groups.push(chunk.to_vec());
    }

    let mut tasks = Vec::new();
    for group in &groups {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in group {
            let mut per_class: Vec<&(Vec<f64>, usize)> =
                pool.samples.iter().filter(|(_, y)| *y == c).collect();
            per_class.shuffle(&mut rng);
            let n_test = ((per_class.len() as f64) * test_fraction).round().max(1.0) as usize;
            let n_test = n_test.min(per_class.len().saturating_sub(1)).max(1);
            for (i, s) in per_class.into_iter().enumerate() {
                if i < n_test {
                    test.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
        }
        if train.is_empty() {
            return Err(NofaError::Dataset("split produced an empty train set".into()));
        }
        tasks.push(CilTask {
            train: Some(TaskDataset::new(train)?),
            test: TaskDataset::new(test)?,
        });
    }
    Ok(CilStream {
        tasks,
        total_classes: classes.len(),
        input_dim: pool.dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic() {
        let spec = SyntheticSpec::default();
        let a = generate_stream(&spec).unwrap();
        let b = generate_stream(&spec).unwrap();
        for (ta, tb) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(ta.train.as_ref().unwrap().samples, tb.train.as_ref().unwrap().samples);
            assert_eq!(ta.test.samples, tb.test.samples);
        }
    }

    #[test]
    fn labels_cover_exactly_t_times_n() {
        let spec = SyntheticSpec {
            tasks: 3,
            classes_per_task: 4,
            ..SyntheticSpec::default()
        };
        let stream = generate_stream(&spec).unwrap();
        stream.validate().unwrap();
        let mut all: BTreeSet<usize> = BTreeSet::new();
        for t in &stream.tasks {
            all.extend(&t.train.as_ref().unwrap().label_set);
        }
        assert_eq!(all, (0..12).collect());
    }

    #[test]
    fn huge_separation_is_nearest_centroid_separable() {
        let spec = SyntheticSpec {
            separation: 100.0,
            task_shift: 0.0,
            ..SyntheticSpec::default()
        };
        let stream = generate_stream(&spec).unwrap();
        // Nearest-centroid oracle on raw inputs.
        let mut centroids: Vec<(usize, Array1<f64>, usize)> = Vec::new();
        for task in &stream.tasks {
            let train = task.train.as_ref().unwrap();
            for &c in &train.label_set {
                let mut mean = Array1::zeros(spec.input_dim);
                let mut n = 0;
                for (x, y) in &train.samples {
                    if *y == c {
                        mean += &Array1::from_vec(x.clone());
                        n += 1;
                    }
                }
                centroids.push((c, mean / n as f64, n));
            }
        }
        let mut correct = 0;
        let mut total = 0;
        for task in &stream.tasks {
            for (x, y) in &task.test.samples {
                let xv = Array1::from_vec(x.clone());
                let best = centroids
                    .iter()
                    .min_by(|a, b| {
                        let da = (&a.1 - &xv).dot(&(&a.1 - &xv));
                        let db = (&b.1 - &xv).dot(&(&b.1 - &xv));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap()
                    .0;
                if best == *y {
                    correct += 1;
                }
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn zero_shift_transform_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tf = TaskTransform::sample(&mut rng, 8, 0.0);
        let mut x = Array1::from_vec(vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0, -1.0, 4.0]);
        let before = x.clone();
        tf.apply(&mut x);
        assert_eq!(x, before);
    }

    #[test]
    fn transform_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tf = TaskTransform::sample(&mut rng, 6, 1.0);
        let mut a: Array1<f64> = Array1::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let mut b: Array1<f64> = Array1::from_vec(vec![-2.0, 0.0, 1.0, 4.0, -0.5, 2.0]);
        let d0: f64 = (&a - &b).dot(&(&a - &b)).sqrt();
        tf.apply(&mut a);
        tf.apply(&mut b);
        let d1: f64 = (&a - &b).dot(&(&a - &b)).sqrt();
        assert!((d0 - d1).abs() < 1e-9);
    }

    #[test]
    fn feature_file_round_trip_is_bit_identical() {
        let samples = vec![
            (vec![1.5, -2.25, 1e-300], 0),
            (vec![0.0, f64::MIN_POSITIVE, 42.0], 7),
        ];
        let mut buf = Vec::new();
        write_feature_file(&mut buf, 3, &samples).unwrap();
        let pool = read_feature_file(&mut &buf[..]).unwrap();
        assert_eq!(pool.dim, 3);
        assert_eq!(pool.samples, samples);
    }

    #[test]
    fn feature_file_error_codes() {
        // Bad magic.
        let mut buf = vec![0u8; 64];
        assert!(matches!(read_feature_file(&mut &buf[..]), Err(NofaError::Format(_))));
        // Valid header, zero records.
        buf.clear();
        write_feature_file(&mut buf, 2, &[(vec![1.0, 2.0], 0)]).unwrap();
        let mut empty = buf.clone();
        empty[14..22].copy_from_slice(&0u64.to_le_bytes());
        empty.truncate(22);
        assert!(matches!(read_feature_file(&mut &empty[..]), Err(NofaError::Format(_))));
        // Truncated record.
        let trunc = &buf[..buf.len() - 4];
        assert!(matches!(read_feature_file(&mut &trunc[..]), Err(NofaError::Format(_))));
    }

    #[test]
    fn b0_inc5_split_of_20_classes() {
        let mut samples = Vec::new();
        for c in 0..20 {
            for k in 0..6 {
                samples.push((vec![c as f64, k as f64], c));
            }
        }
        let pool = FeaturePool { dim: 2, samples };
        let stream = apply_split(&pool, 0, 5, 0.3, 9).unwrap();
        assert_eq!(stream.tasks.len(), 4);
        for task in &stream.tasks {
            assert_eq!(task.train.as_ref().unwrap().label_set.len(), 5);
        }
        stream.validate().unwrap();
    }
}
