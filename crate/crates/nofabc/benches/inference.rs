//! Per-sample inference fan-out: parallel vs sequential evaluation of a
//! trained pipeline over a pooled test set.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use nofabc::data::{generate_stream, SyntheticSpec, TaskDataset};
use nofabc::pipeline::{run_cil, CilRunner, PipelineConfig};

fn trained_runner() -> (CilRunner, TaskDataset) {
    let spec = SyntheticSpec {
        tasks: 4,
        classes_per_task: 4,
        train_per_class: 20,
        test_per_class: 30,
        ..SyntheticSpec::default()
    };
    let stream = generate_stream(&spec).unwrap();
    let mut pooled = TaskDataset {
        samples: Vec::new(),
        label_set: std::collections::BTreeSet::new(),
    };
    for task in &stream.tasks {
        pooled.samples.extend(task.test.samples.iter().cloned());
        pooled.label_set.extend(task.test.label_set.iter().cloned());
    }
    let cfg = PipelineConfig {
        train: nofabc::trainer::TrainConfig {
            epochs: 5,
            ..Default::default()
        },
        ..Default::default()
    };
    let (_, runner) = run_cil(stream, &cfg).unwrap();
    (runner, pooled)
}

fn bench_evaluate(c: &mut Criterion) {
    let (runner, pooled) = trained_runner();
    let mut group = c.benchmark_group("evaluate");
    group.bench_function("parallel", |b| {
        b.iter_batched(
            || (),
            |_| runner.evaluate(&pooled).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.bench_function("sequential", |b| {
        b.iter_batched(
            || (),
            |_| runner.evaluate_seq(&pooled).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_evaluate);
criterion_main!(benches);
