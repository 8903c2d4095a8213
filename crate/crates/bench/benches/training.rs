use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use gplab::autodiff::OptLevel;
use gplab::harness::{load_dataset, Source};
use gplab::metrics::Task;
use gplab::models::{train, TrainConfig};

fn epochs(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_5_epochs_n1024");
    group.sample_size(10);
    for task in [Task::Classify, Task::Link] {
        let data = load_dataset(&Source::Ba { n: 1024, features: false, seed: 0 }, task).unwrap();
        for level in OptLevel::ALL {
            let mut cfg = TrainConfig::for_task(task, level);
            cfg.epochs = 5;
            group.bench_with_input(BenchmarkId::new(task.to_string(), level), &cfg, |b, cfg| {
                b.iter(|| train(&data, cfg).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, epochs);
criterion_main!(benches);
