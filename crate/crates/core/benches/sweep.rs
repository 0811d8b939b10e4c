use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cke::experiments::{run_sweep_with, Execution, Scenario};

fn load(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name].iter().collect();
    Scenario::from_path(&path).expect("bundled scenario")
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep");
    group.sample_size(20);
    for name in ["fig3.scenario.json", "fig4.scenario.json"] {
        let s = load(name);
        // without the `parallel` feature both arms run on one thread
        for (label, exec) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
            group.bench_with_input(BenchmarkId::new(label, &s.name), &s, |b, s| {
                b.iter(|| run_sweep_with(s, exec).expect("sweep runs"))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
