use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use offmenu_core::equilibrium::{simulate_outcome, Continuation, Strategy};
use offmenu_core::instances;
use offmenu_core::par::Exec;
use offmenu_core::Analysis;

const EXECUTORS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn tables(c: &mut Criterion) {
    let mut group = c.benchmark_group("synthesize");
    group.sample_size(10);
    for (label, scenario) in [("g2-T3", instances::g2(3)), ("g2-pair-T2", instances::g2_pair_bottom_quit(2))] {
        for (name, exec) in EXECUTORS {
            group.bench_with_input(BenchmarkId::new(name, label), &scenario, |b, s| {
                b.iter(|| {
                    let model = s.model(exec).unwrap();
                    black_box(Analysis::synthesized(model, false).unwrap())
                })
            });
        }
    }
    group.finish();
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    let s = instances::g2_pair_bottom_quit(2);
    for (name, exec) in EXECUTORS {
        let a = Analysis::synthesized(s.model(exec).unwrap(), false).unwrap();
        group.bench_function(BenchmarkId::new(name, "10k-paths"), |b| {
            b.iter(|| {
                black_box(
                    simulate_outcome(
                        &a.model,
                        &a.mechanism,
                        &a.values,
                        Strategy::BestResponse(Continuation::OneShot),
                        10_000,
                        1,
                    )
                    .unwrap(),
                )
            })
        });
    }
    group.finish();
}

criterion_group!(benches, tables, simulation);
criterion_main!(benches);
