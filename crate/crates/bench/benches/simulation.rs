use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rtorch_core::{
    run_sim, AllocationPlan, Criticality, ExecModel, FitMap, NoiseModel, NormalParams, Policy,
    ResourceId, ResourceState, System, TaskSpec,
};

/// `n` identical 10 ms units every 100 ms on one EDF CPU.
fn units(n: usize) -> (System, AllocationPlan) {
    let tasks = (0..n)
        .map(|i| {
            TaskSpec::new(
                format!("unit{i:02}"),
                100_000,
                10_000,
                ExecModel::normal(10_000, 10, 10_000, 10_150),
                Criticality::Hard,
            )
        })
        .collect();
    let sys = System::new(
        tasks,
        vec![ResourceState::new("cpu0", Policy::Edf, Criticality::Hard)],
    )
    .unwrap();
    let a = sys
        .tasks()
        .iter()
        .map(|t| (t.id.clone(), ResourceId::new("cpu0")))
        .collect();
    let plan = AllocationPlan::new(&sys, a, BTreeSet::new(), &FitMap::new()).unwrap();
    (sys, plan)
}

fn simulate(c: &mut Criterion) {
    let noise = NoiseModel {
        base_overhead: 40,
        latency_jitter: NormalParams::new(-20.0, 30.0),
        interference: None,
    };
    let mut g = c.benchmark_group("run_sim_10s");
    g.sample_size(20);
    for n in [4usize, 7, 10] {
        let (sys, plan) = units(n);
        g.bench_with_input(
            BenchmarkId::from_parameter(n),
            &(sys, plan),
            |b, (sys, plan)| b.iter(|| run_sim(plan, sys, &noise, 10_000_000, 1, None).unwrap()),
        );
    }
    g.finish();
}

criterion_group!(benches, simulate);
criterion_main!(benches);
