use std::collections::BTreeSet;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rtorch_core::{
    admit, buffer, joint_utilization, mc_reallocate, miss_probability, AllocationPlan, Criticality,
    ExecModel, FitMap, NormalParams, Policy, ResourceId, ResourceState, System, TaskSpec,
    Thresholds,
};

fn tasks(n: usize) -> Vec<TaskSpec> {
    (0..n)
        .map(|i| {
            let period = 10_000 * (1 + i as u64 % 4);
            let budget = period / (2 * n as u64);
            TaskSpec::new(
                format!("t{i}"),
                period,
                budget,
                ExecModel::normal(budget, budget / 10, budget / 2, budget * 2),
                Criticality::Hard,
            )
        })
        .collect()
}

fn probability(c: &mut Criterion) {
    let mut g = c.benchmark_group("probability");
    for n in [4usize, 16, 64] {
        let models: Vec<(NormalParams, u64)> = tasks(n)
            .iter()
            .map(|t| {
                let e = t.exec.as_ref().unwrap();
                (NormalParams::new(e.mu as f64, e.sigma as f64), t.period)
            })
            .collect();
        g.bench_with_input(BenchmarkId::new("joint_miss", n), &models, |b, m| {
            b.iter(|| miss_probability(joint_utilization(black_box(m)).unwrap(), 0.9))
        });
        let set = tasks(n);
        g.bench_with_input(BenchmarkId::new("buffer", n), &set, |b, s| {
            b.iter(|| buffer(black_box(s)))
        });
    }
    g.finish();
}

fn admission(c: &mut Criterion) {
    let set = tasks(10);
    let hosted: Vec<&TaskSpec> = set[..9].iter().collect();
    let cpu = ResourceState::new("cpu0", Policy::Rm, Criticality::Hard);
    let fits = FitMap::new();
    c.bench_function("admit_rm_10", |b| {
        b.iter(|| admit(&cpu, black_box(&hosted), &set[9], 1e-4, &fits).unwrap())
    });
}

fn reallocation(c: &mut Criterion) {
    let set = tasks(8);
    let resources = (0..3)
        .map(|j| ResourceState::new(format!("cpu{j}"), Policy::Edf, Criticality::Hard))
        .collect();
    let sys = System::new(set, resources).unwrap();
    let a = sys
        .tasks()
        .iter()
        .map(|t| (t.id.clone(), ResourceId::new("cpu0")))
        .collect();
    let plan = AllocationPlan::new(&sys, a, BTreeSet::new(), &FitMap::new()).unwrap();
    let th = Thresholds::default();
    let fits = FitMap::new();
    c.bench_function("mc_reallocate_8x3_200", |b| {
        b.iter(|| {
            mc_reallocate(&sys, &plan, &fits, &th, 200, black_box(1), &BTreeSet::new()).unwrap()
        })
    });
}

criterion_group!(benches, probability, admission, reallocation);
criterion_main!(benches);
