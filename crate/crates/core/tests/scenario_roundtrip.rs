use proptest::prelude::*;
use rtorch_core::scenario::{Scenario, SimSettings};
use rtorch_core::task::{utilization, validate_task, MixtureMode};
use rtorch_core::{
    Criticality, ExecModel, NoiseModel, OrchestratorConfig, Policy, ResourceState, TaskSpec,
};

fn arb_criticality() -> impl Strategy<Value = Criticality> {
    prop_oneof![
        Just(Criticality::Hard),
        Just(Criticality::Soft),
        Just(Criticality::BestEffort)
    ]
}

fn arb_task() -> impl Strategy<Value = TaskSpec> {
    (
        1u64..1_000_000,
        0.0f64..1.0,
        0.0f64..1.0,
        0u64..1_000,
        prop::option::of((0.0f64..0.5, -500i64..500)),
        arb_criticality(),
    )
        .prop_map(|(period, d, b, sigma, mode, crit)| {
            let deadline = ((period as f64 * d) as u64).max(1);
            let budget = ((deadline as f64 * b) as u64).max(1);
            let mut exec = ExecModel::normal(budget, sigma, budget / 2, budget * 2);
            if let Some((weight, offset)) = mode {
                exec.mixture.push(MixtureMode { weight, offset });
            }
            TaskSpec {
                deadline,
                ..TaskSpec::new("t", period, budget, exec, crit)
            }
        })
}

fn arb_resource() -> impl Strategy<Value = ResourceState> {
    (
        prop_oneof![Just(Policy::Edf), Just(Policy::Rm)],
        0.01f64..=1.0,
        arb_criticality(),
    )
        .prop_map(|(policy, u, c)| {
            let mut r = ResourceState::new("cpu", policy, c);
            r.u_max = u;
            r
        })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn scenario_round_trip(task in arb_task(), resource in arb_resource()) {
        prop_assert!(validate_task(&task).is_empty(), "{:?}", validate_task(&task));
        let s = Scenario {
            tasks: vec![task],
            resources: vec![resource],
            orchestrator: OrchestratorConfig::default(),
            sim: SimSettings { duration_us: 1, seed: 3, noise: NoiseModel::none() },
            initial_plan: None,
        };
        prop_assert_eq!(Scenario::from_json(&s.to_json_pretty()).unwrap(), s);
    }

    #[test]
    fn utilization_monotone(period in 2u64..1_000_000, budget in 1u64..1_000_000) {
        let budget = budget.min(period - 1);
        let t = TaskSpec::new("t", period, budget, ExecModel::deterministic(budget), Criticality::Hard);
        let more = TaskSpec::new("t", period, budget + 1, ExecModel::deterministic(budget + 1), Criticality::Hard);
        let longer = TaskSpec::new("t", period + 1, budget, ExecModel::deterministic(budget), Criticality::Hard);
        prop_assert!(utilization(&more) > utilization(&t));
        prop_assert!(utilization(&longer) < utilization(&t));
    }
}

#[test]
fn bundled_scenarios_parse() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            let s = Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let sys = s.system().unwrap();
            s.initial_plan(&sys).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 9);
}
