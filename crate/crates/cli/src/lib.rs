//! Command implementations behind the `rtorch` binary.
//!
//! Exit statuses: 0 clean, 1 input error, 2 a hard task missed a deadline,
//! 3 no feasible plan.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rtorch_core::analysis::{assess, Thresholds};
use rtorch_core::metrics::{self, RunReport, DEFAULT_BIN_WIDTH};
use rtorch_core::orchestrator::{mc_reallocate, plan_objective, Orchestrator, Strategy};
use rtorch_core::prob::{self, fit_to_normal, NormalParams, StreamingFit};
use rtorch_core::scenario::{first_fit, Scenario, ScenarioError};
use rtorch_core::sim::{read_runtimes_csv, run_sim, EventKind, SimTrace};
use rtorch_core::{AllocationPlan, Criticality, FitMap, Micros, System, TaskId};
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_HARD_MISS: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

/// Fits with a KS statistic above this are reported as non-normal.
pub const GOODNESS_WARN: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Infeasible(t) => {
                CliError::Infeasible(format!("task `{t}` fits on no resource"))
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

/// Command-line overrides applied on top of a scenario file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub duration_us: Option<Micros>,
    pub strategy: Option<Strategy>,
    pub mc_samples: Option<usize>,
    pub u_max: Option<f64>,
    pub disable_orchestrator: bool,
}

impl Overrides {
    pub fn apply(&self, scenario: &mut Scenario) {
        if let Some(s) = self.seed {
            scenario.sim.seed = s;
        }
        if let Some(d) = self.duration_us {
            scenario.sim.duration_us = d;
        }
        if let Some(s) = self.strategy {
            scenario.orchestrator.strategy = s;
        }
        if let Some(n) = self.mc_samples {
            scenario.orchestrator.mc_samples = n;
        }
        if let Some(u) = self.u_max {
            for r in &mut scenario.resources {
                r.u_max = u;
            }
        }
        if self.disable_orchestrator {
            scenario.orchestrator.enabled = false;
        }
    }
}

pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<Scenario, CliError> {
    let mut scenario = Scenario::load(path)?;
    overrides.apply(&mut scenario);
    Ok(scenario)
}

/// Everything a simulation run produced.
pub struct SimRun {
    pub system: System,
    pub initial_plan: AllocationPlan,
    pub trace: SimTrace,
    pub orchestrator: Orchestrator,
}

impl SimRun {
    /// Deadline misses of hard tasks.
    pub fn hard_misses(&self) -> usize {
        self.trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::DeadlineMiss)
            .filter(|e| {
                self.system
                    .task(&e.task)
                    .is_some_and(|t| t.criticality == Criticality::Hard)
            })
            .count()
    }
}

/// Runs a scenario with the orchestrator attached.
pub fn simulate_scenario(scenario: &Scenario) -> Result<SimRun, CliError> {
    let system = scenario.system()?;
    let initial_plan = scenario.initial_plan(&system)?;
    let mut orchestrator = Orchestrator::new(scenario.orchestrator.clone(), scenario.sim.seed);
    let trace = run_sim(
        &initial_plan,
        &system,
        &scenario.sim.noise,
        scenario.sim.duration_us,
        scenario.sim.seed,
        Some(&mut orchestrator),
    )
    .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(SimRun {
        system,
        initial_plan,
        trace,
        orchestrator,
    })
}

pub struct SimulateOutcome {
    pub run: SimRun,
    pub report: RunReport,
}

impl SimulateOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.run.hard_misses() > 0 {
            EXIT_HARD_MISS
        } else {
            EXIT_OK
        }
    }
}

/// Runs a scenario and writes `trace.csv`, `runtimes.csv`,
/// `decisions.jsonl`, `report.json` and `histogram.csv` into `out`.
pub fn cmd_simulate(
    scenario_path: &Path,
    overrides: &Overrides,
    out: &Path,
) -> Result<SimulateOutcome, CliError> {
    let scenario = load_scenario(scenario_path, overrides)?;
    let run = simulate_scenario(&scenario)?;
    let report = metrics::build_report(&run.trace, DEFAULT_BIN_WIDTH)
        .map_err(|e| CliError::Input(e.to_string()))?;

    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let create = |name: &str| -> Result<(PathBuf, BufWriter<fs::File>), CliError> {
        let p = out.join(name);
        let f = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        Ok((p, BufWriter::new(f)))
    };
    let (p, w) = create("trace.csv")?;
    run.trace.write_events_csv(w).map_err(|e| io_err(&p, e))?;
    let (p, w) = create("runtimes.csv")?;
    run.trace.write_runtimes_csv(w).map_err(|e| io_err(&p, e))?;
    let (p, w) = create("decisions.jsonl")?;
    run.orchestrator.write_log(w).map_err(|e| io_err(&p, e))?;
    let (p, w) = create("histogram.csv")?;
    report.write_histogram_csv(w).map_err(|e| io_err(&p, e))?;
    let (p, mut w) = create("report.json")?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(|e| io_err(&p, e))?;
    std::io::Write::write_all(&mut w, b"\n").map_err(|e| io_err(&p, e))?;
    Ok(SimulateOutcome { run, report })
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskFit {
    pub task: TaskId,
    pub samples: u64,
    pub params: NormalParams,
    pub ks: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupAnalysis {
    pub name: String,
    pub tasks: Vec<TaskId>,
    pub mu: f64,
    pub sigma: f64,
    pub miss_prob: f64,
    pub buffer: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnalyzeReport {
    pub fits: Vec<TaskFit>,
    pub groups: Vec<GroupAnalysis>,
}

impl AnalyzeReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for f in &self.fits {
            let _ = writeln!(
                out,
                "task {}: n={} mu={:.3} sigma={:.3} ks={:.4}",
                f.task, f.samples, f.params.mu, f.params.sigma, f.ks
            );
            if f.ks > GOODNESS_WARN {
                let _ = writeln!(out, "warning: task {} fit goodness {:.4} > {GOODNESS_WARN}, runtimes are not normal", f.task, f.ks);
            }
        }
        for g in &self.groups {
            let verdict = if g.miss_prob > g.threshold {
                "FAIL"
            } else {
                "pass"
            };
            let _ = writeln!(
                out,
                "group {} [{}]: mu_u={:.6} sigma_u={:.6} miss_prob={:.6e} buffer={:.6} threshold={} {verdict}",
                g.name,
                g.tasks.iter().map(TaskId::as_str).collect::<Vec<_>>().join(","),
                g.mu,
                g.sigma,
                g.miss_prob,
                g.buffer,
                g.threshold
            );
        }
        out
    }
}

pub struct AnalyzeArgs<'a> {
    pub runtimes: &'a Path,
    /// Period shared by all tasks when no scenario is given.
    pub period_us: Option<Micros>,
    pub u_max: f64,
    pub threshold: Option<f64>,
    /// Groups tasks by their initial resource and supplies periods and
    /// budgets.
    pub scenario: Option<&'a Path>,
}

/// Fits every task of a runtimes CSV and evaluates the miss probability of
/// each group.
pub fn cmd_analyze(args: &AnalyzeArgs<'_>) -> Result<AnalyzeReport, CliError> {
    let file = fs::File::open(args.runtimes).map_err(|e| io_err(args.runtimes, e))?;
    let samples = read_runtimes_csv(file).map_err(|e| io_err(args.runtimes, e))?;
    if samples.is_empty() {
        return Err(CliError::Input(format!(
            "{}: no samples",
            args.runtimes.display()
        )));
    }
    let mut fits = Vec::new();
    let mut fit_map = FitMap::new();
    for (task, s) in &samples {
        let (params, ks) = fit_to_normal(&StreamingFit::from_samples(s.iter().copied()))
            .map_err(|e| CliError::Input(format!("task `{task}`: {e}")))?;
        fit_map.insert(task.clone(), params);
        fits.push(TaskFit {
            task: task.clone(),
            samples: s.len() as u64,
            params,
            ks,
        });
    }

    let thresholds = Thresholds::default();
    let mut groups = Vec::new();
    match args.scenario {
        Some(path) => {
            let scenario = Scenario::load(path)?;
            let system = scenario.system()?;
            let plan = scenario.initial_plan(&system)?;
            for r in system.resources() {
                let hosted: Vec<_> = plan
                    .accounted_tasks(&system, &r.id)
                    .into_iter()
                    .filter(|t| fit_map.contains_key(&t.id))
                    .collect();
                if hosted.is_empty() {
                    continue;
                }
                let models: Vec<(NormalParams, Micros)> =
                    hosted.iter().map(|t| (fit_map[&t.id], t.period)).collect();
                let joint =
                    prob::joint_utilization(&models).map_err(|e| CliError::Input(e.to_string()))?;
                groups.push(GroupAnalysis {
                    name: r.id.to_string(),
                    tasks: hosted.iter().map(|t| t.id.clone()).collect(),
                    mu: joint.mu,
                    sigma: joint.sigma,
                    miss_prob: prob::miss_probability(joint, args.u_max),
                    buffer: prob::buffer(hosted.iter().copied()),
                    threshold: args.threshold.unwrap_or_else(|| {
                        scenario
                            .orchestrator
                            .thresholds
                            .strictest(hosted.iter().copied())
                    }),
                });
            }
        }
        None => {
            let period = args.period_us.filter(|&p| p > 0).ok_or_else(|| {
                CliError::Input("--period-us (> 0) is required without --scenario".into())
            })?;
            let models: Vec<(NormalParams, Micros)> =
                fits.iter().map(|f| (f.params, period)).collect();
            let joint =
                prob::joint_utilization(&models).map_err(|e| CliError::Input(e.to_string()))?;
            // Without declared budgets the fitted mean stands in for the budget.
            let demand: f64 = fits
                .iter()
                .map(|f| f.params.mu.ceil() / period as f64)
                .sum();
            groups.push(GroupAnalysis {
                name: "all".into(),
                tasks: fits.iter().map(|f| f.task.clone()).collect(),
                mu: joint.mu,
                sigma: joint.sigma,
                miss_prob: prob::miss_probability(joint, args.u_max),
                buffer: 1.0 - demand,
                threshold: args.threshold.unwrap_or(thresholds.hard),
            });
        }
    }
    Ok(AnalyzeReport { fits, groups })
}

/// Tasks on resources that fail admission under `plan`.
pub fn infeasible_tasks(
    plan: &AllocationPlan,
    system: &System,
    thresholds: &Thresholds,
) -> Vec<TaskId> {
    let mut out = Vec::new();
    for r in system.resources() {
        let hosted = plan.accounted_tasks(system, &r.id);
        if hosted.is_empty() {
            continue;
        }
        let ok = assess(
            r,
            &hosted,
            thresholds.strictest(hosted.iter().copied()),
            &FitMap::new(),
        )
        .is_ok_and(|v| v.admitted);
        if !ok {
            out.extend(hosted.iter().map(|t| t.id.clone()));
        }
    }
    out
}

/// Computes an initial placement with first-fit (`naive`) or the Monte
/// Carlo search.
pub fn cmd_plan(scenario_path: &Path, overrides: &Overrides) -> Result<AllocationPlan, CliError> {
    let scenario = load_scenario(scenario_path, overrides)?;
    let system = scenario.system()?;
    let thresholds = scenario.orchestrator.thresholds;
    match scenario.orchestrator.strategy {
        Strategy::Naive => Ok(first_fit(&system, &thresholds, &FitMap::new())?),
        Strategy::MonteCarlo => {
            let incumbent = match first_fit(&system, &thresholds, &FitMap::new()) {
                Ok(p) => p,
                Err(ScenarioError::Infeasible(_)) => {
                    let first = system.resources()[0].id.clone();
                    let all: BTreeMap<_, _> = system
                        .tasks()
                        .iter()
                        .map(|t| (t.id.clone(), first.clone()))
                        .collect();
                    AllocationPlan::new(&system, all, Default::default(), &FitMap::new())
                        .map_err(|e| CliError::Input(e.to_string()))?
                }
                Err(e) => return Err(e.into()),
            };
            let plan = mc_reallocate(
                &system,
                &incumbent,
                &FitMap::new(),
                &thresholds,
                scenario.orchestrator.mc_samples,
                scenario.sim.seed,
                &Default::default(),
            )
            .map_err(|e| CliError::Input(e.to_string()))?;
            let objective = plan_objective(&plan, &system, &FitMap::new(), &thresholds)
                .map_err(|e| CliError::Input(e.to_string()))?;
            if objective.infeasible > 0 {
                let tasks = infeasible_tasks(&plan, &system, &thresholds);
                let names: Vec<&str> = tasks.iter().map(TaskId::as_str).collect();
                return Err(CliError::Infeasible(format!(
                    "no feasible placement for tasks {}",
                    names.join(", ")
                )));
            }
            Ok(plan)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Input("x".into()).exit_code(), 1);
        assert_eq!(CliError::Infeasible("x".into()).exit_code(), 3);
        let e: CliError = ScenarioError::Infeasible("t".into()).into();
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("`t`"));
    }

    #[test]
    fn overrides_apply() {
        let mut s = Scenario::from_json(
            r#"{"tasks": [], "resources": [{"id": "c", "policy": "edf", "criticality": "hard"}], "sim": {"duration_us": 5}}"#,
        )
        .unwrap();
        let o = Overrides {
            seed: Some(9),
            duration_us: Some(7),
            strategy: Some(Strategy::MonteCarlo),
            mc_samples: Some(3),
            u_max: Some(0.5),
            disable_orchestrator: true,
        };
        o.apply(&mut s);
        assert_eq!(
            (s.sim.seed, s.sim.duration_us, s.orchestrator.mc_samples),
            (9, 7, 3)
        );
        assert_eq!(s.orchestrator.strategy, Strategy::MonteCarlo);
        assert_eq!(s.resources[0].u_max, 0.5);
        assert!(!s.orchestrator.enabled);
    }
}
