//! Monitoring and reallocation loop.
//!
//! Each epoch the orchestrator refits every task's runtime distribution from
//! a sliding window of measured runtimes, evaluates the miss probability of
//! every resource and, when one exceeds the strictest threshold of its
//! tasks, moves work away from it. Two strategies are available: a naive
//! best-match relocation of the task next in line, and a Monte Carlo search
//! over complete assignments.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, admit, AnalysisError, Thresholds};
use crate::prob::{fit_to_normal, StreamingFit};
use crate::sim::{EpochHook, Snapshot};
use crate::task::{
    AllocationPlan, FitMap, Micros, ModelError, ResourceId, System, TaskId, TaskSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Naive,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    /// When false the orchestrator still monitors and logs but never moves
    /// tasks.
    pub enabled: bool,
    #[serde(rename = "monitor_period_us")]
    pub monitor_period: Micros,
    pub thresholds: Thresholds,
    pub fit_window: usize,
    pub strategy: Strategy,
    pub mc_samples: usize,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            monitor_period: 1_000_000,
            thresholds: Thresholds::default(),
            fit_window: 1024,
            strategy: Strategy::Naive,
            mc_samples: 1000,
        }
    }
}

impl OrchestratorConfig {
    /// Broken invariants, as `field: rule` strings.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.monitor_period == 0 {
            out.push("monitor_period_us: must be > 0".to_owned());
        }
        let t = &self.thresholds;
        for (name, v) in [
            ("hard", t.hard),
            ("soft", t.soft),
            ("best_effort", t.best_effort),
        ] {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("thresholds.{name}: must be in [0, 1]"));
            }
        }
        if self.mc_samples == 0 {
            out.push("mc_samples: must be ≥ 1".to_owned());
        }
        if self.fit_window == 0 {
            out.push("fit_window: must be ≥ 1".to_owned());
        }
        out
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OrchestratorError {
    #[error("resource `{0}` hosts no task")]
    EmptyResource(ResourceId),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResourceRisk {
    pub resource: ResourceId,
    pub miss_prob: f64,
    pub threshold: f64,
    pub breached: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Move {
    pub task: TaskId,
    pub from: ResourceId,
    pub to: ResourceId,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Trigger {
    pub resource: ResourceId,
    pub miss_prob: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReallocationDecision {
    pub moved: Vec<Move>,
    pub trigger: Trigger,
    pub evicted_best_effort: Vec<TaskId>,
    /// The breach could not be fully resolved.
    pub escalated: bool,
}

/// Miss probability of every resource under `plan`.
///
/// A resource is breached when its probability exceeds the strictest
/// threshold among the tasks holding a budget there.
pub fn evaluate_epoch(
    plan: &AllocationPlan,
    system: &System,
    fits: &FitMap,
    thresholds: &Thresholds,
) -> Result<Vec<ResourceRisk>, AnalysisError> {
    system
        .resources()
        .iter()
        .map(|r| {
            let hosted = plan.accounted_tasks(system, &r.id);
            let miss_prob = analysis::resource_miss_probability(r, &hosted, fits)?;
            let threshold = thresholds.strictest(hosted.iter().copied());
            Ok(ResourceRisk {
                resource: r.id.clone(),
                miss_prob,
                threshold,
                breached: miss_prob > threshold,
            })
        })
        .collect()
}

/// The task next in line on `resource`: earliest upcoming absolute
/// deadline, ties broken by id.
pub fn select_victim(
    resource: &ResourceId,
    tasks: &[&TaskSpec],
    next_deadlines: &BTreeMap<TaskId, Micros>,
) -> Result<TaskId, OrchestratorError> {
    tasks
        .iter()
        .min_by_key(|t| {
            (
                next_deadlines.get(&t.id).copied().unwrap_or(Micros::MAX),
                &t.id,
            )
        })
        .map(|t| t.id.clone())
        .ok_or_else(|| OrchestratorError::EmptyResource(resource.clone()))
}

/// `1 / (1 + |ln(victim_period / median)|)`, 0.5 for an empty resource.
pub fn match_score(victim_period: Micros, hosted_periods: &[Micros]) -> f64 {
    if hosted_periods.is_empty() {
        return 0.5;
    }
    let mut p: Vec<f64> = hosted_periods.iter().map(|&x| x as f64).collect();
    p.sort_by(f64::total_cmp);
    let n = p.len();
    let median = if n % 2 == 1 {
        p[n / 2]
    } else {
        0.5 * (p[n / 2 - 1] + p[n / 2])
    };
    1.0 / (1.0 + (victim_period as f64 / median).ln().abs())
}

fn risk_of(
    plan: &AllocationPlan,
    system: &System,
    fits: &FitMap,
    thresholds: &Thresholds,
    resource: &ResourceId,
) -> Result<Trigger, OrchestratorError> {
    let r = system
        .resource(resource)
        .ok_or_else(|| ModelError::UnknownResource(resource.clone()))?;
    let hosted = plan.accounted_tasks(system, resource);
    Ok(Trigger {
        resource: resource.clone(),
        miss_prob: analysis::resource_miss_probability(r, &hosted, fits)?,
        threshold: thresholds.strictest(hosted.iter().copied()),
    })
}

/// Relocates `victim` to the admissible resource whose hosted periods best
/// match its own.
///
/// A resource less critical than the victim may make room by releasing the
/// budgets of its best-effort tasks; those are listed as evicted. When no
/// resource admits the victim the decision has no moves and is escalated.
pub fn naive_reallocate(
    victim: &TaskId,
    plan: &AllocationPlan,
    system: &System,
    fits: &FitMap,
    thresholds: &Thresholds,
) -> Result<ReallocationDecision, OrchestratorError> {
    let spec = system
        .task(victim)
        .ok_or_else(|| ModelError::UnknownTask(victim.clone()))?;
    let host = plan
        .assignment(victim)
        .ok_or_else(|| ModelError::Unassigned(victim.clone()))?;
    let trigger = risk_of(plan, system, fits, thresholds, host)?;

    let mut best: Option<(f64, &ResourceId, Vec<TaskId>)> = None;
    for r in system.resources().iter().filter(|r| &r.id != host) {
        let hosted = plan.accounted_tasks(system, &r.id);
        let threshold = thresholds.strictest(hosted.iter().copied().chain([spec]));
        let (keep, evicted) = if admit(r, &hosted, spec, threshold, fits)?.admitted {
            (hosted, Vec::new())
        } else if r.criticality < spec.criticality {
            let (evict, keep): (Vec<&TaskSpec>, Vec<&TaskSpec>) = hosted
                .into_iter()
                .partition(|t| t.criticality == crate::task::Criticality::BestEffort);
            let threshold = thresholds.strictest(keep.iter().copied().chain([spec]));
            if evict.is_empty() || !admit(r, &keep, spec, threshold, fits)?.admitted {
                continue;
            }
            (keep, evict.into_iter().map(|t| t.id.clone()).collect())
        } else {
            continue;
        };
        let periods: Vec<Micros> = keep.iter().map(|t| t.period).collect();
        let score = match_score(spec.period, &periods);
        let better = match &best {
            None => true,
            Some((s, _, ev)) => score > *s || (score == *s && evicted.len() < ev.len()),
        };
        if better {
            best = Some((score, &r.id, evicted));
        }
    }

    Ok(match best {
        Some((_, to, evicted)) => ReallocationDecision {
            moved: vec![Move {
                task: victim.clone(),
                from: host.clone(),
                to: to.clone(),
            }],
            trigger,
            evicted_best_effort: evicted,
            escalated: false,
        },
        None => {
            log::debug!("no admissible destination for `{victim}` leaving `{host}`");
            ReallocationDecision {
                moved: Vec::new(),
                trigger,
                evicted_best_effort: Vec::new(),
                escalated: true,
            }
        }
    })
}

/// Lexicographic plan cost: infeasible resources, then the worst miss
/// probability, then the number of resources in use. Smaller is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Objective {
    pub infeasible: usize,
    pub max_miss_prob: f64,
    pub used: usize,
}

impl Eq for Objective {}

impl PartialOrd for Objective {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Objective {
    fn cmp(&self, other: &Self) -> Ordering {
        self.infeasible
            .cmp(&other.infeasible)
            .then(self.max_miss_prob.total_cmp(&other.max_miss_prob))
            .then(self.used.cmp(&other.used))
    }
}

/// Scores an assignment given as one resource index per task (both in
/// [`System`] order). A resource is infeasible when it fails the budget
/// bound or its miss probability exceeds its strictest threshold.
pub fn assignment_objective(
    assignment: &[usize],
    background: &BTreeSet<TaskId>,
    system: &System,
    fits: &FitMap,
    thresholds: &Thresholds,
) -> Result<Objective, AnalysisError> {
    let mut groups: Vec<Vec<&TaskSpec>> = vec![Vec::new(); system.resources().len()];
    for (t, &r) in system.tasks().iter().zip(assignment) {
        if !background.contains(&t.id) {
            groups[r].push(t);
        }
    }
    let mut obj = Objective {
        infeasible: 0,
        max_miss_prob: 0.0,
        used: 0,
    };
    for (r, group) in system.resources().iter().zip(&groups) {
        if group.is_empty() {
            continue;
        }
        obj.used += 1;
        let v = analysis::assess(r, group, thresholds.strictest(group.iter().copied()), fits)?;
        if !v.admitted {
            obj.infeasible += 1;
        }
        obj.max_miss_prob = obj.max_miss_prob.max(v.miss_prob);
    }
    Ok(obj)
}

fn plan_indices(plan: &AllocationPlan, system: &System) -> Result<Vec<usize>, ModelError> {
    system
        .tasks()
        .iter()
        .map(|t| {
            let r = plan
                .assignment(&t.id)
                .ok_or_else(|| ModelError::Unassigned(t.id.clone()))?;
            system
                .resource_position(r)
                .ok_or_else(|| ModelError::UnknownResource(r.clone()))
        })
        .collect()
}

pub fn plan_objective(
    plan: &AllocationPlan,
    system: &System,
    fits: &FitMap,
    thresholds: &Thresholds,
) -> Result<Objective, OrchestratorError> {
    let idx = plan_indices(plan, system)?;
    Ok(assignment_objective(
        &idx,
        plan.background(),
        system,
        fits,
        thresholds,
    )?)
}

/// Random-restart search over complete assignments.
///
/// Draws `mc_samples` assignments (each unpinned task picks a resource
/// uniformly) and returns the best by [`Objective`], never one worse than
/// `incumbent`. Pinned tasks keep their resource.
pub fn mc_reallocate(
    system: &System,
    incumbent: &AllocationPlan,
    fits: &FitMap,
    thresholds: &Thresholds,
    mc_samples: usize,
    seed: u64,
    pinned: &BTreeSet<TaskId>,
) -> Result<AllocationPlan, OrchestratorError> {
    let current = plan_indices(incumbent, system)?;
    let n_res = system.resources().len();
    let mut best_obj =
        assignment_objective(&current, incumbent.background(), system, fits, thresholds)?;
    let mut best: Option<Vec<usize>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidate = current.clone();
    let mut background = BTreeSet::new();
    for _ in 0..mc_samples {
        background.clear();
        for (i, t) in system.tasks().iter().enumerate() {
            candidate[i] = if pinned.contains(&t.id) {
                current[i]
            } else {
                rng.random_range(0..n_res)
            };
            if candidate[i] == current[i] && incumbent.is_background(&t.id) {
                background.insert(t.id.clone());
            }
        }
        let obj = assignment_objective(&candidate, &background, system, fits, thresholds)?;
        if obj < best_obj {
            best_obj = obj;
            best = Some(candidate.clone());
        }
    }
    let Some(chosen) = best else {
        return Ok(incumbent.clone());
    };
    let mut plan = incumbent.clone();
    for (t, &r) in system.tasks().iter().zip(&chosen) {
        plan.reassign(system, fits, &t.id, &system.resources()[r].id)?;
    }
    Ok(plan)
}

/// Inputs of one orchestration step.
pub struct StepInput<'a> {
    pub system: &'a System,
    pub plan: &'a AllocationPlan,
    pub fits: &'a FitMap,
    pub next_deadlines: &'a BTreeMap<TaskId, Micros>,
    /// Tasks that may not move this epoch.
    pub pinned: &'a BTreeSet<TaskId>,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub risks: Vec<ResourceRisk>,
    pub decision: Option<ReallocationDecision>,
    /// The plan after applying the decision, when anything moved.
    pub plan: Option<AllocationPlan>,
}

fn apply(
    plan: &mut AllocationPlan,
    system: &System,
    fits: &FitMap,
    d: &ReallocationDecision,
) -> Result<(), ModelError> {
    for m in &d.moved {
        plan.reassign(system, fits, &m.task, &m.to)?;
    }
    plan.demote(system, fits, &d.evicted_best_effort)
}

/// Evaluates every resource and, on a breach, decides a reallocation with
/// the configured strategy. Returns no decision when nothing is breached.
pub fn orchestrate_step(
    input: &StepInput<'_>,
    config: &OrchestratorConfig,
) -> Result<StepOutcome, OrchestratorError> {
    let StepInput {
        system,
        plan,
        fits,
        next_deadlines,
        pinned,
        seed,
    } = *input;
    let thresholds = &config.thresholds;
    let risks = evaluate_epoch(plan, system, fits, thresholds)?;
    let worst = risks.iter().filter(|r| r.breached).max_by(|a, b| {
        a.miss_prob
            .total_cmp(&b.miss_prob)
            .then_with(|| b.resource.cmp(&a.resource))
    });
    let Some(worst) = worst.cloned() else {
        return Ok(StepOutcome {
            risks,
            decision: None,
            plan: None,
        });
    };
    let trigger = Trigger {
        resource: worst.resource.clone(),
        miss_prob: worst.miss_prob,
        threshold: worst.threshold,
    };

    let (decision, next) = match config.strategy {
        Strategy::Naive => {
            let mut working = plan.clone();
            let mut decision = ReallocationDecision {
                moved: Vec::new(),
                trigger,
                evicted_best_effort: Vec::new(),
                escalated: false,
            };
            loop {
                let now = risk_of(&working, system, fits, thresholds, &worst.resource)?;
                if now.miss_prob <= now.threshold {
                    break;
                }
                let movable: Vec<&TaskSpec> = working
                    .accounted_tasks(system, &worst.resource)
                    .into_iter()
                    .filter(|t| {
                        !pinned.contains(&t.id) && !decision.moved.iter().any(|m| m.task == t.id)
                    })
                    .collect();
                if movable.is_empty() {
                    decision.escalated = true;
                    break;
                }
                let victim = select_victim(&worst.resource, &movable, next_deadlines)?;
                let step = naive_reallocate(&victim, &working, system, fits, thresholds)?;
                if step.moved.is_empty() {
                    decision.escalated = true;
                    break;
                }
                apply(&mut working, system, fits, &step)?;
                decision.moved.extend(step.moved);
                decision
                    .evicted_best_effort
                    .extend(step.evicted_best_effort);
            }
            (decision, working)
        }
        Strategy::MonteCarlo => {
            let candidate = mc_reallocate(
                system,
                plan,
                fits,
                thresholds,
                config.mc_samples,
                seed,
                pinned,
            )?;
            let feasible = plan_objective(&candidate, system, fits, thresholds)?.infeasible == 0;
            let moved: Vec<Move> = if feasible {
                plan.assignments()
                    .iter()
                    .filter_map(|(task, from)| {
                        let to = candidate.assignment(task)?;
                        (to != from).then(|| Move {
                            task: task.clone(),
                            from: from.clone(),
                            to: to.clone(),
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let escalated = moved.is_empty();
            let next = if escalated { plan.clone() } else { candidate };
            (
                ReallocationDecision {
                    moved,
                    trigger,
                    evicted_best_effort: Vec::new(),
                    escalated,
                },
                next,
            )
        }
    };
    if decision.escalated {
        log::warn!(
            "breach on `{}` (miss probability {:.3e} > {:.3e}) not fully resolved",
            decision.trigger.resource,
            decision.trigger.miss_prob,
            decision.trigger.threshold
        );
    }
    let plan = (!decision.moved.is_empty()).then_some(next);
    Ok(StepOutcome {
        risks,
        decision: Some(decision),
        plan,
    })
}

/// One line of the decision log.
#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub time_us: Micros,
    pub per_resource: BTreeMap<ResourceId, f64>,
    pub decision: Option<ReallocationDecision>,
    /// Runtime estimates the epoch was evaluated with.
    #[serde(skip)]
    pub fits: FitMap,
    #[serde(skip)]
    pub plan_after: Option<AllocationPlan>,
}

/// Stateful [`EpochHook`] driving [`orchestrate_step`] from measured
/// runtimes.
pub struct Orchestrator {
    config: OrchestratorConfig,
    seed: u64,
    windows: BTreeMap<TaskId, VecDeque<Micros>>,
    consumed: BTreeMap<TaskId, usize>,
    last_moved: BTreeMap<TaskId, u64>,
    log: Vec<EpochRecord>,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            windows: BTreeMap::new(),
            consumed: BTreeMap::new(),
            last_moved: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn log(&self) -> &[EpochRecord] {
        &self.log
    }

    /// Writes the decision log as line-delimited JSON.
    pub fn write_log<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn refresh_fits(&mut self, runtimes: &BTreeMap<TaskId, Vec<Micros>>) -> FitMap {
        let mut fits = FitMap::new();
        for (task, samples) in runtimes {
            let seen = self.consumed.entry(task.clone()).or_insert(0);
            let window = self.windows.entry(task.clone()).or_default();
            for &s in &samples[*seen..] {
                if window.len() == self.config.fit_window {
                    window.pop_front();
                }
                window.push_back(s);
            }
            *seen = samples.len();
            if let Ok((params, _)) =
                fit_to_normal(&StreamingFit::from_samples(window.iter().copied()))
            {
                fits.insert(task.clone(), params);
            }
        }
        fits
    }
}

impl EpochHook for Orchestrator {
    fn monitor_period(&self) -> Micros {
        self.config.monitor_period
    }

    fn on_epoch(&mut self, snap: &Snapshot<'_>) -> Option<AllocationPlan> {
        let fits = self.refresh_fits(snap.runtimes);
        // A task moved in epoch k stays put through epoch k + 1.
        let pinned: BTreeSet<TaskId> = self
            .last_moved
            .iter()
            .filter(|(_, &k)| k + 2 > snap.epoch)
            .map(|(t, _)| t.clone())
            .collect();
        let input = StepInput {
            system: snap.system,
            plan: snap.plan,
            fits: &fits,
            next_deadlines: &snap.next_deadlines,
            pinned: &pinned,
            seed: self.seed ^ snap.epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15),
        };
        let outcome = if self.config.enabled {
            orchestrate_step(&input, &self.config)
        } else {
            evaluate_epoch(snap.plan, snap.system, &fits, &self.config.thresholds)
                .map(|risks| StepOutcome {
                    risks,
                    decision: None,
                    plan: None,
                })
                .map_err(OrchestratorError::from)
        };
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                log::error!("epoch {} at {} µs: {e}", snap.epoch, snap.now);
                return None;
            }
        };
        let per_resource = outcome
            .risks
            .iter()
            .map(|r| (r.resource.clone(), r.miss_prob))
            .collect();
        let (decision, plan) = (outcome.decision, outcome.plan);
        if let Some(d) = &decision {
            for m in &d.moved {
                self.last_moved.insert(m.task.clone(), snap.epoch);
            }
        }
        self.log.push(EpochRecord {
            time_us: snap.now,
            per_resource,
            decision,
            fits,
            plan_after: plan.clone(),
        });
        plan
    }
}
