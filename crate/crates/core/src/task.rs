//! Domain types shared by the analysis, simulation and orchestration layers.
//!
//! All durations are integer microseconds. Fractions and probabilities are
//! `f64`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::prob::NormalParams;

/// Duration or timestamp in microseconds.
pub type Micros = u64;

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(String);

        impl $name {
            pub fn new(id: impl Into<String>) -> Self {
                Self(id.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }
    };
}

id_newtype!(TaskId);
id_newtype!(ResourceId);

/// Importance class. Ordered `BestEffort < Soft < Hard`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criticality {
    BestEffort,
    Soft,
    Hard,
}

impl fmt::Display for Criticality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criticality::BestEffort => "best_effort",
            Criticality::Soft => "soft",
            Criticality::Hard => "hard",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[serde(alias = "EDF")]
    Edf,
    #[serde(alias = "RM")]
    Rm,
}

/// Secondary mode of an execution-time mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMode {
    pub weight: f64,
    #[serde(rename = "offset_us")]
    pub offset: i64,
}

/// Parametric execution-time distribution: a normal clamped to
/// `[cutoff_lo, wcet]`, optionally mixed with shifted copies of itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecModel {
    #[serde(rename = "mu_us")]
    pub mu: Micros,
    #[serde(rename = "sigma_us")]
    pub sigma: Micros,
    #[serde(rename = "cutoff_lo_us")]
    pub cutoff_lo: Micros,
    #[serde(rename = "wcet_us")]
    pub wcet: Micros,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mixture: Vec<MixtureMode>,
}

impl ExecModel {
    /// Constant runtime `c`.
    pub fn deterministic(c: Micros) -> Self {
        Self {
            mu: c,
            sigma: 0,
            cutoff_lo: c,
            wcet: c,
            mixture: Vec::new(),
        }
    }

    pub fn normal(mu: Micros, sigma: Micros, cutoff_lo: Micros, wcet: Micros) -> Self {
        Self {
            mu,
            sigma,
            cutoff_lo,
            wcet,
            mixture: Vec::new(),
        }
    }

    /// Weight left for the primary mode.
    pub fn primary_weight(&self) -> f64 {
        1.0 - self.mixture.iter().map(|m| m.weight).sum::<f64>()
    }

    /// Moment-matched normal of the unclamped mixture.
    pub fn moments(&self) -> NormalParams {
        let mu = self.mu as f64;
        let sigma = self.sigma as f64;
        let modes = std::iter::once((self.primary_weight(), 0.0))
            .chain(self.mixture.iter().map(|m| (m.weight, m.offset as f64)));
        let mean: f64 = modes.clone().map(|(w, off)| w * (mu + off)).sum();
        let spread: f64 = modes.map(|(w, off)| w * (mu + off - mean).powi(2)).sum();
        NormalParams::new(mean, (sigma * sigma + spread).sqrt())
    }

    fn violations(&self, out: &mut Vec<Violation>) {
        if self.cutoff_lo > self.mu {
            out.push(Violation::new(
                "exec.cutoff_lo_us",
                "cutoff_lo must be ≤ mu",
            ));
        }
        if self.mu > self.wcet {
            out.push(Violation::new("exec.mu_us", "mu must be ≤ wcet"));
        }
        let mut total = 0.0;
        for (i, m) in self.mixture.iter().enumerate() {
            if !(0.0..=1.0).contains(&m.weight) {
                out.push(Violation::new(
                    format!("exec.mixture[{i}].weight"),
                    "mixture weight must be in [0, 1]",
                ));
            }
            total += m.weight;
        }
        if total > 1.0 + 1e-12 {
            out.push(Violation::new(
                "exec.mixture",
                "mixture weights must sum to ≤ 1",
            ));
        }
    }
}

/// A periodic real-time task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawTaskSpec")]
pub struct TaskSpec {
    pub id: TaskId,
    #[serde(rename = "period_us")]
    pub period: Micros,
    #[serde(rename = "deadline_us")]
    pub deadline: Micros,
    #[serde(rename = "budget_us")]
    pub budget: Micros,
    /// Ground-truth runtime distribution. Tasks known only through
    /// monitoring may leave it unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exec: Option<ExecModel>,
    pub criticality: Criticality,
}

#[derive(Deserialize)]
struct RawTaskSpec {
    id: TaskId,
    period_us: Micros,
    deadline_us: Option<Micros>,
    budget_us: Micros,
    #[serde(default)]
    exec: Option<ExecModel>,
    #[serde(default = "default_criticality")]
    criticality: Criticality,
}

fn default_criticality() -> Criticality {
    Criticality::Hard
}

impl From<RawTaskSpec> for TaskSpec {
    fn from(raw: RawTaskSpec) -> Self {
        TaskSpec {
            id: raw.id,
            period: raw.period_us,
            deadline: raw.deadline_us.unwrap_or(raw.period_us),
            budget: raw.budget_us,
            exec: raw.exec,
            criticality: raw.criticality,
        }
    }
}

impl TaskSpec {
    /// Implicit-deadline task (`deadline == period`).
    pub fn new(
        id: impl Into<String>,
        period: Micros,
        budget: Micros,
        exec: ExecModel,
        criticality: Criticality,
    ) -> Self {
        Self {
            id: TaskId::new(id),
            period,
            deadline: period,
            budget,
            exec: Some(exec),
            criticality,
        }
    }

    pub fn with_deadline(mut self, deadline: Micros) -> Self {
        self.deadline = deadline;
        self
    }
}

/// One broken invariant of a [`TaskSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.rule)
    }
}

/// Checks `0 < budget ≤ deadline ≤ period` and the execution-model bounds.
/// Returns an empty list for a valid task.
pub fn validate_task(spec: &TaskSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.period == 0 {
        out.push(Violation::new("period_us", "period must be > 0"));
    }
    if spec.budget == 0 {
        out.push(Violation::new("budget_us", "budget must be > 0"));
    }
    if spec.budget > spec.deadline {
        out.push(Violation::new("budget_us", "budget must be ≤ deadline"));
    }
    if spec.deadline > spec.period {
        out.push(Violation::new("deadline_us", "deadline must be ≤ period"));
    }
    if let Some(exec) = &spec.exec {
        exec.violations(&mut out);
    }
    out
}

/// `budget / period`.
pub fn utilization(spec: &TaskSpec) -> f64 {
    spec.budget as f64 / spec.period as f64
}

/// One schedulable CPU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceState {
    pub id: ResourceId,
    pub policy: Policy,
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    pub criticality: Criticality,
    /// Tasks hosted here. Informational; an [`AllocationPlan`] is the
    /// authoritative mapping.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tasks: BTreeSet<TaskId>,
}

fn default_u_max() -> f64 {
    crate::analysis::edf_bound()
}

impl ResourceState {
    pub fn new(id: impl Into<String>, policy: Policy, criticality: Criticality) -> Self {
        Self {
            id: ResourceId::new(id),
            policy,
            u_max: default_u_max(),
            criticality,
            tasks: BTreeSet::new(),
        }
    }
}

/// Task and resource catalog with id lookup.
#[derive(Clone, Debug)]
pub struct System {
    tasks: Vec<TaskSpec>,
    resources: Vec<ResourceState>,
    task_index: BTreeMap<TaskId, usize>,
    resource_index: BTreeMap<ResourceId, usize>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("duplicate task id `{0}`")]
    DuplicateTask(TaskId),
    #[error("duplicate resource id `{0}`")]
    DuplicateResource(ResourceId),
    #[error("unknown task `{0}`")]
    UnknownTask(TaskId),
    #[error("unknown resource `{0}`")]
    UnknownResource(ResourceId),
    #[error("task `{0}` is not assigned to any resource")]
    Unassigned(TaskId),
    #[error("task `{task}`: {violation} ({field})", field = violation.field)]
    InvalidTask { task: TaskId, violation: Violation },
}

impl System {
    /// Tasks are kept sorted by id, resources in the given order.
    pub fn new(
        mut tasks: Vec<TaskSpec>,
        resources: Vec<ResourceState>,
    ) -> Result<Self, ModelError> {
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        let mut task_index = BTreeMap::new();
        for (i, t) in tasks.iter().enumerate() {
            if let Some(v) = validate_task(t).into_iter().next() {
                return Err(ModelError::InvalidTask {
                    task: t.id.clone(),
                    violation: v,
                });
            }
            if task_index.insert(t.id.clone(), i).is_some() {
                return Err(ModelError::DuplicateTask(t.id.clone()));
            }
        }
        let mut resource_index = BTreeMap::new();
        for (i, r) in resources.iter().enumerate() {
            if resource_index.insert(r.id.clone(), i).is_some() {
                return Err(ModelError::DuplicateResource(r.id.clone()));
            }
        }
        Ok(Self {
            tasks,
            resources,
            task_index,
            resource_index,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn resources(&self) -> &[ResourceState] {
        &self.resources
    }

    pub fn task(&self, id: &TaskId) -> Option<&TaskSpec> {
        self.task_index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn resource(&self, id: &ResourceId) -> Option<&ResourceState> {
        self.resource_index.get(id).map(|&i| &self.resources[i])
    }

    pub fn task_position(&self, id: &TaskId) -> Option<usize> {
        self.task_index.get(id).copied()
    }

    pub fn resource_position(&self, id: &ResourceId) -> Option<usize> {
        self.resource_index.get(id).copied()
    }
}

/// Runtime estimates keyed by task, in microseconds.
pub type FitMap = BTreeMap<TaskId, NormalParams>;

/// Per-resource accounting attached to a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ResourceLoad {
    pub buffer: f64,
    pub miss_prob: f64,
}

/// A task → resource mapping together with each resource's buffer and
/// miss probability.
///
/// The per-resource figures are recomputed by every constructor and
/// mutator, so they always describe the current assignments.
/// `background` tasks have had their budget released: they stay on their
/// resource but run only when nothing else is ready and are left out of the
/// accounting.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllocationPlan {
    assignments: BTreeMap<TaskId, ResourceId>,
    #[serde(skip_serializing_if = "BTreeSet::is_empty")]
    background: BTreeSet<TaskId>,
    per_resource: BTreeMap<ResourceId, ResourceLoad>,
}

impl AllocationPlan {
    pub fn new(
        system: &System,
        assignments: BTreeMap<TaskId, ResourceId>,
        background: BTreeSet<TaskId>,
        fits: &FitMap,
    ) -> Result<Self, ModelError> {
        for (task, res) in &assignments {
            if system.task(task).is_none() {
                return Err(ModelError::UnknownTask(task.clone()));
            }
            if system.resource(res).is_none() {
                return Err(ModelError::UnknownResource(res.clone()));
            }
        }
        for t in system.tasks() {
            if !assignments.contains_key(&t.id) {
                return Err(ModelError::Unassigned(t.id.clone()));
            }
        }
        if let Some(t) = background.iter().find(|t| !assignments.contains_key(*t)) {
            return Err(ModelError::UnknownTask(t.clone()));
        }
        let mut plan = Self {
            assignments,
            background,
            per_resource: BTreeMap::new(),
        };
        plan.recompute(system, fits);
        Ok(plan)
    }

    /// Moves `task` to `to` and recomputes the accounting. A moved task
    /// leaves the background class.
    pub fn reassign(
        &mut self,
        system: &System,
        fits: &FitMap,
        task: &TaskId,
        to: &ResourceId,
    ) -> Result<(), ModelError> {
        if system.resource(to).is_none() {
            return Err(ModelError::UnknownResource(to.clone()));
        }
        let slot = self
            .assignments
            .get_mut(task)
            .ok_or_else(|| ModelError::UnknownTask(task.clone()))?;
        if slot != to {
            *slot = to.clone();
            self.background.remove(task);
        }
        self.recompute(system, fits);
        Ok(())
    }

    /// Releases the budget of `tasks`, demoting them to background priority.
    pub fn demote(
        &mut self,
        system: &System,
        fits: &FitMap,
        tasks: &[TaskId],
    ) -> Result<(), ModelError> {
        for t in tasks {
            if !self.assignments.contains_key(t) {
                return Err(ModelError::UnknownTask(t.clone()));
            }
            self.background.insert(t.clone());
        }
        self.recompute(system, fits);
        Ok(())
    }

    fn recompute(&mut self, system: &System, fits: &FitMap) {
        self.per_resource = system
            .resources()
            .iter()
            .map(|r| {
                let hosted = self.accounted_tasks(system, &r.id);
                let buffer = crate::prob::buffer(hosted.iter().copied());
                let miss_prob = crate::analysis::resource_miss_probability(r, &hosted, fits)
                    .unwrap_or(f64::NAN);
                (r.id.clone(), ResourceLoad { buffer, miss_prob })
            })
            .collect();
    }

    pub fn assignments(&self) -> &BTreeMap<TaskId, ResourceId> {
        &self.assignments
    }

    pub fn assignment(&self, task: &TaskId) -> Option<&ResourceId> {
        self.assignments.get(task)
    }

    pub fn background(&self) -> &BTreeSet<TaskId> {
        &self.background
    }

    pub fn is_background(&self, task: &TaskId) -> bool {
        self.background.contains(task)
    }

    pub fn per_resource(&self) -> &BTreeMap<ResourceId, ResourceLoad> {
        &self.per_resource
    }

    /// All tasks on `resource`, in id order.
    pub fn hosted<'a>(&self, system: &'a System, resource: &ResourceId) -> Vec<&'a TaskSpec> {
        system
            .tasks()
            .iter()
            .filter(|t| self.assignments.get(&t.id) == Some(resource))
            .collect()
    }

    /// Tasks on `resource` that hold a budget (background tasks excluded).
    pub fn accounted_tasks<'a>(
        &self,
        system: &'a System,
        resource: &ResourceId,
    ) -> Vec<&'a TaskSpec> {
        self.hosted(system, resource)
            .into_iter()
            .filter(|t| !self.background.contains(&t.id))
            .collect()
    }

    /// Resource states with their `tasks` sets filled from this plan.
    pub fn resource_states(&self, system: &System) -> Vec<ResourceState> {
        system
            .resources()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.tasks = self
                    .hosted(system, &r.id)
                    .into_iter()
                    .map(|t| t.id.clone())
                    .collect();
                r
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(period: Micros, budget: Micros) -> TaskSpec {
        TaskSpec::new(
            "t",
            period,
            budget,
            ExecModel::deterministic(budget.max(1)),
            Criticality::Hard,
        )
    }

    fn rules(spec: &TaskSpec) -> Vec<String> {
        validate_task(spec).iter().map(|v| v.to_string()).collect()
    }

    #[test]
    fn valid_task_has_no_violations() {
        assert!(rules(&task(100_000, 10_000)).is_empty());
    }

    #[test]
    fn zero_budget_is_reported() {
        let mut t = task(100_000, 10_000);
        t.budget = 0;
        assert_eq!(rules(&t), vec!["budget must be > 0"]);
    }

    #[test]
    fn deadline_beyond_period_is_reported() {
        let t = task(100_000, 10_000).with_deadline(120_000);
        assert_eq!(rules(&t), vec!["deadline must be ≤ period"]);
        assert_eq!(validate_task(&t)[0].field, "deadline_us");
    }

    #[test]
    fn exec_model_bounds_are_checked() {
        let mut t = task(100_000, 10_000);
        t.exec = Some(ExecModel {
            mu: 100,
            sigma: 1,
            cutoff_lo: 200,
            wcet: 50,
            mixture: vec![
                MixtureMode {
                    weight: 0.7,
                    offset: 1,
                },
                MixtureMode {
                    weight: 0.6,
                    offset: 2,
                },
            ],
        });
        let r = rules(&t);
        assert!(r.contains(&"cutoff_lo must be ≤ mu".to_string()));
        assert!(r.contains(&"mu must be ≤ wcet".to_string()));
        assert!(r.contains(&"mixture weights must sum to ≤ 1".to_string()));
    }

    #[test]
    fn utilization_examples() {
        assert_eq!(utilization(&task(100_000, 10_000)), 0.1);
        assert_eq!(utilization(&task(100_000, 100_000)), 1.0);
        assert_eq!(utilization(&task(10_000, 900)), 0.09);
    }

    #[test]
    fn deadline_defaults_to_period() {
        let t: TaskSpec = serde_json::from_str(
            r#"{"id":"a","period_us":1000,"budget_us":100,"criticality":"soft"}"#,
        )
        .unwrap();
        assert_eq!(t.deadline, 1000);
        assert_eq!(t.exec, None);
    }

    #[test]
    fn mixture_moments() {
        let m = ExecModel {
            mu: 1000,
            sigma: 0,
            cutoff_lo: 0,
            wcet: 5000,
            mixture: vec![MixtureMode {
                weight: 0.5,
                offset: 200,
            }],
        };
        let p = m.moments();
        assert!((p.mu - 1100.0).abs() < 1e-9);
        assert!((p.sigma - 100.0).abs() < 1e-9);
    }

    #[test]
    fn plan_requires_every_task() {
        let sys = System::new(
            vec![task(1000, 100)],
            vec![ResourceState::new("cpu0", Policy::Edf, Criticality::Hard)],
        )
        .unwrap();
        let err = AllocationPlan::new(&sys, BTreeMap::new(), BTreeSet::new(), &FitMap::new())
            .unwrap_err();
        assert_eq!(err, ModelError::Unassigned(TaskId::new("t")));
    }

    #[test]
    fn plan_accounting_follows_reassignment() {
        let mut a = task(1000, 100);
        a.id = TaskId::new("a");
        let sys = System::new(
            vec![a],
            vec![
                ResourceState::new("cpu0", Policy::Edf, Criticality::Hard),
                ResourceState::new("cpu1", Policy::Edf, Criticality::Hard),
            ],
        )
        .unwrap();
        let fits = FitMap::new();
        let mut plan = AllocationPlan::new(
            &sys,
            [(TaskId::new("a"), ResourceId::new("cpu0"))].into(),
            BTreeSet::new(),
            &fits,
        )
        .unwrap();
        assert_eq!(plan.per_resource()[&ResourceId::new("cpu0")].buffer, 0.9);
        assert_eq!(plan.per_resource()[&ResourceId::new("cpu1")].buffer, 1.0);
        plan.reassign(&sys, &fits, &TaskId::new("a"), &ResourceId::new("cpu1"))
            .unwrap();
        assert_eq!(plan.per_resource()[&ResourceId::new("cpu0")].buffer, 1.0);
        assert_eq!(plan.per_resource()[&ResourceId::new("cpu1")].buffer, 0.9);
    }
}
