//! Scenario files: tasks, resources, orchestrator settings, simulation
//! settings and an optional initial placement, as one JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::{admit, Thresholds};
use crate::orchestrator::OrchestratorConfig;
use crate::sim::NoiseModel;
use crate::task::{
    AllocationPlan, FitMap, Micros, ModelError, ResourceId, ResourceState, System, TaskId, TaskSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    pub duration_us: Micros,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub tasks: Vec<TaskSpec>,
    pub resources: Vec<ResourceState>,
    #[serde(default)]
    pub orchestrator: OrchestratorConfig,
    pub sim: SimSettings,
    /// Task → resource. When absent the resources' `tasks` lists are used,
    /// and when those are empty too, first-fit placement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_plan: Option<BTreeMap<TaskId, ResourceId>>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid scenario at `{path}` (line {line}, column {column}): {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Model(#[from] ModelError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("task `{0}` fits on no resource")]
    Infeasible(TaskId),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            ScenarioError::Parse {
                path,
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Validates the scenario and builds its catalog.
    pub fn system(&self) -> Result<System, ScenarioError> {
        if self.resources.is_empty() {
            return Err(ScenarioError::Invalid(
                "at least one resource is required".into(),
            ));
        }
        if let Some(r) = self
            .resources
            .iter()
            .find(|r| !(r.u_max > 0.0 && r.u_max <= 1.0))
        {
            return Err(ScenarioError::Invalid(format!(
                "resource `{}`: u_max must be in (0, 1]",
                r.id
            )));
        }
        if let Some(v) = self.orchestrator.violations().into_iter().next() {
            return Err(ScenarioError::Invalid(format!("orchestrator.{v}")));
        }
        if self.sim.duration_us == 0 {
            return Err(ScenarioError::Invalid(
                "sim.duration_us: must be > 0".into(),
            ));
        }
        Ok(System::new(self.tasks.clone(), self.resources.clone())?)
    }

    /// The placement the run starts from.
    pub fn initial_plan(&self, system: &System) -> Result<AllocationPlan, ScenarioError> {
        let explicit = match &self.initial_plan {
            Some(map) => Some(map.clone()),
            None if self.resources.iter().any(|r| !r.tasks.is_empty()) => Some(
                self.resources
                    .iter()
                    .flat_map(|r| r.tasks.iter().map(move |t| (t.clone(), r.id.clone())))
                    .collect(),
            ),
            None => None,
        };
        match explicit {
            Some(map) => Ok(AllocationPlan::new(
                system,
                map,
                Default::default(),
                &FitMap::new(),
            )?),
            None => first_fit(system, &self.orchestrator.thresholds, &FitMap::new()),
        }
    }
}

/// Places tasks by declining utilization, each on the first resource that
/// admits it.
pub fn first_fit(
    system: &System,
    thresholds: &Thresholds,
    fits: &FitMap,
) -> Result<AllocationPlan, ScenarioError> {
    let mut order: Vec<&TaskSpec> = system.tasks().iter().collect();
    // u_a > u_b  ⇔  budget_a · period_b > budget_b · period_a
    order.sort_by(|a, b| {
        (b.budget as u128 * a.period as u128)
            .cmp(&(a.budget as u128 * b.period as u128))
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut placed: Vec<Vec<&TaskSpec>> = vec![Vec::new(); system.resources().len()];
    let mut assignments = BTreeMap::new();
    for t in order {
        let mut home = None;
        for (i, r) in system.resources().iter().enumerate() {
            let threshold = thresholds.strictest(placed[i].iter().copied().chain([t]));
            let verdict = admit(r, &placed[i], t, threshold, fits)
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            if verdict.admitted {
                home = Some(i);
                break;
            }
        }
        let i = home.ok_or_else(|| ScenarioError::Infeasible(t.id.clone()))?;
        placed[i].push(t);
        assignments.insert(t.id.clone(), system.resources()[i].id.clone());
    }
    Ok(AllocationPlan::new(
        system,
        assignments,
        Default::default(),
        fits,
    )?)
}
