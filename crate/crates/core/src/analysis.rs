//! Per-resource admission: utilization bounds for RM and EDF combined with
//! the probabilistic miss test.

use serde::{Deserialize, Serialize};

use crate::prob::{self, NormalParams};
use crate::task::{Criticality, FitMap, Policy, ResourceState, TaskId, TaskSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AnalysisError {
    #[error("rm_bound needs at least one task")]
    NoTasks,
    #[error("task `{0}` has neither a fitted runtime nor an execution model")]
    MissingFit(TaskId),
    #[error("task `{0}` is already hosted on the resource")]
    AlreadyHosted(TaskId),
}

/// Liu–Layland bound `n (2^{1/n} − 1)`.
pub fn rm_bound(n: u64) -> Result<f64, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::NoTasks);
    }
    let n = n as f64;
    // expm1 avoids cancellation for large n.
    Ok(n * (std::f64::consts::LN_2 / n).exp_m1())
}

/// EDF is feasible on one CPU up to full utilization.
pub fn edf_bound() -> f64 {
    1.0
}

/// Deterministic utilization bound for `n` tasks on `resource`.
pub fn utilization_bound(resource: &ResourceState, n: usize) -> f64 {
    match resource.policy {
        Policy::Edf => resource.u_max,
        Policy::Rm => rm_bound(n.max(1) as u64).map_or(1.0, |b| b.min(resource.u_max)),
    }
}

/// Miss-probability thresholds per criticality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub hard: f64,
    pub soft: f64,
    pub best_effort: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            hard: 1e-4,
            soft: 1e-2,
            best_effort: 1.0,
        }
    }
}

impl Thresholds {
    pub fn for_criticality(&self, c: Criticality) -> f64 {
        match c {
            Criticality::Hard => self.hard,
            Criticality::Soft => self.soft,
            Criticality::BestEffort => self.best_effort,
        }
    }

    /// Strictest threshold among `tasks`; 1 when there are none.
    pub fn strictest<'a>(&self, tasks: impl IntoIterator<Item = &'a TaskSpec>) -> f64 {
        tasks
            .into_iter()
            .map(|t| self.for_criticality(t.criticality))
            .fold(1.0, f64::min)
    }
}

/// Runtime estimate for `task`: its fit if present, else the moments of its
/// execution model.
pub fn runtime_params(task: &TaskSpec, fits: &FitMap) -> Result<NormalParams, AnalysisError> {
    fits.get(&task.id)
        .copied()
        .or_else(|| task.exec.as_ref().map(|e| e.moments()))
        .ok_or_else(|| AnalysisError::MissingFit(task.id.clone()))
}

/// Miss probability of `tasks` sharing `resource`; 0 for an empty set.
pub fn resource_miss_probability(
    resource: &ResourceState,
    tasks: &[&TaskSpec],
    fits: &FitMap,
) -> Result<f64, AnalysisError> {
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let models = tasks
        .iter()
        .map(|t| Ok((runtime_params(t, fits)?, t.period)))
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    let joint = prob::joint_utilization(&models).expect("non-empty, validated periods");
    Ok(prob::miss_probability(joint, resource.u_max))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissionVerdict {
    pub admitted: bool,
    pub buffer: f64,
    pub miss_prob: f64,
    pub bound_used: f64,
    pub reason: String,
}

/// Combined deterministic and probabilistic check of a task set on one
/// resource.
pub fn assess(
    resource: &ResourceState,
    tasks: &[&TaskSpec],
    threshold: f64,
    fits: &FitMap,
) -> Result<AdmissionVerdict, AnalysisError> {
    let buffer = prob::buffer(tasks.iter().copied());
    let load = prob::total_utilization(tasks.iter().copied());
    let bound_used = utilization_bound(resource, tasks.len());
    let miss_prob = resource_miss_probability(resource, tasks, fits)?;
    let (admitted, reason) = if load > bound_used {
        (
            false,
            format!("utilization {load:.6} exceeds bound {bound_used:.6}"),
        )
    } else if miss_prob > threshold {
        (
            false,
            format!("miss probability {miss_prob:.6} exceeds threshold {threshold}"),
        )
    } else {
        (true, "admitted".to_owned())
    };
    Ok(AdmissionVerdict {
        admitted,
        buffer,
        miss_prob,
        bound_used,
        reason,
    })
}

/// Would `candidate` fit on `resource` next to `tasks`?
///
/// Both the budget bound (Liu–Layland for RM, `u_max` for EDF) and the miss
/// probability of the fitted runtimes against `threshold` must pass.
pub fn admit(
    resource: &ResourceState,
    tasks: &[&TaskSpec],
    candidate: &TaskSpec,
    threshold: f64,
    fitted: &FitMap,
) -> Result<AdmissionVerdict, AnalysisError> {
    if tasks.iter().any(|t| t.id == candidate.id) {
        return Err(AnalysisError::AlreadyHosted(candidate.id.clone()));
    }
    let mut all: Vec<&TaskSpec> = tasks.to_vec();
    all.push(candidate);
    assess(resource, &all, threshold, fitted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::ExecModel;
    use proptest::prelude::*;

    fn edf() -> ResourceState {
        ResourceState::new("cpu0", Policy::Edf, Criticality::Hard)
    }

    fn det(id: &str, budget: u64, period: u64) -> TaskSpec {
        TaskSpec::new(
            id,
            period,
            budget,
            ExecModel::deterministic(budget),
            Criticality::Hard,
        )
    }

    fn camera(id: &str) -> TaskSpec {
        TaskSpec::new(
            id,
            125_000,
            56_250,
            ExecModel::normal(56_250, 6_250, 30_000, 100_000),
            Criticality::Hard,
        )
    }

    #[test]
    fn rm_bound_values() {
        assert_eq!(rm_bound(1).unwrap(), 1.0);
        // 2(√2 − 1) = 0.828427124746190...
        assert!((rm_bound(2).unwrap() - 0.828_427_124_746_19).abs() < 1e-12);
        assert!((rm_bound(1_000_000).unwrap() - std::f64::consts::LN_2).abs() < 1e-3);
        assert_eq!(rm_bound(0), Err(AnalysisError::NoTasks));
    }

    #[test]
    fn rm_bound_strictly_decreasing_and_dominated_by_edf() {
        let mut prev = rm_bound(1).unwrap();
        for n in 2..200 {
            let b = rm_bound(n).unwrap();
            assert!(b < prev);
            assert!(b > std::f64::consts::LN_2);
            assert!(edf_bound() >= b);
            prev = b;
        }
        assert_eq!(edf().u_max, edf_bound());
    }

    #[test]
    fn single_low_load_task_is_admitted() {
        let v = admit(
            &edf(),
            &[],
            &det("a", 10_000, 100_000),
            0.01,
            &FitMap::new(),
        )
        .unwrap();
        assert!(v.admitted);
        assert_eq!(v.buffer, 0.9);
    }

    #[test]
    fn tenth_unit_admitted_at_exact_bound() {
        let hosted: Vec<_> = (0..9)
            .map(|i| det(&format!("t{i}"), 10_000, 100_000))
            .collect();
        let refs: Vec<&TaskSpec> = hosted.iter().collect();
        let v = admit(
            &edf(),
            &refs,
            &det("t9", 10_000, 100_000),
            0.5,
            &FitMap::new(),
        )
        .unwrap();
        assert!(v.admitted, "{}", v.reason);
        assert_eq!(v.bound_used, 1.0);
        assert_eq!(v.buffer, 0.0);
    }

    #[test]
    fn second_camera_rejected() {
        let a = camera("cam_a");
        let v = admit(&edf(), &[&a], &camera("cam_b"), 0.05, &FitMap::new()).unwrap();
        assert!(!v.admitted);
        assert!((v.miss_prob - 0.0786).abs() < 1e-4);
        assert!(v.reason.contains("miss probability"));
    }

    #[test]
    fn fits_override_exec_model() {
        let a = camera("cam_a");
        let mut fits = FitMap::new();
        fits.insert(a.id.clone(), NormalParams::new(10_000.0, 10.0));
        fits.insert(TaskId::new("cam_b"), NormalParams::new(10_000.0, 10.0));
        let v = admit(&edf(), &[&a], &camera("cam_b"), 0.05, &fits).unwrap();
        assert!(v.admitted);
    }

    #[test]
    fn missing_fit_without_model_is_an_error() {
        let mut t = det("ghost", 1_000, 10_000);
        t.exec = None;
        let err = admit(&edf(), &[], &t, 0.1, &FitMap::new()).unwrap_err();
        assert_eq!(err, AnalysisError::MissingFit(TaskId::new("ghost")));
    }

    #[test]
    fn duplicate_candidate_is_an_error() {
        let a = det("a", 1_000, 10_000);
        assert!(matches!(
            admit(&edf(), &[&a], &a, 0.1, &FitMap::new()),
            Err(AnalysisError::AlreadyHosted(_))
        ));
    }

    #[test]
    fn rm_uses_liu_layland() {
        let rm = ResourceState::new("rm", Policy::Rm, Criticality::Hard);
        let a = det("a", 45_000, 100_000);
        // 0.45 + 0.40 = 0.85 > 0.828
        let v = admit(&rm, &[&a], &det("b", 40_000, 100_000), 1.0, &FitMap::new()).unwrap();
        assert!(!v.admitted);
        assert!((v.bound_used - 0.828_427).abs() < 1e-6);
        let v = admit(&rm, &[&a], &det("b", 35_000, 100_000), 1.0, &FitMap::new()).unwrap();
        assert!(v.admitted);
    }

    fn arb_det_set() -> impl Strategy<Value = Vec<TaskSpec>> {
        prop::collection::vec((1_000u64..100_000, 1u64..400), 0..6).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (period, permille))| {
                    det(&format!("t{i}"), (period * permille / 1000).max(1), period)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn rejection_is_monotone_in_threshold(mu in 20_000u64..70_000, t in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let a = camera("a");
            let mut b = camera("b");
            b.exec = Some(ExecModel::normal(mu, 6_250, 0, 125_000));
            let hi = t.max(t2);
            let lo = t.min(t2);
            let at_hi = admit(&edf(), &[&a], &b, hi, &FitMap::new()).unwrap();
            let at_lo = admit(&edf(), &[&a], &b, lo, &FitMap::new()).unwrap();
            prop_assert!(at_hi.admitted || !at_lo.admitted);
        }

        #[test]
        fn removing_a_task_never_hurts(set in arb_det_set(), idx in 0usize..6) {
            let cand = det("cand", 5_000, 50_000);
            let refs: Vec<&TaskSpec> = set.iter().collect();
            let before = admit(&edf(), &refs, &cand, 1e-4, &FitMap::new()).unwrap();
            if before.admitted && !refs.is_empty() {
                let mut fewer = refs.clone();
                fewer.remove(idx % refs.len());
                prop_assert!(admit(&edf(), &fewer, &cand, 1e-4, &FitMap::new()).unwrap().admitted);
            }
        }

        #[test]
        fn deterministic_sets_admitted_iff_buffer_covers_bound(set in arb_det_set(), permille in 1u64..1000) {
            let cand = det("cand", (100_000 * permille / 1000).max(1), 100_000);
            let refs: Vec<&TaskSpec> = set.iter().collect();
            let v = admit(&edf(), &refs, &cand, 1e-4, &FitMap::new()).unwrap();
            prop_assert_eq!(v.admitted, v.buffer >= 1.0 - v.bound_used);
        }
    }
}
