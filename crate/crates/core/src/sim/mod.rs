//! Seeded discrete-event simulation of preemptive per-CPU EDF/RM scheduling.
//!
//! Every task releases a job at `k · period` (synchronous release at 0) as
//! long as the job's absolute deadline falls inside the horizon, so each
//! released job is resolved as complete or missed by the end of the run.
//! A job that misses its deadline keeps running until it completes.
//!
//! The measured runtime of a job is the wall time from its first dispatch to
//! its completion, minus the time it spent preempted by other jobs. It thus
//! includes interference that hit while the job held the CPU.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`): task `i` (in id order)
//! samples its runtimes from stream `i` of the run seed and resource `j`
//! draws interference arrivals from stream `2^32 + j`. Traces are
//! reproducible bit for bit across platforms.

mod sample;
mod trace;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use sample::{sample_runtime, Interference, NoiseModel};
pub use trace::{read_runtimes_csv, EventKind, SimTrace, TraceEvent};

use crate::task::{AllocationPlan, ExecModel, Micros, Policy, System, TaskId};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("plan does not match the task set: {0}")]
    Plan(#[from] crate::task::ModelError),
    #[error("duration too short: {duration} µs < longest period {period} µs")]
    DurationTooShort { duration: Micros, period: Micros },
    #[error("task `{0}` has no execution model to sample from")]
    MissingExecModel(TaskId),
    #[error("monitor period must be > 0")]
    ZeroMonitorPeriod,
}

/// One activation of a task.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Job {
    pub task: TaskId,
    pub release: Micros,
    pub abs_deadline: Micros,
    pub demand: Micros,
    pub executed: Micros,
}

/// State handed to an [`EpochHook`] at each monitoring epoch.
pub struct Snapshot<'a> {
    pub now: Micros,
    /// 1-based epoch counter.
    pub epoch: u64,
    pub system: &'a System,
    pub plan: &'a AllocationPlan,
    /// All runtimes measured so far.
    pub runtimes: &'a BTreeMap<TaskId, Vec<Micros>>,
    /// Earliest absolute deadline of each task's pending work, or of its
    /// next job when nothing is pending.
    pub next_deadlines: BTreeMap<TaskId, Micros>,
    pub active_jobs: Vec<Job>,
}

/// Callback invoked every `monitor_period`. Returning a plan reallocates;
/// moved tasks switch resource at their next release.
pub trait EpochHook {
    fn monitor_period(&self) -> Micros;
    fn on_epoch(&mut self, snapshot: &Snapshot<'_>) -> Option<AllocationPlan>;
}

struct JobState {
    task: usize,
    cpu: usize,
    release: Micros,
    abs_deadline: Micros,
    demand: Micros,
    executed: Micros,
    stolen: Micros,
    preempted_at: Option<Micros>,
    waited: Micros,
    first_dispatch: Option<Micros>,
    done: bool,
}

impl JobState {
    fn remaining(&self) -> Micros {
        self.demand - self.executed
    }
}

struct TaskState<'a> {
    model: &'a ExecModel,
    cpu: usize,
    pending_cpu: Option<usize>,
    next_release: Micros,
    background: bool,
    rng: ChaCha8Rng,
}

struct CpuState {
    policy: Policy,
    ready: Vec<usize>,
    current: Option<usize>,
    irq_left: Micros,
    next_irq: Option<Micros>,
    rng: ChaCha8Rng,
    busy: Micros,
}

fn assignment_indices(system: &System, plan: &AllocationPlan) -> Result<Vec<usize>, SimError> {
    use crate::task::ModelError;
    for task in plan.assignments().keys() {
        if system.task(task).is_none() {
            return Err(ModelError::UnknownTask(task.clone()).into());
        }
    }
    system
        .tasks()
        .iter()
        .map(|t| {
            let res = plan
                .assignment(&t.id)
                .ok_or_else(|| ModelError::Unassigned(t.id.clone()))?;
            system
                .resource_position(res)
                .ok_or_else(|| ModelError::UnknownResource(res.clone()).into())
        })
        .collect()
}

struct Engine<'a> {
    system: &'a System,
    noise: &'a NoiseModel,
    duration: Micros,
    now: Micros,
    tasks: Vec<TaskState<'a>>,
    cpus: Vec<CpuState>,
    jobs: Vec<JobState>,
    deadlines: BinaryHeap<Reverse<(Micros, usize)>>,
    plan: AllocationPlan,
    instant: Vec<(EventKind, usize, usize)>,
    trace: SimTrace,
}

impl<'a> Engine<'a> {
    /// Priority key; smaller runs first.
    fn key(&self, job: usize) -> (bool, Micros, usize, Micros) {
        let j = &self.jobs[job];
        let t = &self.tasks[j.task];
        let primary = match self.cpus[j.cpu].policy {
            Policy::Edf => j.abs_deadline,
            Policy::Rm => self.system.tasks()[j.task].period,
        };
        (t.background, primary, j.task, j.release)
    }

    fn emit(&mut self, kind: EventKind, task: usize, cpu: usize) {
        self.instant.push((kind, task, cpu));
    }

    fn flush_instant(&mut self) {
        self.instant.sort_by_key(|&(kind, task, _)| (kind, task));
        let system = self.system;
        let now = self.now;
        self.trace
            .events
            .extend(self.instant.drain(..).map(|(kind, task, cpu)| TraceEvent {
                time: now,
                kind,
                task: system.tasks()[task].id.clone(),
                resource: system.resources()[cpu].id.clone(),
            }));
    }

    fn release_due(&mut self) {
        for ti in 0..self.tasks.len() {
            let spec = &self.system.tasks()[ti];
            if self.tasks[ti].next_release != self.now || self.now + spec.deadline > self.duration {
                continue;
            }
            if let Some(to) = self.tasks[ti].pending_cpu.take() {
                self.tasks[ti].cpu = to;
                self.emit(EventKind::Migrate, ti, to);
            }
            let t = &mut self.tasks[ti];
            let demand = sample_runtime(t.model, self.noise, &mut t.rng);
            let cpu = t.cpu;
            t.next_release += spec.period;
            let idx = self.jobs.len();
            self.jobs.push(JobState {
                task: ti,
                cpu,
                release: self.now,
                abs_deadline: self.now + spec.deadline,
                demand,
                executed: 0,
                stolen: 0,
                preempted_at: None,
                waited: 0,
                first_dispatch: None,
                done: false,
            });
            self.deadlines
                .push(Reverse((self.now + spec.deadline, idx)));
            self.cpus[cpu].ready.push(idx);
            self.emit(EventKind::Release, ti, cpu);
        }
    }

    fn interference_due(&mut self) {
        let Some(irq) = self.noise.interference else {
            return;
        };
        for cpu in &mut self.cpus {
            if cpu.next_irq == Some(self.now) {
                cpu.irq_left += irq.magnitude;
                cpu.next_irq = Some(self.now + sample::interarrival(irq.rate, &mut cpu.rng));
            }
        }
    }

    fn complete_due(&mut self) {
        for ci in 0..self.cpus.len() {
            let Some(j) = self.cpus[ci].current else {
                continue;
            };
            if self.jobs[j].remaining() > 0 {
                continue;
            }
            let job = &mut self.jobs[j];
            job.done = true;
            let dispatched = job.first_dispatch.expect("completed job was dispatched");
            let runtime = self.now - dispatched - job.waited;
            debug_assert_eq!(runtime, job.demand + job.stolen);
            let task = job.task;
            self.cpus[ci].current = None;
            self.cpus[ci].ready.retain(|&r| r != j);
            let id = &self.system.tasks()[task].id;
            self.trace
                .per_task_runtimes
                .get_mut(id)
                .expect("initialised")
                .push(runtime);
            self.emit(EventKind::Complete, task, ci);
        }
    }

    fn check_deadlines(&mut self) {
        while let Some(&Reverse((deadline, j))) = self.deadlines.peek() {
            if deadline > self.now {
                break;
            }
            self.deadlines.pop();
            if !self.jobs[j].done {
                let (task, cpu) = (self.jobs[j].task, self.jobs[j].cpu);
                self.emit(EventKind::DeadlineMiss, task, cpu);
            }
        }
    }

    fn snapshot_deadlines(&self) -> BTreeMap<TaskId, Micros> {
        let mut out = BTreeMap::new();
        for cpu in &self.cpus {
            for &j in &cpu.ready {
                let job = &self.jobs[j];
                let id = self.system.tasks()[job.task].id.clone();
                let e = out.entry(id).or_insert(job.abs_deadline);
                *e = (*e).min(job.abs_deadline);
            }
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let spec = &self.system.tasks()[i];
            out.entry(spec.id.clone())
                .or_insert(t.next_release + spec.deadline);
        }
        out
    }

    fn run_epoch(&mut self, hook: &mut dyn EpochHook, epoch: u64) -> Result<(), SimError> {
        let active_jobs = self
            .cpus
            .iter()
            .flat_map(|c| c.ready.iter())
            .map(|&j| {
                let job = &self.jobs[j];
                Job {
                    task: self.system.tasks()[job.task].id.clone(),
                    release: job.release,
                    abs_deadline: job.abs_deadline,
                    demand: job.demand,
                    executed: job.executed,
                }
            })
            .collect();
        let snapshot = Snapshot {
            now: self.now,
            epoch,
            system: self.system,
            plan: &self.plan,
            runtimes: &self.trace.per_task_runtimes,
            next_deadlines: self.snapshot_deadlines(),
            active_jobs,
        };
        let Some(plan) = hook.on_epoch(&snapshot) else {
            return Ok(());
        };
        let targets = assignment_indices(self.system, &plan)?;
        for (ti, &to) in targets.iter().enumerate() {
            let t = &mut self.tasks[ti];
            t.pending_cpu = (to != t.cpu).then_some(to);
            t.background = plan.is_background(&self.system.tasks()[ti].id);
        }
        self.plan = plan;
        Ok(())
    }

    fn dispatch(&mut self) {
        for ci in 0..self.cpus.len() {
            let best = self.cpus[ci]
                .ready
                .iter()
                .copied()
                .min_by_key(|&j| self.key(j));
            let current = self.cpus[ci].current;
            let next = match (current, best) {
                (Some(cur), Some(b)) => {
                    let (kc, kb) = (self.key(cur), self.key(b));
                    // Only a strictly higher priority class/deadline preempts.
                    if (kb.0, kb.1) < (kc.0, kc.1) {
                        Some(b)
                    } else {
                        Some(cur)
                    }
                }
                (None, b) => b,
                (Some(_), None) => unreachable!("current job is always ready"),
            };
            if next == current {
                continue;
            }
            if let Some(cur) = current {
                self.jobs[cur].preempted_at = Some(self.now);
                let task = self.jobs[cur].task;
                self.emit(EventKind::Preempt, task, ci);
            }
            let n = next.expect("switch implies a new job");
            let job = &mut self.jobs[n];
            let kind = match job.first_dispatch {
                None => {
                    job.first_dispatch = Some(self.now);
                    EventKind::Start
                }
                Some(_) => {
                    let since = job.preempted_at.take().expect("resumed job was preempted");
                    job.waited += self.now - since;
                    EventKind::Resume
                }
            };
            let task = job.task;
            self.cpus[ci].current = Some(n);
            self.emit(kind, task, ci);
        }
    }

    fn next_instant(&self, next_epoch: Option<Micros>) -> Option<Micros> {
        let releases = self.tasks.iter().enumerate().filter_map(|(i, t)| {
            let deadline = self.system.tasks()[i].deadline;
            (t.next_release + deadline <= self.duration).then_some(t.next_release)
        });
        let cpus = self.cpus.iter().flat_map(|c| {
            let finish = if c.irq_left > 0 {
                Some(self.now + c.irq_left)
            } else {
                c.current.map(|j| self.now + self.jobs[j].remaining())
            };
            [finish, c.next_irq]
        });
        let deadline = self.deadlines.peek().map(|Reverse((d, _))| *d);
        releases
            .chain(cpus.flatten())
            .chain(deadline)
            .chain(next_epoch)
            .min()
    }

    fn advance(&mut self, to: Micros) {
        let dt = to - self.now;
        for cpu in &mut self.cpus {
            if cpu.irq_left > 0 {
                cpu.irq_left -= dt;
                if let Some(j) = cpu.current {
                    self.jobs[j].stolen += dt;
                }
            } else if let Some(j) = cpu.current {
                self.jobs[j].executed += dt;
                cpu.busy += dt;
            }
        }
        self.now = to;
    }
}

/// Simulates `plan` for `duration` µs.
///
/// Identical inputs and seed produce an identical trace.
pub fn run_sim(
    plan: &AllocationPlan,
    system: &System,
    noise: &NoiseModel,
    duration: Micros,
    seed: u64,
    mut hook: Option<&mut dyn EpochHook>,
) -> Result<SimTrace, SimError> {
    let cpus_of = assignment_indices(system, plan)?;
    let longest = system.tasks().iter().map(|t| t.period).max().unwrap_or(0);
    if duration < longest {
        return Err(SimError::DurationTooShort {
            duration,
            period: longest,
        });
    }
    let tasks = system
        .tasks()
        .iter()
        .zip(&cpus_of)
        .enumerate()
        .map(|(i, (spec, &cpu))| {
            let model = spec
                .exec
                .as_ref()
                .ok_or_else(|| SimError::MissingExecModel(spec.id.clone()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(TaskState {
                model,
                cpu,
                pending_cpu: None,
                next_release: 0,
                background: plan.is_background(&spec.id),
                rng,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let cpus = system
        .resources()
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((1u64 << 32) + j as u64);
            let next_irq = noise
                .interference
                .filter(|i| i.rate > 0.0 && i.magnitude > 0)
                .map(|i| sample::interarrival(i.rate, &mut rng));
            CpuState {
                policy: r.policy,
                ready: Vec::new(),
                current: None,
                irq_left: 0,
                next_irq,
                rng,
                busy: 0,
            }
        })
        .collect();
    let monitor_period = match &hook {
        Some(h) if h.monitor_period() == 0 => return Err(SimError::ZeroMonitorPeriod),
        Some(h) => Some(h.monitor_period()),
        None => None,
    };
    let mut engine = Engine {
        system,
        noise,
        duration,
        now: 0,
        tasks,
        cpus,
        jobs: Vec::new(),
        deadlines: BinaryHeap::new(),
        plan: plan.clone(),
        instant: Vec::new(),
        trace: SimTrace {
            per_task_runtimes: system
                .tasks()
                .iter()
                .map(|t| (t.id.clone(), Vec::new()))
                .collect(),
            duration,
            ..Default::default()
        },
    };
    let mut next_epoch = monitor_period.filter(|&p| p <= duration);
    let mut epoch = 0;
    loop {
        engine.release_due();
        engine.complete_due();
        engine.interference_due();
        engine.check_deadlines();
        if next_epoch == Some(engine.now) {
            epoch += 1;
            if let Some(h) = hook.as_deref_mut() {
                engine.run_epoch(h, epoch)?;
            }
            next_epoch = monitor_period
                .map(|p| engine.now + p)
                .filter(|&t| t <= duration);
        }
        engine.dispatch();
        engine.flush_instant();

        match engine.next_instant(next_epoch) {
            Some(t) if t <= duration => engine.advance(t),
            _ => break,
        }
    }
    engine.trace.busy = system
        .resources()
        .iter()
        .zip(&engine.cpus)
        .map(|(r, c)| (r.id.clone(), c.busy))
        .collect();
    Ok(engine.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::NormalParams;
    use crate::task::{Criticality, FitMap, ResourceState};
    use std::collections::BTreeSet;

    fn one_cpu(tasks: Vec<crate::task::TaskSpec>, policy: Policy) -> (System, AllocationPlan) {
        let sys = System::new(
            tasks,
            vec![ResourceState::new("cpu0", policy, Criticality::Hard)],
        )
        .unwrap();
        let assignments = sys
            .tasks()
            .iter()
            .map(|t| (t.id.clone(), "cpu0".into()))
            .collect();
        let plan = AllocationPlan::new(&sys, assignments, BTreeSet::new(), &FitMap::new()).unwrap();
        (sys, plan)
    }

    fn det(id: &str, budget: Micros, period: Micros) -> crate::task::TaskSpec {
        crate::task::TaskSpec::new(
            id,
            period,
            budget,
            ExecModel::deterministic(budget),
            Criticality::Hard,
        )
    }

    #[test]
    fn single_light_task_completes_every_period() {
        let (sys, plan) = one_cpu(vec![det("a", 10_000, 100_000)], Policy::Edf);
        let trace = run_sim(&plan, &sys, &NoiseModel::none(), 10_000_000, 1, None).unwrap();
        assert_eq!(trace.count(EventKind::Complete), 100);
        assert_eq!(trace.count(EventKind::DeadlineMiss), 0);
        assert_eq!(trace.busy[&"cpu0".into()], 1_000_000);
    }

    #[test]
    fn duration_shorter_than_period_is_rejected() {
        let (sys, plan) = one_cpu(vec![det("a", 10_000, 100_000)], Policy::Edf);
        let err = run_sim(&plan, &sys, &NoiseModel::none(), 50_000, 1, None).unwrap_err();
        assert!(err.to_string().starts_with("duration too short"));
    }

    #[test]
    fn unknown_plan_ids_rejected_before_running() {
        let (sys, _) = one_cpu(vec![det("a", 10_000, 100_000)], Policy::Edf);
        let (other_sys, other_plan) = one_cpu(vec![det("zzz", 10_000, 100_000)], Policy::Edf);
        drop(other_sys);
        assert!(matches!(
            run_sim(&other_plan, &sys, &NoiseModel::none(), 1_000_000, 1, None),
            Err(SimError::Plan(_))
        ));
    }

    #[test]
    fn edf_preempts_for_earlier_deadline() {
        let (sys, plan) = one_cpu(
            vec![det("long", 6_000, 20_000), det("short", 1_000, 4_000)],
            Policy::Edf,
        );
        let trace = run_sim(&plan, &sys, &NoiseModel::none(), 20_000, 1, None).unwrap();
        assert_eq!(trace.count(EventKind::DeadlineMiss), 0);
        assert!(trace.count(EventKind::Preempt) > 0);
        // Preempted jobs still measure their own demand only.
        assert_eq!(trace.per_task_runtimes[&"long".into()], vec![6_000]);
    }

    #[test]
    fn rm_runs_shorter_period_first() {
        let (sys, plan) = one_cpu(
            vec![det("a", 2_000, 10_000), det("b", 1_000, 5_000)],
            Policy::Rm,
        );
        let trace = run_sim(&plan, &sys, &NoiseModel::none(), 10_000, 1, None).unwrap();
        let first_start = trace
            .events
            .iter()
            .find(|e| e.kind == EventKind::Start)
            .unwrap();
        assert_eq!(first_start.task, "b".into());
    }

    #[test]
    fn overrun_is_a_miss_and_job_still_completes() {
        let (sys, plan) = one_cpu(
            vec![det("a", 6_000, 10_000), det("b", 6_000, 10_000)],
            Policy::Edf,
        );
        let trace = run_sim(&plan, &sys, &NoiseModel::none(), 10_000, 1, None).unwrap();
        // b misses at 10 000 and would complete at 12 000, past the horizon.
        assert_eq!(trace.count(EventKind::DeadlineMiss), 1);
        let trace = run_sim(&plan, &sys, &NoiseModel::none(), 20_000, 1, None).unwrap();
        assert!(trace.count(EventKind::DeadlineMiss) >= 2);
        assert!(trace.per_task_runtimes[&"b".into()].contains(&6_000));
    }

    #[test]
    fn same_seed_same_trace() {
        let mut t = det("a", 5_000, 20_000);
        t.exec = Some(ExecModel::normal(4_000, 500, 3_000, 6_000));
        let (sys, plan) = one_cpu(vec![t, det("b", 3_000, 7_000)], Policy::Edf);
        let noise = NoiseModel {
            base_overhead: 10,
            latency_jitter: NormalParams::new(0.0, 20.0),
            interference: Some(Interference {
                rate: 100.0,
                magnitude: 300,
            }),
        };
        let a = run_sim(&plan, &sys, &noise, 2_000_000, 9, None).unwrap();
        let b = run_sim(&plan, &sys, &noise, 2_000_000, 9, None).unwrap();
        assert_eq!(a, b);
        let c = run_sim(&plan, &sys, &noise, 2_000_000, 10, None).unwrap();
        assert_ne!(a.per_task_runtimes, c.per_task_runtimes);
    }

    #[test]
    fn interference_inflates_measured_runtime() {
        let (sys, plan) = one_cpu(vec![det("a", 900, 10_000)], Policy::Edf);
        let noise = NoiseModel {
            interference: Some(Interference {
                rate: 500.0,
                magnitude: 400,
            }),
            ..NoiseModel::none()
        };
        let trace = run_sim(&plan, &sys, &noise, 10_000_000, 3, None).unwrap();
        let rt = &trace.per_task_runtimes[&"a".into()];
        assert!(rt.iter().all(|&r| r >= 900));
        assert!(rt.iter().any(|&r| r == 1_300));
        // Interference is not accounted as task execution.
        assert_eq!(trace.busy[&"cpu0".into()], 900 * rt.len() as Micros);
    }

    struct MoveOnce {
        to: crate::task::ResourceId,
        done: bool,
    }

    impl EpochHook for MoveOnce {
        fn monitor_period(&self) -> Micros {
            250_000
        }

        fn on_epoch(&mut self, snap: &Snapshot<'_>) -> Option<AllocationPlan> {
            if self.done {
                return None;
            }
            self.done = true;
            let mut plan = snap.plan.clone();
            plan.reassign(snap.system, &FitMap::new(), &"a".into(), &self.to)
                .unwrap();
            Some(plan)
        }
    }

    #[test]
    fn migration_takes_effect_at_next_release() {
        let sys = System::new(
            vec![det("a", 10_000, 100_000)],
            vec![
                ResourceState::new("cpu0", Policy::Edf, Criticality::Hard),
                ResourceState::new("cpu1", Policy::Edf, Criticality::Hard),
            ],
        )
        .unwrap();
        let plan = AllocationPlan::new(
            &sys,
            [("a".into(), "cpu0".into())].into(),
            BTreeSet::new(),
            &FitMap::new(),
        )
        .unwrap();
        let mut hook = MoveOnce {
            to: "cpu1".into(),
            done: false,
        };
        let trace = run_sim(
            &plan,
            &sys,
            &NoiseModel::none(),
            1_000_000,
            1,
            Some(&mut hook),
        )
        .unwrap();
        let migrate: Vec<_> = trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Migrate)
            .collect();
        assert_eq!(migrate.len(), 1);
        assert_eq!(migrate[0].time, 300_000);
        assert_eq!(migrate[0].resource, "cpu1".into());
        assert!(trace.busy[&"cpu0".into()] == 30_000 && trace.busy[&"cpu1".into()] == 70_000);
    }
}
