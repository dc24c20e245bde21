//! Probabilistic real-time scheduling: buffer and miss-probability analysis,
//! admission control, a discrete-event simulator, and an orchestrator that
//! reallocates tasks when a CPU's miss probability crosses its threshold.

pub mod analysis;
pub mod metrics;
pub mod orchestrator;
pub mod prob;
pub mod scenario;
pub mod sim;
pub mod task;

pub use analysis::{
    admit, assess, edf_bound, rm_bound, AdmissionVerdict, AnalysisError, Thresholds,
};
pub use metrics::{build_report, RunReport};
pub use orchestrator::{
    mc_reallocate, naive_reallocate, orchestrate_step, Orchestrator, OrchestratorConfig,
    ReallocationDecision, Strategy,
};
pub use prob::{
    buffer, fit_to_normal, fit_update, joint_utilization, miss_probability, NormalParams,
    StreamingFit,
};
pub use scenario::Scenario;
pub use sim::{run_sim, EpochHook, NoiseModel, SimError, SimTrace};
pub use task::{
    AllocationPlan, Criticality, ExecModel, FitMap, Micros, Policy, ResourceId, ResourceState,
    System, TaskId, TaskSpec,
};
