use std::collections::BTreeMap;
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};

use crate::task::{Micros, ResourceId, TaskId};

/// Event kinds, declared in their same-instant ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Migrate,
    Release,
    Complete,
    DeadlineMiss,
    Preempt,
    Start,
    Resume,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Migrate => "migrate",
            EventKind::Release => "release",
            EventKind::Complete => "complete",
            EventKind::DeadlineMiss => "deadline_miss",
            EventKind::Preempt => "preempt",
            EventKind::Start => "start",
            EventKind::Resume => "resume",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    #[serde(rename = "time_us")]
    pub time: Micros,
    pub kind: EventKind,
    pub task: TaskId,
    /// Hosting resource; the destination for `migrate`.
    pub resource: ResourceId,
}

/// Time-ordered simulation record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrace {
    pub events: Vec<TraceEvent>,
    /// Measured runtime of every completed job, per task, in completion
    /// order. Every task of the run has an entry.
    pub per_task_runtimes: BTreeMap<TaskId, Vec<Micros>>,
    /// CPU time spent executing jobs, per resource.
    pub busy: BTreeMap<ResourceId, Micros>,
    /// Simulated horizon.
    pub duration: Micros,
}

impl SimTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn misses_of(&self, task: &TaskId) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::DeadlineMiss && &e.task == task)
            .count()
    }

    /// `time_us,kind,task,resource`
    pub fn write_events_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_us", "kind", "task", "resource"])?;
        for e in &self.events {
            w.write_record([
                e.time.to_string(),
                e.kind.to_string(),
                e.task.to_string(),
                e.resource.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `task,runtime_us`
    pub fn write_runtimes_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "runtime_us"])?;
        for (task, samples) in &self.per_task_runtimes {
            for s in samples {
                w.write_record([task.as_str(), &s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a `task,runtime_us` CSV into per-task sample lists.
pub fn read_runtimes_csv<R: io::Read>(input: R) -> csv::Result<BTreeMap<TaskId, Vec<Micros>>> {
    #[derive(Deserialize)]
    struct Row {
        task: TaskId,
        runtime_us: Micros,
    }
    let mut out: BTreeMap<TaskId, Vec<Micros>> = BTreeMap::new();
    for row in csv::Reader::from_reader(input).deserialize() {
        let row: Row = row?;
        out.entry(row.task).or_default().push(row.runtime_us);
    }
    Ok(out)
}
