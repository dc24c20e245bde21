//! Run statistics: per-task runtime summaries, group average, skew
//! (smallest and largest distance of a task mean from the group average),
//! the spread of the most skewed task, and runtime histograms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::Serialize;

use crate::prob::compensated_sum;
use crate::sim::SimTrace;
use crate::task::{Micros, TaskId};

pub const DEFAULT_BIN_WIDTH: Micros = 10;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("task `{0}` completed no job")]
    NoCompletions(TaskId),
    #[error("bin width must be > 0")]
    ZeroBinWidth,
    #[error("trace has no tasks")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskStats {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single sample.
    pub stddev: f64,
    pub min: Micros,
    pub max: Micros,
    pub miss_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Skew {
    pub min_dev: u64,
    pub max_dev: u64,
}

impl std::fmt::Display for Skew {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.min_dev, self.max_dev)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Bin {
    #[serde(rename = "bin_lo_us")]
    pub lo: Micros,
    #[serde(rename = "bin_hi_us")]
    pub hi: Micros,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub per_task: BTreeMap<TaskId, TaskStats>,
    pub group_avg: f64,
    pub skw: Skew,
    pub sd_mx: f64,
    pub bin_width: Micros,
    /// Contiguous bins `[lo, hi)` from the task's minimum to its maximum,
    /// empty bins included.
    pub histogram: BTreeMap<TaskId, Vec<Bin>>,
}

fn task_stats(samples: &[Micros], miss_count: usize) -> TaskStats {
    let n = samples.len();
    let mean = compensated_sum(samples.iter().map(|&x| x as f64)) / n as f64;
    let ss = compensated_sum(samples.iter().map(|&x| (x as f64 - mean).powi(2)));
    let stddev = if n > 1 {
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    TaskStats {
        count: n,
        mean,
        stddev,
        min: samples.iter().copied().min().unwrap_or(0),
        max: samples.iter().copied().max().unwrap_or(0),
        miss_count,
    }
}

/// Aligned bins of `width` covering every sample.
pub fn histogram(samples: &[Micros], width: Micros) -> Vec<Bin> {
    let (Some(&min), Some(&max)) = (samples.iter().min(), samples.iter().max()) else {
        return Vec::new();
    };
    let first = min / width;
    let mut bins: Vec<Bin> = (first..=max / width)
        .map(|k| Bin {
            lo: k * width,
            hi: (k + 1) * width,
            count: 0,
        })
        .collect();
    for &s in samples {
        bins[(s / width - first) as usize].count += 1;
    }
    bins
}

/// Summarizes the measured runtimes of a trace.
pub fn build_report(trace: &SimTrace, bin_width: Micros) -> Result<RunReport, MetricsError> {
    if bin_width == 0 {
        return Err(MetricsError::ZeroBinWidth);
    }
    if trace.per_task_runtimes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_task = BTreeMap::new();
    let mut hist = BTreeMap::new();
    for (task, samples) in &trace.per_task_runtimes {
        if samples.is_empty() {
            return Err(MetricsError::NoCompletions(task.clone()));
        }
        per_task.insert(task.clone(), task_stats(samples, trace.misses_of(task)));
        hist.insert(task.clone(), histogram(samples, bin_width));
    }
    let group_avg = compensated_sum(per_task.values().map(|s| s.mean)) / per_task.len() as f64;
    let devs: Vec<(f64, f64)> = per_task
        .values()
        .map(|s| ((s.mean - group_avg).abs(), s.stddev))
        .collect();
    let min_dev = devs.iter().map(|d| d.0).fold(f64::INFINITY, f64::min);
    // First task in id order wins a tie for the largest deviation.
    let (max_dev, sd_mx) = devs.iter().fold((f64::NEG_INFINITY, 0.0), |acc, &(d, sd)| {
        if d > acc.0 {
            (d, sd)
        } else {
            acc
        }
    });
    Ok(RunReport {
        per_task,
        group_avg,
        skw: Skew {
            min_dev: min_dev.round() as u64,
            max_dev: max_dev.round() as u64,
        },
        sd_mx,
        bin_width,
        histogram: hist,
    })
}

impl RunReport {
    pub fn total_misses(&self) -> usize {
        self.per_task.values().map(|s| s.miss_count).sum()
    }

    /// Histogram of `task` as relative frequencies.
    pub fn relative_histogram(&self, task: &TaskId) -> Vec<(Micros, Micros, f64)> {
        let bins = self
            .histogram
            .get(task)
            .map(Vec::as_slice)
            .unwrap_or_default();
        let total: u64 = bins.iter().map(|b| b.count).sum();
        bins.iter()
            .map(|b| (b.lo, b.hi, b.count as f64 / total as f64))
            .collect()
    }

    /// `AVG & SKW & SD_MX`, e.g. `10712 & 0/8 & 31.78`. The average is
    /// starred when any deadline was missed.
    pub fn table_row(&self) -> String {
        let star = if self.total_misses() > 0 { "*" } else { "" };
        format!(
            "{:.0}{star} & {} & {:.2}",
            self.group_avg, self.skw, self.sd_mx
        )
    }

    /// Plain-text summary table with one row per task and a group row.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>12} {:>10} {:>8} {:>8} {:>6}",
            "task", "count", "mean_us", "sd_us", "min", "max", "miss"
        );
        for (t, s) in &self.per_task {
            let _ = writeln!(
                out,
                "{:<16} {:>8} {:>12.2} {:>10.2} {:>8} {:>8} {:>6}",
                t.as_str(),
                s.count,
                s.mean,
                s.stddev,
                s.min,
                s.max,
                s.miss_count
            );
        }
        let _ = writeln!(out, "AVG & SKW & SD_MX: {}", self.table_row());
        out
    }

    /// `task,bin_lo_us,bin_hi_us,rel_count`
    pub fn write_histogram_csv<W: io::Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["task", "bin_lo_us", "bin_hi_us", "rel_count"])?;
        for task in self.histogram.keys() {
            for (lo, hi, rel) in self.relative_histogram(task) {
                w.write_record([
                    task.to_string(),
                    lo.to_string(),
                    hi.to_string(),
                    rel.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes the relative histograms of `report` to `path`.
pub fn export_histogram(report: &RunReport, path: &std::path::Path) -> Result<(), MetricsError> {
    let file = std::fs::File::create(path)?;
    report.write_histogram_csv(io::BufWriter::new(file))
}

/// Counts peaks whose topographic prominence is at least `min_prominence`
/// times the highest value. A plateau counts once.
pub fn count_modes(values: &[f64], min_prominence: f64) -> usize {
    let top = values.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0;
    }
    let need = min_prominence * top;
    let n = values.len();
    let mut modes = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[j + 1] == values[i] {
            j += 1;
        }
        let h = values[i];
        let rises_left = i == 0 || values[i - 1] < h;
        let falls_right = j + 1 == n || values[j + 1] < h;
        if rises_left && falls_right {
            // Highest col on the way to higher ground; the global peak has none.
            let col = |range: &mut dyn Iterator<Item = usize>| {
                let mut low = h;
                for k in range {
                    if values[k] > h {
                        return Some(low);
                    }
                    low = low.min(values[k]);
                }
                None
            };
            let key = [col(&mut (0..i).rev()), col(&mut (j + 1..n))]
                .into_iter()
                .flatten()
                .fold(0.0f64, f64::max);
            if h - key >= need {
                modes += 1;
            }
        }
        i = j + 1;
    }
    modes
}
