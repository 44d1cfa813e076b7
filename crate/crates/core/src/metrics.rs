//! Per-run effort ledgers and their aggregation into outcome and effort tables.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskOutcome {
    Accomplished,
    NotAccomplished,
    Error,
}

/// Token usage of one simulator or critic call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallUsage {
    pub role: String,
    pub k: usize,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

/// Effort counters of one run. `tokens_sent`/`tokens_received` include the
/// simulator and critic calls, which are also broken out in the `overhead_*`
/// fields and `calls`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    #[serde(default)]
    pub mode: String,
    pub executed_tasks: u64,
    pub tool_calls: u64,
    pub api_calls: u64,
    pub tokens_sent: u64,
    pub tokens_received: u64,
    #[serde(default)]
    pub overhead_tokens_sent: u64,
    #[serde(default)]
    pub overhead_tokens_received: u64,
    pub elapsed_secs: f64,
    pub task_outcomes: Vec<TaskOutcome>,
    #[serde(default)]
    pub calls: Vec<CallUsage>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no ledgers to aggregate")]
    Empty,
    #[error("ledger '{run_id}': executed_tasks {executed} but {outcomes} task outcomes")]
    Inconsistent {
        run_id: String,
        executed: u64,
        outcomes: usize,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("no ledger files in {0}")]
    NoLedgers(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunLedger {
    pub fn new(run_id: impl Into<String>, mode: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            mode: mode.into(),
            ..Self::default()
        }
    }

    /// Records one executed task and its effort.
    pub fn record_task(
        &mut self,
        outcome: TaskOutcome,
        tool_calls: u64,
        api_calls: u64,
        tokens_in: u64,
        tokens_out: u64,
        elapsed_secs: f64,
    ) {
        self.executed_tasks += 1;
        self.task_outcomes.push(outcome);
        self.tool_calls += tool_calls;
        self.api_calls += api_calls;
        self.tokens_sent += tokens_in;
        self.tokens_received += tokens_out;
        self.elapsed_secs += elapsed_secs;
    }

    /// Records a simulator or critic call as overhead.
    pub fn record_call(&mut self, role: &str, k: usize, tokens_in: u64, tokens_out: u64, elapsed_secs: f64) {
        self.tokens_sent += tokens_in;
        self.tokens_received += tokens_out;
        self.overhead_tokens_sent += tokens_in;
        self.overhead_tokens_received += tokens_out;
        self.elapsed_secs += elapsed_secs;
        self.calls.push(CallUsage {
            role: role.to_string(),
            k,
            tokens_in,
            tokens_out,
        });
    }

    pub fn check(&self) -> Result<(), MetricsError> {
        if self.executed_tasks != self.task_outcomes.len() as u64 {
            return Err(MetricsError::Inconsistent {
                run_id: self.run_id.clone(),
                executed: self.executed_tasks,
                outcomes: self.task_outcomes.len(),
            });
        }
        Ok(())
    }

    pub fn count(&self, outcome: TaskOutcome) -> usize {
        self.task_outcomes.iter().filter(|o| **o == outcome).count()
    }

    pub fn executor_tokens_sent(&self) -> u64 {
        self.tokens_sent - self.overhead_tokens_sent
    }

    pub fn executor_tokens_received(&self) -> u64 {
        self.tokens_received - self.overhead_tokens_received
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation. Values are summed in sorted order so the
    /// result does not depend on input order.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let mut sq: Vec<f64> = sorted.iter().map(|v| (v - mean) * (v - mean)).collect();
        sq.sort_by(f64::total_cmp);
        let std = (sq.iter().sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    /// Runs dropped by the non-zero-task filter.
    pub excluded_runs: usize,
    pub tasks: u64,
    pub acc_rate: MeanStd,
    pub not_rate: MeanStd,
    pub error_rate: MeanStd,
    pub avg_tasks: MeanStd,
    pub tool_calls: MeanStd,
    pub api_calls: MeanStd,
    pub tokens_sent: MeanStd,
    pub tokens_received: MeanStd,
    pub overhead_tokens_sent: MeanStd,
    pub overhead_tokens_received: MeanStd,
    pub elapsed_secs: MeanStd,
}

/// Outcome rates are computed per run, over runs that executed at least one
/// task, then averaged. Effort counters are averaged over all included runs.
pub fn aggregate(ledgers: &[RunLedger], nonzero_only: bool) -> Result<AggregateReport, MetricsError> {
    if ledgers.is_empty() {
        return Err(MetricsError::Empty);
    }
    for l in ledgers {
        l.check()?;
    }
    let included: Vec<&RunLedger> = ledgers
        .iter()
        .filter(|l| !nonzero_only || l.executed_tasks > 0)
        .collect();
    let excluded_runs = ledgers.len() - included.len();
    let with_tasks: Vec<&RunLedger> = included.iter().copied().filter(|l| l.executed_tasks > 0).collect();
    let rate = |outcome: TaskOutcome| {
        let v: Vec<f64> = with_tasks
            .iter()
            .map(|l| l.count(outcome) as f64 / l.executed_tasks as f64)
            .collect();
        MeanStd::of(&v)
    };
    let per_run = |f: fn(&RunLedger) -> f64| {
        let v: Vec<f64> = included.iter().map(|l| f(l)).collect();
        MeanStd::of(&v)
    };
    Ok(AggregateReport {
        runs: included.len(),
        excluded_runs,
        tasks: included.iter().map(|l| l.executed_tasks).sum(),
        acc_rate: rate(TaskOutcome::Accomplished),
        not_rate: rate(TaskOutcome::NotAccomplished),
        error_rate: rate(TaskOutcome::Error),
        avg_tasks: per_run(|l| l.executed_tasks as f64),
        tool_calls: per_run(|l| l.tool_calls as f64),
        api_calls: per_run(|l| l.api_calls as f64),
        tokens_sent: per_run(|l| l.tokens_sent as f64),
        tokens_received: per_run(|l| l.tokens_received as f64),
        overhead_tokens_sent: per_run(|l| l.overhead_tokens_sent as f64),
        overhead_tokens_received: per_run(|l| l.overhead_tokens_received as f64),
        elapsed_secs: per_run(|l| l.elapsed_secs),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub report: AggregateReport,
}

/// One report per distinct mode tag, in tag order.
pub fn aggregate_by_mode(ledgers: &[RunLedger], nonzero_only: bool) -> Result<Vec<ModeReport>, MetricsError> {
    if ledgers.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut groups: BTreeMap<&str, Vec<RunLedger>> = BTreeMap::new();
    for l in ledgers {
        groups.entry(l.mode.as_str()).or_default().push(l.clone());
    }
    groups
        .into_iter()
        .map(|(mode, group)| {
            Ok(ModeReport {
                mode: mode.to_string(),
                report: aggregate(&group, nonzero_only)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

fn ms(v: MeanStd) -> String {
    format!("{:.3} ({:.3})", v.mean, v.std)
}

fn render_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(headers.to_vec());
    out.push('\n');
    out.push_str(&line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect()));
    for row in rows {
        out.push('\n');
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out.push('\n');
    out
}

/// Deterministic rendering: an outcome table and an effort table with one row
/// per mode, or a JSON array of mode reports.
pub fn render_report(reports: &[ModeReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let outcome_rows: Vec<Vec<String>> = reports
                .iter()
                .map(|m| {
                    vec![
                        m.mode.clone(),
                        m.report.runs.to_string(),
                        m.report.excluded_runs.to_string(),
                        m.report.tasks.to_string(),
                        ms(m.report.acc_rate),
                        ms(m.report.not_rate),
                        ms(m.report.error_rate),
                    ]
                })
                .collect();
            let effort_rows: Vec<Vec<String>> = reports
                .iter()
                .map(|m| {
                    let r = &m.report;
                    vec![
                        m.mode.clone(),
                        ms(r.avg_tasks),
                        ms(r.tool_calls),
                        ms(r.api_calls),
                        ms(r.tokens_sent),
                        ms(r.tokens_received),
                        ms(r.overhead_tokens_sent),
                        ms(r.overhead_tokens_received),
                        ms(r.elapsed_secs),
                    ]
                })
                .collect();
            let mut out = render_table(
                &["Mode", "Runs", "Excluded", "Tasks", "Acc", "Not", "Error"],
                &outcome_rows,
            );
            out.push('\n');
            out.push_str(&render_table(
                &[
                    "Mode",
                    "AvgTasks/Run",
                    "ToolCalls/Run",
                    "ApiCalls/Run",
                    "TokSent/Run",
                    "TokRecv/Run",
                    "OverheadSent/Run",
                    "OverheadRecv/Run",
                    "Elapsed(s)/Run",
                ],
                &effort_rows,
            ));
            out
        }
    }
}

pub fn parse_report_json(text: &str) -> Result<Vec<ModeReport>, serde_json::Error> {
    serde_json::from_str(text)
}

/// Appends one ledger as a JSON line.
pub fn append_ledger(path: impl AsRef<Path>, ledger: &RunLedger) -> Result<(), MetricsError> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(ledger).map_err(std::io::Error::other)?;
    writeln!(file, "{line}")?;
    Ok(())
}

pub fn read_ledgers(path: impl AsRef<Path>) -> Result<Vec<RunLedger>, MetricsError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ledger: RunLedger = serde_json::from_str(&line).map_err(|e| MetricsError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        ledger.check().map_err(|e| MetricsError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ledger);
    }
    Ok(out)
}

/// Reads every `*.jsonl` file in `dir`, in file-name order.
pub fn read_ledger_dir(dir: impl AsRef<Path>) -> Result<Vec<RunLedger>, MetricsError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read_ledgers(&f)?);
    }
    if out.is_empty() {
        return Err(MetricsError::NoLedgers(dir.to_path_buf()));
    }
    Ok(out)
}
