use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::SpaceKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    /// Rejected by a constraint; logged at budget 0 and never evaluated.
    Infeasible,
    /// The evaluator returned an error.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub space: SpaceKind,
    pub config: Vec<f64>,
    pub budget: u64,
    pub costs: Option<Vec<f64>>,
    pub status: TrialStatus,
    pub bracket: u64,
    pub round: u32,
    pub wall_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok && self.costs.is_some()
    }

    fn violation(&self) -> Option<String> {
        let zero = self.budget == 0;
        let infeasible = self.status == TrialStatus::Infeasible;
        if zero != infeasible {
            return Some(format!(
                "trial {}: budget 0 must coincide with status `infeasible`",
                self.trial_id
            ));
        }
        if (self.status == TrialStatus::Ok) != self.costs.is_some() {
            return Some(format!("trial {}: costs must be present exactly for ok trials", self.trial_id));
        }
        match &self.costs {
            Some(c) if c.is_empty() || c.iter().any(|v| !v.is_finite()) => {
                Some(format!("trial {}: costs must be a non-empty list of finite numbers", self.trial_id))
            }
            _ => None,
        }
    }
}

/// Parses a JSON-lines trial log; blank lines are skipped.
pub fn read_trial_log(text: &str) -> Result<Vec<TrialRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrialRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("trial log line {}: {e}", n + 1)))?;
        if let Some(v) = rec.violation() {
            return Err(Error::format(format!("trial log line {}: {v}", n + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_trial_log(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    read_trial_log(&std::fs::read_to_string(path)?)
}

pub fn trial_log_line(record: &TrialRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

/// Append-only JSON-lines writer; flushes after every record.
pub struct TrialLogWriter {
    out: BufWriter<File>,
}

impl TrialLogWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    pub fn write(&mut self, record: &TrialRecord) -> Result<()> {
        writeln!(self.out, "{}", trial_log_line(record)?)?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: u64,
    pub count: usize,
    pub percent: f64,
}

/// Trial counts per distinct budget (ascending, so budget 0 comes first).
pub fn budget_report(trials: &[TrialRecord]) -> Result<Vec<BudgetRow>> {
    if trials.is_empty() {
        return Err(Error::Empty("trial log has no records".into()));
    }
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for t in trials {
        *counts.entry(t.budget).or_default() += 1;
    }
    let total = trials.len() as f64;
    Ok(counts
        .into_iter()
        .map(|(budget, count)| BudgetRow {
            budget,
            count,
            percent: 100.0 * count as f64 / total,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub trial_id: u64,
    pub cost: f64,
}

/// Each full-budget improvement of the first objective, in log order.
/// `b_max` defaults to the largest budget in the log.
pub fn incumbent_trajectory(trials: &[TrialRecord], b_max: Option<u64>) -> Vec<TrajectoryPoint> {
    let Some(top) = b_max.or_else(|| trials.iter().map(|t| t.budget).max()) else {
        return Vec::new();
    };
    let mut best = f64::INFINITY;
    let mut out = Vec::new();
    for t in trials.iter().filter(|t| t.budget == top) {
        if let Some(c) = t.costs.as_ref().and_then(|c| c.first()) {
            if *c < best {
                best = *c;
                out.push(TrajectoryPoint {
                    trial_id: t.trial_id,
                    cost: *c,
                });
            }
        }
    }
    out
}
