//! Result records and the `x(y)` report rendering, where `y` is the recovery
//! rate of cell value `x` against the column's upper and lower bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{recovery_rate, RecoveryRate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    ExactMatch,
    Perplexity,
    Accuracy,
}

/// One structured result record (one task under one condition). Scores are
/// `None` when the condition's prompt exceeded the model window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub condition: String,
    pub rho: Option<f64>,
    pub metric: MetricKind,
    pub m: Option<f64>,
    pub u: Option<f64>,
    pub l: Option<f64>,
    pub r: Option<f64>,
    pub seeds: Vec<u64>,
    pub runtime_s: f64,
}

impl ResultRecord {
    pub fn compute_recovery(&mut self) {
        self.r = match (self.m, self.u, self.l) {
            (Some(m), Some(u), Some(l)) => recovery_rate(m, u, l).value(),
            _ => None,
        };
    }
}

pub fn write_results(path: &std::path::Path, records: &[ResultRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &std::path::Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Table layout: one column per task, an upper- and lower-bound row, and one
/// row per method between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub tasks: Vec<String>,
    pub upper_label: String,
    pub upper: Vec<f64>,
    pub lower_label: String,
    pub lower: Vec<f64>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl ReportTable {
    pub fn validate(&self) -> Result<()> {
        let n = self.tasks.len();
        if self.upper.len() != n || self.lower.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "bounds rows must have {n} cells"
            )));
        }
        for (label, row) in &self.rows {
            if row.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "row {label:?} has {} cells, expected {n}",
                    row.len()
                )));
            }
        }
        Ok(())
    }
}

/// `0.74 → ".74"`, `1.43 → "1.43"`, `-0.04 → "-.04"`, exact bounds → "0"/"1".
pub fn format_recovery(r: RecoveryRate) -> String {
    match r {
        RecoveryRate::Undefined => "n/a".to_string(),
        RecoveryRate::Defined(v) => {
            let rounded = (v * 100.0).round() / 100.0;
            if rounded == 0.0 {
                "0".to_string()
            } else if rounded == 1.0 {
                "1".to_string()
            } else {
                let s = format!("{rounded:.2}");
                s.replacen("0.", ".", 1)
            }
        }
    }
}

fn format_cell(x: f64, r: &str) -> String {
    if x == x.trunc() && x.abs() < 1e6 {
        format!("{x:.1}({r})")
    } else {
        format!("{x}({r})")
    }
}

/// Render the table: upper row annotated `(1)`, lower row `(0)`, every other
/// cell `x(y)` with `y` computed against this column's bounds.
pub fn render_table(table: &ReportTable) -> Result<String> {
    table.validate()?;
    let mut lines = Vec::new();
    let header = std::iter::once("Method".to_string())
        .chain(table.tasks.iter().cloned())
        .collect::<Vec<_>>()
        .join("\t");
    lines.push(header);
    if !table.tasks.is_empty() {
        let upper_cells: Vec<String> = table
            .upper
            .iter()
            .map(|&x| format_cell(x, "1"))
            .collect();
        lines.push(format!("{}\t{}", table.upper_label, upper_cells.join("\t")));
        for (label, row) in &table.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let r = recovery_rate(x, table.upper[i], table.lower[i]);
                    format_cell(x, &format_recovery(r))
                })
                .collect();
            lines.push(format!("{label}\t{}", cells.join("\t")));
        }
        let lower_cells: Vec<String> = table
            .lower
            .iter()
            .map(|&x| format_cell(x, "0"))
            .collect();
        lines.push(format!("{}\t{}", table.lower_label, lower_cells.join("\t")));
    }
    lines.push(String::new());
    Ok(lines.join("\n"))
}

/// Machine-readable form of the same table; parses back losslessly.
pub fn render_machine(table: &ReportTable) -> Result<String> {
    table.validate()?;
    Ok(serde_json::to_string_pretty(table)?)
}

pub fn parse_machine(text: &str) -> Result<ReportTable> {
    Ok(serde_json::from_str(text)?)
}
