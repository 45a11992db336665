//! Tabular reports in CSV or `key=value` form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::files::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    /// One `key=value` line per column, rows separated by a blank line.
    Structured,
}

impl ReportFormat {
    pub fn name(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Structured => "structured",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Structured => "txt",
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "structured" => Ok(ReportFormat::Structured),
            other => Err(format!("expected `csv` or `structured`, got `{other}`")),
        }
    }
}

/// A report cell. Floats print with `{:?}`, which round-trips exactly and
/// always carries a decimal point or exponent.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Value {
    fn parse(s: &str) -> Value {
        if let Ok(i) = s.parse::<i64>() {
            return Value::Int(i);
        }
        if let Ok(f) = s.parse::<f64>() {
            return Value::Float(f);
        }
        Value::Text(s.to_string())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(i) => Some(i as f64),
            Value::Float(f) => Some(f),
            Value::Text(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Text(s) => f.write_str(s),
        }
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v as i64)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Rows sharing one column set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::invalid(
                "report",
                format!(
                    "row has {} cells, report has {} columns",
                    row.len(),
                    self.columns.len()
                ),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Column `name` of row `row`.
    pub fn get(&self, row: usize, name: &str) -> Option<&Value> {
        let col = self.columns.iter().position(|c| c == name)?;
        self.rows.get(row)?.get(col)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        for name in &self.columns {
            check_cell(name, format)?;
            if name.contains('=') {
                return Err(Error::invalid(
                    "report",
                    format!("column `{name}` contains `=`"),
                ));
            }
        }
        let mut out = String::new();
        match format {
            ReportFormat::Csv => {
                out.push_str(&self.columns.join(","));
                out.push('\n');
                for row in &self.rows {
                    let cells = row
                        .iter()
                        .map(|v| {
                            let s = v.to_string();
                            check_cell(&s, format).map(|_| s)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    out.push_str(&cells.join(","));
                    out.push('\n');
                }
            }
            ReportFormat::Structured => {
                for (i, row) in self.rows.iter().enumerate() {
                    if i > 0 {
                        out.push('\n');
                    }
                    for (name, v) in self.columns.iter().zip(row) {
                        let s = v.to_string();
                        check_cell(&s, format)?;
                        out.push_str(&format!("{name}={s}\n"));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn parse(text: &str, format: ReportFormat) -> Result<Report> {
        match format {
            ReportFormat::Csv => {
                let mut lines = text.lines();
                let header = lines
                    .next()
                    .ok_or_else(|| Error::invalid("report", "missing header"))?;
                let mut report = Report {
                    columns: header.split(',').map(str::to_string).collect(),
                    rows: Vec::new(),
                };
                for line in lines {
                    report.push(line.split(',').map(Value::parse).collect())?;
                }
                Ok(report)
            }
            ReportFormat::Structured => {
                let mut report = Report::default();
                for (i, group) in text.split("\n\n").enumerate() {
                    let mut columns = Vec::new();
                    let mut row = Vec::new();
                    for line in group.lines().filter(|l| !l.is_empty()) {
                        let (k, v) = line.split_once('=').ok_or_else(|| {
                            Error::invalid("report", format!("line `{line}` has no `=`"))
                        })?;
                        columns.push(k.to_string());
                        row.push(Value::parse(v));
                    }
                    if columns.is_empty() {
                        continue;
                    }
                    if i == 0 {
                        report.columns = columns;
                    } else if columns != report.columns {
                        return Err(Error::invalid("report", "groups have different keys"));
                    }
                    report.push(row)?;
                }
                Ok(report)
            }
        }
    }
}

fn check_cell(s: &str, format: ReportFormat) -> Result<()> {
    let bad = match format {
        ReportFormat::Csv => s.contains([',', '\n', '\r']),
        ReportFormat::Structured => s.contains(['\n', '\r']),
    };
    if bad || s.is_empty() && format == ReportFormat::Structured {
        return Err(Error::invalid(
            "report",
            format!("cell `{s}` cannot be written as {format}"),
        ));
    }
    Ok(())
}

/// Render and atomically replace `path`.
pub fn write_report(report: &Report, format: ReportFormat, path: &Path) -> Result<()> {
    write_atomic(path, report.render(format)?.as_bytes())
}
