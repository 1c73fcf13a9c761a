//! Experiment records, aggregate statistics and the files they are written to.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Version of the CSV layouts written by this module.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
    Missing,
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Cell::Int(i) => Some(i as f64),
            Cell::Float(x) if !x.is_nan() => Some(x),
            _ => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(i) => write!(f, "{i}"),
            Cell::Float(x) if x.is_nan() => Ok(()),
            Cell::Float(x) if x.is_infinite() => write!(f, "{}", if *x > 0.0 { "inf" } else { "-inf" }),
            Cell::Float(x) => write!(f, "{x}"),
            Cell::Text(s) => write!(f, "{s}"),
            Cell::Missing => Ok(()),
        }
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}
impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}
impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Text(x.to_string())
    }
}
impl From<u32> for Cell {
    fn from(x: u32) -> Self {
        Cell::Int(x as i64)
    }
}
impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as i64)
    }
}
impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}
impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Text(x)
    }
}
impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(x: Option<T>) -> Self {
        x.map_or(Cell::Missing, Into::into)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width mismatch in {}", self.name);
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidInput(format!("table {} has no column {name}", self.name)))
    }

    /// Numeric values of a column; `None` for missing cells.
    pub fn values(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j].as_f64()).collect())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Linear-interpolation percentile of sorted values, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else if sorted[hi].is_infinite() {
        sorted[hi]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub metric: String,
    pub table: String,
    pub column: String,
    pub count: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean: f64,
    pub min: f64,
    pub p10: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub max: f64,
}

impl Summary {
    /// Statistics over the present values; missing ones count as failures.
    pub fn of(metric: &str, table: &str, column: &str, values: &[Option<f64>]) -> Self {
        let mut v: Vec<f64> = values.iter().flatten().copied().collect();
        v.sort_by(f64::total_cmp);
        let failures = values.len() - v.len();
        let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Self {
            metric: metric.into(),
            table: table.into(),
            column: column.into(),
            count: v.len(),
            failures,
            failure_rate: if values.is_empty() { 0.0 } else { failures as f64 / values.len() as f64 },
            mean,
            min: v.first().copied().unwrap_or(f64::NAN),
            p10: percentile(&v, 0.1),
            p25: percentile(&v, 0.25),
            median: percentile(&v, 0.5),
            p75: percentile(&v, 0.75),
            p90: percentile(&v, 0.9),
            max: v.last().copied().unwrap_or(f64::NAN),
        }
    }

    pub fn inter_decile_width(&self) -> f64 {
        self.p90 - self.p10
    }
}

/// Which column of which table an aggregate is computed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummarySpec {
    pub metric: String,
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: String,
    /// The study this recipe reproduces.
    pub mirrors: String,
    /// One row per trial.
    pub records: Table,
    /// Supplementary long-format tables.
    pub tables: Vec<Table>,
    pub summary_specs: Vec<SummarySpec>,
    pub summaries: Vec<Summary>,
    /// Wall-clock seconds per record; kept out of the numeric outputs.
    pub runtimes: Vec<f64>,
    pub meta: serde_json::Value,
    pub manifest: Vec<String>,
}

impl ExperimentReport {
    pub fn new(experiment: &str, mirrors: &str, records: Table) -> Self {
        Self {
            experiment: experiment.into(),
            mirrors: mirrors.into(),
            records,
            tables: Vec::new(),
            summary_specs: Vec::new(),
            summaries: Vec::new(),
            runtimes: Vec::new(),
            meta: serde_json::Value::Null,
            manifest: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        if self.records.name == name {
            return Ok(&self.records);
        }
        self.tables
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidInput(format!("report has no table {name}")))
    }

    pub fn add_summary(&mut self, metric: &str, table: &str, column: &str) {
        self.summary_specs.push(SummarySpec { metric: metric.into(), table: table.into(), column: column.into() });
    }

    /// Aggregates recomputed from the raw tables.
    pub fn compute_summaries(&self) -> Result<Vec<Summary>> {
        self.summary_specs
            .iter()
            .map(|s| Ok(Summary::of(&s.metric, &s.table, &s.column, &self.table(&s.table)?.values(&s.column)?)))
            .collect()
    }

    pub fn finalize(&mut self) -> Result<()> {
        self.summaries = self.compute_summaries()?;
        Ok(())
    }

    pub fn summary(&self, metric: &str) -> Option<&Summary> {
        self.summaries.iter().find(|s| s.metric == metric)
    }

    fn summary_table(&self) -> Table {
        let mut t = Table::new(
            "summary",
            &["metric", "table", "column", "count", "failures", "failure_rate", "mean", "min", "p10", "p25",
              "median", "p75", "p90", "max"],
        );
        for s in &self.summaries {
            t.push(vec![
                s.metric.as_str().into(),
                s.table.as_str().into(),
                s.column.as_str().into(),
                s.count.into(),
                s.failures.into(),
                s.failure_rate.into(),
                s.mean.into(),
                s.min.into(),
                s.p10.into(),
                s.p25.into(),
                s.median.into(),
                s.p75.into(),
                s.p90.into(),
                s.max.into(),
            ]);
        }
        t
    }

    /// Write `report.csv`, `summary.csv`, every extra table, `timing.csv`
    /// and `meta.json` into `dir`; returns the written paths.
    pub fn write(&mut self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut files = vec!["report.csv".to_string(), "summary.csv".to_string()];
        files.extend(self.tables.iter().map(|t| format!("{}.csv", t.name)));
        files.push("timing.csv".into());
        files.push("meta.json".into());
        self.manifest = files.clone();

        self.records.write_csv(&dir.join("report.csv"))?;
        self.summary_table().write_csv(&dir.join("summary.csv"))?;
        for t in &self.tables {
            t.write_csv(&dir.join(format!("{}.csv", t.name)))?;
        }
        let mut timing = Table::new("timing", &["record", "seconds"]);
        for (i, s) in self.runtimes.iter().enumerate() {
            timing.push(vec![i.into(), (*s).into()]);
        }
        timing.write_csv(&dir.join("timing.csv"))?;
        let meta = serde_json::json!({
            "experiment": self.experiment,
            "mirrors": self.mirrors,
            "schema_version": SCHEMA_VERSION,
            "crate_version": env!("CARGO_PKG_VERSION"),
            "records": self.records.rows.len(),
            "files": self.manifest,
            "details": self.meta,
        });
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(files.iter().map(|f| dir.join(f)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 1.0), 5.0);
        assert!((percentile(&v, 0.1) - 1.4).abs() < 1e-12);
        assert_eq!(percentile(&[1.0, f64::INFINITY], 0.5), f64::INFINITY);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn summary_counts_failures() {
        let s = Summary::of("x", "report", "x", &[Some(1.0), None, Some(3.0)]);
        assert_eq!(s.count, 2);
        assert_eq!(s.failures, 1);
        assert!((s.failure_rate - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.median, 2.0);
        assert_eq!(s.mean, 2.0);
    }

    #[test]
    fn written_files_match_manifest() {
        let mut t = Table::new("report", &["trial", "value"]);
        t.push(vec![0usize.into(), 1.5.into()]);
        t.push(vec![1usize.into(), Cell::Missing]);
        let mut r = ExperimentReport::new("demo", "demo study", t);
        r.add_summary("value", "report", "value");
        r.finalize().unwrap();
        r.runtimes = vec![0.1, 0.2];
        let dir = tempfile::tempdir().unwrap();
        let files = r.write(dir.path()).unwrap();
        assert!(files.iter().all(|f| f.exists()));
        let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report, "trial,value\n0,1.5\n1,\n");
        assert_eq!(r.compute_summaries().unwrap(), r.summaries);
    }
}
