//! Per-bus load time series: a synthetic residential-like generator and a
//! CSV reader.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, task_rng};

pub const PEAK_LOAD: f64 = 0.5;
pub const POWER_FACTOR: f64 = 0.9;
pub const INTERVALS_PER_DAY: usize = 96;

/// Consumption (positive = load) per interval (rows) and bus (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub bus_ids: Vec<u32>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

fn reactive_ratio() -> f64 {
    POWER_FACTOR.acos().tan()
}

fn bump(h: f64, center: f64, width: f64) -> f64 {
    // Wrap around midnight.
    let d = ((h - center + 12.0).rem_euclid(24.0)) - 12.0;
    (-(d / width).powi(2)).exp()
}

impl LoadProfile {
    /// Daily profile with a morning and an evening peak, bus-specific
    /// timing and amplitude, multiplicative noise, every bus scaled to peak at
    /// [`PEAK_LOAD`] with lagging power factor [`POWER_FACTOR`].
    pub fn synthetic(bus_ids: &[u32], seed: u64) -> Self {
        let rows = INTERVALS_PER_DAY;
        let mut p = DMatrix::zeros(rows, bus_ids.len());
        for (j, _) in bus_ids.iter().enumerate() {
            let mut rng = task_rng(seed, stream::PROFILE, j as u64);
            let shift: f64 = rng.gen_range(-1.0..1.0);
            let morning: f64 = rng.gen_range(0.15..0.4);
            let evening: f64 = rng.gen_range(0.5..0.9);
            let base: f64 = rng.gen_range(0.25..0.4);
            for r in 0..rows {
                let h = 24.0 * r as f64 / rows as f64;
                let shape = base
                    + morning * bump(h, 7.5 + shift, 1.5)
                    + evening * bump(h, 19.0 + shift, 2.5);
                let e: f64 = rng.sample(StandardNormal);
                p[(r, j)] = (shape * (1.0 + 0.08 * e)).max(0.05 * shape);
            }
            let peak = p.column(j).max();
            p.column_mut(j).scale_mut(PEAK_LOAD / peak);
        }
        let q = &p * reactive_ratio();
        Self { bus_ids: bus_ids.to_vec(), p, q }
    }

    /// Columns `p_<bus id>` (and optionally `q_<bus id>`) in pu consumption;
    /// any other column is ignored. Missing reactive columns follow the
    /// default power factor.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let mut p_cols: Vec<(u32, usize)> = Vec::new();
        let mut q_cols: HashMap<u32, usize> = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            let h = h.trim();
            let parse = |s: &str| {
                s.parse::<u32>().map_err(|_| Error::Parse(format!("bad profile column '{h}'")))
            };
            if let Some(id) = h.strip_prefix("p_") {
                p_cols.push((parse(id)?, i));
            } else if let Some(id) = h.strip_prefix("q_") {
                q_cols.insert(parse(id)?, i);
            }
        }
        if p_cols.is_empty() {
            return Err(Error::Parse("profile has no p_<bus> columns".into()));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let mut row = Vec::with_capacity(rec.len());
            for field in rec.iter() {
                row.push(field.trim().parse::<f64>().unwrap_or(f64::NAN));
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("profile has no rows".into()));
        }
        let value = |r: usize, c: usize| -> Result<f64> {
            let v = rows[r].get(c).copied().unwrap_or(f64::NAN);
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("non-numeric profile entry at row {}, column {}", r + 1, c + 1)))
            }
        };
        let n = p_cols.len();
        let mut p = DMatrix::zeros(rows.len(), n);
        let mut q = DMatrix::zeros(rows.len(), n);
        for r in 0..rows.len() {
            for (j, &(id, c)) in p_cols.iter().enumerate() {
                p[(r, j)] = value(r, c)?;
                q[(r, j)] = match q_cols.get(&id) {
                    Some(&qc) => value(r, qc)?,
                    None => p[(r, j)] * reactive_ratio(),
                };
            }
        }
        Ok(Self { bus_ids: p_cols.iter().map(|c| c.0).collect(), p, q })
    }

    pub fn intervals(&self) -> usize {
        self.p.nrows()
    }

    /// Interval with the largest total active load.
    pub fn peak_interval(&self) -> usize {
        let totals: Vec<f64> = (0..self.intervals()).map(|r| self.p.row(r).sum()).collect();
        (0..totals.len()).fold(0, |b, r| if totals[r] > totals[b] { r } else { b })
    }

    /// `(p, q)` consumption of `bus` at `interval`.
    pub fn load(&self, bus: u32, interval: usize) -> Result<(f64, f64)> {
        if interval >= self.intervals() {
            return Err(Error::InvalidInput(format!(
                "profile interval {interval} out of range (have {})",
                self.intervals()
            )));
        }
        let j = self
            .bus_ids
            .iter()
            .position(|&b| b == bus)
            .ok_or(Error::UnknownBus(bus))?;
        Ok((self.p[(interval, j)], self.q[(interval, j)]))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["interval".to_string()];
        header.extend(self.bus_ids.iter().map(|b| format!("p_{b}")));
        header.extend(self.bus_ids.iter().map(|b| format!("q_{b}")));
        w.write_record(&header)?;
        for r in 0..self.intervals() {
            let mut row = vec![r.to_string()];
            row.extend(self.p.row(r).iter().map(|v| format!("{v:.9}")));
            row.extend(self.q.row(r).iter().map(|v| format!("{v:.9}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_scaling() {
        let prof = LoadProfile::synthetic(&[2, 3, 4], 9);
        assert_eq!(prof.intervals(), INTERVALS_PER_DAY);
        for j in 0..3 {
            assert!((prof.p.column(j).max() - PEAK_LOAD).abs() < 1e-12);
            assert!(prof.p.column(j).min() > 0.0);
            for r in 0..prof.intervals() {
                let (p, q) = (prof.p[(r, j)], prof.q[(r, j)]);
                assert!((p / (p * p + q * q).sqrt() - POWER_FACTOR).abs() < 1e-12);
            }
        }
        let peak = prof.peak_interval() as f64 * 24.0 / INTERVALS_PER_DAY as f64;
        assert!((16.0..22.0).contains(&peak), "peak at {peak} h");
        assert_eq!(prof, LoadProfile::synthetic(&[2, 3, 4], 9));
    }

    #[test]
    fn csv_round_trip() {
        let prof = LoadProfile::synthetic(&[10, 11], 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loads.csv");
        prof.write_csv(&path).unwrap();
        let back = LoadProfile::from_csv(&path).unwrap();
        assert_eq!(back.bus_ids, vec![10, 11]);
        assert!((back.p.clone() - prof.p.clone()).amax() < 1e-8);
        assert!((back.q.clone() - prof.q.clone()).amax() < 1e-8);
    }

    #[test]
    fn csv_without_reactive_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loads.csv");
        std::fs::write(&path, "t,p_5\n0,0.3\n1,0.1\n").unwrap();
        let prof = LoadProfile::from_csv(&path).unwrap();
        let (p, q) = prof.load(5, 0).unwrap();
        assert_eq!(p, 0.3);
        assert!((q - 0.3 * reactive_ratio()).abs() < 1e-15);
        assert!(prof.load(6, 0).is_err());
        assert!(prof.load(5, 2).is_err());
    }
}
