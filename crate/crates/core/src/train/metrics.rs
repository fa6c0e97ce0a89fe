use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const METRICS_HEADER: &str = "epoch,step,loss_g,loss_d,loss_d_real,loss_d_fake,d_real_mean,d_fake_mean";

/// Losses and discriminator outputs of one training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub step: u64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_d_real: f64,
    pub loss_d_fake: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl MetricRow {
    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    fn values(&self) -> [f64; 6] {
        [
            self.loss_g,
            self.loss_d,
            self.loss_d_real,
            self.loss_d_fake,
            self.d_real_mean,
            self.d_fake_mean,
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.step);
        for v in self.values() {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return None;
        }
        let num = |i: usize| f[i].parse::<f64>().ok();
        Some(Self {
            epoch: f[0].parse().ok()?,
            step: f[1].parse().ok()?,
            loss_g: num(2)?,
            loss_d: num(3)?,
            loss_d_real: num(4)?,
            loss_d_fake: num(5)?,
            d_real_mean: num(6)?,
            d_fake_mean: num(7)?,
        })
    }
}

/// Epoch-mean metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub steps: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub loss_d_real: f64,
    pub loss_d_fake: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl EpochSummary {
    pub fn from_rows(epoch: u64, rows: &[MetricRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            epoch,
            steps: rows.len(),
            loss_g: mean(|r| r.loss_g),
            loss_d: mean(|r| r.loss_d),
            loss_d_real: mean(|r| r.loss_d_real),
            loss_d_fake: mean(|r| r.loss_d_fake),
            d_real_mean: mean(|r| r.d_real_mean),
            d_fake_mean: mean(|r| r.d_fake_mean),
        }
    }
}

impl std::fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>5}  steps {:>4}  loss_g {:.4}  loss_d {:.4} (real {:.4}, fake {:.4})  D(x) {:.3}  D(G(z)) {:.3}",
            self.epoch,
            self.steps,
            self.loss_g,
            self.loss_d,
            self.loss_d_real,
            self.loss_d_fake,
            self.d_real_mean,
            self.d_fake_mean
        )
    }
}

/// Appends metric rows to a CSV file with LF line endings.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path`. A fresh run truncates and writes the header; a resumed
    /// run appends, writing the header only if the file is new.
    pub fn open(path: &Path, fresh: bool) -> Result<Self> {
        let needs_header = fresh || !path.exists() || std::fs::metadata(path)?.len() == 0;
        let file = if fresh {
            File::create(path)?
        } else {
            OpenOptions::new().create(true).append(true).open(path)?
        };
        let mut out = BufWriter::new(file);
        if needs_header {
            out.write_all(METRICS_HEADER.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.out.write_all(row.to_csv().as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let row = MetricRow {
            epoch: 3,
            step: 77,
            loss_g: 0.6931471805599453,
            loss_d: 1.0e-7,
            loss_d_real: -0.0,
            loss_d_fake: 2.5,
            d_real_mean: 0.5,
            d_fake_mean: 0.123456789,
        };
        assert_eq!(MetricRow::parse_csv(&row.to_csv()), Some(row));
        assert_eq!(METRICS_HEADER.split(',').count(), 8);
    }

    #[test]
    fn resumed_writer_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let row = MetricRow {
            epoch: 1,
            step: 1,
            loss_g: 1.0,
            loss_d: 1.0,
            loss_d_real: 1.0,
            loss_d_fake: 1.0,
            d_real_mean: 0.5,
            d_fake_mean: 0.5,
        };
        let mut w = MetricsWriter::open(&path, true).unwrap();
        w.write(&row).unwrap();
        drop(w);
        let mut w = MetricsWriter::open(&path, false).unwrap();
        w.write(&MetricRow { step: 2, ..row }).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], METRICS_HEADER);
        assert!(!text.contains('\r'));
    }
}
