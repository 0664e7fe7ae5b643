use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One logged optimizer step. `wall_ms` is kept out of `metrics.csv` so that the
/// file is a pure function of the configuration; it goes to `timing.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub val_metric: f64,
    /// Ranks of the low-rank layers joined by `;` (empty for dense runs).
    pub ranks: String,
    pub total_params: usize,
    pub compression_ratio: f64,
    pub wall_ms: f64,
}

impl MetricsRow {
    pub fn rank_list(&self) -> Vec<usize> {
        if self.ranks.is_empty() {
            return Vec::new();
        }
        self.ranks
            .split(';')
            .filter_map(|r| r.parse().ok())
            .collect()
    }
}

fn record(row: &MetricsRow) -> [String; 6] {
    [
        row.step.to_string(),
        row.loss.to_string(),
        row.val_metric.to_string(),
        row.ranks.clone(),
        row.total_params.to_string(),
        row.compression_ratio.to_string(),
    ]
}

pub(crate) fn join_ranks(ranks: &[usize]) -> String {
    ranks
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";")
}

pub const METRICS_HEADER: [&str; 6] = [
    "step",
    "loss",
    "val_metric",
    "ranks",
    "total_params",
    "compression_ratio",
];

/// `(1 − lr_params / baseline_params) · 100`; negative when the factorization is larger.
pub fn compression_ratio(lr_params: usize, baseline_params: usize) -> Result<f64> {
    if baseline_params == 0 {
        return Err(Error::Argument(
            "baseline parameter count must be positive".into(),
        ));
    }
    // exact integer numerator keeps values like 89.75 exact
    let saved = baseline_params as i128 - lr_params as i128;
    Ok((saved * 100) as f64 / baseline_params as f64)
}

/// Streams rows to `metrics.csv` and `timing.csv` in a run directory.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timing: csv::Writer<File>,
    path: PathBuf,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let timing_path = dir.join("timing.csv");
        let mut metrics = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        let mut timing =
            csv::Writer::from_path(&timing_path).map_err(|e| csv_err(&timing_path, e))?;
        metrics
            .write_record(METRICS_HEADER)
            .map_err(|e| csv_err(&path, e))?;
        timing
            .write_record(["step", "wall_ms"])
            .map_err(|e| csv_err(&timing_path, e))?;
        Ok(MetricsWriter {
            metrics,
            timing,
            path,
        })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.metrics
            .write_record(record(row))
            .map_err(|e| csv_err(&self.path, e))?;
        self.timing
            .write_record([row.step.to_string(), row.wall_ms.to_string()])
            .map_err(|e| csv_err(&self.path, e))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.path, e))?;
        self.timing.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads a `metrics.csv` back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| {
            Error::Format(format!(
                "{}: bad {what} in row {}",
                path.display(),
                rows.len() + 1
            ))
        };
        rows.push(MetricsRow {
            step: field(0).parse().map_err(|_| bad("step"))?,
            loss: field(1).parse().map_err(|_| bad("loss"))?,
            val_metric: field(2).parse().map_err(|_| bad("val_metric"))?,
            ranks: field(3).to_string(),
            total_params: field(4).parse().map_err(|_| bad("total_params"))?,
            compression_ratio: field(5).parse().map_err(|_| bad("compression_ratio"))?,
            wall_ms: 0.0,
        });
    }
    Ok(rows)
}

/// Writes `rows` prefixed by a label column, as produced by `compare`.
pub(crate) fn write_joined(
    path: &Path,
    label: &str,
    runs: &[(String, Vec<MetricsRow>)],
) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![label];
    header.extend(METRICS_HEADER);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (name, rows) in runs {
        for row in rows {
            let mut rec = vec![name.clone()];
            rec.extend(record(row));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compression_examples() {
        assert_eq!(compression_ratio(10, 10).unwrap(), 0.0);
        assert_eq!(compression_ratio(1025, 10000).unwrap(), 89.75);
        assert!(compression_ratio(20, 10).unwrap() < 0.0);
        assert!(matches!(compression_ratio(1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let row = MetricsRow {
            step: 3,
            loss: 0.1 + 0.2,
            val_metric: 1e-17,
            ranks: join_ranks(&[4, 2]),
            total_params: 77,
            compression_ratio: -12.5,
            wall_ms: 1.5,
        };
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.write(&row).unwrap();
        w.flush().unwrap();
        let back = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            back,
            vec![MetricsRow {
                wall_ms: 0.0,
                ..row
            }]
        );
        assert_eq!(back[0].rank_list(), vec![4, 2]);
    }
}
