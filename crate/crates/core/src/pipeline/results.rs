use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::LamEpochMetrics;
use crate::error::{Error, Result};

/// One results row, keyed by `(method, budget, d_z, seed)`. Empty cells are
/// metrics that do not apply to the method. Probe columns are normalized by
/// the target variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub budget: usize,
    pub d_z: Option<usize>,
    pub seed: u64,
    pub probe_mse_z: Option<f64>,
    pub probe_mse_h_action: Option<f64>,
    pub probe_mse_h_distractor: Option<f64>,
    pub return_mean: Option<f64>,
    pub return_std: Option<f64>,
    pub norm_score: Option<f64>,
    pub eval_pool_action_mse: Option<f64>,
}

impl ResultRow {
    pub fn new(method: impl Into<String>, budget: usize, d_z: Option<usize>, seed: u64) -> Self {
        Self {
            method: method.into(),
            budget,
            d_z,
            seed,
            probe_mse_z: None,
            probe_mse_h_action: None,
            probe_mse_h_distractor: None,
            return_mean: None,
            return_std: None,
            norm_score: None,
            eval_pool_action_mse: None,
        }
    }
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "method",
    "budget",
    "d_z",
    "seed",
    "probe_mse_z",
    "probe_mse_h_action",
    "probe_mse_h_distractor",
    "return_mean",
    "return_std",
    "norm_score",
    "eval_pool_action_mse",
];

/// Append-only results table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = ResultRow>) {
        self.rows.extend(rows);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn filter<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a ResultRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Seed-averaged value of `field` over rows matching `pred`.
    pub fn mean_of(&self, pred: impl Fn(&ResultRow) -> bool, field: impl Fn(&ResultRow) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.rows.iter().filter(|r| pred(r)).filter_map(field).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(RESULT_COLUMNS)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)
    }

    pub fn from_csv_reader(r: impl std::io::Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().ne(RESULT_COLUMNS.iter().copied()) {
            return Err(Error::Format(format!("unexpected results columns: {:?}", headers.iter().collect::<Vec<_>>())));
        }
        let rows = rd.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }
}

#[derive(Serialize)]
struct MetricsCsvRow {
    epoch: usize,
    lr: f64,
    loss: f64,
    prediction: f64,
    supervision: Option<f64>,
    probe_mse_z: f64,
    probe_mse_h_action: f64,
    probe_mse_h_distractor: f64,
    probe_nmse_z: f64,
    probe_nmse_h_action: f64,
    probe_nmse_h_distractor: f64,
}

pub fn metrics_csv_bytes(metrics: &[LamEpochMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(MetricsCsvRow {
            epoch: m.epoch,
            lr: m.lr,
            loss: m.loss,
            prediction: m.prediction,
            supervision: m.supervision,
            probe_mse_z: m.probe_mse_z,
            probe_mse_h_action: m.probe_mse_h_action,
            probe_mse_h_distractor: m.probe_mse_h_distractor,
            probe_nmse_z: m.probe_nmse_z,
            probe_nmse_h_action: m.probe_nmse_h_action,
            probe_nmse_h_distractor: m.probe_nmse_h_distractor,
        })?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_metrics_csv(path: &Path, metrics: &[LamEpochMetrics]) -> Result<()> {
    write_atomic(path, &metrics_csv_bytes(metrics)?)
}

/// Writes through a sibling temp file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_empty_cells() {
        let mut t = ResultsTable::new();
        let mut r = ResultRow::new("LAOM", 4, Some(256), 1);
        r.probe_mse_z = Some(0.125);
        r.norm_score = Some(0.5);
        t.push(r);
        t.push(ResultRow::new("BC", 4, None, 1));
        let bytes = t.to_csv_bytes().unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("method,budget,d_z,seed,probe_mse_z"));
        assert!(text.contains("BC,4,,1,,,,,,,"));
        let back = ResultsTable::from_csv_reader(bytes.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(ResultsTable::from_csv_reader("a,b\n1,2\n".as_bytes()).is_err());
    }
}
