//! Run logs, sample files and experiment summaries.

use std::collections::BTreeMap;
use std::path::Path;

use agsm_core::agsm::RunRecord;
use serde::{Deserialize, Serialize};

use crate::error::{io, CliError, Result};

pub const RUN_HEADER: &str = "step,pos_loss,neg_loss,delta_norm,pl_entropy,val_alignment";

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Csv { path: path.into(), detail: e.to_string() }
}

/// One row per step; `val_alignment` is empty when no validation ran.
pub fn write_run_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err(path))?;
    w.write_record(RUN_HEADER.split(',')).map_err(csv_err(path))?;
    for r in records {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_run_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<std::result::Result<Vec<RunRecord>, _>>().map_err(csv_err(path))
}

/// Header `condition,x0,x1,...`, one sample per row.
pub fn write_samples_csv(path: &Path, samples: &[(Vec<f64>, usize)]) -> Result<()> {
    let dim = samples.first().map(|s| s.0.len()).unwrap_or(0);
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = std::iter::once("condition".to_string()).chain((0..dim).map(|k| format!("x{k}"))).collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for (x, c) in samples {
        if x.len() != dim {
            return Err(CliError::Csv { path: path.into(), detail: "samples differ in dimension".into() });
        }
        let row: Vec<String> = std::iter::once(c.to_string()).chain(x.iter().map(|v| v.to_string())).collect();
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.get(0) != Some("condition") || header.len() < 2 {
        return Err(CliError::Csv { path: path.into(), detail: "expected header condition,x0,...".into() });
    }
    let bad = |line: usize, what: &str| CliError::Csv { path: path.into(), detail: format!("row {line}: bad {what}") };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let c: usize = rec[0].parse().map_err(|_| bad(i + 1, "condition"))?;
        let x = (1..rec.len())
            .map(|k| rec[k].parse::<f64>().map_err(|_| bad(i + 1, "coordinate")))
            .collect::<Result<Vec<_>>>()?;
        out.push((x, c));
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.into(), source })?;
    std::fs::write(path, text + "\n").map_err(io(path))
}

/// Mean, sample standard deviation and the per-seed values of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl SeedStats {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        SeedStats { mean, std, per_seed: values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Machine-readable outcome of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, SeedStats>,
    pub criteria: Vec<CriterionResult>,
    pub pass: bool,
}

impl Summary {
    pub fn new(experiment: &str, seeds: &[u64]) -> Self {
        Summary { experiment: experiment.into(), seeds: seeds.to_vec(), metrics: BTreeMap::new(), criteria: Vec::new(), pass: true }
    }

    pub fn metric(&mut self, name: impl Into<String>, values: Vec<f64>) -> &SeedStats {
        let name = name.into();
        self.metrics.insert(name.clone(), SeedStats::new(values));
        &self.metrics[&name]
    }

    pub fn criterion(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.pass &= pass;
        self.criteria.push(CriterionResult { name: name.into(), pass, detail: detail.into() });
    }
}
