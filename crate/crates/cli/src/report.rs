use std::path::Path;

use rankcert::calibrate::{CoverageReport, SCHEMA_VERSION};
use rankcert::harness::{read_json, write_atomic, write_json};
use rankcert::{Error, Result, ScoreValue};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::args::{Cli, ReportArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub label: String,
    pub score_kind: String,
    pub n_calibration: usize,
    pub n_test: usize,
    pub reliability_level: String,
    pub reliability: f64,
    pub m_star: Vec<ScoreValue>,
    pub coverage: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityMatrix {
    pub schema_version: String,
    pub alphas: Vec<f64>,
    pub rows: Vec<MatrixRow>,
}

impl ReliabilityMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,score_kind,n_calibration,n_test,reliability_level,reliability");
        for a in &self.alphas {
            out.push_str(&format!(",m_star@{a},coverage@{a}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}",
                csv_field(&r.label),
                r.score_kind,
                r.n_calibration,
                r.n_test,
                r.reliability_level,
                r.reliability
            ));
            for (m, c) in r.m_star.iter().zip(&r.coverage) {
                out.push_str(&format!(",{m},{c}"));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn load_report(path: &Path) -> Result<CoverageReport> {
    let raw: Value = read_json(path)?;
    match raw.get("schema_version").and_then(Value::as_str) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(Error::Schema(format!(
                "{} has schema version {other}, expected {SCHEMA_VERSION}",
                path.display()
            )))
        }
        None => return Err(Error::Schema(format!("{} has no schema_version", path.display()))),
    }
    serde_json::from_value(raw).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

pub fn merge(reports: &[(String, CoverageReport)]) -> Result<ReliabilityMatrix> {
    let alphas: Vec<f64> = reports[0].1.per_alpha.iter().map(|r| r.alpha).collect();
    let mut rows = Vec::with_capacity(reports.len());
    for (label, rep) in reports {
        let these: Vec<f64> = rep.per_alpha.iter().map(|r| r.alpha).collect();
        if these != alphas {
            return Err(Error::Schema(format!(
                "{label} reports alphas {these:?}, the first input reports {alphas:?}"
            )));
        }
        rows.push(MatrixRow {
            label: label.clone(),
            score_kind: rep.score_kind.to_string(),
            n_calibration: rep.n_calibration,
            n_test: rep.n_test,
            reliability_level: format!("{}/{}", rep.reliability_level.numerator, rep.reliability_level.denominator),
            reliability: rep.reliability_level.value(),
            m_star: rep.per_alpha.iter().map(|r| r.m_star).collect(),
            coverage: rep.per_alpha.iter().map(|r| r.coverage).collect(),
        });
    }
    Ok(ReliabilityMatrix {
        schema_version: SCHEMA_VERSION.into(),
        alphas,
        rows,
    })
}

pub fn run(cli: &Cli, args: &ReportArgs) -> Result<()> {
    let labels: Vec<String> = match &args.labels {
        Some(l) if l.len() != args.inputs.len() => {
            return Err(Error::Input(format!(
                "{} labels given for {} inputs",
                l.len(),
                args.inputs.len()
            )))
        }
        Some(l) => l.clone(),
        None => args.inputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let reports = labels
        .into_iter()
        .zip(&args.inputs)
        .map(|(label, path)| load_report(path).map(|r| (label, r)))
        .collect::<Result<Vec<_>>>()?;
    let matrix = merge(&reports)?;
    write_json(&cli.out.join("comparison.json"), &matrix)?;
    let csv = matrix.to_csv();
    write_atomic(&cli.out.join("comparison.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}
