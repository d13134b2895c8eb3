//! Experiment report assembly and CSV emission.
//!
//! CSV outputs are pure functions of the graded outcomes; provenance
//! (timestamps, backend ids) lives only in the JSON report, so a replayed
//! run reproduces the CSVs byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dependence::{classify, DependenceMatrix, TripletSpec};
use crate::metrics::{format_delta, AccuracyTable, FieldCountPoint};
use crate::prompt::Strategy;

/// Run metadata embedded in every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub generated_unix: u64,
    pub backend_id: String,
    pub rules_version: String,
    /// True when a replayed archive was graded under different rules than
    /// it was recorded with.
    pub rules_mismatch: bool,
    /// Standing assumptions baked into the harness, reported with every run.
    pub assumptions: Vec<String>,
    pub warnings: Vec<String>,
    /// Documents excluded because every request for them failed.
    pub failed_documents: usize,
}

/// One dependence-matrix row flattened for reporting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceRow {
    pub target: String,
    pub predictor_a: String,
    pub predictor_b: String,
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    pub r_squared: Option<f64>,
    pub n: usize,
    pub class: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceSection {
    pub rows: Vec<DependenceRow>,
    pub groups: Vec<Vec<String>>,
    pub skipped: Vec<(TripletSpec, String)>,
}

impl DependenceSection {
    /// `target,predictor1,predictor2,c1,c2,b,r_squared,n,class` rows.
    pub fn to_csv(&self) -> String {
        csv_into_string(|w| {
            w.write_record([
                "target",
                "predictor1",
                "predictor2",
                "c1",
                "c2",
                "b",
                "r_squared",
                "n",
                "class",
            ])?;
            for row in &self.rows {
                w.write_record([
                    row.target.as_str(),
                    row.predictor_a.as_str(),
                    row.predictor_b.as_str(),
                    &format!("{:.6}", row.c1),
                    &format!("{:.6}", row.c2),
                    &format!("{:.6}", row.b),
                    &row.r_squared.map(|r| format!("{r:.6}")).unwrap_or_default(),
                    &row.n.to_string(),
                    row.class.as_deref().unwrap_or(""),
                ])?;
            }
            Ok(())
        })
    }

    pub fn from_matrix(matrix: &DependenceMatrix, groups: Vec<Vec<String>>) -> Self {
        let rows = matrix
            .fits
            .iter()
            .map(|(triplet, fit)| DependenceRow {
                target: triplet.target.clone(),
                predictor_a: triplet.predictor_a.clone(),
                predictor_b: triplet.predictor_b.clone(),
                c1: fit.c1,
                c2: fit.c2,
                b: fit.b,
                r_squared: fit.r_squared,
                n: fit.n,
                class: classify(fit).ok().map(|c| c.as_str().to_string()),
            })
            .collect();
        DependenceSection {
            rows,
            groups,
            skipped: matrix.skipped.clone(),
        }
    }
}

/// Aggregated results of one experiment, recomputable from its archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub model: String,
    pub strategies: Vec<Strategy>,
    pub tables: Vec<AccuracyTable>,
    /// joint minus separate per field, present when both strategies ran.
    #[serde(default)]
    pub deltas: BTreeMap<String, f64>,
    #[serde(default)]
    pub document_delta: Option<f64>,
    pub series: Vec<FieldCountPoint>,
    #[serde(default)]
    pub dependence: Option<DependenceSection>,
    pub provenance: Provenance,
    pub archive_dir: String,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("field-count series absent")]
    SeriesAbsent,
    #[error("failed to write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn csv_into_string<F>(write_rows: F) -> String
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut writer = csv::Writer::from_writer(Vec::new());
    write_rows(&mut writer).expect("csv into memory");
    let bytes = writer.into_inner().expect("csv into memory");
    String::from_utf8(bytes).expect("csv is utf8")
}

impl ExperimentReport {
    pub fn table(&self, strategy: Strategy) -> Option<&AccuracyTable> {
        self.tables.iter().find(|t| t.strategy == strategy)
    }

    /// Accuracy rows: `dataset,model,strategy,field,correct,n,accuracy,delta`
    /// with a `_document` row per strategy. Deltas appear on joint rows.
    pub fn accuracy_csv(&self) -> String {
        csv_into_string(|w| {
            w.write_record([
                "dataset", "model", "strategy", "field", "correct", "n", "accuracy", "delta",
            ])?;
            for table in &self.tables {
                let strategy = table.strategy.to_string();
                for (field, ratio) in &table.per_field {
                    let delta = if table.strategy == Strategy::Joint {
                        self.deltas.get(field).map(|d| format_delta(*d))
                    } else {
                        None
                    };
                    w.write_record([
                        self.dataset.as_str(),
                        self.model.as_str(),
                        strategy.as_str(),
                        field.as_str(),
                        &ratio.correct.to_string(),
                        &ratio.total.to_string(),
                        &format!("{:.6}", ratio.value()),
                        delta.as_deref().unwrap_or(""),
                    ])?;
                }
                let doc_delta = if table.strategy == Strategy::Joint {
                    self.document_delta.map(format_delta)
                } else {
                    None
                };
                w.write_record([
                    self.dataset.as_str(),
                    self.model.as_str(),
                    strategy.as_str(),
                    "_document",
                    &table.document_level.correct.to_string(),
                    &table.document_level.total.to_string(),
                    &format!("{:.6}", table.document_level.value()),
                    doc_delta.as_deref().unwrap_or(""),
                ])?;
            }
            Ok(())
        })
    }

    /// Plot rows for the field-count series:
    /// `field_count,strategy,accuracy,n_docs`.
    pub fn plot_csv(&self) -> Result<String, ReportError> {
        if self.series.is_empty() {
            return Err(ReportError::SeriesAbsent);
        }
        Ok(csv_into_string(|w| {
            w.write_record(["field_count", "strategy", "accuracy", "n_docs"])?;
            for point in &self.series {
                w.write_record([
                    &point.field_count.to_string(),
                    &point.strategy.to_string(),
                    &format!("{:.6}", point.accuracy),
                    &point.n_docs.to_string(),
                ])?;
            }
            Ok(())
        }))
    }

    /// Dependence rows:
    /// `target,predictor1,predictor2,c1,c2,b,r_squared,n,class`.
    pub fn dependence_csv(&self) -> Option<String> {
        self.dependence.as_ref().map(DependenceSection::to_csv)
    }

    /// Writes `report.json`, `accuracy.csv`, and when available `plot.csv`
    /// and `dependence.csv` under `dir`; returns the written paths.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
        let write = |path: PathBuf, contents: String| -> Result<PathBuf, ReportError> {
            fs::write(&path, contents).map_err(|source| ReportError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(path)
        };
        let mut written = Vec::new();
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        written.push(write(dir.join("report.json"), json)?);
        written.push(write(dir.join("accuracy.csv"), self.accuracy_csv())?);
        if let Ok(plot) = self.plot_csv() {
            written.push(write(dir.join("plot.csv"), plot)?);
        }
        if let Some(dep) = self.dependence_csv() {
            written.push(write(dir.join("dependence.csv"), dep)?);
        }
        Ok(written)
    }
}
