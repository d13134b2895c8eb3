//! Aggregation of match verdicts into document- and field-level accuracy,
//! strategy deltas, and the field-count scaling series.
//!
//! Aggregation is a pure fold over immutable outcomes: permuting the input
//! never changes a result. Per-field denominators count only documents that
//! contain the field; document-level accuracy is a strict conjunction over
//! the queried fields.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetBundle;
use crate::parse::MatchVerdict;
use crate::prompt::Strategy;

/// Grading result for one (document, field, strategy) triple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub doc_id: String,
    pub field_id: String,
    pub strategy: Strategy,
    /// Archive key of the raw response this verdict was graded from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_key: Option<String>,
    pub verdict: MatchVerdict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub correct: usize,
    pub total: usize,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Accuracy summary for one strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub strategy: Strategy,
    pub per_field: BTreeMap<String, Ratio>,
    pub document_level: Ratio,
    /// joint minus separate per field; populated once both strategies are
    /// known (see [`delta_table`]).
    #[serde(default)]
    pub deltas: BTreeMap<String, f64>,
}

/// Which fields define document-level correctness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryScope {
    /// A fixed field list; documents lacking any of them are excluded.
    Fields(Vec<String>),
    /// Each document's own queried field set (all outcomes present for it).
    PerDocument,
}

/// One point of the field-count scaling series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldCountPoint {
    pub field_count: usize,
    pub strategy: Strategy,
    pub accuracy: f64,
    pub correct: usize,
    pub n_docs: usize,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no outcomes for strategy {0}")]
    NoOutcomes(Strategy),
    #[error("duplicate outcome for document `{doc}`, field `{field}`")]
    DuplicateOutcome { doc: String, field: String },
    #[error("empty document set")]
    EmptyDocumentSet,
    #[error("tables cover different fields or documents: {0}")]
    TableMismatch(String),
}

fn strategy_outcomes(
    outcomes: &[ExtractionOutcome],
    strategy: Strategy,
) -> Result<Vec<&ExtractionOutcome>, MetricsError> {
    let filtered: Vec<&ExtractionOutcome> =
        outcomes.iter().filter(|o| o.strategy == strategy).collect();
    let mut seen = BTreeSet::new();
    for outcome in &filtered {
        if !seen.insert((outcome.doc_id.as_str(), outcome.field_id.as_str())) {
            return Err(MetricsError::DuplicateOutcome {
                doc: outcome.doc_id.clone(),
                field: outcome.field_id.clone(),
            });
        }
    }
    Ok(filtered)
}

/// Per-field accuracy: matched count over documents containing the field.
/// A field with an empty denominator (present in no graded document) has no
/// outcomes and therefore no row.
pub fn field_level_accuracy(
    outcomes: &[ExtractionOutcome],
    strategy: Strategy,
) -> Result<BTreeMap<String, Ratio>, MetricsError> {
    let filtered = strategy_outcomes(outcomes, strategy)?;
    if filtered.is_empty() {
        return Err(MetricsError::NoOutcomes(strategy));
    }
    let mut map: BTreeMap<String, Ratio> = BTreeMap::new();
    for outcome in filtered {
        let entry = map.entry(outcome.field_id.clone()).or_insert(Ratio {
            correct: 0,
            total: 0,
        });
        entry.total += 1;
        if outcome.verdict.matched {
            entry.correct += 1;
        }
    }
    Ok(map)
}

/// Document-level accuracy: a document counts correct iff every queried
/// field matched. Under a fixed field list, documents lacking outcomes for
/// any listed field are excluded from the denominator.
pub fn document_level_accuracy(
    outcomes: &[ExtractionOutcome],
    strategy: Strategy,
    scope: &QueryScope,
) -> Result<Ratio, MetricsError> {
    let filtered = strategy_outcomes(outcomes, strategy)?;
    let mut by_doc: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    for outcome in &filtered {
        by_doc
            .entry(outcome.doc_id.as_str())
            .or_default()
            .insert(outcome.field_id.as_str(), outcome.verdict.matched);
    }
    let mut ratio = Ratio {
        correct: 0,
        total: 0,
    };
    for fields in by_doc.values() {
        let correct = match scope {
            QueryScope::Fields(queried) => {
                let covered: Vec<Option<&bool>> =
                    queried.iter().map(|f| fields.get(f.as_str())).collect();
                if covered.iter().any(Option::is_none) {
                    continue; // excluded from the denominator
                }
                covered.iter().all(|m| *m.unwrap())
            }
            QueryScope::PerDocument => fields.values().all(|m| *m),
        };
        ratio.total += 1;
        if correct {
            ratio.correct += 1;
        }
    }
    if ratio.total == 0 {
        return Err(MetricsError::EmptyDocumentSet);
    }
    Ok(ratio)
}

/// Builds the full per-strategy table.
pub fn accuracy_table(
    outcomes: &[ExtractionOutcome],
    strategy: Strategy,
    scope: &QueryScope,
) -> Result<AccuracyTable, MetricsError> {
    Ok(AccuracyTable {
        strategy,
        per_field: field_level_accuracy(outcomes, strategy)?,
        document_level: document_level_accuracy(outcomes, strategy, scope)?,
        deltas: BTreeMap::new(),
    })
}

/// Buckets documents by labeled field count (2..=6) and reports per-bucket
/// document-level accuracy over each document's own full labeled field set.
/// Documents without outcomes for their whole labeled set are skipped;
/// empty buckets are omitted.
pub fn accuracy_by_field_count(
    bundle: &DatasetBundle,
    outcomes: &[ExtractionOutcome],
    strategy: Strategy,
) -> Vec<FieldCountPoint> {
    let mut by_doc: BTreeMap<&str, BTreeMap<&str, bool>> = BTreeMap::new();
    for outcome in outcomes.iter().filter(|o| o.strategy == strategy) {
        by_doc
            .entry(outcome.doc_id.as_str())
            .or_default()
            .insert(outcome.field_id.as_str(), outcome.verdict.matched);
    }
    let mut buckets: BTreeMap<usize, Ratio> = BTreeMap::new();
    for doc in &bundle.documents {
        let k = doc.labeled_field_count();
        if !(2..=6).contains(&k) {
            continue;
        }
        let Some(graded) = by_doc.get(doc.id.as_str()) else {
            continue;
        };
        let verdicts: Vec<Option<&bool>> =
            doc.truth.keys().map(|f| graded.get(f.as_str())).collect();
        if verdicts.iter().any(Option::is_none) {
            continue;
        }
        let entry = buckets.entry(k).or_insert(Ratio {
            correct: 0,
            total: 0,
        });
        entry.total += 1;
        if verdicts.iter().all(|m| *m.unwrap()) {
            entry.correct += 1;
        }
    }
    buckets
        .into_iter()
        .map(|(k, ratio)| FieldCountPoint {
            field_count: k,
            strategy,
            accuracy: ratio.value(),
            correct: ratio.correct,
            n_docs: ratio.total,
        })
        .collect()
}

/// Signed per-field deltas, joint minus separate. Both tables must cover
/// the same fields with the same denominators.
pub fn delta_table(
    separate: &AccuracyTable,
    joint: &AccuracyTable,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    let sep_fields: Vec<&String> = separate.per_field.keys().collect();
    let joint_fields: Vec<&String> = joint.per_field.keys().collect();
    if sep_fields != joint_fields {
        return Err(MetricsError::TableMismatch(format!(
            "field sets differ: separate={sep_fields:?} joint={joint_fields:?}"
        )));
    }
    for (field, sep_ratio) in &separate.per_field {
        let joint_ratio = &joint.per_field[field];
        if sep_ratio.total != joint_ratio.total {
            return Err(MetricsError::TableMismatch(format!(
                "field `{field}` denominators differ: {} vs {}",
                sep_ratio.total, joint_ratio.total
            )));
        }
    }
    if separate.document_level.total != joint.document_level.total {
        return Err(MetricsError::TableMismatch(format!(
            "document denominators differ: {} vs {}",
            separate.document_level.total, joint.document_level.total
        )));
    }
    Ok(separate
        .per_field
        .iter()
        .map(|(field, sep_ratio)| {
            let delta = joint.per_field[field].value() - sep_ratio.value();
            (field.clone(), delta)
        })
        .collect())
}

/// Rounds a delta for display the way result tables print them: two
/// decimals, explicit sign, plain `0.00` for zero.
pub fn format_delta(delta: f64) -> String {
    let rounded = (delta * 100.0).round() / 100.0;
    if rounded == 0.0 {
        "0.00".to_string()
    } else {
        format!("{rounded:+.2}")
    }
}
