//! Deterministic scripted mock backend.
//!
//! Responses come either from explicit canned entries or from an oracle over
//! a loaded bundle whose responses encode gold values exactly; with
//! `error_rate = 0` the mock is a perfect oracle. A seeded corruption layer
//! flips individual field values to simulate model failure modes, keyed by
//! `(seed, doc, field)` so draws are independent of request order and of the
//! strategy issuing them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, ChatRequest, ChatResponse};
use crate::dataset::{DatasetBundle, FieldKind};
use crate::prompt::Strategy;

/// How a corrupted field value is rewritten.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionRule {
    /// Replace the value with another numeric field's value from the same
    /// document (the confusion mode of separate extraction). Falls back to
    /// `Garble` when the document has no numeric sibling.
    SwapWithSiblingNumeric,
    /// Keep only the first half of the value.
    Truncate,
    /// Rewrite the value so it can never match the original.
    Garble,
}

/// One canned response keyed by document, strategy and sorted field set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    pub doc_id: String,
    pub strategy: Strategy,
    pub field_ids: Vec<String>,
    pub text: String,
}

/// On-disk mock description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub entries: Vec<MockEntry>,
    /// Bundle whose gold values back oracle responses; defaults to the
    /// experiment dataset when absent.
    #[serde(default)]
    pub oracle_bundle: Option<PathBuf>,
    #[serde(default)]
    pub error_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_rule")]
    pub corruption_rule: CorruptionRule,
    /// Strategies whose responses are corrupted; both by default.
    #[serde(default = "default_strategies")]
    pub corrupt_strategies: Vec<Strategy>,
}

fn default_rule() -> CorruptionRule {
    CorruptionRule::SwapWithSiblingNumeric
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Separate, Strategy::Joint]
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            entries: Vec::new(),
            oracle_bundle: None,
            error_rate: 0.0,
            seed: 0,
            corruption_rule: default_rule(),
            corrupt_strategies: default_strategies(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct MockKey {
    doc_id: String,
    strategy: Strategy,
    field_ids: Vec<String>,
}

impl MockKey {
    fn new(doc_id: &str, strategy: Strategy, field_ids: &[String]) -> Self {
        let mut field_ids = field_ids.to_vec();
        field_ids.sort();
        MockKey {
            doc_id: doc_id.to_string(),
            strategy,
            field_ids,
        }
    }
}

pub struct MockBackend {
    entries: BTreeMap<MockKey, String>,
    oracle: Option<Arc<DatasetBundle>>,
    error_rate: f64,
    seed: u64,
    rule: CorruptionRule,
    corrupt_strategies: BTreeSet<Strategy>,
    id: String,
}

impl MockBackend {
    /// Oracle over `bundle` with no corruption: every response encodes the
    /// document's gold values exactly.
    pub fn perfect_oracle(bundle: Arc<DatasetBundle>) -> Self {
        Self::corrupted_oracle(
            bundle,
            0.0,
            0,
            CorruptionRule::SwapWithSiblingNumeric,
            &[Strategy::Separate, Strategy::Joint],
        )
    }

    /// Oracle over `bundle` that corrupts each requested field independently
    /// with probability `error_rate`, for requests of the given strategies.
    pub fn corrupted_oracle(
        bundle: Arc<DatasetBundle>,
        error_rate: f64,
        seed: u64,
        rule: CorruptionRule,
        strategies: &[Strategy],
    ) -> Self {
        MockBackend {
            entries: BTreeMap::new(),
            oracle: Some(bundle),
            error_rate,
            seed,
            rule,
            corrupt_strategies: strategies.iter().copied().collect(),
            id: "mock".to_string(),
        }
    }

    /// Purely scripted mock: unknown requests fail with a missing-entry
    /// error. Corruption (when configured) rewrites whole entry texts;
    /// sibling swaps need an oracle bundle and degrade to `Garble`.
    pub fn scripted(entries: Vec<MockEntry>) -> Self {
        let mut map = BTreeMap::new();
        for entry in entries {
            map.insert(
                MockKey::new(&entry.doc_id, entry.strategy, &entry.field_ids),
                entry.text,
            );
        }
        MockBackend {
            entries: map,
            oracle: None,
            error_rate: 0.0,
            seed: 0,
            rule: CorruptionRule::Garble,
            corrupt_strategies: BTreeSet::new(),
            id: "mock".to_string(),
        }
    }

    /// Builds a backend from an on-disk script; `oracle_bundle` paths are
    /// resolved relative to `base_dir`.
    pub fn from_script(script: MockScript, base_dir: &Path) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&script.error_rate) {
            return Err(BackendError::Config(format!(
                "error_rate must be in [0, 1], got {}",
                script.error_rate
            )));
        }
        let oracle = match &script.oracle_bundle {
            Some(path) => {
                let resolved = if path.is_absolute() {
                    path.clone()
                } else {
                    base_dir.join(path)
                };
                let bundle = crate::dataset::load_canonical(&resolved)
                    .map_err(|e| BackendError::Config(format!("oracle bundle: {e}")))?;
                Some(Arc::new(bundle))
            }
            None => None,
        };
        let mut backend = match oracle {
            Some(bundle) => MockBackend::corrupted_oracle(
                bundle,
                script.error_rate,
                script.seed,
                script.corruption_rule,
                &script.corrupt_strategies,
            ),
            None => {
                let mut b = MockBackend::scripted(script.entries.clone());
                b.error_rate = script.error_rate;
                b.seed = script.seed;
                b.rule = script.corruption_rule;
                b.corrupt_strategies = script.corrupt_strategies.iter().copied().collect();
                b
            }
        };
        if backend.oracle.is_some() {
            for entry in script.entries {
                backend.entries.insert(
                    MockKey::new(&entry.doc_id, entry.strategy, &entry.field_ids),
                    entry.text,
                );
            }
        }
        Ok(backend)
    }

    pub fn with_oracle_bundle(mut self, bundle: Arc<DatasetBundle>) -> Self {
        self.oracle = Some(bundle);
        self
    }

    fn field_rng(&self, doc_id: &str, field_id: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(fnv1a64(&[
            &self.seed.to_le_bytes(),
            doc_id.as_bytes(),
            &[0xff],
            field_id.as_bytes(),
        ]))
    }

    /// Gold value for a field, possibly corrupted. The Bernoulli draw and
    /// the sibling choice come from a `(seed, doc, field)`-derived stream,
    /// so two strategies querying the same field see the same outcome.
    fn field_value(&self, bundle: &DatasetBundle, doc_id: &str, field_id: &str) -> Option<String> {
        let doc = bundle.document(doc_id)?;
        let gold = doc.truth.get(field_id)?.clone();
        Some(gold)
    }

    fn corrupt(&self, bundle: &DatasetBundle, doc_id: &str, field_id: &str, value: &str) -> String {
        match self.rule {
            CorruptionRule::SwapWithSiblingNumeric => {
                let siblings: Vec<&String> = bundle
                    .document(doc_id)
                    .map(|doc| {
                        doc.truth
                            .iter()
                            .filter(|(fid, _)| {
                                fid.as_str() != field_id
                                    && bundle
                                        .field(fid)
                                        .is_some_and(|f| f.kind == FieldKind::Numeric)
                            })
                            .map(|(_, v)| v)
                            .collect()
                    })
                    .unwrap_or_default();
                if siblings.is_empty() {
                    return garble(value);
                }
                let mut rng = self.field_rng(doc_id, field_id);
                let _bernoulli: f64 = rng.gen();
                siblings[rng.gen_range(0..siblings.len())].clone()
            }
            CorruptionRule::Truncate => {
                let keep = value.chars().count().div_ceil(2);
                value.chars().take(keep).collect()
            }
            CorruptionRule::Garble => garble(value),
        }
    }

    fn should_corrupt(&self, strategy: Strategy, doc_id: &str, field_id: &str) -> bool {
        if self.error_rate <= 0.0 || !self.corrupt_strategies.contains(&strategy) {
            return false;
        }
        let mut rng = self.field_rng(doc_id, field_id);
        rng.gen::<f64>() < self.error_rate
    }

    fn oracle_response(
        &self,
        bundle: &DatasetBundle,
        request: &ChatRequest,
    ) -> Result<String, BackendError> {
        let fields = &request.prompt.field_ids;
        let doc_id = &request.doc_id;
        if bundle.document(doc_id).is_none() {
            return Err(BackendError::MissingMockEntry {
                doc_id: doc_id.clone(),
                strategy: request.strategy,
                fields: fields.join(","),
            });
        }
        let mut resolved: Vec<(String, Option<String>)> = Vec::new();
        for fid in fields {
            let value = self.field_value(bundle, doc_id, fid).map(|gold| {
                if self.should_corrupt(request.strategy, doc_id, fid) {
                    self.corrupt(bundle, doc_id, fid, &gold)
                } else {
                    gold
                }
            });
            resolved.push((fid.clone(), value));
        }
        if fields.len() == 1 {
            let (fid, value) = &resolved[0];
            Ok(match value {
                Some(v) => format!("{fid}: {v}"),
                None => format!("I cannot determine the {fid}."),
            })
        } else {
            let body: Vec<String> = resolved
                .iter()
                .filter_map(|(fid, value)| {
                    value.as_ref().map(|v| {
                        format!(
                            "{}: {}",
                            serde_json::to_string(fid).expect("json"),
                            serde_json::to_string(v).expect("json")
                        )
                    })
                })
                .collect();
            Ok(format!("{{{}}}", body.join(", ")))
        }
    }
}

/// Rewrites a value so neither exact, digit-string nor normalized matching
/// can accept it: reverse the characters and append `0?`, which always
/// extends the digit string.
fn garble(value: &str) -> String {
    let mut out: String = value.chars().rev().collect();
    out.push_str("0?");
    out
}

fn fnv1a64(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for byte in *part {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let key = MockKey::new(&request.doc_id, request.strategy, &request.prompt.field_ids);
        let text = if let Some(entry) = self.entries.get(&key) {
            let mut text = entry.clone();
            if self.should_corrupt(request.strategy, &request.doc_id, "__entry__") {
                text = match self.rule {
                    CorruptionRule::Truncate => {
                        let keep = text.chars().count().div_ceil(2);
                        text.chars().take(keep).collect()
                    }
                    _ => garble(&text),
                };
            }
            text
        } else if let Some(bundle) = &self.oracle {
            self.oracle_response(bundle, request)?
        } else {
            return Err(BackendError::MissingMockEntry {
                doc_id: request.doc_id.clone(),
                strategy: request.strategy,
                fields: request.prompt.field_ids.join(","),
            });
        };
        Ok(ChatResponse {
            text,
            latency: Duration::ZERO,
            backend_id: self.id.clone(),
            attempt_count: 1,
        })
    }
}
