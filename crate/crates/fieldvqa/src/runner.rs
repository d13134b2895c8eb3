//! End-to-end experiment orchestration: prompt building, dispatch,
//! archiving, grading, and report assembly.
//!
//! Every raw response is archived before any parsing. Grading always runs
//! from archive lines, so a replay of the archive reproduces the original
//! report (and its CSVs) byte-for-byte without backend traffic.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    send_batch, Backend, BackendError, ChatRequest, HttpBackend, MockBackend, MockScript,
    RetryPolicy,
};
use crate::dataset::{load_canonical, DatasetBundle, DatasetError, FieldSpec};
use crate::dependence::{dependence_matrix, recommend_groups, DependenceError};
use crate::metrics::{
    accuracy_by_field_count, accuracy_table, delta_table, ExtractionOutcome, MetricsError,
    QueryScope,
};
use crate::parse::{
    parse_joint_response, parse_separate_response, values_match, MatchVerdict, RULES_VERSION,
};
use crate::prompt::{
    attach_few_shot, build_joint_prompt, build_separate_prompts, Exemplar, OutputInstruction,
    PromptError, PromptPlan, Strategy,
};
use crate::report::{DependenceSection, ExperimentReport, Provenance, ReportError};

/// Which fields an experiment queries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldSelection {
    /// Each document is queried over its own labeled field set.
    Auto,
    /// A fixed list; documents lacking any listed field are excluded.
    List(Vec<String>),
}

impl Serialize for FieldSelection {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            FieldSelection::Auto => serializer.serialize_str("auto"),
            FieldSelection::List(fields) => fields.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for FieldSelection {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let value = serde_json::Value::deserialize(deserializer)?;
        match value {
            serde_json::Value::String(s) if s == "auto" => Ok(FieldSelection::Auto),
            serde_json::Value::Array(items) => {
                let fields: Result<Vec<String>, _> = items
                    .into_iter()
                    .map(|v| {
                        v.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| D::Error::custom("field ids must be strings"))
                    })
                    .collect();
                Ok(FieldSelection::List(fields?))
            }
            other => Err(D::Error::custom(format!(
                "fields must be \"auto\" or a list of ids, got {other}"
            ))),
        }
    }
}

/// Backend selection mirrored from the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock {
        /// Path to an on-disk [`MockScript`]; when absent the mock settings
        /// below apply against the experiment dataset as oracle.
        #[serde(default)]
        script: Option<PathBuf>,
        #[serde(default, flatten)]
        inline: MockScript,
    },
    Http {
        base_url: String,
        #[serde(default)]
        max_retries: Option<u32>,
    },
}

fn default_parallelism() -> usize {
    1
}

fn default_max_tokens() -> u32 {
    256
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_true() -> bool {
    true
}

fn default_threshold() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Canonical dataset file.
    pub dataset: PathBuf,
    pub model: String,
    pub backend: BackendConfig,
    pub strategies: Vec<Strategy>,
    pub fields: FieldSelection,
    #[serde(default)]
    pub shots: usize,
    /// Exemplar source for k-shot runs; defaults to the run dataset.
    #[serde(default)]
    pub exemplar_dataset: Option<PathBuf>,
    /// Document noun for prompts; defaults from the dataset name.
    #[serde(default)]
    pub doc_kind_phrase: Option<String>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    pub output_dir: PathBuf,
    /// Append the structured-output instruction to joint prompts.
    #[serde(default = "default_true")]
    pub joint_output_instruction: bool,
    #[serde(default)]
    pub analyze_dependence: bool,
    #[serde(default = "default_threshold")]
    pub dependence_threshold: f64,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| {
            RunnerError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| RunnerError::Config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.strategies.is_empty() {
            return Err(RunnerError::Config(
                "at least one strategy is required".to_string(),
            ));
        }
        if self.parallelism == 0 {
            return Err(RunnerError::Config("parallelism must be >= 1".to_string()));
        }
        let unique: BTreeSet<Strategy> = self.strategies.iter().copied().collect();
        if unique.len() != self.strategies.len() {
            return Err(RunnerError::Config(
                "strategies must not repeat".to_string(),
            ));
        }
        if let FieldSelection::List(fields) = &self.fields {
            if fields.is_empty() {
                return Err(RunnerError::Config("field list is empty".to_string()));
            }
            if fields.len() < 2 && self.strategies.contains(&Strategy::Joint) {
                return Err(RunnerError::Config(
                    "joint strategy needs at least 2 fields".to_string(),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.dependence_threshold) {
            return Err(RunnerError::Config(
                "dependence_threshold must be in [0, 1]".to_string(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dependence(#[from] DependenceError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no documents match the requested field scope")]
    EmptyScope,
    #[error("archive is missing the response for doc `{doc}`, strategy {strategy}")]
    MissingArchivedResponse { doc: String, strategy: Strategy },
    #[error("archive metadata: {0}")]
    ArchiveMeta(String),
}

impl RunnerError {
    /// Process exit code class: 1 config, 2 backend, 3 data.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) | RunnerError::Prompt(_) => 1,
            RunnerError::Backend(_) => 2,
            _ => 3,
        }
    }
}

/// One request the experiment will issue (or expects in the archive).
#[derive(Debug, Clone)]
struct PlannedQuery {
    doc_index: usize,
    strategy: Strategy,
    /// Fields covered by this request (one for separate, all for joint).
    field_ids: Vec<String>,
}

/// One archived raw response.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveLine {
    pub doc_id: String,
    pub strategy: Strategy,
    pub field_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub backend_id: String,
    pub attempt_count: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub rules_version: String,
    pub dataset: String,
    pub model: String,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub shots: usize,
}

const ASSUMPTIONS: &[&str] = &[
    "decoding defaults: temperature 0 and a fixed max_tokens cap; live providers otherwise use their own defaults",
    "grading is mechanical (exact / digit-string / normalized equality); a human grader may accept equivalences these rules reject",
    "joint prompts append a structured-output instruction by default; disable with joint_output_instruction=false",
    "few-shot exemplars are the first k eligible documents in id order, never including the query document",
];

/// Builds the per-document query plan and the set of documents in scope.
fn plan_queries(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
) -> Result<(Vec<PlannedQuery>, Vec<String>, usize), RunnerError> {
    let joint_requested = config.strategies.contains(&Strategy::Joint);
    let mut queries = Vec::new();
    let mut skipped = 0usize;
    let mut doc_fields: Vec<(usize, Vec<String>)> = Vec::new();
    match &config.fields {
        FieldSelection::Auto => {
            for (idx, doc) in bundle.documents.iter().enumerate() {
                let fields: Vec<String> = doc.truth.keys().cloned().collect();
                if fields.is_empty() || (joint_requested && fields.len() < 2) {
                    skipped += 1;
                    continue;
                }
                doc_fields.push((idx, fields));
            }
        }
        FieldSelection::List(fields) => {
            for field in fields {
                if bundle.field(field).is_none() {
                    return Err(RunnerError::Config(format!(
                        "field `{field}` is not declared in dataset `{}`",
                        bundle.name
                    )));
                }
            }
            for (idx, doc) in bundle.documents.iter().enumerate() {
                if fields.iter().all(|f| doc.truth.contains_key(f)) {
                    doc_fields.push((idx, fields.clone()));
                } else {
                    skipped += 1;
                }
            }
        }
    }
    if doc_fields.is_empty() {
        return Err(RunnerError::EmptyScope);
    }
    let scope_warnings = if skipped > 0 {
        vec![format!(
            "{skipped} document(s) outside the field scope were excluded"
        )]
    } else {
        Vec::new()
    };
    for strategy in &config.strategies {
        for (doc_index, fields) in &doc_fields {
            match strategy {
                Strategy::Separate => {
                    for field in fields {
                        queries.push(PlannedQuery {
                            doc_index: *doc_index,
                            strategy: Strategy::Separate,
                            field_ids: vec![field.clone()],
                        });
                    }
                }
                Strategy::Joint => queries.push(PlannedQuery {
                    doc_index: *doc_index,
                    strategy: Strategy::Joint,
                    field_ids: fields.clone(),
                }),
            }
        }
    }
    Ok((queries, scope_warnings, skipped))
}

fn doc_kind_phrase(bundle: &DatasetBundle, config: &ExperimentConfig) -> String {
    if let Some(phrase) = &config.doc_kind_phrase {
        return phrase.clone();
    }
    let name = bundle.name.to_lowercase();
    if name.contains("cord") || name.contains("sroie") || name.contains("receipt") {
        "receipt".to_string()
    } else {
        "document".to_string()
    }
}

fn field_specs(bundle: &DatasetBundle, ids: &[String]) -> Result<Vec<FieldSpec>, RunnerError> {
    ids.iter()
        .map(|id| {
            bundle
                .field(id)
                .cloned()
                .ok_or_else(|| RunnerError::Config(format!("unknown field `{id}`")))
        })
        .collect()
}

/// First `k` documents (stable id order) covering `field_ids`, excluding the
/// query document.
fn select_exemplars(
    pool: &DatasetBundle,
    field_ids: &[String],
    query_doc: &str,
    k: usize,
) -> Result<Vec<Exemplar>, RunnerError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<&crate::dataset::DocumentRecord> = pool
        .documents
        .iter()
        .filter(|d| d.id != query_doc)
        .filter(|d| field_ids.iter().all(|f| d.truth.contains_key(f)))
        .collect();
    candidates.sort_by(|a, b| a.id.cmp(&b.id));
    if candidates.len() < k {
        return Err(RunnerError::Config(format!(
            "only {} exemplar document(s) cover fields {:?}, need {k}",
            candidates.len(),
            field_ids
        )));
    }
    Ok(candidates[..k]
        .iter()
        .map(|d| Exemplar {
            image: d.image.clone(),
            values: d.truth.clone(),
        })
        .collect())
}

fn build_request(
    bundle: &DatasetBundle,
    exemplar_pool: &DatasetBundle,
    config: &ExperimentConfig,
    query: &PlannedQuery,
    phrase: &str,
) -> Result<ChatRequest, RunnerError> {
    let doc = &bundle.documents[query.doc_index];
    let fields = field_specs(bundle, &query.field_ids)?;
    let prompt = match query.strategy {
        Strategy::Separate => {
            let plan = PromptPlan::separate(phrase);
            build_separate_prompts(&fields, doc, &plan)?
                .into_iter()
                .next()
                .expect("one prompt per field")
        }
        Strategy::Joint => {
            let mut plan = PromptPlan::joint(phrase);
            if !config.joint_output_instruction {
                plan.output_instruction = OutputInstruction::None;
            }
            build_joint_prompt(&fields, doc, &plan)?
        }
    };
    let prompt = if config.shots > 0 {
        let exemplars = select_exemplars(exemplar_pool, &query.field_ids, &doc.id, config.shots)?;
        attach_few_shot(&prompt, &exemplars, config.shots, true)?
    } else {
        prompt
    };
    let mut request = ChatRequest::new(&config.model, prompt, &doc.id, query.strategy);
    request.temperature = config.temperature;
    request.max_tokens = config.max_tokens;
    request.timeout = Duration::from_secs(config.timeout_secs);
    Ok(request)
}

fn build_backend(
    config: &ExperimentConfig,
    bundle: &Arc<DatasetBundle>,
    config_dir: &Path,
) -> Result<Box<dyn Backend>, RunnerError> {
    match &config.backend {
        BackendConfig::Mock { script, inline } => {
            let script = match script {
                Some(path) => {
                    let resolved = if path.is_absolute() {
                        path.clone()
                    } else {
                        config_dir.join(path)
                    };
                    let text = fs::read_to_string(&resolved).map_err(|e| {
                        RunnerError::Config(format!(
                            "cannot read mock script {}: {e}",
                            resolved.display()
                        ))
                    })?;
                    serde_json::from_str::<MockScript>(&text)
                        .map_err(|e| RunnerError::Config(format!("invalid mock script: {e}")))?
                }
                None => inline.clone(),
            };
            // A script with neither entries nor an oracle bundle means
            // "oracle over the run dataset"; explicit entries stay strictly
            // scripted so missing entries error.
            let default_oracle = script.entries.is_empty() && script.oracle_bundle.is_none();
            let mock = MockBackend::from_script(script, config_dir)?;
            let mock = if default_oracle {
                mock.with_oracle_bundle(bundle.clone())
            } else {
                mock
            };
            Ok(Box::new(mock))
        }
        BackendConfig::Http {
            base_url,
            max_retries,
        } => {
            let mut backend = HttpBackend::new(base_url.clone())?;
            if let Some(retries) = max_retries {
                backend = backend.with_retry(RetryPolicy {
                    max_retries: *retries,
                    ..RetryPolicy::default()
                });
            }
            Ok(Box::new(backend))
        }
    }
}

fn archive_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("archive")
}

fn write_archive(
    config: &ExperimentConfig,
    bundle: &DatasetBundle,
    lines: &[ArchiveLine],
) -> Result<PathBuf, RunnerError> {
    let dir = archive_dir(config);
    fs::create_dir_all(&dir).map_err(|source| RunnerError::Io {
        path: dir.clone(),
        source,
    })?;
    let meta = ArchiveMeta {
        rules_version: RULES_VERSION.to_string(),
        dataset: bundle.name.clone(),
        model: config.model.clone(),
        strategies: config.strategies.clone(),
        seed: config.seed,
        shots: config.shots,
    };
    let meta_path = dir.join("meta.json");
    fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|source| RunnerError::Io {
        path: meta_path,
        source,
    })?;
    let mut body = String::new();
    for line in lines {
        body.push_str(&serde_json::to_string(line).expect("line serializes"));
        body.push('\n');
    }
    let responses_path = dir.join("responses.jsonl");
    fs::write(&responses_path, body).map_err(|source| RunnerError::Io {
        path: responses_path,
        source,
    })?;
    Ok(dir)
}

fn read_archive(dir: &Path) -> Result<(ArchiveMeta, Vec<ArchiveLine>), RunnerError> {
    let meta_path = dir.join("meta.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|source| RunnerError::Io {
        path: meta_path,
        source,
    })?;
    let meta: ArchiveMeta =
        serde_json::from_str(&meta_text).map_err(|e| RunnerError::ArchiveMeta(e.to_string()))?;
    let responses_path = dir.join("responses.jsonl");
    let file = fs::File::open(&responses_path).map_err(|source| RunnerError::Io {
        path: responses_path.clone(),
        source,
    })?;
    let mut lines = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| RunnerError::Io {
            path: responses_path.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ArchiveLine = serde_json::from_str(&line).map_err(|e| {
            RunnerError::ArchiveMeta(format!("responses.jsonl line {}: {e}", idx + 1))
        })?;
        lines.push(parsed);
    }
    Ok((meta, lines))
}

/// Grades archived responses into outcomes. Documents whose requests all
/// failed in some strategy are excluded from every strategy, with a warning.
fn grade(
    bundle: &DatasetBundle,
    lines: &[ArchiveLine],
) -> Result<(Vec<ExtractionOutcome>, usize, Vec<String>), RunnerError> {
    let mut per_doc_strategy_failures: BTreeMap<(&str, Strategy), (usize, usize)> = BTreeMap::new();
    for line in lines {
        let entry = per_doc_strategy_failures
            .entry((line.doc_id.as_str(), line.strategy))
            .or_insert((0, 0));
        entry.1 += 1;
        if line.error.is_some() {
            entry.0 += 1;
        }
    }
    let excluded: BTreeSet<&str> = per_doc_strategy_failures
        .iter()
        .filter(|(_, (failed, total))| failed == total)
        .map(|((doc, _), _)| *doc)
        .collect();
    let mut warnings = Vec::new();
    if !excluded.is_empty() {
        warnings.push(format!(
            "{} document(s) excluded: every request failed",
            excluded.len()
        ));
    }

    let mut outcomes = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        if excluded.contains(line.doc_id.as_str()) {
            continue;
        }
        let doc = bundle
            .document(&line.doc_id)
            .ok_or_else(|| RunnerError::ArchiveMeta(format!("unknown document {}", line.doc_id)))?;
        let response_key = Some(format!("responses.jsonl:{}", idx + 1));
        let fields = field_specs(bundle, &line.field_ids)?;
        if fields.is_empty() {
            return Err(RunnerError::ArchiveMeta(format!(
                "line {} has no field ids",
                idx + 1
            )));
        }
        match (&line.text, line.strategy) {
            (None, _) => {
                for field in &fields {
                    outcomes.push(ExtractionOutcome {
                        doc_id: line.doc_id.clone(),
                        field_id: field.id.clone(),
                        strategy: line.strategy,
                        response_key: response_key.clone(),
                        verdict: MatchVerdict::unparseable(),
                    });
                }
            }
            (Some(text), Strategy::Separate) => {
                let field = &fields[0];
                let gold = doc.truth.get(&field.id);
                let verdict = match (
                    parse_separate_response(text, field, bundle.numeric_profile),
                    gold,
                ) {
                    (Some(parsed), Some(gold)) => {
                        values_match(&parsed.raw, gold, field.kind, bundle.numeric_profile)
                    }
                    _ => MatchVerdict::unparseable(),
                };
                outcomes.push(ExtractionOutcome {
                    doc_id: line.doc_id.clone(),
                    field_id: field.id.clone(),
                    strategy: line.strategy,
                    response_key,
                    verdict,
                });
            }
            (Some(text), Strategy::Joint) => {
                let parsed_map = parse_joint_response(text, &fields, bundle.numeric_profile);
                for field in &fields {
                    let gold = doc.truth.get(&field.id);
                    let verdict = match (parsed_map.get(&field.id).and_then(|v| v.as_ref()), gold) {
                        (Some(parsed), Some(gold)) => {
                            values_match(&parsed.raw, gold, field.kind, bundle.numeric_profile)
                        }
                        _ => MatchVerdict::unparseable(),
                    };
                    outcomes.push(ExtractionOutcome {
                        doc_id: line.doc_id.clone(),
                        field_id: field.id.clone(),
                        strategy: line.strategy,
                        response_key: response_key.clone(),
                        verdict,
                    });
                }
            }
        }
    }
    Ok((outcomes, excluded.len(), warnings))
}

struct RunTrace<'a> {
    backend_id: String,
    archive: &'a Path,
    warnings: Vec<String>,
    failed_documents: usize,
    rules_mismatch: bool,
}

fn assemble_report(
    bundle: &DatasetBundle,
    config: &ExperimentConfig,
    outcomes: &[ExtractionOutcome],
    trace: RunTrace<'_>,
) -> Result<ExperimentReport, RunnerError> {
    let RunTrace {
        backend_id,
        archive,
        mut warnings,
        failed_documents,
        rules_mismatch,
    } = trace;
    let scope = match &config.fields {
        FieldSelection::Auto => QueryScope::PerDocument,
        FieldSelection::List(fields) => QueryScope::Fields(fields.clone()),
    };
    let mut tables = Vec::new();
    for strategy in &config.strategies {
        tables.push(accuracy_table(outcomes, *strategy, &scope)?);
    }
    let (deltas, document_delta) = {
        let separate = tables.iter().find(|t| t.strategy == Strategy::Separate);
        let joint = tables.iter().find(|t| t.strategy == Strategy::Joint);
        match (separate, joint) {
            (Some(sep), Some(joint)) => {
                let deltas = delta_table(sep, joint)?;
                let doc_delta = joint.document_level.value() - sep.document_level.value();
                (deltas, Some(doc_delta))
            }
            _ => (BTreeMap::new(), None),
        }
    };
    if let Some(joint_table) = tables.iter_mut().find(|t| t.strategy == Strategy::Joint) {
        joint_table.deltas = deltas.clone();
    }
    let mut series = Vec::new();
    for strategy in &config.strategies {
        series.extend(accuracy_by_field_count(bundle, outcomes, *strategy));
    }
    let dependence = if config.analyze_dependence {
        let targets = bundle.numeric_field_ids();
        let matrix = dependence_matrix(bundle, &targets)?;
        let groups = recommend_groups(&matrix, config.dependence_threshold);
        Some(DependenceSection::from_matrix(&matrix, groups))
    } else {
        None
    };
    if rules_mismatch {
        warnings.push(format!(
            "archive was recorded under different matching rules; graded with {RULES_VERSION}"
        ));
    }
    Ok(ExperimentReport {
        dataset: bundle.name.clone(),
        model: config.model.clone(),
        strategies: config.strategies.clone(),
        tables,
        deltas,
        document_delta,
        series,
        dependence,
        provenance: Provenance {
            generated_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            backend_id,
            rules_version: RULES_VERSION.to_string(),
            rules_mismatch,
            assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
            warnings,
            failed_documents,
        },
        archive_dir: archive.display().to_string(),
    })
}

/// Runs a full experiment: builds prompts, dispatches them, archives every
/// raw response, grades, aggregates, and writes the report files under
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    config.validate()?;
    let bundle = Arc::new(load_canonical(&config.dataset)?);
    let config_dir = config
        .dataset
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let backend = build_backend(config, &bundle, &config_dir)?;
    let exemplar_pool = match &config.exemplar_dataset {
        Some(path) => Arc::new(load_canonical(path)?),
        None => bundle.clone(),
    };
    let (queries, warnings, _) = plan_queries(&bundle, config)?;
    let phrase = doc_kind_phrase(&bundle, config);

    let mut requests = Vec::with_capacity(queries.len());
    for query in &queries {
        requests.push(build_request(
            &bundle,
            &exemplar_pool,
            config,
            query,
            &phrase,
        )?);
    }
    let results = send_batch(backend.as_ref(), &requests, config.parallelism)?;
    if !results.is_empty() && results.iter().all(Result::is_err) {
        // Nothing came back at all: the backend is unavailable.
        let first = results
            .into_iter()
            .find_map(Result::err)
            .expect("all results are errors");
        return Err(RunnerError::Backend(first));
    }

    let mut lines = Vec::with_capacity(queries.len());
    for (query, result) in queries.iter().zip(&results) {
        let doc = &bundle.documents[query.doc_index];
        let line = match result {
            Ok(response) => ArchiveLine {
                doc_id: doc.id.clone(),
                strategy: query.strategy,
                field_ids: query.field_ids.clone(),
                text: Some(response.text.clone()),
                error: None,
                backend_id: response.backend_id.clone(),
                attempt_count: response.attempt_count,
                latency_ms: response.latency.as_millis() as u64,
            },
            Err(error) => ArchiveLine {
                doc_id: doc.id.clone(),
                strategy: query.strategy,
                field_ids: query.field_ids.clone(),
                text: None,
                error: Some(error.to_string()),
                backend_id: backend.id().to_string(),
                attempt_count: 0,
                latency_ms: 0,
            },
        };
        lines.push(line);
    }

    fs::create_dir_all(&config.output_dir).map_err(|source| RunnerError::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let archive = write_archive(config, &bundle, &lines)?;
    let (outcomes, failed_documents, mut grade_warnings) = grade(&bundle, &lines)?;
    let mut all_warnings = warnings;
    all_warnings.append(&mut grade_warnings);
    let report = assemble_report(
        &bundle,
        config,
        &outcomes,
        RunTrace {
            backend_id: backend.id().to_string(),
            archive: &archive,
            warnings: all_warnings,
            failed_documents,
            rules_mismatch: false,
        },
    )?;
    report.write_all(&config.output_dir)?;
    Ok(report)
}

/// Rebuilds the report from an archive without any backend traffic. The
/// archive must cover every (document, strategy, field set) the config
/// expects; reports are written under `config.output_dir`.
pub fn replay(archive: &Path, config: &ExperimentConfig) -> Result<ExperimentReport, RunnerError> {
    config.validate()?;
    let bundle = Arc::new(load_canonical(&config.dataset)?);
    let (meta, lines) = read_archive(archive)?;
    let rules_mismatch = meta.rules_version != RULES_VERSION;

    let (queries, warnings, _) = plan_queries(&bundle, config)?;
    let sorted_key = |doc: &str, strategy: Strategy, fields: &[String]| {
        let mut fields = fields.to_vec();
        fields.sort();
        (doc.to_string(), strategy, fields)
    };
    let expected: BTreeSet<(String, Strategy, Vec<String>)> = queries
        .iter()
        .map(|q| sorted_key(&bundle.documents[q.doc_index].id, q.strategy, &q.field_ids))
        .collect();
    let available: BTreeSet<(String, Strategy, Vec<String>)> = lines
        .iter()
        .map(|l| sorted_key(&l.doc_id, l.strategy, &l.field_ids))
        .collect();
    for query in &queries {
        let doc = &bundle.documents[query.doc_index];
        if !available.contains(&sorted_key(&doc.id, query.strategy, &query.field_ids)) {
            return Err(RunnerError::MissingArchivedResponse {
                doc: doc.id.clone(),
                strategy: query.strategy,
            });
        }
    }
    // Grade only lines inside the config's scope so a wider archive replays
    // to the same report as a direct run.
    let in_scope: Vec<ArchiveLine> = lines
        .into_iter()
        .filter(|l| expected.contains(&sorted_key(&l.doc_id, l.strategy, &l.field_ids)))
        .collect();

    let (outcomes, failed_documents, mut grade_warnings) = grade(&bundle, &in_scope)?;
    let mut all_warnings = warnings;
    all_warnings.append(&mut grade_warnings);
    fs::create_dir_all(&config.output_dir).map_err(|source| RunnerError::Io {
        path: config.output_dir.clone(),
        source,
    })?;
    let report = assemble_report(
        &bundle,
        config,
        &outcomes,
        RunTrace {
            backend_id: format!("replay:{}", archive.display()),
            archive,
            warnings: all_warnings,
            failed_documents,
            rules_mismatch,
        },
    )?;
    report.write_all(&config.output_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults() {
        let json = r#"{
            "dataset": "d.jsonl",
            "model": "m",
            "backend": {"kind": "mock"},
            "strategies": ["separate"],
            "fields": "auto",
            "output_dir": "out"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(config.fields, FieldSelection::Auto);
        assert_eq!(config.parallelism, 1);
        assert_eq!(config.max_tokens, 256);
        assert_eq!(config.timeout_secs, 60);
        assert_eq!(config.shots, 0);
        assert!(config.joint_output_instruction);
        assert!(!config.analyze_dependence);
        assert_eq!(config.dependence_threshold, 0.9);
    }

    #[test]
    fn config_parses_field_list_and_mock_settings() {
        let json = r#"{
            "dataset": "d.jsonl",
            "model": "m",
            "backend": {
                "kind": "mock",
                "error_rate": 0.25,
                "seed": 9,
                "corruption_rule": "garble",
                "corrupt_strategies": ["separate"]
            },
            "strategies": ["separate", "joint"],
            "fields": ["tax", "total"],
            "output_dir": "out"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        config.validate().unwrap();
        assert_eq!(
            config.fields,
            FieldSelection::List(vec!["tax".to_string(), "total".to_string()])
        );
        match &config.backend {
            BackendConfig::Mock { inline, .. } => {
                assert_eq!(inline.error_rate, 0.25);
                assert_eq!(inline.seed, 9);
                assert_eq!(inline.corrupt_strategies, vec![Strategy::Separate]);
            }
            other => panic!("expected mock backend, got {other:?}"),
        }
    }

    #[test]
    fn config_rejects_bad_field_selection() {
        let json = r#"{
            "dataset": "d.jsonl",
            "model": "m",
            "backend": {"kind": "mock"},
            "strategies": ["separate"],
            "fields": 42,
            "output_dir": "out"
        }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(json).is_err());
    }

    #[test]
    fn config_rejects_joint_with_single_field() {
        let json = r#"{
            "dataset": "d.jsonl",
            "model": "m",
            "backend": {"kind": "mock"},
            "strategies": ["joint"],
            "fields": ["tax"],
            "output_dir": "out"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!(matches!(config.validate(), Err(RunnerError::Config(_))));
    }

    #[test]
    fn field_selection_serializes_both_ways() {
        let auto = serde_json::to_value(FieldSelection::Auto).unwrap();
        assert_eq!(auto, serde_json::json!("auto"));
        let list = serde_json::to_value(FieldSelection::List(vec!["a".into()])).unwrap();
        assert_eq!(list, serde_json::json!(["a"]));
    }
}
