//! Canonical dataset model plus importers for CORD-, SROIE- and
//! FUNSD-VQA-style annotation layouts.
//!
//! Every importer converges on [`DatasetBundle`] so that downstream modules
//! never see source-format quirks. Gold value strings are stored verbatim;
//! normalization happens only at match time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Value kind of an extraction target; drives normalization and matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Numeric,
    Text,
    Date,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Numeric => write!(f, "numeric"),
            FieldKind::Text => write!(f, "text"),
            FieldKind::Date => write!(f, "date"),
        }
    }
}

/// Numeric separator convention of a dataset.
///
/// CORD receipts write amounts like `48.000` where both `.` and `,` group
/// digits; SROIE totals like `9.00` use `.` as a decimal point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericProfile {
    GroupingDot,
    DecimalDot,
}

/// A named extraction target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    /// Short stable identifier, lowercase token, unique within a dataset.
    pub id: String,
    /// Human-readable name used in prompts (e.g. "Subtotal").
    pub display_name: String,
    pub kind: FieldKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl FieldSpec {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>, kind: FieldKind) -> Self {
        FieldSpec {
            id: id.into(),
            display_name: display_name.into(),
            kind,
            description: None,
        }
    }
}

/// Opaque reference to an image payload: a file path or inline bytes.
///
/// Serialized as a string; inline bytes round-trip through a `data:` URI.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ImageRef {
    Path(String),
    Inline { mime: String, data: Vec<u8> },
}

impl From<ImageRef> for String {
    fn from(r: ImageRef) -> String {
        r.to_uri()
    }
}

impl From<String> for ImageRef {
    fn from(s: String) -> ImageRef {
        ImageRef::from_uri(&s)
    }
}

impl ImageRef {
    pub fn to_uri(&self) -> String {
        match self {
            ImageRef::Path(p) => p.clone(),
            ImageRef::Inline { mime, data } => format!(
                "data:{};base64,{}",
                mime,
                base64::engine::general_purpose::STANDARD.encode(data)
            ),
        }
    }

    pub fn from_uri(s: &str) -> ImageRef {
        if let Some(rest) = s.strip_prefix("data:") {
            if let Some((mime, payload)) = rest.split_once(";base64,") {
                if let Ok(data) = base64::engine::general_purpose::STANDARD.decode(payload) {
                    return ImageRef::Inline {
                        mime: mime.to_string(),
                        data,
                    };
                }
            }
        }
        ImageRef::Path(s.to_string())
    }
}

/// One document image plus its ground-truth field values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    pub image: ImageRef,
    /// field id -> gold value, stored verbatim (no pre-normalization).
    pub truth: BTreeMap<String, String>,
}

impl DocumentRecord {
    pub fn labeled_field_count(&self) -> usize {
        self.truth.len()
    }
}

/// A named, validated collection of field specs and documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub name: String,
    pub numeric_profile: NumericProfile,
    pub fields: Vec<FieldSpec>,
    pub documents: Vec<DocumentRecord>,
}

impl DatasetBundle {
    pub fn field(&self, id: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.id == id)
    }

    pub fn document(&self, id: &str) -> Option<&DocumentRecord> {
        self.documents.iter().find(|d| d.id == id)
    }

    pub fn numeric_field_ids(&self) -> Vec<String> {
        self.fields
            .iter()
            .filter(|f| f.kind == FieldKind::Numeric)
            .map(|f| f.id.clone())
            .collect()
    }

    /// Checks the bundle invariants: unique non-empty field ids, non-empty
    /// display names, unique document ids, and truth keys that all reference
    /// declared fields.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut field_ids = BTreeMap::new();
        for f in &self.fields {
            if f.id.is_empty() {
                return Err(DatasetError::EmptyFieldId);
            }
            if f.display_name.is_empty() {
                return Err(DatasetError::EmptyDisplayName { id: f.id.clone() });
            }
            if field_ids.insert(f.id.clone(), ()).is_some() {
                return Err(DatasetError::DuplicateField { id: f.id.clone() });
            }
        }
        let mut doc_ids = BTreeMap::new();
        for d in &self.documents {
            if doc_ids.insert(d.id.clone(), ()).is_some() {
                return Err(DatasetError::DuplicateDocument { id: d.id.clone() });
            }
            for key in d.truth.keys() {
                if !field_ids.contains_key(key) {
                    return Err(DatasetError::UndeclaredField {
                        doc: d.id.clone(),
                        field: key.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("canonical file is empty (missing header line)")]
    MissingHeader,
    #[error("duplicate document id `{id}`")]
    DuplicateDocument { id: String },
    #[error("duplicate field id `{id}`")]
    DuplicateField { id: String },
    #[error("field id must be non-empty")]
    EmptyFieldId,
    #[error("field `{id}` has an empty display name")]
    EmptyDisplayName { id: String },
    #[error("document `{doc}` references undeclared field `{field}`")]
    UndeclaredField { doc: String, field: String },
    #[error("field `{field}` appears with conflicting kinds across records")]
    ConflictingKind { field: String },
    #[error("document `{doc}`: no image reference found")]
    MissingImage { doc: String },
    #[error("annotation {path}: {message}")]
    BadAnnotation { path: PathBuf, message: String },
    #[error("no annotation files found under {path}")]
    EmptyDirectory { path: PathBuf },
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Canonical line-delimited format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CanonicalHeader {
    dataset: String,
    numeric_profile: NumericProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fields: Option<Vec<FieldSpec>>,
}

#[derive(Serialize, Deserialize)]
struct CanonicalField {
    value: String,
    kind: FieldKind,
}

#[derive(Serialize, Deserialize)]
struct CanonicalRecord {
    id: String,
    image: String,
    fields: BTreeMap<String, CanonicalField>,
}

/// Loads a bundle from the canonical line-delimited format: a header line
/// `{"dataset", "numeric_profile", ["fields"]}` followed by one record per
/// line `{"id", "image", "fields": {id: {"value", "kind"}}}`.
///
/// When the header omits the field list, specs are inferred from the record
/// kinds and display names are derived from the ids.
pub fn load_canonical(path: &Path) -> Result<DatasetBundle, DatasetError> {
    let file = fs::File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (header, header_line) = loop {
        match lines.next() {
            Some((idx, line)) => {
                let line = line.map_err(|source| DatasetError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let header: CanonicalHeader =
                    serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                        line: idx + 1,
                        message: format!("invalid header: {e}"),
                    })?;
                break (header, idx + 1);
            }
            None => return Err(DatasetError::MissingHeader),
        }
    };
    let _ = header_line;

    let mut documents = Vec::new();
    let mut inferred: BTreeMap<String, FieldKind> = BTreeMap::new();
    for (idx, line) in lines {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CanonicalRecord =
            serde_json::from_str(&line).map_err(|e| DatasetError::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        let mut truth = BTreeMap::new();
        for (fid, cf) in record.fields {
            match inferred.get(&fid) {
                Some(kind) if *kind != cf.kind => {
                    return Err(DatasetError::ConflictingKind { field: fid })
                }
                Some(_) => {}
                None => {
                    inferred.insert(fid.clone(), cf.kind);
                }
            }
            truth.insert(fid, cf.value);
        }
        documents.push(DocumentRecord {
            id: record.id,
            image: ImageRef::from_uri(&record.image),
            truth,
        });
    }

    let fields = match header.fields {
        Some(fields) => {
            // Record kinds must agree with the declared specs.
            for f in &fields {
                if let Some(kind) = inferred.get(&f.id) {
                    if *kind != f.kind {
                        return Err(DatasetError::ConflictingKind {
                            field: f.id.clone(),
                        });
                    }
                }
            }
            fields
        }
        None => inferred
            .into_iter()
            .map(|(id, kind)| {
                let display = derive_display_name(&id);
                FieldSpec::new(id, display, kind)
            })
            .collect(),
    };

    let bundle = DatasetBundle {
        name: header.dataset,
        numeric_profile: header.numeric_profile,
        fields,
        documents,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Writes a bundle in the canonical format; `load_canonical` of the result
/// reproduces the bundle field-by-field.
pub fn save_canonical(bundle: &DatasetBundle, path: &Path) -> Result<(), DatasetError> {
    let mut out = Vec::new();
    let header = CanonicalHeader {
        dataset: bundle.name.clone(),
        numeric_profile: bundle.numeric_profile,
        fields: Some(bundle.fields.clone()),
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("header json")
    )
    .unwrap();
    for doc in &bundle.documents {
        let mut fields = BTreeMap::new();
        for (fid, value) in &doc.truth {
            let kind = bundle.field(fid).map(|f| f.kind).unwrap_or(FieldKind::Text);
            fields.insert(
                fid.clone(),
                CanonicalField {
                    value: value.clone(),
                    kind,
                },
            );
        }
        let record = CanonicalRecord {
            id: doc.id.clone(),
            image: doc.image.to_uri(),
            fields,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record json")
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn derive_display_name(id: &str) -> String {
    id.split(['_', '-'])
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(c) => c.to_uppercase().collect::<String>() + chars.as_str(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// CORD importer
// ---------------------------------------------------------------------------

/// CORD label paths for each target field. "Quantity" maps to the aggregate
/// menu quantity counter and "Menu Types" to the distinct-menu-item counter;
/// the annotation schema offers no other counts.
const CORD_FIELDS: &[(&str, &str, [&str; 2])] = &[
    ("subtotal", "Subtotal", ["sub_total", "subtotal_price"]),
    ("tax", "Tax", ["sub_total", "tax_price"]),
    ("service", "Service", ["sub_total", "service_price"]),
    ("total", "Total", ["total", "total_price"]),
    ("cash", "Cash", ["total", "cashprice"]),
    ("change", "Change", ["total", "changeprice"]),
    ("creditcard", "CreditCard", ["total", "creditcardprice"]),
    ("quantity", "Quantity", ["total", "menuqty_cnt"]),
    ("menu_count", "Menu Types", ["total", "menutype_cnt"]),
];

/// Imports a directory of CORD-style per-image JSON annotations.
///
/// Accepts annotations whose root is the parse tree itself, or wraps it under
/// `gt_parse`, or carries it JSON-encoded under `ground_truth`. The image is
/// taken from an `image_path`/`image` key or a sibling image file with the
/// same stem.
pub fn import_cord(dir: &Path) -> Result<DatasetBundle, DatasetError> {
    let files = collect_files(dir, &["json"])?;
    if files.is_empty() {
        return Err(DatasetError::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    let mut documents = Vec::new();
    for file in files {
        let text = read_to_string(&file)?;
        let root: Value = serde_json::from_str(&text).map_err(|e| DatasetError::BadAnnotation {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let gt = cord_parse_tree(&root).ok_or_else(|| DatasetError::BadAnnotation {
            path: file.clone(),
            message: "no gt_parse section found".to_string(),
        })?;
        let doc_id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = annotation_image(&root, &file, &doc_id)?;
        let mut truth = BTreeMap::new();
        for (fid, _, path) in CORD_FIELDS {
            if let Some(value) = cord_node(&gt, path[0])
                .and_then(|v| cord_node(v, path[1]))
                .and_then(value_to_string)
            {
                truth.insert((*fid).to_string(), value);
            }
        }
        documents.push(DocumentRecord {
            id: doc_id,
            image,
            truth,
        });
    }
    let bundle = DatasetBundle {
        name: "cord".to_string(),
        numeric_profile: NumericProfile::GroupingDot,
        fields: CORD_FIELDS
            .iter()
            .map(|(id, display, _)| FieldSpec::new(*id, *display, FieldKind::Numeric))
            .collect(),
        documents,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Key lookup that sees through CORD's occasional array-wrapped groups
/// (`"sub_total": [{...}]`).
fn cord_node<'a>(value: &'a Value, key: &str) -> Option<&'a Value> {
    match value {
        Value::Array(items) => items.first().and_then(|item| item.get(key)),
        _ => value.get(key),
    }
}

fn cord_parse_tree(root: &Value) -> Option<Value> {
    if let Some(gt) = root.get("gt_parse") {
        return Some(gt.clone());
    }
    if let Some(Value::String(s)) = root.get("ground_truth") {
        if let Ok(inner) = serde_json::from_str::<Value>(s) {
            return Some(inner.get("gt_parse").cloned().unwrap_or(inner));
        }
    }
    if root.get("sub_total").is_some() || root.get("total").is_some() || root.get("menu").is_some()
    {
        return Some(root.clone());
    }
    None
}

/// Verbatim string of a leaf annotation value; arrays yield their first
/// usable element, empty strings count as absent.
fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => items.iter().find_map(value_to_string),
        _ => None,
    }
}

fn annotation_image(root: &Value, file: &Path, doc_id: &str) -> Result<ImageRef, DatasetError> {
    for key in ["image_path", "image", "img"] {
        if let Some(Value::String(s)) = root.get(key) {
            if !s.is_empty() {
                return Ok(ImageRef::Path(s.clone()));
            }
        }
    }
    sibling_image(file).ok_or_else(|| DatasetError::MissingImage {
        doc: doc_id.to_string(),
    })
}

fn sibling_image(file: &Path) -> Option<ImageRef> {
    let stem = file.file_stem()?.to_string_lossy().into_owned();
    let parent = file.parent()?;
    let mut dirs = vec![
        parent.to_path_buf(),
        parent.join("image"),
        parent.join("img"),
    ];
    if let Some(gp) = parent.parent() {
        dirs.push(gp.join("image"));
        dirs.push(gp.join("img"));
    }
    for dir in dirs {
        for ext in ["png", "jpg", "jpeg"] {
            let candidate = dir.join(format!("{stem}.{ext}"));
            if candidate.is_file() {
                return Some(ImageRef::Path(candidate.to_string_lossy().into_owned()));
            }
        }
    }
    None
}

fn collect_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|source| DatasetError::Io {
            path: d.clone(),
            source,
        })?;
        for entry in entries {
            let entry = entry.map_err(|source| DatasetError::Io {
                path: d.clone(),
                source,
            })?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(ext) = path.extension() {
                if exts.iter().any(|e| ext.eq_ignore_ascii_case(e)) {
                    out.push(path);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

// ---------------------------------------------------------------------------
// SROIE importer
// ---------------------------------------------------------------------------

/// Imports a directory of SROIE Task-3 key files (`<id>.txt` JSON with
/// company/address/date/total) with sibling images.
pub fn import_sroie(dir: &Path) -> Result<DatasetBundle, DatasetError> {
    let files = collect_files(dir, &["txt"])?;
    if files.is_empty() {
        return Err(DatasetError::EmptyDirectory {
            path: dir.to_path_buf(),
        });
    }
    let mut documents = Vec::new();
    for file in files {
        let text = read_to_string(&file)?;
        let root: Value = serde_json::from_str(&text).map_err(|e| DatasetError::BadAnnotation {
            path: file.clone(),
            message: e.to_string(),
        })?;
        let obj = root
            .as_object()
            .ok_or_else(|| DatasetError::BadAnnotation {
                path: file.clone(),
                message: "key file is not a JSON object".to_string(),
            })?;
        let doc_id = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = sibling_image(&file).ok_or_else(|| DatasetError::MissingImage {
            doc: doc_id.clone(),
        })?;
        let mut truth = BTreeMap::new();
        for (key, value) in obj {
            let fid = key.to_lowercase();
            if ["company", "address", "date", "total"].contains(&fid.as_str()) {
                if let Some(s) = value_to_string(value) {
                    truth.insert(fid, s);
                }
            }
        }
        documents.push(DocumentRecord {
            id: doc_id,
            image,
            truth,
        });
    }
    let bundle = DatasetBundle {
        name: "sroie".to_string(),
        numeric_profile: NumericProfile::DecimalDot,
        fields: vec![
            FieldSpec::new("company", "Company Name", FieldKind::Text),
            FieldSpec::new("address", "Address", FieldKind::Text),
            FieldSpec::new("date", "Transaction Date", FieldKind::Date),
            FieldSpec::new("total", "Total Amount", FieldKind::Numeric),
        ],
        documents,
    };
    bundle.validate()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// FUNSD-VQA importer
// ---------------------------------------------------------------------------

/// Imports a FUNSD-VQA style file of question/answer/image triples (a JSON
/// array or JSON lines). Each question becomes a text-kind field scoped to
/// its document; pairs with empty answers are skipped with a warning.
pub fn import_funsd_vqa(file: &Path) -> Result<DatasetBundle, DatasetError> {
    let text = read_to_string(file)?;
    let entries: Vec<Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text).map_err(|e| DatasetError::BadAnnotation {
            path: file.to_path_buf(),
            message: e.to_string(),
        })?
    } else {
        let mut out = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let v: Value = serde_json::from_str(line).map_err(|e| DatasetError::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
            out.push(v);
        }
        out
    };

    let mut fields = Vec::new();
    let mut documents: Vec<DocumentRecord> = Vec::new();
    let mut doc_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut skipped = 0usize;
    for (idx, entry) in entries.iter().enumerate() {
        let question = entry
            .get("question")
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::BadAnnotation {
                path: file.to_path_buf(),
                message: format!("entry {idx}: missing question"),
            })?;
        let answer = entry.get("answer").and_then(Value::as_str).ok_or_else(|| {
            DatasetError::BadAnnotation {
                path: file.to_path_buf(),
                message: format!("entry {idx}: QA pair without an answer string"),
            }
        })?;
        let image = entry
            .get("image")
            .or_else(|| entry.get("image_path"))
            .or_else(|| entry.get("img"))
            .and_then(Value::as_str)
            .ok_or_else(|| DatasetError::BadAnnotation {
                path: file.to_path_buf(),
                message: format!("entry {idx}: missing image"),
            })?;
        if answer.trim().is_empty() {
            log::warn!("funsd-vqa entry {idx}: empty answer, pair skipped");
            skipped += 1;
            continue;
        }
        let qid = format!("q{idx:04}");
        fields.push(FieldSpec {
            id: qid.clone(),
            display_name: question.to_string(),
            kind: classify_question_kind(question),
            description: None,
        });
        let doc_slot = *doc_index.entry(image.to_string()).or_insert_with(|| {
            documents.push(DocumentRecord {
                id: funsd_doc_id(image, documents.len()),
                image: ImageRef::Path(image.to_string()),
                truth: BTreeMap::new(),
            });
            documents.len() - 1
        });
        documents[doc_slot].truth.insert(qid, answer.to_string());
    }
    if skipped > 0 {
        log::warn!("funsd-vqa import: {skipped} pair(s) skipped for empty answers");
    }
    let bundle = DatasetBundle {
        name: "funsd_vqa".to_string(),
        numeric_profile: NumericProfile::DecimalDot,
        fields,
        documents,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn funsd_doc_id(image: &str, ordinal: usize) -> String {
    let stem = Path::new(image)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if stem.is_empty() {
        format!("doc{ordinal:04}")
    } else {
        format!("{stem}_{ordinal:04}")
    }
}

/// Keyword heuristic assigning a value kind to a free-form question.
pub fn classify_question_kind(question: &str) -> FieldKind {
    let q = question.to_lowercase();
    const DATE_HINTS: &[&str] = &["date", "when", " day", " month", " year"];
    if DATE_HINTS.iter().any(|h| q.contains(h)) {
        return FieldKind::Date;
    }
    const NUMERIC_HINTS: &[&str] = &[
        "how many", "how much", "number", "amount", "total", "count", "quantity", "percent",
    ];
    if NUMERIC_HINTS.iter().any(|h| q.contains(h)) {
        return FieldKind::Numeric;
    }
    FieldKind::Text
}
