//! Separate and joint prompt construction, zero-shot and k-shot.
//!
//! Prompt text is deterministic: identical inputs yield byte-identical
//! strings. The zero-shot templates follow the fixed form
//! `Given the following image of a {phrase}, extract the {fields}.`

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DocumentRecord, FieldSpec, ImageRef};

/// Extraction strategy: one prompt per field, or one prompt for all fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Separate,
    Joint,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Separate => write!(f, "separate"),
            Strategy::Joint => write!(f, "joint"),
        }
    }
}

/// Structured-output request appended to joint prompts.
///
/// `KeyList` renders `Respond with a JSON object with keys a, b, c.` from
/// the requested field ids; `Literal` is appended verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OutputInstruction {
    None,
    #[default]
    KeyList,
    Literal(String),
}

/// One labeled exemplar for k-shot prompting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exemplar {
    pub image: ImageRef,
    /// field id -> ideal answer value.
    pub values: BTreeMap<String, String>,
}

/// How prompts for one request should be built.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPlan {
    pub strategy: Strategy,
    /// Document noun used in the template, e.g. "receipt".
    pub doc_kind_phrase: String,
    pub shots: usize,
    pub exemplars: Vec<Exemplar>,
    pub output_instruction: OutputInstruction,
    /// When false, exemplars render as text-only blocks (for backends that
    /// reject multi-image messages).
    pub exemplar_images: bool,
}

impl PromptPlan {
    pub fn separate(doc_kind_phrase: impl Into<String>) -> Self {
        PromptPlan {
            strategy: Strategy::Separate,
            doc_kind_phrase: doc_kind_phrase.into(),
            shots: 0,
            exemplars: Vec::new(),
            output_instruction: OutputInstruction::None,
            exemplar_images: true,
        }
    }

    pub fn joint(doc_kind_phrase: impl Into<String>) -> Self {
        PromptPlan {
            strategy: Strategy::Joint,
            doc_kind_phrase: doc_kind_phrase.into(),
            shots: 0,
            exemplars: Vec::new(),
            output_instruction: OutputInstruction::KeyList,
            exemplar_images: true,
        }
    }

    pub fn without_output_instruction(mut self) -> Self {
        self.output_instruction = OutputInstruction::None;
        self
    }

    pub fn with_exemplars(mut self, exemplars: Vec<Exemplar>) -> Self {
        self.shots = exemplars.len();
        self.exemplars = exemplars;
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.shots != self.exemplars.len() {
            return Err(PromptError::ShotCountMismatch {
                shots: self.shots,
                exemplars: self.exemplars.len(),
            });
        }
        Ok(())
    }
}

/// A fully rendered prompt: text plus ordered image references, exemplar
/// images first and the query image always last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub field_ids: Vec<String>,
    pub text: String,
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("field list is empty")]
    EmptyFieldList,
    #[error("joint prompts require at least 2 fields, got {0}")]
    TooFewFieldsForJoint(usize),
    #[error("plan strategy is {plan} but {requested} was requested")]
    StrategyMismatch { plan: Strategy, requested: Strategy },
    #[error("plan declares {shots} shots but {exemplars} exemplars")]
    ShotCountMismatch { shots: usize, exemplars: usize },
    #[error("exemplar is missing a value for field `{field}`")]
    ExemplarMissingField { field: String },
}

fn template(phrase: &str, fields: &str) -> String {
    format!("Given the following image of a {phrase}, extract the {fields}.")
}

/// `A` / `A and B` / `A, B, and C` series of display names.
fn display_series(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => (*one).to_string(),
        [a, b] => format!("{a} and {b}"),
        _ => {
            let (last, init) = names.split_last().expect("non-empty");
            format!("{}, and {last}", init.join(", "))
        }
    }
}

/// Builds one prompt per requested field, in input order.
pub fn build_separate_prompts(
    fields: &[FieldSpec],
    doc: &DocumentRecord,
    plan: &PromptPlan,
) -> Result<Vec<RenderedPrompt>, PromptError> {
    if plan.strategy != Strategy::Separate {
        return Err(PromptError::StrategyMismatch {
            plan: plan.strategy,
            requested: Strategy::Separate,
        });
    }
    if fields.is_empty() {
        return Err(PromptError::EmptyFieldList);
    }
    plan.validate()?;
    Ok(fields
        .iter()
        .map(|field| RenderedPrompt {
            field_ids: vec![field.id.clone()],
            text: template(&plan.doc_kind_phrase, &field.display_name),
            images: vec![doc.image.clone()],
        })
        .collect())
}

/// Builds a single prompt naming every requested field once.
pub fn build_joint_prompt(
    fields: &[FieldSpec],
    doc: &DocumentRecord,
    plan: &PromptPlan,
) -> Result<RenderedPrompt, PromptError> {
    if plan.strategy != Strategy::Joint {
        return Err(PromptError::StrategyMismatch {
            plan: plan.strategy,
            requested: Strategy::Joint,
        });
    }
    if fields.len() < 2 {
        return Err(PromptError::TooFewFieldsForJoint(fields.len()));
    }
    plan.validate()?;
    let names: Vec<&str> = fields.iter().map(|f| f.display_name.as_str()).collect();
    let mut text = template(&plan.doc_kind_phrase, &display_series(&names));
    match &plan.output_instruction {
        OutputInstruction::None => {}
        OutputInstruction::KeyList => {
            let ids: Vec<&str> = fields.iter().map(|f| f.id.as_str()).collect();
            text.push(' ');
            text.push_str(&format!(
                "Respond with a JSON object with keys {}.",
                ids.join(", ")
            ));
        }
        OutputInstruction::Literal(instruction) => {
            text.push(' ');
            text.push_str(instruction);
        }
    }
    Ok(RenderedPrompt {
        field_ids: fields.iter().map(|f| f.id.clone()).collect(),
        text,
        images: vec![doc.image.clone()],
    })
}

/// Prepends `k` exemplar blocks (image plus rendered ideal answer) to a
/// prompt. The query image stays last; `k = 0` returns the prompt unchanged.
pub fn attach_few_shot(
    prompt: &RenderedPrompt,
    exemplars: &[Exemplar],
    k: usize,
    include_images: bool,
) -> Result<RenderedPrompt, PromptError> {
    if k != exemplars.len() {
        return Err(PromptError::ShotCountMismatch {
            shots: k,
            exemplars: exemplars.len(),
        });
    }
    if k == 0 {
        return Ok(prompt.clone());
    }
    for exemplar in exemplars {
        for fid in &prompt.field_ids {
            if !exemplar.values.contains_key(fid) {
                return Err(PromptError::ExemplarMissingField { field: fid.clone() });
            }
        }
    }
    let mut text = String::new();
    let mut images = Vec::new();
    for (i, exemplar) in exemplars.iter().enumerate() {
        text.push_str(&format!("Example {}:\n", i + 1));
        text.push_str(&render_answer(&prompt.field_ids, &exemplar.values));
        text.push_str("\n\n");
        if include_images {
            images.push(exemplar.image.clone());
        }
    }
    text.push_str(&prompt.text);
    images.extend(prompt.images.iter().cloned());
    Ok(RenderedPrompt {
        field_ids: prompt.field_ids.clone(),
        text,
        images,
    })
}

/// Ideal answer in the same shape the model is asked to produce: a JSON
/// object for multi-field prompts, a `id: value` line otherwise.
fn render_answer(field_ids: &[String], values: &BTreeMap<String, String>) -> String {
    if field_ids.len() >= 2 {
        let body: Vec<String> = field_ids
            .iter()
            .map(|fid| {
                let value = values.get(fid).map(String::as_str).unwrap_or_default();
                format!(
                    "{}: {}",
                    serde_json::to_string(fid).expect("json string"),
                    serde_json::to_string(value).expect("json string")
                )
            })
            .collect();
        format!("{{{}}}", body.join(", "))
    } else {
        let fid = &field_ids[0];
        let value = values.get(fid).map(String::as_str).unwrap_or_default();
        format!("{fid}: {value}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FieldKind;
    use std::collections::BTreeMap;

    fn receipt_fields() -> Vec<FieldSpec> {
        vec![
            FieldSpec::new("subtotal", "Subtotal", FieldKind::Numeric),
            FieldSpec::new("tax", "Tax", FieldKind::Numeric),
            FieldSpec::new("total", "Total", FieldKind::Numeric),
        ]
    }

    fn doc() -> DocumentRecord {
        DocumentRecord {
            id: "d1".to_string(),
            image: ImageRef::Path("d1.png".to_string()),
            truth: BTreeMap::new(),
        }
    }

    #[test]
    fn separate_templates_are_exact() {
        let prompts =
            build_separate_prompts(&receipt_fields(), &doc(), &PromptPlan::separate("receipt"))
                .unwrap();
        assert_eq!(prompts.len(), 3);
        assert_eq!(
            prompts[0].text,
            "Given the following image of a receipt, extract the Subtotal."
        );
        assert_eq!(
            prompts[1].text,
            "Given the following image of a receipt, extract the Tax."
        );
        assert_eq!(
            prompts[2].text,
            "Given the following image of a receipt, extract the Total."
        );
    }

    #[test]
    fn separate_single_field() {
        let fields = vec![FieldSpec::new("date", "Date", FieldKind::Date)];
        let prompts =
            build_separate_prompts(&fields, &doc(), &PromptPlan::separate("receipt")).unwrap();
        assert!(prompts[0].text.ends_with("extract the Date."));
    }

    #[test]
    fn separate_rejects_empty_field_list() {
        let err = build_separate_prompts(&[], &doc(), &PromptPlan::separate("receipt"));
        assert_eq!(err.unwrap_err(), PromptError::EmptyFieldList);
    }

    #[test]
    fn joint_template_is_exact() {
        let plan = PromptPlan::joint("receipt").without_output_instruction();
        let prompt = build_joint_prompt(&receipt_fields(), &doc(), &plan).unwrap();
        assert_eq!(
            prompt.text,
            "Given the following image of a receipt, extract the Subtotal, Tax, and Total."
        );
        assert_eq!(prompt.field_ids, vec!["subtotal", "tax", "total"]);
    }

    #[test]
    fn joint_two_fields_uses_plain_and() {
        let fields = receipt_fields()[..2].to_vec();
        let plan = PromptPlan::joint("receipt").without_output_instruction();
        let prompt = build_joint_prompt(&fields, &doc(), &plan).unwrap();
        assert!(prompt.text.ends_with("extract the Subtotal and Tax."));
    }

    #[test]
    fn joint_names_each_field_once() {
        let fields = vec![
            FieldSpec::new("subtotal", "Subtotal", FieldKind::Numeric),
            FieldSpec::new("tax", "Tax", FieldKind::Numeric),
            FieldSpec::new("service", "Service", FieldKind::Numeric),
            FieldSpec::new("total", "Total", FieldKind::Numeric),
            FieldSpec::new("cash", "Cash", FieldKind::Numeric),
            FieldSpec::new("change", "Change", FieldKind::Numeric),
        ];
        let prompt = build_joint_prompt(&fields, &doc(), &PromptPlan::joint("receipt")).unwrap();
        for field in &fields {
            let count = prompt.text.matches(&field.display_name).count();
            assert_eq!(count, 1, "{} mentioned {count} times", field.display_name);
        }
    }

    #[test]
    fn joint_appends_key_list_instruction() {
        let prompt =
            build_joint_prompt(&receipt_fields(), &doc(), &PromptPlan::joint("receipt")).unwrap();
        assert!(prompt
            .text
            .ends_with("Respond with a JSON object with keys subtotal, tax, total."));
    }

    #[test]
    fn joint_rejects_single_field() {
        let fields = vec![FieldSpec::new("tax", "Tax", FieldKind::Numeric)];
        let err = build_joint_prompt(&fields, &doc(), &PromptPlan::joint("receipt"));
        assert_eq!(err.unwrap_err(), PromptError::TooFewFieldsForJoint(1));
    }

    #[test]
    fn separate_and_joint_cover_the_same_fields() {
        let fields = receipt_fields();
        let separate =
            build_separate_prompts(&fields, &doc(), &PromptPlan::separate("receipt")).unwrap();
        let joint = build_joint_prompt(&fields, &doc(), &PromptPlan::joint("receipt")).unwrap();
        let union: Vec<String> = separate.iter().flat_map(|p| p.field_ids.clone()).collect();
        assert_eq!(union, joint.field_ids);
    }

    fn exemplar(values: &[(&str, &str)]) -> Exemplar {
        Exemplar {
            image: ImageRef::Path("ex.png".to_string()),
            values: values
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    #[test]
    fn four_shot_yields_five_images() {
        let prompt =
            build_joint_prompt(&receipt_fields(), &doc(), &PromptPlan::joint("receipt")).unwrap();
        let exemplars: Vec<Exemplar> = (0..4)
            .map(|_| exemplar(&[("subtotal", "1"), ("tax", "2"), ("total", "3")]))
            .collect();
        let shot = attach_few_shot(&prompt, &exemplars, 4, true).unwrap();
        assert_eq!(shot.images.len(), 5);
        // Query image stays last.
        assert_eq!(shot.images.last(), Some(&doc().image));
        assert!(shot.text.starts_with("Example 1:\n"));
        assert!(shot.text.ends_with(&prompt.text));
    }

    #[test]
    fn exemplar_block_renders_exactly() {
        let fields = receipt_fields();
        let prompt = build_joint_prompt(
            &fields,
            &doc(),
            &PromptPlan::joint("receipt").without_output_instruction(),
        )
        .unwrap();
        let exemplars = vec![exemplar(&[
            ("subtotal", "43.636"),
            ("tax", "4.364"),
            ("total", "48.000"),
        ])];
        let shot = attach_few_shot(&prompt, &exemplars, 1, true).unwrap();
        assert_eq!(
            shot.text,
            "Example 1:\n\
             {\"subtotal\": \"43.636\", \"tax\": \"4.364\", \"total\": \"48.000\"}\n\n\
             Given the following image of a receipt, extract the Subtotal, Tax, and Total."
        );

        let single = build_separate_prompts(&fields[..1], &doc(), &PromptPlan::separate("receipt"))
            .unwrap()
            .remove(0);
        let shot = attach_few_shot(&single, &exemplars, 1, true).unwrap();
        assert!(shot.text.starts_with("Example 1:\nsubtotal: 43.636\n\n"));
    }

    #[test]
    fn zero_shot_is_identity() {
        let prompt =
            build_joint_prompt(&receipt_fields(), &doc(), &PromptPlan::joint("receipt")).unwrap();
        let same = attach_few_shot(&prompt, &[], 0, true).unwrap();
        assert_eq!(same, prompt);
    }

    #[test]
    fn exemplar_missing_field_is_rejected() {
        let prompt =
            build_joint_prompt(&receipt_fields(), &doc(), &PromptPlan::joint("receipt")).unwrap();
        let incomplete = vec![exemplar(&[("subtotal", "1"), ("total", "3")])];
        let err = attach_few_shot(&prompt, &incomplete, 1, true).unwrap_err();
        assert_eq!(
            err,
            PromptError::ExemplarMissingField {
                field: "tax".to_string()
            }
        );
    }

    #[test]
    fn text_only_exemplars_keep_one_image() {
        let prompt =
            build_joint_prompt(&receipt_fields(), &doc(), &PromptPlan::joint("receipt")).unwrap();
        let exemplars = vec![exemplar(&[("subtotal", "1"), ("tax", "2"), ("total", "3")]); 2];
        let shot = attach_few_shot(&prompt, &exemplars, 2, false).unwrap();
        assert_eq!(shot.images.len(), 1);
    }

    #[test]
    fn prompt_building_is_deterministic() {
        let fields = receipt_fields();
        let a = build_joint_prompt(&fields, &doc(), &PromptPlan::joint("receipt")).unwrap();
        let b = build_joint_prompt(&fields, &doc(), &PromptPlan::joint("receipt")).unwrap();
        assert_eq!(a.text.as_bytes(), b.text.as_bytes());
    }
}
