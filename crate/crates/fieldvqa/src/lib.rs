//! Multi-field information extraction from document images over chat-style
//! vision-language-model endpoints.
//!
//! The pipeline: load or import a [`dataset::DatasetBundle`], build separate
//! or joint prompts ([`prompt`]), dispatch them through a
//! [`backend::Backend`] (live HTTP or deterministic mock), recover field
//! values from raw model text ([`parse`]), aggregate document- and
//! field-level accuracy ([`metrics`]), quantify inter-field dependence via
//! two-predictor regression ([`dependence`]), and orchestrate, archive and
//! replay whole experiments ([`runner`]).

pub mod backend;
pub mod dataset;
pub mod dependence;
pub mod metrics;
pub mod parse;
pub mod prompt;
pub mod report;
pub mod runner;
pub mod synthetic;

pub use dataset::{DatasetBundle, DocumentRecord, FieldKind, FieldSpec, ImageRef, NumericProfile};
pub use prompt::Strategy;
