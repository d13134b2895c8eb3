//! Shared test support: an independent closed-form OLS oracle and the
//! published golden input/output fixtures.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fieldvqa::dataset::{
    DatasetBundle, DocumentRecord, FieldKind, FieldSpec, ImageRef, NumericProfile,
};

/// Closed-form two-predictor OLS via centered normal equations (Cramer's
/// rule). Deliberately a different algebraic route than the library's
/// orthogonalization-based solver.
pub fn ols_oracle(xs: &[f64], ys: &[f64], zs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my, mz) = (mean(xs), mean(ys), mean(zs));
    let mut syy = 0.0;
    let mut szz = 0.0;
    let mut syz = 0.0;
    let mut sxy = 0.0;
    let mut sxz = 0.0;
    let mut sxx = 0.0;
    for i in 0..xs.len() {
        let (dx, dy, dz) = (xs[i] - mx, ys[i] - my, zs[i] - mz);
        syy += dy * dy;
        szz += dz * dz;
        syz += dy * dz;
        sxy += dx * dy;
        sxz += dx * dz;
        sxx += dx * dx;
    }
    let det = syy * szz - syz * syz;
    let c1 = (sxy * szz - sxz * syz) / det;
    let c2 = (sxz * syy - sxy * syz) / det;
    let b = mx - c1 * my - c2 * mz;
    let r2 = (c1 * sxy + c2 * sxz) / sxx;
    (c1, c2, b, r2)
}

/// |a - b| within `tol`, relative to the larger magnitude with a floor of 1.
pub fn close_rel(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * 1.0f64.max(a.abs()).max(b.abs())
}

/// One published model-output sample: gold values, the per-field separate
/// responses, the joint response, and which separate fields were flagged
/// wrong in the source.
pub struct GoldenSample {
    pub fields: Vec<FieldSpec>,
    pub truth: BTreeMap<String, String>,
    pub separate: Vec<(&'static str, &'static str)>,
    pub joint: &'static str,
    pub expected_separate_mismatches: Vec<&'static str>,
}

fn numeric_fields(ids: &[(&str, &str)]) -> Vec<FieldSpec> {
    ids.iter()
        .map(|(id, display)| FieldSpec::new(*id, *display, FieldKind::Numeric))
        .collect()
}

pub fn golden_sample_1() -> GoldenSample {
    GoldenSample {
        fields: numeric_fields(&[
            ("subtotal", "Subtotal"),
            ("service", "Service"),
            ("tax", "Tax"),
            ("total", "Total"),
        ]),
        truth: [
            ("subtotal", "1,346,000"),
            ("service", "100,950"),
            ("tax", "144,695"),
            ("total", "1,591,600"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
        separate: vec![
            ("subtotal", r#"{"subtotal_price": "1,346,000."}"#),
            ("service", r#"{"service_price": "100,950."}"#),
            ("tax", r#"{"tax_price": "100,950."}"#),
            ("total", r#"{"total_price": "1,591,600."}"#),
        ],
        joint: r#"{"subtotal_price": 1,346,000, "service_price": 100,950, "tax_price": 144,695, "total_price": 1,591,600}"#,
        expected_separate_mismatches: vec!["tax"],
    }
}

pub fn golden_sample_2() -> GoldenSample {
    GoldenSample {
        fields: numeric_fields(&[
            ("subtotal", "Subtotal"),
            ("tax", "Tax"),
            ("total", "Total"),
            ("cash", "Cash"),
            ("change", "Change"),
        ]),
        truth: [
            ("subtotal", "43.636"),
            ("tax", "4.364"),
            ("total", "48.000"),
            ("cash", "50.000"),
            ("change", "2.000"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
        separate: vec![
            ("subtotal", r#"{"subtotal_price": "43.636."}"#),
            ("tax", r#"{"tax_price": "4.364."}"#),
            ("total", r#"{"total_price": "43.636."}"#),
            ("cash", r#"{"cashprice": "43.636."}"#),
            ("change", r#"{"changeprice": "2.00."}"#),
        ],
        joint: r#"{"subtotal_price": 43.636, "tax_price": 4.364, "total_price": 48.000, "cashprice": 50.000, "changeprice": 2.000}"#,
        expected_separate_mismatches: vec!["total", "cash"],
    }
}

/// Wraps a golden sample into a one-document grouping-dot bundle.
pub fn golden_bundle(name: &str, sample: &GoldenSample) -> DatasetBundle {
    DatasetBundle {
        name: name.to_string(),
        numeric_profile: NumericProfile::GroupingDot,
        fields: sample.fields.clone(),
        documents: vec![DocumentRecord {
            id: "sample".to_string(),
            image: ImageRef::Inline {
                mime: "image/png".to_string(),
                data: Vec::new(),
            },
            truth: sample.truth.clone(),
        }],
    }
}
