//! Inter-field dependence: two-predictor ordinary least squares fits,
//! R-squared classification, and joint-prompt group recommendation.
//!
//! `fit_linear` solves `x = c1*y + c2*z + b` through a one-sided Jacobi
//! orthogonalization of the scaled design matrix rather than raw normal
//! equations, which keeps coefficients stable for magnitudes up to 1e9.
//! Predictor columns are ordered canonically before factorization so that
//! swapping `y` and `z` swaps `c1` and `c2` bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetBundle, FieldKind, NumericProfile};
use crate::parse::normalize;

/// Relative singular-value threshold below which the design counts as
/// rank-deficient.
const RANK_TOLERANCE: f64 = 1e-10;

/// A target field regressed on two predictor fields.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TripletSpec {
    pub target: String,
    pub predictor_a: String,
    pub predictor_b: String,
}

impl TripletSpec {
    pub fn new(
        target: impl Into<String>,
        predictor_a: impl Into<String>,
        predictor_b: impl Into<String>,
    ) -> Result<Self, DependenceError> {
        let triplet = TripletSpec {
            target: target.into(),
            predictor_a: predictor_a.into(),
            predictor_b: predictor_b.into(),
        };
        if triplet.target == triplet.predictor_a
            || triplet.target == triplet.predictor_b
            || triplet.predictor_a == triplet.predictor_b
        {
            return Err(DependenceError::DegenerateTriplet {
                triplet: format!(
                    "({} | {}, {})",
                    triplet.target, triplet.predictor_a, triplet.predictor_b
                ),
            });
        }
        Ok(triplet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionFlag {
    Ok,
    RankDeficient,
    ZeroTargetVariance,
}

/// Least-squares solution of `x = c1*y + c2*z + b` with its goodness of fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionFit {
    pub c1: f64,
    pub c2: f64,
    pub b: f64,
    /// Absent when the target has zero variance.
    pub r_squared: Option<f64>,
    pub n: usize,
    pub condition_flag: ConditionFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependenceClass {
    High,
    Low,
    Intermediate,
}

impl DependenceClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            DependenceClass::High => "high",
            DependenceClass::Low => "low",
            DependenceClass::Intermediate => "intermediate",
        }
    }
}

/// Aligned numeric series for one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericSeries {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
}

impl NumericSeries {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DependenceError {
    #[error("triplet fields must be pairwise distinct: {triplet}")]
    DegenerateTriplet { triplet: String },
    #[error("field `{field}` is not numeric")]
    NonNumericField { field: String },
    #[error("field `{field}` is not declared in the dataset")]
    UnknownField { field: String },
    #[error("insufficient data: {n} usable documents, need at least 4")]
    InsufficientData { n: usize },
    #[error("series lengths differ: xs={xs}, ys={ys}, zs={zs}")]
    LengthMismatch { xs: usize, ys: usize, zs: usize },
    #[error("fit is degenerate ({flag:?}); classification refused")]
    DegenerateFit { flag: ConditionFlag },
    #[error("need at least 3 numeric fields, got {0}")]
    TooFewNumericFields(usize),
}

/// Extracts aligned magnitudes for a triplet: only documents where all
/// three fields are present and numerically parseable contribute, and the
/// magnitude is the separator-free digit string read as an integer.
pub fn extract_numeric_series(
    bundle: &DatasetBundle,
    triplet: &TripletSpec,
) -> Result<NumericSeries, DependenceError> {
    for field in [&triplet.target, &triplet.predictor_a, &triplet.predictor_b] {
        let spec = bundle
            .field(field)
            .ok_or_else(|| DependenceError::UnknownField {
                field: field.clone(),
            })?;
        if spec.kind != FieldKind::Numeric {
            return Err(DependenceError::NonNumericField {
                field: field.clone(),
            });
        }
    }
    let mut series = NumericSeries {
        xs: Vec::new(),
        ys: Vec::new(),
        zs: Vec::new(),
    };
    for doc in &bundle.documents {
        let values = [
            doc.truth.get(&triplet.target),
            doc.truth.get(&triplet.predictor_a),
            doc.truth.get(&triplet.predictor_b),
        ];
        let magnitudes: Vec<Option<f64>> = values
            .iter()
            .map(|v| v.and_then(|s| numeric_magnitude(s, bundle.numeric_profile)))
            .collect();
        if let [Some(x), Some(y), Some(z)] = magnitudes[..] {
            series.xs.push(x);
            series.ys.push(y);
            series.zs.push(z);
        }
    }
    if series.len() < 4 {
        return Err(DependenceError::InsufficientData { n: series.len() });
    }
    Ok(series)
}

/// Integer magnitude of a gold value via its separator-free digit string.
pub fn numeric_magnitude(value: &str, profile: NumericProfile) -> Option<f64> {
    let digits = normalize(value, FieldKind::Numeric, profile).numeric_digits?;
    // Past ~18 digits an i64 overflows and no receipt amount is that large.
    if digits.trim_start_matches('-').len() > 18 {
        return None;
    }
    digits.parse::<i64>().ok().map(|v| v as f64)
}

/// Ordinary least squares for `x = c1*y + c2*z + b`.
///
/// Rank deficiency (relative singular value below 1e-10) yields the
/// minimum-norm solution and a `RankDeficient` flag; zero variance in `x`
/// reports `ZeroTargetVariance` with `r_squared` absent.
pub fn fit_linear(series: &NumericSeries) -> Result<RegressionFit, DependenceError> {
    let n = series.xs.len();
    if series.ys.len() != n || series.zs.len() != n {
        return Err(DependenceError::LengthMismatch {
            xs: series.xs.len(),
            ys: series.ys.len(),
            zs: series.zs.len(),
        });
    }
    if n < 4 {
        return Err(DependenceError::InsufficientData { n });
    }

    // Canonicalize both the predictor order and the row order before any
    // arithmetic: the fit is then bit-exact under sample permutation, and
    // swapping y and z performs identical arithmetic with the coefficient
    // labels exchanged.
    let sorted_rows = |a: &[f64], b: &[f64]| {
        let mut rows: Vec<(f64, f64, f64)> = (0..n).map(|i| (a[i], b[i], series.xs[i])).collect();
        rows.sort_by(|p, q| {
            p.0.total_cmp(&q.0)
                .then_with(|| p.1.total_cmp(&q.1))
                .then_with(|| p.2.total_cmp(&q.2))
        });
        rows
    };
    let rows_yz = sorted_rows(&series.ys, &series.zs);
    let rows_zy = sorted_rows(&series.zs, &series.ys);
    let swap = row_key_less(&rows_zy, &rows_yz);
    let rows = if swap { rows_zy } else { rows_yz };
    let first: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let second: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.2).collect();

    let (coefs, rank_deficient) = least_squares_3(&first, &second, &xs);
    let (c_first, c_second, b) = (coefs[0], coefs[1], coefs[2]);
    let (c1, c2) = if swap {
        (c_second, c_first)
    } else {
        (c_first, c_second)
    };

    let mean_x = xs.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    let ss_res: f64 = (0..n)
        .map(|i| {
            let predicted = c_first * first[i] + c_second * second[i] + b;
            (xs[i] - predicted).powi(2)
        })
        .sum();

    if ss_tot == 0.0 {
        return Ok(RegressionFit {
            c1,
            c2,
            b,
            r_squared: None,
            n,
            condition_flag: ConditionFlag::ZeroTargetVariance,
        });
    }
    let mut r_squared = 1.0 - ss_res / ss_tot;
    if (-1e-12..0.0).contains(&r_squared) {
        log::debug!("clamping r_squared {r_squared:e} to 0");
        r_squared = 0.0;
    }
    Ok(RegressionFit {
        c1,
        c2,
        b,
        r_squared: Some(r_squared),
        n,
        condition_flag: if rank_deficient {
            ConditionFlag::RankDeficient
        } else {
            ConditionFlag::Ok
        },
    })
}

fn row_key_less(a: &[(f64, f64, f64)], b: &[(f64, f64, f64)]) -> bool {
    for (p, q) in a.iter().zip(b) {
        let ord =
            p.0.total_cmp(&q.0)
                .then_with(|| p.1.total_cmp(&q.1))
                .then_with(|| p.2.total_cmp(&q.2));
        match ord {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Minimum-norm least squares of `[a b 1] * coefs ~ x` via one-sided Jacobi
/// orthogonalization on unit-scaled columns. Returns the coefficients and
/// whether the design was rank-deficient.
fn least_squares_3(a: &[f64], b: &[f64], x: &[f64]) -> ([f64; 3], bool) {
    let n = a.len();
    let mut cols: [Vec<f64>; 3] = [a.to_vec(), b.to_vec(), vec![1.0; n]];

    // Unit-scale each column; remember the scale to undo it afterwards.
    let mut scales = [1.0f64; 3];
    for (j, col) in cols.iter_mut().enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            scales[j] = norm;
            for v in col.iter_mut() {
                *v /= norm;
            }
        }
    }

    // v starts as the identity and accumulates the right rotations.
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..60 {
        let mut converged = true;
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
            let beta: f64 = cols[q].iter().map(|v| v * v).sum();
            let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(a, b)| a * b).sum();
            if alpha == 0.0 || beta == 0.0 {
                continue;
            }
            if gamma.abs() <= 1e-14 * (alpha * beta).sqrt() {
                continue;
            }
            converged = false;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            let (left, right) = cols.split_at_mut(q);
            for (vp, vq) in left[p].iter_mut().zip(right[0].iter_mut()) {
                let (a, b) = (*vp, *vq);
                *vp = c * a - s * b;
                *vq = s * a + c * b;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
        if converged {
            break;
        }
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let sigma_max = sigma.iter().cloned().fold(0.0f64, f64::max);
    let rank_deficient = sigma_max == 0.0 || sigma.iter().any(|s| *s < RANK_TOLERANCE * sigma_max);

    // coefs = sum over usable singular directions of ((u_j . x) / sigma_j) v_j
    let mut scaled_coefs = [0.0f64; 3];
    for j in 0..3 {
        if sigma[j] <= RANK_TOLERANCE * sigma_max || sigma[j] == 0.0 {
            continue;
        }
        let u_dot_x: f64 = cols[j].iter().zip(x).map(|(u, xv)| u * xv).sum::<f64>() / sigma[j];
        let factor = u_dot_x / sigma[j];
        for (i, coef) in scaled_coefs.iter_mut().enumerate() {
            *coef += factor * v[i][j];
        }
    }
    let mut coefs = [0.0f64; 3];
    for j in 0..3 {
        coefs[j] = scaled_coefs[j] / scales[j];
    }
    (coefs, rank_deficient)
}

/// Classifies a healthy fit: high iff R^2 >= 0.9, low iff R^2 <= 0.1.
pub fn classify(fit: &RegressionFit) -> Result<DependenceClass, DependenceError> {
    if fit.condition_flag != ConditionFlag::Ok {
        return Err(DependenceError::DegenerateFit {
            flag: fit.condition_flag,
        });
    }
    let r2 = fit.r_squared.ok_or(DependenceError::DegenerateFit {
        flag: fit.condition_flag,
    })?;
    Ok(if r2 >= 0.9 {
        DependenceClass::High
    } else if r2 <= 0.1 {
        DependenceClass::Low
    } else {
        DependenceClass::Intermediate
    })
}

/// Every target fit against every unordered predictor pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DependenceMatrix {
    pub fits: Vec<(TripletSpec, RegressionFit)>,
    /// Triplets that could not be fit, with the recorded reason.
    pub skipped: Vec<(TripletSpec, String)>,
}

impl DependenceMatrix {
    pub fn fit(&self, triplet: &TripletSpec) -> Option<&RegressionFit> {
        self.fits
            .iter()
            .find(|(t, _)| t == triplet)
            .map(|(_, fit)| fit)
    }
}

/// Sweeps all ordered triplets over `targets` (predictor pairs are
/// unordered, `predictor_a < predictor_b` lexically). Triplets lacking data
/// are recorded in `skipped` rather than failing the sweep.
pub fn dependence_matrix(
    bundle: &DatasetBundle,
    targets: &[String],
) -> Result<DependenceMatrix, DependenceError> {
    for field in targets {
        let spec = bundle
            .field(field)
            .ok_or_else(|| DependenceError::UnknownField {
                field: field.clone(),
            })?;
        if spec.kind != FieldKind::Numeric {
            return Err(DependenceError::NonNumericField {
                field: field.clone(),
            });
        }
    }
    if targets.len() < 3 {
        return Err(DependenceError::TooFewNumericFields(targets.len()));
    }
    let mut matrix = DependenceMatrix::default();
    for target in targets {
        let mut others: Vec<&String> = targets.iter().filter(|f| *f != target).collect();
        others.sort();
        for i in 0..others.len() {
            for j in (i + 1)..others.len() {
                let triplet = TripletSpec::new(target.clone(), others[i], others[j])
                    .expect("distinct by construction");
                match extract_numeric_series(bundle, &triplet).and_then(|s| fit_linear(&s)) {
                    Ok(fit) => matrix.fits.push((triplet, fit)),
                    Err(e) => matrix.skipped.push((triplet, e.to_string())),
                }
            }
        }
    }
    Ok(matrix)
}

/// Greedy agglomeration of fields into joint-prompt groups.
///
/// Triplets are visited by descending R^2 (ties broken lexically). A triplet
/// with R^2 >= threshold seeds a group when all members are unassigned, or
/// pulls its unassigned members into a group already holding the rest, as
/// long as the group stays within 6 fields. Leftover fields become
/// singletons.
pub fn recommend_groups(matrix: &DependenceMatrix, threshold: f64) -> Vec<Vec<String>> {
    const MAX_GROUP: usize = 6;
    let mut universe: BTreeSet<String> = BTreeSet::new();
    for (triplet, _) in &matrix.fits {
        universe.insert(triplet.target.clone());
        universe.insert(triplet.predictor_a.clone());
        universe.insert(triplet.predictor_b.clone());
    }
    for (triplet, _) in &matrix.skipped {
        universe.insert(triplet.target.clone());
        universe.insert(triplet.predictor_a.clone());
        universe.insert(triplet.predictor_b.clone());
    }

    let mut qualifying: Vec<(&TripletSpec, f64)> = matrix
        .fits
        .iter()
        .filter(|(_, fit)| fit.condition_flag == ConditionFlag::Ok)
        .filter_map(|(t, fit)| fit.r_squared.map(|r2| (t, r2)))
        .filter(|(_, r2)| *r2 >= threshold)
        .collect();
    qualifying.sort_by(|(ta, ra), (tb, rb)| rb.total_cmp(ra).then_with(|| ta.cmp(tb)));

    let mut assignment: BTreeMap<String, usize> = BTreeMap::new();
    let mut groups: Vec<BTreeSet<String>> = Vec::new();
    let mut changed = true;
    while changed {
        changed = false;
        for (triplet, _) in &qualifying {
            let members = [
                triplet.target.clone(),
                triplet.predictor_a.clone(),
                triplet.predictor_b.clone(),
            ];
            let assigned_groups: BTreeSet<usize> = members
                .iter()
                .filter_map(|m| assignment.get(m))
                .copied()
                .collect();
            if assigned_groups.is_empty() {
                let idx = groups.len();
                groups.push(members.iter().cloned().collect());
                for m in &members {
                    assignment.insert(m.clone(), idx);
                }
                changed = true;
            } else if assigned_groups.len() == 1 {
                let idx = *assigned_groups.iter().next().unwrap();
                let unassigned: Vec<&String> = members
                    .iter()
                    .filter(|m| !assignment.contains_key(*m))
                    .collect();
                if unassigned.is_empty() {
                    continue;
                }
                if groups[idx].len() + unassigned.len() <= MAX_GROUP {
                    for m in unassigned {
                        groups[idx].insert(m.clone());
                        assignment.insert(m.clone(), idx);
                    }
                    changed = true;
                }
            }
            // Members split across two groups: leave them; merging whole
            // groups could exceed the size cap and is not the stated rule.
        }
    }

    let mut out: Vec<Vec<String>> = groups
        .into_iter()
        .map(|g| g.into_iter().collect())
        .collect();
    for field in universe {
        if !assignment.contains_key(&field) {
            out.push(vec![field]);
        }
    }
    out
}
