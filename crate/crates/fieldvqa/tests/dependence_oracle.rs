//! Regression solver checked against an independently coded closed-form
//! oracle on seeded random instances.

mod common;

use common::{close_rel, ols_oracle};
use fieldvqa::dependence::{fit_linear, ConditionFlag, NumericSeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(seed: u64) -> NumericSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4usize..=500);
    loop {
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..1000.0)).collect();
        let zs: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..1000.0)).collect();
        let c1 = rng.gen_range(-5.0..5.0);
        let c2 = rng.gen_range(-5.0..5.0);
        let b = rng.gen_range(-100.0..100.0);
        let xs: Vec<f64> = ys
            .iter()
            .zip(&zs)
            .map(|(y, z)| c1 * y + c2 * z + b + rng.gen_range(-10.0..10.0))
            .collect();
        // Avoid near-degenerate designs; the oracle's Cramer solve needs a
        // healthy determinant.
        let my = ys.iter().sum::<f64>() / n as f64;
        let mz = zs.iter().sum::<f64>() / n as f64;
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let szz: f64 = zs.iter().map(|z| (z - mz).powi(2)).sum();
        let syz: f64 = ys.iter().zip(&zs).map(|(y, z)| (y - my) * (z - mz)).sum();
        if (syy * szz - syz * syz).abs() > 1e-6 * syy * szz {
            return NumericSeries { xs, ys, zs };
        }
    }
}

#[test]
fn solver_matches_closed_form_oracle_on_100_instances() {
    for seed in 0..100u64 {
        let series = random_instance(seed);
        let fit = fit_linear(&series).unwrap();
        assert_eq!(fit.condition_flag, ConditionFlag::Ok, "seed {seed}");
        let (c1, c2, b, r2) = ols_oracle(&series.xs, &series.ys, &series.zs);
        assert!(
            close_rel(fit.c1, c1, 1e-9),
            "seed {seed}: c1 {} vs {}",
            fit.c1,
            c1
        );
        assert!(
            close_rel(fit.c2, c2, 1e-9),
            "seed {seed}: c2 {} vs {}",
            fit.c2,
            c2
        );
        assert!(
            close_rel(fit.b, b, 1e-9),
            "seed {seed}: b {} vs {}",
            fit.b,
            b
        );
        assert!(
            close_rel(fit.r_squared.unwrap(), r2, 1e-9),
            "seed {seed}: r2 {} vs {}",
            fit.r_squared.unwrap(),
            r2
        );
    }
}

#[test]
fn noisy_sum_relation_matches_oracle_r_squared() {
    // x = y + z plus ~5%-of-mean Gaussian noise (Box-Muller from a seeded
    // stream); the solver's R^2 must equal the closed-form oracle's.
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let n = 200usize;
    let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(100.0..1000.0)).collect();
    let zs: Vec<f64> = (0..n).map(|_| rng.gen_range(100.0..1000.0)).collect();
    let mean = (ys.iter().sum::<f64>() + zs.iter().sum::<f64>()) / n as f64;
    let sigma = 0.05 * mean;
    let xs: Vec<f64> = ys
        .iter()
        .zip(&zs)
        .map(|(y, z)| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let gaussian = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            y + z + sigma * gaussian
        })
        .collect();
    let series = NumericSeries { xs, ys, zs };
    let fit = fit_linear(&series).unwrap();
    let (_, _, _, r2) = ols_oracle(&series.xs, &series.ys, &series.zs);
    assert!(
        close_rel(fit.r_squared.unwrap(), r2, 1e-9),
        "{} vs {r2}",
        fit.r_squared.unwrap()
    );
}
