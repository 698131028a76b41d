use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use robust_sur::loss::LossFamily;
use robust_sur::regression::{self, MmConfig};
use robust_sur::seeds;
use robust_sur::Equation;

fn gaussian_eq(n: usize, p: usize, seed: u64) -> (Equation, DVector<f64>) {
    let mut rng = seeds::rng_for(seed, &[]);
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let beta = DVector::from_fn(p, |j, _| 0.5 * j as f64 - 1.0);
    let e = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (Equation::new(&x * &beta + e, x), beta)
}

fn cfg(seed: u64) -> MmConfig {
    MmConfig { seed, ..Default::default() }
}

#[test]
fn ols_matches_normal_equations() {
    let (eq, _) = gaussian_eq(20, 3, 1);
    let xtx = eq.design.transpose() * &eq.design;
    let xty = eq.design.transpose() * &eq.response;
    let oracle = xtx.try_inverse().unwrap() * xty;
    let fit = regression::ols(&eq).unwrap();
    assert!((fit.beta - oracle).amax() < 1e-9);
}

#[test]
fn ols_interpolates_and_fits_intercept() {
    let (eq, beta) = gaussian_eq(12, 3, 2);
    let exact = Equation::new(&eq.design * &beta, eq.design.clone());
    assert!((regression::ols(&exact).unwrap().beta - &beta).amax() < 1e-10);
    let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 9.0]);
    let ones = Equation::new(y.clone(), DMatrix::from_element(4, 1, 1.0));
    assert!((regression::ols(&ones).unwrap().beta[0] - y.mean()).abs() < 1e-12);
}

#[test]
fn mm_close_to_ols_on_clean_data() {
    // n=200, p=5: every coefficient within 3 OLS standard errors, and the
    // paired difference has no systematic component over replications.
    let reps = 40;
    let mut diffs = vec![Vec::new(); 5];
    for r in 0..reps {
        let (eq, _) = gaussian_eq(200, 5, 100 + r);
        let ols = regression::ols(&eq).unwrap();
        let mm = regression::mm_regression(&eq, &cfg(r)).unwrap();
        let cov = (eq.design.transpose() * &eq.design).try_inverse().unwrap() * ols.scale.powi(2);
        for j in 0..5 {
            let d = mm.beta[j] - ols.beta[j];
            assert!(d.abs() < 3.0 * cov[(j, j)].sqrt(), "rep {r} coef {j}: {d}");
            diffs[j].push(d);
        }
    }
    for (j, d) in diffs.iter().enumerate() {
        let mean = d.iter().sum::<f64>() / reps as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd / (reps as f64).sqrt() + 1e-12, "coef {j}: {mean} sd {sd}");
    }
}

#[test]
fn mm_resists_row_outliers() {
    let (mut mse_mm, mut mse_ols) = (0.0, 0.0);
    for r in 0..20 {
        let (eq, beta) = gaussian_eq(100, 3, 500 + r);
        let mut y = eq.response.clone();
        for k in 0..30 {
            y[k] += 25.0;
        }
        let bad = Equation::new(y, eq.design.clone());
        mse_mm += (regression::mm_regression(&bad, &cfg(r)).unwrap().beta - &beta).norm_squared();
        mse_ols += (regression::ols(&bad).unwrap().beta - &beta).norm_squared();
    }
    assert!(mse_mm < 0.1 * mse_ols, "mm {mse_mm} ols {mse_ols}");
}

#[test]
fn s_candidates_survive_gross_outliers() {
    let (eq, _) = gaussian_eq(50, 2, 7);
    let fam = LossFamily::for_breakdown(1, 0.5).unwrap();
    let clean = regression::s_initial(&eq, &fam, 500, 2, 3).unwrap()[0].scale;
    let mut y = eq.response.clone();
    for k in 0..20 {
        y[k] = 1e6;
    }
    let bad = Equation::new(y, eq.design.clone());
    let c = regression::s_initial(&bad, &fam, 500, 2, 3).unwrap();
    assert!(c[0].scale < 3.0 * clean, "{} vs {clean}", c[0].scale);
    assert_eq!(c, regression::s_initial(&bad, &fam, 500, 2, 3).unwrap());
}

#[test]
fn exact_linear_law_gives_zero_scale() {
    let (eq, beta) = gaussian_eq(30, 3, 8);
    let exact = Equation::new(&eq.design * &beta, eq.design.clone());
    let fam = LossFamily::for_breakdown(1, 0.5).unwrap();
    assert_eq!(regression::s_initial(&exact, &fam, 50, 2, 1).unwrap()[0].scale, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn mm_regression_and_scale_equivariance(seed in 0u64..1000, delta in prop::collection::vec(-5.0f64..5.0, 3), lambda in 0.01f64..100.0) {
        let (eq, _) = gaussian_eq(40, 3, seed);
        let base = regression::mm_regression(&eq, &cfg(seed)).unwrap();
        let d = DVector::from_vec(delta);
        let shifted = Equation::new(&eq.response + &eq.design * &d, eq.design.clone());
        let fit = regression::mm_regression(&shifted, &cfg(seed)).unwrap();
        prop_assert!((fit.beta - (&base.beta + &d)).amax() < 1e-6 * (1.0 + d.amax()));
        prop_assert!((fit.scale - base.scale).abs() < 1e-6 * base.scale);

        let scaled = Equation::new(&eq.response * lambda, eq.design.clone());
        let fit = regression::mm_regression(&scaled, &cfg(seed)).unwrap();
        prop_assert!((fit.beta - &base.beta * lambda).amax() < 1e-6 * lambda * (1.0 + base.beta.amax()));
        prop_assert!((fit.scale - base.scale * lambda).abs() < 1e-6 * lambda * base.scale);

        let ols = regression::ols(&eq).unwrap();
        let ols_shift = regression::ols(&shifted).unwrap();
        prop_assert!((ols_shift.beta - (ols.beta + d)).amax() < 1e-6);
        prop_assert!(base.weights.iter().all(|w| (0.0..=1.0).contains(w)));
    }
}
