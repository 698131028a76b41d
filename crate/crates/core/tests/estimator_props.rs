use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use robust_sur::estimators::{self, FastSurConfig, SurerobConfig, Weighting};
use robust_sur::regression::{self, MmConfig};
use robust_sur::simulation::{self, Contamination, DesignLaw, SimScenario};
use robust_sur::{seeds, Equation, Method, SurError, SurSystem};

fn mvn_rows(n: usize, sigma: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
    let l = sigma.clone().cholesky().unwrap().l();
    DMatrix::from_fn(n, sigma.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal)) * l.transpose()
}

fn random_system(n: usize, ps: &[usize], sigma: &DMatrix<f64>, seed: u64) -> (SurSystem, DVector<f64>) {
    let mut rng = seeds::rng_for(seed, &[]);
    let e = mvn_rows(n, sigma, &mut rng);
    let mut beta = Vec::new();
    let eqs = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            let b = DVector::from_fn(p, |j, _| 1.0 + 0.5 * (i + j) as f64);
            beta.extend(b.iter().cloned());
            Equation::new(&x * b + e.column(i), x)
        })
        .collect();
    (SurSystem::new(eqs).unwrap(), DVector::from_vec(beta))
}

fn corr(m: usize, r: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { r })
}

fn equationwise_ols(sys: &SurSystem) -> DVector<f64> {
    sys.concat_beta(
        &sys.equations()
            .iter()
            .map(|eq| {
                let xtx = eq.design.transpose() * &eq.design;
                xtx.try_inverse().unwrap() * eq.design.transpose() * &eq.response
            })
            .collect::<Vec<_>>(),
    )
}

fn fast(seed: u64) -> FastSurConfig {
    FastSurConfig { seed, ..Default::default() }
}

fn scenario(m: usize, contamination: Contamination, eps: f64, k: f64) -> SimScenario {
    SimScenario {
        name: "props".into(),
        n: 100,
        p: 5,
        m,
        contamination,
        epsilon_list: vec![eps],
        k_list: Some(vec![k]),
        cn: 100.0,
        reps: 1,
        seed: 77,
        methods: Method::ALL.to_vec(),
        design: DesignLaw::Normal,
        fast_candidates: None,
    }
}

/// Mean squared error of each method over `reps` replications.
fn paired_mse(sc: &SimScenario, reps: usize) -> Vec<(Method, f64)> {
    let mut recs = Vec::new();
    for r in 0..reps {
        recs.extend(simulation::run_replication(sc, r).unwrap());
    }
    simulation::summarise(&recs)
        .into_iter()
        .map(|s| {
            assert_eq!(s.n_failed, 0, "{} failed", s.method);
            (s.method, s.mse)
        })
        .collect()
}

fn get(v: &[(Method, f64)], m: Method) -> f64 {
    v.iter().find(|(k, _)| *k == m).unwrap().1
}

#[test]
fn identical_regressors_give_equationwise_ols() {
    let mut rng = seeds::rng_for(1, &[]);
    let x = DMatrix::from_fn(50, 3, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
    let e = mvn_rows(50, &corr(3, 0.7), &mut rng);
    let eqs = (0..3)
        .map(|i| Equation::new(&x * DVector::from_element(3, i as f64 + 1.0) + e.column(i), x.clone()))
        .collect();
    let sys = SurSystem::new(eqs).unwrap();
    let fit = estimators::fit_sure(&sys).unwrap();
    assert!((fit.beta - equationwise_ols(&sys)).amax() < 1e-8);
}

#[test]
fn single_equation_sure_is_ols() {
    let (sys, _) = random_system(40, &[4], &corr(1, 0.0), 2);
    let fit = estimators::fit_sure(&sys).unwrap();
    assert!((fit.beta - equationwise_ols(&sys)).amax() < 1e-10);
    assert!(fit.cell_weights.iter().all(|&w| w == 1.0));
}

#[test]
fn single_equation_surerob_reductions() {
    let (sys, _) = random_system(80, &[3], &corr(1, 0.0), 3);
    let eq = sys.equation(0);
    let cfg = SurerobConfig { seed: 5, ..Default::default() };
    let mm = regression::mm_regression(eq, &MmConfig { seed: seeds::derive_seed(5, &[0]), ..Default::default() }).unwrap();

    let one_sided = estimators::fit_surerob(&sys, &SurerobConfig { weighting: Weighting::SquareRoot, ..cfg.clone() }).unwrap();
    assert!((&one_sided.beta - &mm.beta).amax() < 1e-6);

    // two-sided weights: single-equation least squares with squared MM weights
    let fit = estimators::fit_surerob(&sys, &cfg).unwrap();
    let w2 = DVector::from_fn(80, |k, _| fit.cell_weights[(k, 0)].powi(2));
    let xw = DMatrix::from_fn(80, 3, |k, j| eq.design[(k, j)] * w2[k]);
    let oracle = (xw.transpose() * &eq.design).try_inverse().unwrap() * xw.transpose() * &eq.response;
    assert!((fit.beta - oracle).amax() < 1e-6);
}

#[test]
fn uncorrelated_errors_make_sure_close_to_ols() {
    let (sys, _) = random_system(2000, &[3, 2, 4], &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5])), 4);
    let fit = estimators::fit_sure(&sys).unwrap();
    let ols = equationwise_ols(&sys);
    let cov = fit.beta_cov.unwrap();
    for j in 0..ols.len() {
        assert!((fit.beta[j] - ols[j]).abs() < 3.0 * cov[(j, j)].sqrt(), "coef {j}");
    }
}

#[test]
fn singular_first_step_covariance_reports_eigenvalues() {
    let (sys, _) = random_system(30, &[2], &corr(1, 0.0), 5);
    let eq = sys.equation(0).clone();
    let dup = SurSystem::new(vec![eq.clone(), eq]).unwrap();
    match estimators::fit_sure(&dup) {
        Err(SurError::SingularCovariance { eigenvalues }) => {
            assert_eq!(eigenvalues.len(), 2);
            assert!(eigenvalues[0].abs() < 1e-10);
        }
        other => panic!("expected singular covariance, got {other:?}"),
    }
}

#[test]
fn fits_satisfy_output_invariants() {
    let (sys, _) = random_system(60, &[2, 3, 2], &corr(3, 0.5), 6);
    for method in Method::ALL {
        let fit = estimators::fit(&sys, method, 9).unwrap();
        for s in [&fit.sigma1, &fit.sigma2] {
            assert!((s - s.transpose()).amax() < 1e-12);
            assert!(s.clone().symmetric_eigen().eigenvalues.min() > 0.0);
        }
        assert!(fit.cell_weights.iter().all(|w| (0.0..=1.0).contains(w)));
        match &fit.beta_cov {
            Some(c) => {
                assert!((c - c.transpose()).amax() < 1e-12);
                assert!(c.clone().symmetric_eigen().eigenvalues.min() >= -1e-12);
            }
            None => assert_eq!(method, Method::FastSur),
        }
    }
}

#[test]
fn fast_sur_affine_equivariance_for_diagonal_maps() {
    let (sys, _) = random_system(80, &[2, 2, 3], &corr(3, 0.4), 7);
    let a = [2.0, 0.5, 3.0];
    let y = sys.response_matrix();
    let scaled = sys.with_responses(&DMatrix::from_fn(80, 3, |k, i| y[(k, i)] * a[i])).unwrap();
    let base = estimators::fit_fast_sur(&sys, &fast(3)).unwrap();
    let fit = estimators::fit_fast_sur(&scaled, &fast(3)).unwrap();
    for i in 0..3 {
        let o = sys.offset(i);
        for j in 0..sys.equation(i).p() {
            let want = base.beta[o + j] * a[i];
            assert!((fit.beta[o + j] - want).abs() < 1e-4 * (1.0 + want.abs()));
        }
        for l in 0..3 {
            let want = base.sigma2[(i, l)] * a[i] * a[l];
            assert!((fit.sigma2[(i, l)] - want).abs() < 1e-4 * (base.sigma2[(i, i)] * base.sigma2[(l, l)]).sqrt() * a[i] * a[l]);
        }
    }
}

#[test]
fn surerob_clean_data_efficiency() {
    let sc = SimScenario { n: 200, ..scenario(5, Contamination::None, 0.0, 0.0) };
    let sc = SimScenario { methods: vec![Method::Sure, Method::Surerob], ..sc };
    let mse = paired_mse(&sc, 100);
    assert!(get(&mse, Method::Surerob) <= 2.0 * get(&mse, Method::Sure), "{mse:?}");
}

#[test]
fn fast_sur_tracks_sure_on_clean_data() {
    let reps = 60;
    let mut diffs = vec![Vec::new(); 4];
    for r in 0..reps {
        let (sys, _) = random_system(200, &[2, 2], &corr(2, 0.6), 1000 + r);
        let s = estimators::fit_sure(&sys).unwrap();
        let f = estimators::fit_fast_sur(&sys, &fast(r)).unwrap();
        for j in 0..4 {
            diffs[j].push(f.beta[j] - s.beta[j]);
        }
    }
    for (j, d) in diffs.iter().enumerate() {
        let mean = d.iter().sum::<f64>() / reps as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        assert!(mean.abs() < 3.0 * sd / (reps as f64).sqrt(), "coef {j}: {mean} (sd {sd})");
    }
}

#[test]
fn icm_ordering_with_ten_equations() {
    let mse = paired_mse(&scenario(10, Contamination::Icm, 0.10, 50.0), 50);
    let rob = get(&mse, Method::Surerob);
    assert!(rob < get(&mse, Method::Sure) && rob < get(&mse, Method::FastSur), "{mse:?}");
}

#[test]
fn fast_sur_beats_sure_under_row_outliers() {
    let sc = SimScenario { methods: vec![Method::Sure, Method::FastSur], ..scenario(5, Contamination::Thcm, 0.10, 50.0) };
    let mse = paired_mse(&sc, 50);
    assert!(get(&mse, Method::FastSur) < get(&mse, Method::Sure), "{mse:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn regression_equivariance_all_methods(seed in 0u64..1000, shift in prop::collection::vec(-10.0f64..10.0, 7)) {
        let (sys, _) = random_system(60, &[2, 3, 2], &corr(3, 0.5), seed);
        let delta = DVector::from_vec(shift);
        let fitted = sys.fitted(&delta).unwrap();
        let shifted = sys.with_responses(&(sys.response_matrix() + fitted)).unwrap();
        for method in Method::ALL {
            let base = estimators::fit(&sys, method, seed).unwrap();
            let fit = estimators::fit(&shifted, method, seed).unwrap();
            prop_assert!((&fit.beta - (&base.beta + &delta)).amax() < 1e-6 * (1.0 + delta.amax()), "{}", method);
            prop_assert!((&fit.sigma2 - &base.sigma2).amax() < 1e-6 * base.sigma2.amax());
        }
    }

    #[test]
    fn fast_sur_log_det_never_increases(seed in 0u64..1000) {
        let (sys, _) = random_system(70, &[2, 2, 2], &corr(3, 0.3), seed);
        let fit = estimators::fit_fast_sur(&sys, &FastSurConfig { n_cand: 60, seed, ..Default::default() }).unwrap();
        for w in fit.diagnostics.log_det_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn surerob_weights_recompute_from_outputs(seed in 0u64..1000) {
        let (sys, _) = random_system(50, &[2, 2], &corr(2, 0.5), seed);
        let cfg = SurerobConfig { seed, ..Default::default() };
        let fit = estimators::fit_surerob(&sys, &cfg).unwrap();
        let fam = cfg.mm.m_family().unwrap();
        prop_assert_eq!(fit.cell_weights, estimators::cell_weights(&fit.initial_residuals, &fit.scales, &fam));
    }
}
