use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use robust_sur::simulation::{self, Contamination, DesignLaw, SimScenario};
use robust_sur::{seeds, Method, SurError};

fn scenario(n: usize, p: usize, m: usize) -> SimScenario {
    SimScenario {
        name: "sim".into(),
        n,
        p,
        m,
        contamination: Contamination::None,
        epsilon_list: vec![0.0],
        k_list: None,
        cn: 100.0,
        reps: 1,
        seed: 3,
        methods: Method::ALL.to_vec(),
        design: DesignLaw::Normal,
        fast_candidates: None,
    }
}

fn condition_number(s: &DMatrix<f64>) -> f64 {
    let ev = s.clone().symmetric_eigen().eigenvalues;
    ev.max() / ev.min()
}

#[test]
fn two_dimensional_correlation_is_determined_by_cn() {
    for seed in 0..20 {
        let r = simulation::random_correlation(2, 100.0, &mut seeds::rng_for(seed, &[])).unwrap();
        assert!((r[(0, 1)].abs() - 99.0 / 101.0).abs() < 0.01 * 99.0 / 101.0, "{}", r[(0, 1)]);
    }
}

#[test]
fn thcm_direction_has_unit_mahalanobis_norm() {
    for seed in 0..10 {
        let sigma = simulation::random_correlation(5, 100.0, &mut seeds::rng_for(seed, &[])).unwrap();
        let v = simulation::thcm_direction(&sigma);
        let q = (v.transpose() * sigma.clone().try_inverse().unwrap() * &v)[(0, 0)];
        assert!((q - 1.0).abs() < 1e-10, "{q}");
    }
}

#[test]
fn draws_are_deterministic_and_rebuild_responses() {
    let sc = scenario(40, 3, 3);
    let sigma = simulation::random_correlation(3, 100.0, &mut seeds::rng_for(1, &[])).unwrap();
    let a = simulation::draw_system(&sc, &sigma, &mut seeds::rng_for(2, &[])).unwrap();
    let b = simulation::draw_system(&sc, &sigma, &mut seeds::rng_for(2, &[])).unwrap();
    assert_eq!(a.system, b.system);
    assert_eq!(a.beta, b.beta);
    assert!(a.beta.iter().all(|b| b.abs() <= simulation::BETA_CLAMP));
    let resid = robust_sur::model::residuals(&a.system, &a.beta).unwrap();
    assert!((resid.values - &a.errors).amax() < 1e-10);
}

#[test]
fn error_covariance_matches_sigma_for_large_n() {
    let sc = scenario(100_000, 1, 4);
    let sigma = simulation::random_correlation(4, 100.0, &mut seeds::rng_for(5, &[])).unwrap();
    let d = simulation::draw_system(&sc, &sigma, &mut seeds::rng_for(6, &[])).unwrap();
    let s = d.errors.transpose() * &d.errors / 100_000.0;
    for i in 0..4 {
        for j in 0..4 {
            assert!((s[(i, j)] - sigma[(i, j)]).abs() < 0.02, "({i},{j}) {} vs {}", s[(i, j)], sigma[(i, j)]);
        }
    }
}

#[test]
fn zero_magnitude_thcm_zeroes_the_rows() {
    let sigma = simulation::random_correlation(3, 100.0, &mut seeds::rng_for(1, &[])).unwrap();
    let e = DMatrix::from_element(20, 3, 1.0);
    let (out, rows) = simulation::contaminate_thcm(&e, &sigma, 0.25, 0.0, &mut seeds::rng_for(2, &[]));
    assert_eq!(rows.len(), 5);
    for k in 0..20 {
        let want = if rows.contains(&k) { 0.0 } else { 1.0 };
        assert!(out.row(k).iter().all(|&v| v == want));
    }
}

#[test]
fn icm_row_fraction_follows_binomial_law() {
    let (n, m, eps) = (100, 5, 0.1);
    let e = DMatrix::zeros(n, m);
    let mut rng = seeds::rng_for(9, &[]);
    let mut hit = 0usize;
    let draws = 10_000;
    for _ in 0..draws {
        let (_, cells) = simulation::contaminate_icm(&e, eps, 1.0, &mut rng);
        let mut rows: Vec<usize> = cells.iter().map(|c| c.0).collect();
        rows.dedup();
        hit += rows.len();
    }
    let frac = hit as f64 / (draws * n) as f64;
    let want = 1.0 - (1.0 - eps).powi(m as i32);
    assert!((frac - want).abs() < 0.02, "{frac} vs {want}");
}

#[test]
fn invalid_scenarios_are_rejected() {
    let bad = [
        SimScenario { m: 1, ..scenario(50, 2, 3) },
        SimScenario { n: 5, ..scenario(50, 2, 3) },
        SimScenario { reps: 0, ..scenario(50, 2, 3) },
        SimScenario { cn: 1.0, ..scenario(50, 2, 3) },
        SimScenario { epsilon_list: vec![0.5], ..scenario(50, 2, 3) },
        SimScenario { k_list: Some(vec![-1.0]), contamination: Contamination::Icm, ..scenario(50, 2, 3) },
    ];
    for sc in bad {
        assert!(matches!(sc.validate(), Err(SurError::Spec(_))), "{sc:?}");
    }
    assert!(scenario(50, 2, 3).validate().is_ok());
    assert!(SimScenario::from_toml("n = 50\np = 2\nm = 3\ncontamination = \"thcm\"\nreps = 2\nseed = 1\nbogus = 3\n").is_err());
}

#[test]
fn replications_are_reproducible() {
    let sc = SimScenario {
        contamination: Contamination::Thcm,
        epsilon_list: vec![0.1],
        k_list: Some(vec![0.0, 20.0]),
        fast_candidates: Some(50),
        ..scenario(60, 2, 3)
    };
    let key = |v: Vec<robust_sur::metrics::MetricRecord>| -> Vec<_> {
        v.into_iter().map(|r| (r.method, r.k, r.mse_contrib, r.delta1, r.delta2)).collect()
    };
    let a = key(simulation::run_replication(&sc, 2).unwrap());
    assert_eq!(a.len(), 6);
    assert_eq!(a, key(simulation::run_replication(&sc, 2).unwrap()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn correlation_has_target_condition_number(seed in 0u64..10_000, m in 2usize..12, cn in 2.0f64..500.0) {
        let r = simulation::random_correlation(m, cn, &mut seeds::rng_for(seed, &[])).unwrap();
        prop_assert!((r.diagonal() - DVector::from_element(m, 1.0)).amax() < 1e-12);
        prop_assert!((&r - r.transpose()).amax() < 1e-14);
        prop_assert!((condition_number(&r) - cn).abs() < 0.01 * cn);
    }

    #[test]
    fn contamination_counts_are_exact(seed in 0u64..10_000, n in 10usize..200, m in 2usize..6, eps in 0.0f64..0.5) {
        let sigma = DMatrix::identity(m, m);
        let e = DMatrix::zeros(n, m);
        let (_, rows) = simulation::contaminate_thcm(&e, &sigma, eps, 3.0, &mut seeds::rng_for(seed, &[]));
        prop_assert_eq!(rows.len(), (eps * n as f64 + 1e-9).floor() as usize);
        let (out, cells) = simulation::contaminate_icm(&e, eps, 3.0, &mut seeds::rng_for(seed, &[]));
        prop_assert_eq!(cells.len(), (eps * (n * m) as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(out.iter().filter(|&&v| v == 3.0).count(), cells.len());
    }
}
