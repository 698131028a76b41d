use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use robust_sur::cellwise::{self, GsConfig};
use robust_sur::loss::{self, LossFamily};
use robust_sur::{seeds, ResidualMatrix};

fn mvn(n: usize, sigma: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let l = sigma.clone().cholesky().unwrap().l();
    let mut rng = seeds::rng_for(seed, &[]);
    let z = DMatrix::from_fn(n, sigma.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    z * l.transpose()
}

fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        let mu = col.mean();
        col.add_scalar_mut(-mu);
    }
    c.transpose() * &c / (n - 1.0)
}

fn target() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5])
}

/// Plain complete-data S-estimator of location and scatter: reweighted
/// mean and scatter, rescaled every step so that the M-scale of the
/// Mahalanobis distances is one.
fn s_estimator_oracle(x: &DMatrix<f64>, fam: &LossFamily) -> (DVector<f64>, DMatrix<f64>) {
    let (n, m) = x.shape();
    let mut mu = DVector::from_fn(m, |j, _| x.column(j).mean());
    let mut sigma = sample_cov(x);
    let dists = |mu: &DVector<f64>, s: &DMatrix<f64>| -> Vec<f64> {
        let inv = s.clone().try_inverse().unwrap();
        (0..n)
            .map(|k| {
                let e = x.row(k).transpose() - mu;
                (e.transpose() * &inv * &e)[(0, 0)].sqrt()
            })
            .collect()
    };
    for _ in 0..2000 {
        let d = dists(&mu, &sigma);
        let s = loss::m_scale(&d, fam);
        sigma *= s * s;
        let w: Vec<f64> = d.iter().map(|v| fam.weight(v / s)).collect();
        let wsum: f64 = w.iter().sum();
        let new_mu = (0..n).fold(DVector::zeros(m), |acc, k| acc + x.row(k).transpose() * w[k]) / wsum;
        let mut new_sigma = DMatrix::zeros(m, m);
        for k in 0..n {
            let e = x.row(k).transpose() - &new_mu;
            new_sigma += &e * e.transpose() * (w[k] / wsum);
        }
        let done = (&new_mu - &mu).amax() < 1e-12 && (&new_sigma - &sigma).amax() < 1e-12 * sigma.amax();
        mu = new_mu;
        sigma = new_sigma;
        if done {
            break;
        }
    }
    let d = dists(&mu, &sigma);
    let s = loss::m_scale(&d, fam);
    (mu, sigma * (s * s))
}

#[test]
fn filter_rarely_flags_clean_normal_columns() {
    let mut ok = 0;
    for seed in 0..500 {
        let mut rng = seeds::rng_for(seed, &[17]);
        let col = DMatrix::from_fn(1000, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = cellwise::univariate_filter(&ResidualMatrix::new(col)).unwrap();
        if f.per_column_fraction[0] <= 0.02 {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.99 * 500.0, "{ok}/500 runs flagged at most 2%");
}

#[test]
fn filter_catches_gross_cells_only() {
    let mut rng = seeds::rng_for(3, &[]);
    let mut col = DMatrix::from_fn(200, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    for k in 0..20 {
        col[(k * 10, 0)] = 50.0;
    }
    let med = robust_sur::linalg::median(col.as_slice());
    let madn = robust_sur::linalg::madn(col.as_slice());
    let f = cellwise::univariate_filter(&ResidualMatrix::new(col.clone())).unwrap();
    for k in 0..200 {
        if k % 10 == 0 {
            assert!(f.mask[(k, 0)]);
        } else if f.mask[(k, 0)] {
            assert!(((col[(k, 0)] - med) / madn).abs() >= 2.0);
        }
    }
}

#[test]
fn generalized_s_matches_complete_data_oracle() {
    let x = mvn(300, &target(), 11);
    let fam = LossFamily::for_breakdown(3, 0.5).unwrap();
    let mask = DMatrix::from_element(300, 3, false);
    let est = cellwise::generalized_s(&x, &mask, &fam, &GsConfig { max_iter: 2000, tol: 1e-11 }).unwrap();
    let (mu, sigma) = s_estimator_oracle(&x, &fam);
    assert!((est.location - mu).amax() < 1e-6);
    assert!((est.scatter - &sigma).amax() < 1e-6 * sigma.amax());
}

#[test]
fn empty_mask_two_step_equals_generalized_s() {
    let fam = LossFamily::for_breakdown(3, 0.5).unwrap();
    let (x, two) = (0..100)
        .map(|seed| {
            let x = mvn(40, &target(), seed);
            let two = cellwise::two_step_gs(&ResidualMatrix::new(x.clone()), &fam).unwrap();
            (x, two)
        })
        .find(|(_, two)| two.filter.mask.iter().all(|f| !f))
        .expect("some clean sample leaves the filter silent");
    let gs = cellwise::generalized_s(&x, &two.filter.mask, &fam, &GsConfig::default()).unwrap();
    assert_eq!(two.estimate, gs);
}

#[test]
fn two_step_gs_consistent_on_clean_data() {
    let sigma = target();
    let x = mvn(2000, &sigma, 21);
    let est = cellwise::two_step_gs_default(&ResidualMatrix::new(x.clone())).unwrap().estimate;
    let s = sample_cov(&x);
    for i in 0..3 {
        for j in 0..3 {
            let tol = 0.10 * (s[(i, i)] * s[(j, j)]).sqrt();
            assert!((est.scatter[(i, j)] - s[(i, j)]).abs() < tol, "({i},{j}) {} vs {}", est.scatter[(i, j)], s[(i, j)]);
        }
    }
}

#[test]
fn two_step_gs_resists_cellwise_outliers() {
    let (n, m) = (500, 5);
    let mut rng = seeds::rng_for(31, &[]);
    let mut x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let cells = rand::seq::index::sample(&mut rng, n * m, n * m / 10);
    for idx in cells {
        x[(idx % n, idx / n)] = 50.0;
    }
    let est = cellwise::two_step_gs_default(&ResidualMatrix::new(x.clone())).unwrap().estimate;
    let id = DMatrix::<f64>::identity(m, m);
    let robust = (est.scatter - &id).amax();
    let classical = (sample_cov(&x) - &id).amax();
    assert!(robust <= 0.15, "robust error {robust}");
    assert!(classical >= 5.0 * 0.15, "classical error {classical}");
}

#[test]
fn single_column_reduces_to_m_scale() {
    let mut rng = seeds::rng_for(41, &[]);
    let mut x = DMatrix::from_fn(200, 1, |_, _| 2.0 + 3.0 * rng.sample::<f64, _>(StandardNormal));
    for k in 0..15 {
        x[(k, 0)] = 80.0;
    }
    let fam = LossFamily::for_breakdown(1, 0.5).unwrap();
    let two = cellwise::two_step_gs(&ResidualMatrix::new(x.clone()), &fam).unwrap();
    let mu = two.estimate.location[0];
    let kept: Vec<f64> = (0..200).filter(|&k| !two.filter.mask[(k, 0)]).map(|k| x[(k, 0)] - mu).collect();
    let s = loss::m_scale(&kept, &fam);
    assert!((two.estimate.scatter[(0, 0)] - s * s).abs() < 1e-5 * s * s);
    // location is the fixed point of the bisquare-weighted mean
    let w: Vec<f64> = kept.iter().map(|r| fam.weight(r / s)).collect();
    let shift = kept.iter().zip(&w).map(|(r, w)| r * w).sum::<f64>() / w.iter().sum::<f64>();
    assert!(shift.abs() < 1e-5 * s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn two_step_gs_permutation_and_scale_equivariance(
        seed in 0u64..10_000,
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        scales in prop::collection::vec(0.1f64..10.0, 3),
    ) {
        let mut x = mvn(120, &target(), seed);
        let mut rng = seeds::rng_for(seed, &[1]);
        for _ in 0..12 {
            let (k, j) = (rng.random_range(0..120), rng.random_range(0..3));
            x[(k, j)] += 20.0;
        }
        let base = cellwise::two_step_gs_default(&ResidualMatrix::new(x.clone())).unwrap();
        let ev = base.estimate.scatter.clone().symmetric_eigen().eigenvalues;
        prop_assert!(ev.min() > 0.0);
        prop_assert!((&base.estimate.scatter - base.estimate.scatter.transpose()).amax() < 1e-12);

        let xp = DMatrix::from_fn(120, 3, |k, j| x[(k, perm[j])]);
        let p = cellwise::two_step_gs_default(&ResidualMatrix::new(xp)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = base.estimate.scatter[(perm[i], perm[j])];
                prop_assert!((p.estimate.scatter[(i, j)] - want).abs() < 1e-4 * base.estimate.scatter.amax());
            }
            for k in 0..120 {
                prop_assert_eq!(p.filter.mask[(k, i)], base.filter.mask[(k, perm[i])]);
            }
        }

        let xs = DMatrix::from_fn(120, 3, |k, j| x[(k, j)] * scales[j]);
        let s = cellwise::two_step_gs_default(&ResidualMatrix::new(xs)).unwrap();
        prop_assert_eq!(&s.filter.mask, &base.filter.mask);
        for i in 0..3 {
            for j in 0..3 {
                let want = base.estimate.scatter[(i, j)] * scales[i] * scales[j];
                let unit = (base.estimate.scatter[(i, i)] * base.estimate.scatter[(j, j)]).sqrt() * scales[i] * scales[j];
                prop_assert!((s.estimate.scatter[(i, j)] - want).abs() < 1e-4 * unit);
            }
        }
    }
}
