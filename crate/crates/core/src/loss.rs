//! Tukey bisquare loss, its consistency constant, tuning and the M-scale.
//!
//! The bisquare rho is normalised so that `rho(u) ~ u^2 / 2` near zero:
//!
//! ```text
//! rho(u) = u^2/2 - u^4/(2 c^2) + u^6/(6 c^4)   |u| <= c
//!        = c^2/6                                 |u| >  c
//! ```

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::error::{Result, SurError};
use crate::linalg;
use crate::quadrature;

/// Normal-efficiency-tuned bisquare constant (95%), kept as a reference value.
pub const BISQUARE_EFF95_C: f64 = 4.685061;
/// 50% breakdown bisquare constant in one dimension, kept as a reference value.
pub const BISQUARE_BDP50_C: f64 = 1.547645;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    TukeyBisquare,
}

/// A rho/psi/weight family with tuning constant `c0` and consistency constant `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFamily {
    pub kind: LossKind,
    pub c0: f64,
    pub b: f64,
}

impl LossFamily {
    pub fn bisquare(c0: f64, b: f64) -> Self {
        LossFamily {
            kind: LossKind::TukeyBisquare,
            c0,
            b,
        }
    }

    /// Family calibrated for consistency at `N_dim(0, I)` with the given breakdown point.
    pub fn for_breakdown(dim: usize, bdp: f64) -> Result<Self> {
        let (c0, b) = tune_for_breakdown(dim, bdp)?;
        Ok(LossFamily::bisquare(c0, b))
    }

    /// Family whose regression M-estimator has the given normal efficiency.
    pub fn for_efficiency(efficiency: f64) -> Result<Self> {
        let c0 = tune_for_efficiency(efficiency)?;
        let b = consistency_constant(LossKind::TukeyBisquare, c0, 1)?;
        Ok(LossFamily::bisquare(c0, b))
    }

    #[inline]
    pub fn rho(&self, u: f64) -> f64 {
        rho(u, self)
    }

    #[inline]
    pub fn psi(&self, u: f64) -> f64 {
        psi_and_weight(u, self).0
    }

    #[inline]
    pub fn weight(&self, u: f64) -> f64 {
        let c = self.c0;
        if u.abs() >= c {
            0.0
        } else {
            let t = u / c;
            let a = 1.0 - t * t;
            a * a
        }
    }

    /// `rho(c0)`, the supremum of rho.
    pub fn rho_max(&self) -> f64 {
        self.c0 * self.c0 / 6.0
    }

    /// Breakdown point implied by `b / rho(c0)`.
    pub fn breakdown(&self) -> f64 {
        self.b / self.rho_max()
    }

    pub fn mean_rho(&self, values: &[f64], scale: f64) -> f64 {
        values.iter().map(|v| self.rho(v / scale)).sum::<f64>() / values.len() as f64
    }
}

#[inline]
pub fn rho(u: f64, family: &LossFamily) -> f64 {
    let c = family.c0;
    let a = u.abs();
    if a >= c {
        c * c / 6.0
    } else {
        let u2 = u * u;
        let c2 = c * c;
        u2 / 2.0 - u2 * u2 / (2.0 * c2) + u2 * u2 * u2 / (6.0 * c2 * c2)
    }
}

/// `(psi(u), psi(u)/u)` with the weight defined as 1 at `u = 0`.
#[inline]
pub fn psi_and_weight(u: f64, family: &LossFamily) -> (f64, f64) {
    let w = family.weight(u);
    (u * w, w)
}

fn psi_prime(u: f64, c: f64) -> f64 {
    if u.abs() >= c {
        0.0
    } else {
        let t2 = (u / c) * (u / c);
        (1.0 - t2) * (1.0 - 5.0 * t2)
    }
}

/// `E rho(||e||)` for `e ~ N_dim(0, I)`, integrating over the chi law.
pub fn consistency_constant(kind: LossKind, c0: f64, dim: usize) -> Result<f64> {
    if !(c0 > 0.0) || dim == 0 {
        return Err(SurError::InvalidInput(format!(
            "consistency constant needs c0 > 0 and dim >= 1 (c0 = {c0}, dim = {dim})"
        )));
    }
    let family = LossFamily {
        kind,
        c0,
        b: f64::NAN,
    };
    let d = dim as f64;
    let log_norm = (d / 2.0 - 1.0) * std::f64::consts::LN_2 + ln_gamma(d / 2.0);
    let density = move |r: f64| {
        if r <= 0.0 {
            return if dim == 1 { (-log_norm).exp() } else { 0.0 };
        }
        ((d - 1.0) * r.ln() - 0.5 * r * r - log_norm).exp()
    };
    // beyond sqrt(d) + 15 the chi mass is below 1e-40
    let reach = d.sqrt() + 15.0;
    let upper = c0.min(reach);
    let body = quadrature::integrate(|r| rho(r, &family) * density(r), 0.0, upper, 1e-13, 1e-300)?;
    let tail = if c0 < reach {
        family.rho_max() * gamma_ur(d / 2.0, 0.5 * c0 * c0)
    } else {
        0.0
    };
    Ok(body + tail)
}

/// Solves `b(c0, dim) = bdp * rho(c0)` for `c0` by bisection.
pub fn tune_for_breakdown(dim: usize, bdp: f64) -> Result<(f64, f64)> {
    if !(bdp > 0.0 && bdp <= 0.5) {
        return Err(SurError::InvalidInput(format!("breakdown point must lie in (0, 0.5], got {bdp}")));
    }
    let kind = LossKind::TukeyBisquare;
    let ratio = |c: f64| -> Result<f64> { Ok(consistency_constant(kind, c, dim)? / (c * c / 6.0)) };
    let (mut lo, mut hi) = (1e-2, 100.0 * (dim as f64).sqrt());
    if ratio(lo)? < bdp || ratio(hi)? > bdp {
        return Err(SurError::BracketFailed { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid)? > bdp {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let c0 = 0.5 * (lo + hi);
    let b = consistency_constant(kind, c0, dim)?;
    Ok((c0, b))
}

/// Normal efficiency `(E psi')^2 / E psi^2` of the bisquare regression M-estimator.
pub fn bisquare_efficiency(c0: f64) -> Result<f64> {
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let fam = LossFamily::bisquare(c0, f64::NAN);
    let e_dpsi = 2.0 * quadrature::integrate(|u| psi_prime(u, c0) * phi(u), 0.0, c0, 1e-13, 1e-300)?;
    let e_psi2 = 2.0 * quadrature::integrate(|u| fam.psi(u).powi(2) * phi(u), 0.0, c0, 1e-13, 1e-300)?;
    Ok(e_dpsi * e_dpsi / e_psi2)
}

/// Bisquare constant achieving the requested normal efficiency.
pub fn tune_for_efficiency(efficiency: f64) -> Result<f64> {
    if !(efficiency > 0.0 && efficiency < 1.0) {
        return Err(SurError::InvalidInput(format!("efficiency must lie in (0, 1), got {efficiency}")));
    }
    let (mut lo, mut hi) = (0.5, 50.0);
    if bisquare_efficiency(lo)? > efficiency || bisquare_efficiency(hi)? < efficiency {
        return Err(SurError::BracketFailed { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bisquare_efficiency(mid)? < efficiency {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

type Cache<K, V> = OnceLock<Mutex<HashMap<K, V>>>;

static FAMILY_CACHE: Cache<(u8, usize, u64), LossFamily> = OnceLock::new();

fn cached(key: (u8, usize, u64), build: impl FnOnce() -> Result<LossFamily>) -> Result<LossFamily> {
    let cache = FAMILY_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(f) = cache.lock().unwrap().get(&key) {
        return Ok(*f);
    }
    let f = build()?;
    cache.lock().unwrap().insert(key, f);
    Ok(f)
}

/// Memoised [`LossFamily::for_breakdown`].
pub fn cached_breakdown_family(dim: usize, bdp: f64) -> Result<LossFamily> {
    cached((0, dim, bdp.to_bits()), || LossFamily::for_breakdown(dim, bdp))
}

/// Memoised [`LossFamily::for_efficiency`].
pub fn cached_efficiency_family(efficiency: f64) -> Result<LossFamily> {
    cached((1, 1, efficiency.to_bits()), || LossFamily::for_efficiency(efficiency))
}

static INFLATION_CACHE: Cache<(usize, u64, u64), f64> = OnceLock::new();

/// Inflation `k` with `E rho(|e| / k) = b` for `e ~ N_dim(0, I)`.
///
/// Dividing the Mahalanobis distance of a row with `dim` observed cells by
/// `k` gives it the same expected loss as a complete row, so one constant
/// `b` serves every missingness pattern. `k = 1` when `family` is
/// calibrated at `dim`. Uses `rho_c(u / k) = rho_{c k}(u) / k^2`.
pub fn dimension_inflation(family: &LossFamily, dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(SurError::InvalidInput("dimension must be positive".into()));
    }
    let key = (dim, family.c0.to_bits(), family.b.to_bits());
    let cache = INFLATION_CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(k) = cache.lock().unwrap().get(&key) {
        return Ok(*k);
    }
    let expected = |k: f64| consistency_constant(family.kind, family.c0 * k, dim).map(|b| b / (k * k));
    let failed = std::cell::Cell::new(false);
    let k = solve_scale(
        |k| {
            expected(k).unwrap_or_else(|_| {
                failed.set(true);
                0.0
            })
        },
        family.b,
        1.0,
    );
    if failed.get() || !(k > 0.0 && k.is_finite()) {
        return Err(SurError::QuadratureFailed { achieved: f64::NAN });
    }
    let achieved = (expected(k)? - family.b).abs();
    if achieved > 1e-7 * family.b {
        return Err(SurError::QuadratureFailed { achieved });
    }
    cache.lock().unwrap().insert(key, k);
    Ok(k)
}

/// Solves `avg_rho(s) = target` for `s > 0` by bisection on `log s`.
///
/// `avg_rho` must be nonincreasing in `s`. Returns 0 when the lower end
/// of the bracket collapses (no positive root).
pub fn solve_scale<F: Fn(f64) -> f64>(avg_rho: F, target: f64, start: f64) -> f64 {
    const MAX_ITER: usize = 200;
    let start = if start > 0.0 && start.is_finite() { start } else { 1.0 };
    let (mut lo, mut hi) = (start, start);
    let mut expand = 0;
    while avg_rho(hi) > target {
        hi *= 2.0;
        expand += 1;
        if expand > 2000 || !hi.is_finite() {
            return f64::INFINITY;
        }
    }
    expand = 0;
    while avg_rho(lo) < target {
        lo *= 0.5;
        expand += 1;
        if expand > 2000 || lo == 0.0 {
            return 0.0;
        }
    }
    let (mut llo, mut lhi) = (lo.ln(), hi.ln());
    for _ in 0..MAX_ITER {
        if lhi - llo <= 1e-10 {
            break;
        }
        let mid = 0.5 * (llo + lhi);
        if avg_rho(mid.exp()) > target {
            llo = mid;
        } else {
            lhi = mid;
        }
    }
    (0.5 * (llo + lhi)).exp()
}

/// Root of `mean rho(v / s) = b` by Newton steps on `log s`, falling back
/// to bisection whenever a step leaves the current bracket.
pub fn solve_m_scale(values: &[f64], family: &LossFamily, start: f64) -> f64 {
    let b = family.b;
    let n = values.len() as f64;
    // f(t) = mean rho(v e^-t) - b and f'(t) = -mean psi(u) u, u = v e^-t
    let eval = |t: f64| {
        let inv = (-t).exp();
        let (mut f, mut df) = (0.0, 0.0);
        for v in values {
            let u = v * inv;
            f += family.rho(u);
            df -= family.psi(u) * u;
        }
        (f / n - b, df / n)
    };
    let start = if start > 0.0 && start.is_finite() { start } else { 1.0 };
    let mut t = start.ln();
    let (mut f, mut df) = eval(t);
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    let ln2 = std::f64::consts::LN_2;
    for _ in 0..400 {
        if f == 0.0 {
            return t.exp();
        }
        if f > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        if hi - lo <= 1e-10 {
            break;
        }
        let newton = t - f / df;
        let next = if df < 0.0 && newton > lo && newton < hi {
            newton
        } else if hi.is_infinite() {
            t + ln2
        } else if lo.is_infinite() {
            t - ln2
        } else {
            0.5 * (lo + hi)
        };
        if !next.is_finite() || next.exp() == 0.0 {
            return 0.0;
        }
        if next.exp().is_infinite() {
            return f64::INFINITY;
        }
        let step = (next - t).abs();
        t = next;
        (f, df) = eval(t);
        if step <= 1e-12 * (1.0 + t.abs()) {
            break;
        }
    }
    t.exp()
}

/// M-scale `s` solving `mean rho(v / s) = b`.
///
/// Returns 0 when more than `(1 - bdp) n` of the values are exactly zero,
/// including the all-zero case.
pub fn m_scale(values: &[f64], family: &LossFamily) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let zeros = values.iter().filter(|&&v| v == 0.0).count();
    if zeros as f64 > (1.0 - family.breakdown()) * n as f64 || zeros == n {
        return 0.0;
    }
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mut start = linalg::median(&abs) / 0.6745;
    if !(start > 0.0) {
        start = abs.iter().cloned().fold(0.0, f64::max);
    }
    solve_m_scale(values, family, start)
}
