//! Negative-binomial count family in the mean–dispersion `(μ, φ)` parametrisation,
//! `var(y) = μ + μ²/φ`, with Poisson as the `φ → ∞` limit.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FamilyError {
    #[error("mean must be positive and finite, got {0}")]
    Mean(f64),
    #[error("dispersion must be positive, got {0}")]
    Dispersion(f64),
    #[error("length mismatch: {0} counts vs {1} means")]
    Length(usize, usize),
}

fn check(mu: f64, phi: f64) -> Result<(), FamilyError> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(FamilyError::Mean(mu));
    }
    if !(phi > 0.0) || phi.is_nan() {
        return Err(FamilyError::Dispersion(phi));
    }
    Ok(())
}

/// Above this dispersion `lnΓ(φ + y) − lnΓ(φ)` is evaluated from Stirling's series.
const STIRLING_PHI: f64 = 1e5;

fn stirling_tail(z: f64) -> f64 {
    let z2 = z * z;
    1.0 / (12.0 * z) - 1.0 / (360.0 * z * z2) + 1.0 / (1260.0 * z * z2 * z2)
}

/// `lnΓ(φ + y) − lnΓ(φ)` without cancellation when `φ ≫ y`.
pub(crate) fn ln_gamma_ratio(phi: f64, y: f64) -> f64 {
    if y == 0.0 {
        return 0.0;
    }
    if phi < STIRLING_PHI {
        return ln_gamma(phi + y) - ln_gamma(phi);
    }
    (phi - 0.5) * (y / phi).ln_1p() + y * (phi + y).ln() - y + stirling_tail(phi + y)
        - stirling_tail(phi)
}

pub(crate) fn nb_logpmf_unchecked(y: f64, mu: f64, phi: f64) -> f64 {
    let log_total = (phi + mu).ln();
    let mut v = -phi * (mu / phi).ln_1p();
    if y > 0.0 {
        v += ln_gamma_ratio(phi, y) - ln_gamma(y + 1.0) + y * (mu.ln() - log_total);
    }
    v
}

pub(crate) fn poisson_logpmf_unchecked(y: f64, mu: f64) -> f64 {
    if y == 0.0 {
        -mu
    } else {
        y * mu.ln() - mu - ln_gamma(y + 1.0)
    }
}

/// Log probability of `y` under NB(μ, φ).
pub fn nb_logpmf(y: u64, mu: f64, phi: f64) -> Result<f64, FamilyError> {
    check(mu, phi)?;
    Ok(nb_logpmf_unchecked(y as f64, mu, phi))
}

pub fn poisson_logpmf(y: u64, mu: f64) -> Result<f64, FamilyError> {
    check(mu, 1.0)?;
    Ok(poisson_logpmf_unchecked(y as f64, mu))
}

/// Per-observation deviance `2[ℓ(y; y) − ℓ(y; μ)]` at fixed φ. The saturated
/// term for `y = 0` is its analytic limit.
pub(crate) fn nb_unit_deviance(y: f64, mu: f64, phi: f64) -> f64 {
    let tail = (y + phi) * ((y - mu) / (mu + phi)).ln_1p();
    let d = if y > 0.0 {
        2.0 * (y * (y / mu).ln() - tail)
    } else {
        2.0 * phi * (mu / phi).ln_1p()
    };
    d.max(0.0)
}

pub(crate) fn poisson_unit_deviance(y: f64, mu: f64) -> f64 {
    let d = if y > 0.0 {
        2.0 * (y * (y / mu).ln() - (y - mu))
    } else {
        2.0 * mu
    };
    d.max(0.0)
}

/// NB deviance of fitted means `mu` for counts `y` at dispersion `phi`.
pub fn nb_deviance(y: &[u64], mu: &[f64], phi: f64) -> Result<f64, FamilyError> {
    if y.len() != mu.len() {
        return Err(FamilyError::Length(y.len(), mu.len()));
    }
    let mut total = 0.0;
    for (&yi, &mi) in y.iter().zip(mu) {
        check(mi, phi)?;
        total += nb_unit_deviance(yi as f64, mi, phi);
    }
    Ok(total)
}

/// Draw from NB(μ, φ) as a Gamma–Poisson mixture: `θ ~ Gamma(shape φ, rate φ/μ)`,
/// `y ~ Poisson(θ)`.
pub fn sample_nb<R: Rng + ?Sized>(mu: f64, phi: f64, rng: &mut R) -> Result<u64, FamilyError> {
    check(mu, phi)?;
    if phi.is_infinite() {
        return Ok(sample_poisson(mu, rng));
    }
    let gamma = Gamma::new(phi, mu / phi).map_err(|_| FamilyError::Dispersion(phi))?;
    let theta: f64 = gamma.sample(rng);
    Ok(sample_poisson(theta, rng))
}

fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if !(lambda > 0.0) {
        return 0;
    }
    match Poisson::new(lambda) {
        Ok(p) => {
            let v: f64 = p.sample(rng);
            v as u64
        }
        Err(_) => 0,
    }
}

/// Count family used by the fitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountFamily {
    NegBin { phi: f64 },
    Poisson,
}

impl CountFamily {
    pub fn variance(&self, mu: f64) -> f64 {
        match *self {
            CountFamily::NegBin { phi } => mu + mu * mu / phi,
            CountFamily::Poisson => mu,
        }
    }

    /// IRLS weight under the log link, `μ² / var(μ)`.
    pub fn working_weight(&self, mu: f64) -> f64 {
        match *self {
            CountFamily::NegBin { phi } => mu * phi / (phi + mu),
            CountFamily::Poisson => mu,
        }
    }

    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match *self {
            CountFamily::NegBin { phi } => nb_unit_deviance(y, mu, phi),
            CountFamily::Poisson => poisson_unit_deviance(y, mu),
        }
    }

    pub fn logpmf(&self, y: f64, mu: f64) -> f64 {
        match *self {
            CountFamily::NegBin { phi } => nb_logpmf_unchecked(y, mu, phi),
            CountFamily::Poisson => poisson_logpmf_unchecked(y, mu),
        }
    }

    pub fn phi(&self) -> Option<f64> {
        match *self {
            CountFamily::NegBin { phi } => Some(phi),
            CountFamily::Poisson => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Closed-form NB pmf from factorials, for small y only.
    fn pmf_direct(y: u64, mu: f64, phi: f64) -> f64 {
        let mut coef = 1.0;
        for j in 0..y {
            coef *= (phi + j as f64) / (j as f64 + 1.0);
        }
        coef * (phi / (phi + mu)).powf(phi) * (mu / (phi + mu)).powi(y as i32)
    }

    #[test]
    fn zero_count_closed_form() {
        let v = nb_logpmf(0, 1.0, 1.0).unwrap();
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
        let v = nb_logpmf(0, 2.5, 0.7).unwrap();
        assert!((v - 0.7 * (0.7f64 / 3.2).ln()).abs() < 1e-14);
    }

    #[test]
    fn agrees_with_direct_formula() {
        for &(mu, phi) in &[(2.0, 1.5), (0.3, 0.2), (15.0, 40.0)] {
            for y in 0..30u64 {
                let a = nb_logpmf(y, mu, phi).unwrap();
                let b = pmf_direct(y, mu, phi).ln();
                assert!((a - b).abs() < 1e-10, "y={y} mu={mu} phi={phi}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn poisson_limit() {
        let nb = nb_logpmf(2, 3.0, 1e9).unwrap();
        let p = poisson_logpmf(2, 3.0).unwrap();
        assert!((nb - p).abs() < 1e-6);
        // huge dispersion stays finite and close
        let nb = nb_logpmf(7, 4.0, 1e12).unwrap();
        assert!((nb - poisson_logpmf(7, 4.0).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn stirling_branch_is_continuous() {
        for &y in &[1.0, 5.0, 100.0, 1e4] {
            let direct = ln_gamma(STIRLING_PHI + y) - ln_gamma(STIRLING_PHI);
            let series = ln_gamma_ratio(STIRLING_PHI, y);
            assert!((direct - series).abs() < 1e-8, "{direct} {series}");
        }
    }

    #[test]
    fn normalises() {
        let total: f64 = (0..=200).map(|y| nb_logpmf(y, 2.0, 1.5).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn large_counts_are_finite() {
        let v = nb_logpmf(1_000_000, 1_000_000.0, 1e12).unwrap();
        assert!(v.is_finite() && v < 0.0);
        let p = poisson_logpmf(1_000_000, 1_000_000.0).unwrap();
        assert!((v - p).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(nb_logpmf(1, 0.0, 1.0), Err(FamilyError::Mean(0.0)));
        assert_eq!(nb_logpmf(1, 1.0, -1.0), Err(FamilyError::Dispersion(-1.0)));
        assert!(sample_nb(1.0, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert_eq!(nb_deviance(&[1, 2], &[1.0], 1.0), Err(FamilyError::Length(2, 1)));
    }

    #[test]
    fn unimodal_in_mean() {
        for y in 1..20u64 {
            let at_y = nb_logpmf(y, y as f64, 3.0).unwrap();
            for &f in &[0.5, 0.9, 0.99, 1.01, 1.1, 2.0] {
                assert!(nb_logpmf(y, y as f64 * f, 3.0).unwrap() < at_y);
            }
            let mut prev = f64::NEG_INFINITY;
            for i in 1..=(10 * y) {
                let v = nb_logpmf(y, i as f64 * 0.1, 3.0).unwrap();
                assert!(v > prev);
                prev = v;
            }
        }
    }

    #[test]
    fn deviance_examples() {
        assert!(nb_deviance(&[1, 3, 7], &[1.0, 3.0, 7.0], 2.0).unwrap().abs() < 1e-12);
        let d = nb_deviance(&[5], &[2.0], 3.0).unwrap();
        let direct = 2.0 * (nb_logpmf(5, 5.0, 3.0).unwrap() - nb_logpmf(5, 2.0, 3.0).unwrap());
        assert!((d - direct).abs() < 1e-12);
        let y = [0u64, 4, 9, 1];
        let mu = [0.5, 3.0, 12.0, 2.0];
        let once = nb_deviance(&y, &mu, 1.3).unwrap();
        let yy: Vec<u64> = y.iter().chain(&y).copied().collect();
        let mm: Vec<f64> = mu.iter().chain(&mu).copied().collect();
        assert!((nb_deviance(&yy, &mm, 1.3).unwrap() - 2.0 * once).abs() < 1e-12);
        // saturated-at-zero term
        let d0 = nb_deviance(&[0], &[2.0], 3.0).unwrap();
        assert!((d0 + 2.0 * nb_logpmf(0, 2.0, 3.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn deviance_non_negative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let y: u64 = rng.random_range(0..50);
            let mu: f64 = rng.random_range(0.01..60.0);
            let phi: f64 = rng.random_range(0.05..100.0);
            assert!(nb_deviance(&[y], &[mu], phi).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(20200301);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_nb(4.0, 2.0, &mut rng).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 4.0).abs() < 0.02, "mean {mean}");
        assert!((var - 12.0).abs() < 0.3, "var {var}");

        let draws: Vec<f64> = (0..n).map(|_| sample_nb(1.0, 1e9, &mut rng).unwrap() as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let ratio = var / mean;
        assert!((0.98..=1.02).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sampler_is_deterministic() {
        let a: Vec<u64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..1000).map(|_| sample_nb(3.0, 0.8, &mut rng).unwrap()).collect()
        };
        let b: Vec<u64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..1000).map(|_| sample_nb(3.0, 0.8, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn mixture_matches_pmf() {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let n = 1_000_000usize;
        let (mu, phi) = (3.0, 1.7);
        let mut counts = [0usize; 51];
        for _ in 0..n {
            let y = sample_nb(mu, phi, &mut rng).unwrap();
            if y <= 50 {
                counts[y as usize] += 1;
            }
        }
        for (y, &c) in counts.iter().enumerate() {
            let p = nb_logpmf(y as u64, mu, phi).unwrap().exp();
            let emp = c as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            // floor covers buckets whose expected count is far below one
            assert!((emp - p).abs() <= 3.0 * se + 2.0 / n as f64, "y={y}: {emp} vs {p}");
        }
    }
}
