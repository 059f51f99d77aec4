//! Likelihood ratio and AIC comparison of nested fits.

use serde::{Deserialize, Serialize};

use super::{FitError, FitResult};
use crate::stats::chi_square_ln_sf;

/// Statistics below `-NEGATIVE_TOL·max(1, |loglik|)` are treated as optimizer failures.
pub const NEGATIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub lrt_stat: f64,
    /// `edf_big − edf_small`.
    pub df: f64,
    pub p_value: f64,
    /// Natural log of the p-value, exact even where `p_value` underflows.
    pub ln_p_value: f64,
    pub delta_aic: f64,
    /// Always true: penalized fits only approximately follow the chi-square reference.
    pub approximate: bool,
}

/// Check that every term of `small` is contained in some term of `big`.
fn check_nested(small: &FitResult, big: &FitResult) -> Result<(), FitError> {
    let (s, b) = (&small.spec, &big.spec);
    if s.response != b.response {
        return Err(FitError::NotNested(format!("responses `{}` and `{}` differ", s.response, b.response)));
    }
    if s.family != b.family {
        return Err(FitError::NotNested(format!("families {} and {} differ", s.family, b.family)));
    }
    if s.offset_rule != b.offset_rule {
        return Err(FitError::NotNested(format!("offsets {} and {} differ", s.offset_rule, b.offset_rule)));
    }
    if small.n_obs != big.n_obs {
        return Err(FitError::NotNested(format!(
            "fits use {} and {} observations",
            small.n_obs, big.n_obs
        )));
    }
    let big_sets = b.term_variable_sets();
    for set in s.term_variable_sets() {
        if !big_sets.iter().any(|bs| set.iter().all(|v| bs.contains(v))) {
            return Err(FitError::NotNested(format!(
                "term in ({}) has no counterpart in the larger model",
                set.iter().cloned().collect::<Vec<_>>().join(",")
            )));
        }
    }
    Ok(())
}

/// Likelihood ratio test of `fit_small` against `fit_big` with chi-square
/// degrees of freedom equal to the difference in effective degrees of freedom.
pub fn compare_models(fit_small: &FitResult, fit_big: &FitResult) -> Result<Comparison, FitError> {
    check_nested(fit_small, fit_big)?;
    let raw = 2.0 * (fit_big.loglik - fit_small.loglik);
    let scale = fit_small.loglik.abs().max(fit_big.loglik.abs()).max(1.0);
    if raw < -NEGATIVE_TOL * scale {
        return Err(FitError::NegativeLrt(raw));
    }
    let lrt_stat = raw.max(0.0);
    let df = fit_big.edf_total - fit_small.edf_total;
    let ln_p_value = if lrt_stat == 0.0 {
        0.0
    } else if df > 0.0 {
        chi_square_ln_sf(lrt_stat, df)
    } else {
        return Err(FitError::NotNested(format!(
            "larger model has {df:.4} fewer effective degrees of freedom yet a higher likelihood"
        )));
    };
    Ok(Comparison {
        lrt_stat,
        df,
        p_value: ln_p_value.exp(),
        ln_p_value,
        delta_aic: fit_big.aic - fit_small.aic,
        approximate: true,
    })
}
