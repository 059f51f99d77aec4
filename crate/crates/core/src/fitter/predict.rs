//! Rate predictions from a fitted model at new covariate values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FitError, FitResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    /// Link scale, offset excluded.
    pub linear_predictor: f64,
    /// Rate per unit of offset exposure (per 100,000 person-years by default).
    pub rate: f64,
    pub covariate_values: BTreeMap<String, f64>,
}

/// Predict at each row. Values in `fixed` override those in the rows. Every
/// row outside the training domain of a smooth is reported in one error.
pub fn predict(
    fit: &FitResult,
    rows: &[BTreeMap<String, f64>],
    fixed: &BTreeMap<String, f64>,
) -> Result<Vec<PredictionRow>, FitError> {
    let covariates = fit.spec.covariates();
    let mut values: Vec<BTreeMap<String, f64>> = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut v = BTreeMap::new();
        for c in &covariates {
            let x = fixed
                .get(c)
                .or_else(|| row.get(c))
                .copied()
                .filter(|x| x.is_finite())
                .ok_or_else(|| FitError::MissingCovariate { row: i, column: c.clone() })?;
            v.insert(c.clone(), x);
        }
        values.push(v);
    }

    let mut offending = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let mut bad = Vec::new();
        for smooth in &fit.smooths {
            for (name, m) in smooth.variables.iter().zip(&smooth.marginals) {
                let (lo, hi) = m.domain();
                let x = v[name];
                if !(x >= lo && x <= hi) && !bad.iter().any(|b: &String| b.starts_with(&format!("{name}="))) {
                    bad.push(format!("{name}={x} not in [{lo}, {hi}]"));
                }
            }
        }
        if !bad.is_empty() {
            offending.push(format!("row {i}: {}", bad.join(", ")));
        }
    }
    if !offending.is_empty() {
        return Err(FitError::OutOfDomain(offending));
    }

    let beta = &fit.coefficients;
    let mut lp = vec![beta[0]; values.len()];
    for (j, name) in fit.spec.parametric_terms.iter().enumerate() {
        for (out, v) in lp.iter_mut().zip(&values) {
            *out += beta[1 + j] * v[name];
        }
    }
    let mut col = 1 + fit.spec.parametric_terms.len();
    for smooth in &fit.smooths {
        let columns: Vec<Vec<f64>> = smooth
            .variables
            .iter()
            .map(|name| values.iter().map(|v| v[name]).collect())
            .collect();
        let refs: Vec<&[f64]> = columns.iter().map(Vec::as_slice).collect();
        let x = smooth.design(&refs).map_err(|e| FitError::Basis(e.to_string()))?;
        let width = smooth.ncols();
        for (r, out) in lp.iter_mut().enumerate() {
            *out += (0..width).map(|c| x[(r, c)] * beta[col + c]).sum::<f64>();
        }
        col += width;
    }
    if col != beta.len() {
        return Err(FitError::Shape(format!("{} coefficients for {col} design columns", beta.len())));
    }

    Ok(values
        .into_iter()
        .zip(lp)
        .map(|(covariate_values, linear_predictor)| PredictionRow {
            linear_predictor,
            rate: linear_predictor.exp(),
            covariate_values,
        })
        .collect())
}
