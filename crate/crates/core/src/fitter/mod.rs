//! Penalized likelihood fitting: design assembly, PIRLS, GCV smoothing
//! selection, outer dispersion estimation, model comparison and prediction.

pub mod compare;
pub mod design;
pub mod pirls;
pub mod predict;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Panel;
use crate::family::CountFamily;
use crate::model_dsl::{Family, ModelSpec};
use crate::optim::{golden_section_max, nelder_mead, NelderMeadOptions};

pub use compare::{compare_models, Comparison};
pub use design::{build_design, ModelDesign, PenaltyBlock, SmoothBasis};
pub use pirls::{pirls, PirlsFit};
pub use predict::{predict, PredictionRow};

/// Version of the serialized [`FitResult`] document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("column `{0}` not found in panel")]
    UnknownColumn(String),
    #[error("no rows have every variable the model needs")]
    NoUsableRows,
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("basis construction failed: {0}")]
    Basis(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("PIRLS diverged; penalized deviance trajectory {trace:?}")]
    Diverged { trace: Vec<f64> },
    #[error("PIRLS did not converge; last penalized deviances {}", last_values(trace))]
    NotConverged { trace: Vec<f64> },
    #[error("penalized system is rank deficient (collinear columns with no penalty)")]
    RankDeficient,
    #[error("effective degrees of freedom {edf} not below the number of observations {n}")]
    EdfTooLarge { edf: f64, n: usize },
    #[error("missing value for covariate `{column}` in prediction row {row}")]
    MissingCovariate { row: usize, column: String },
    #[error("{} prediction row(s) outside the training domain: {}", .0.len(), .0.join("; "))]
    OutOfDomain(Vec<String>),
    #[error("models are not nested: {0}")]
    NotNested(String),
    #[error("negative likelihood ratio statistic {0} signals an optimizer failure")]
    NegativeLrt(f64),
    #[error("unsupported fit document: {0}")]
    Schema(String),
}

fn last_values(trace: &[f64]) -> String {
    let tail = &trace[trace.len().saturating_sub(5)..];
    format!("{tail:?}")
}

/// Deviance-based generalized cross validation score `n·D / (n − edf)²`.
pub fn gcv_score(deviance: f64, n: usize, edf_total: f64) -> Result<f64, FitError> {
    let nf = n as f64;
    if !(edf_total < nf) {
        return Err(FitError::EdfTooLarge { edf: edf_total, n });
    }
    Ok(nf * deviance / (nf - edf_total).powi(2))
}

/// Tuning of the smoothing and dispersion searches.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    /// Evaluation budget of each Nelder–Mead run.
    pub max_evals: usize,
    /// Start of the second Nelder–Mead run (every group).
    pub restart_log_lambda: f64,
    pub log_lambda_bounds: (f64, f64),
    pub log_phi_bounds: (f64, f64),
    /// Width of the final golden-section bracket on `log φ`.
    pub log_phi_tol: f64,
    /// Simplex size tolerance on `log λ`.
    pub log_lambda_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_evals: 500,
            restart_log_lambda: 5.0,
            log_lambda_bounds: (-15.0, 25.0),
            log_phi_bounds: (1e-2f64.ln(), 1e8f64.ln()),
            log_phi_tol: 1e-2,
            log_lambda_tol: 1.0,
        }
    }
}

/// Summary of one model term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub label: String,
    pub first_column: usize,
    pub num_columns: usize,
    pub edf: f64,
}

/// A fitted model, serializable so that prediction needs no refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub spec: ModelSpec,
    pub coefficients: Vec<f64>,
    pub coefficient_names: Vec<String>,
    /// One per anisotropy group, in term order.
    pub log_lambdas: Vec<f64>,
    pub lambda_labels: Vec<String>,
    /// Negative binomial dispersion; absent for the Poisson family.
    pub phi: Option<f64>,
    pub edf_total: f64,
    pub terms: Vec<TermSummary>,
    pub deviance: f64,
    pub loglik: f64,
    pub aic: f64,
    pub gcv: f64,
    pub n_obs: usize,
    pub n_dropped: usize,
    pub null_space_dim: usize,
    pub converged: bool,
    pub pirls_iterations: usize,
    pub gcv_evaluations: usize,
    pub phi_evaluations: usize,
    pub warnings: Vec<String>,
    pub smooths: Vec<SmoothBasis>,
}

impl FitResult {
    /// Assemble the result of a PIRLS fit at fixed `(λ, family)`.
    pub fn from_pirls(
        spec: &ModelSpec,
        design: &ModelDesign,
        fit: &PirlsFit,
        log_lambdas: &[f64],
        family: CountFamily,
    ) -> Result<FitResult, FitError> {
        let n = design.nrows();
        let edf_total = fit.edf_total();
        let gcv = gcv_score(fit.deviance, n, edf_total)?;
        let loglik = fit.loglik(&design.y, family);
        let extra = if family.phi().is_some() { 1.0 } else { 0.0 };
        let aic = -2.0 * loglik + 2.0 * (edf_total + extra);
        let terms = design
            .terms
            .iter()
            .map(|(label, range)| TermSummary {
                label: label.clone(),
                first_column: range.start,
                num_columns: range.len(),
                edf: fit.edf.rows(range.start, range.len()).sum(),
            })
            .collect();
        let mut warnings = Vec::new();
        if n < 10 * design.ncols() {
            warnings.push(format!(
                "{n} usable rows for {} coefficients; at least ten rows per coefficient are advised",
                design.ncols()
            ));
        }
        if fit.ridge_used {
            warnings.push("penalized system needed a stabilizing ridge".to_string());
        }
        if design.rows_dropped > 0 {
            warnings.push(format!("{} rows dropped for missing covariates", design.rows_dropped));
        }
        Ok(FitResult {
            schema_version: SCHEMA_VERSION,
            spec: spec.clone(),
            coefficients: fit.beta.iter().copied().collect(),
            coefficient_names: design.coefficient_names.clone(),
            log_lambdas: log_lambdas.to_vec(),
            lambda_labels: design.penalties.iter().map(|p| p.label.clone()).collect(),
            phi: family.phi(),
            edf_total,
            terms,
            deviance: fit.deviance,
            loglik,
            aic,
            gcv,
            n_obs: n,
            n_dropped: design.rows_dropped,
            null_space_dim: design.null_space_dim(),
            converged: true,
            pirls_iterations: fit.iterations,
            gcv_evaluations: 0,
            phi_evaluations: 0,
            warnings,
            smooths: design.smooths.clone(),
        })
    }

    pub fn family(&self) -> CountFamily {
        match self.phi {
            Some(phi) => CountFamily::NegBin { phi },
            None => CountFamily::Poisson,
        }
    }

    pub fn edf_of(&self, label: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.label == label).map(|t| t.edf)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results always serialize")
    }

    pub fn from_json(text: &str) -> Result<FitResult, FitError> {
        let fit: FitResult = serde_json::from_str(text).map_err(|e| FitError::Schema(e.to_string()))?;
        if fit.schema_version != SCHEMA_VERSION {
            return Err(FitError::Schema(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                fit.schema_version
            )));
        }
        Ok(fit)
    }
}

/// Fit at fixed smoothing parameters and family (no selection).
pub fn fit_fixed(
    spec: &ModelSpec,
    panel: &Panel,
    log_lambdas: &[f64],
    family: CountFamily,
) -> Result<FitResult, FitError> {
    let design = build_design(spec, panel)?;
    let fit = pirls(&design, log_lambdas, family, None)?;
    FitResult::from_pirls(spec, &design, &fit, log_lambdas, family)
}

/// Outcome of the GCV search at one family.
#[derive(Debug, Clone)]
struct InnerOptimum {
    log_lambdas: Vec<f64>,
    fit: PirlsFit,
    evals: usize,
    converged: bool,
}

/// Minimize GCV over `log λ` for a fixed family: Nelder–Mead from 0 and again
/// from the restart value, keeping the better run (ties go to larger λ).
///
/// `warm_start` only seeds the PIRLS iterations of the first trial point.
fn select_lambdas(
    design: &ModelDesign,
    family: CountFamily,
    options: &FitOptions,
    warm_start: Option<&DVector<f64>>,
) -> Result<InnerOptimum, FitError> {
    let m = design.penalties.len();
    let n = design.nrows();
    let mut warm: Option<(f64, DVector<f64>)> = warm_start.map(|b| (f64::INFINITY, b.clone()));
    let mut last_error: Option<FitError> = None;
    let mut score = |ll: &[f64]| -> f64 {
        let start = warm.as_ref().map(|(_, b)| b);
        let attempt = pirls(design, ll, family, start).or_else(|e| match start {
            Some(_) => pirls(design, ll, family, None),
            None => Err(e),
        });
        match attempt {
            Ok(fit) => match gcv_score(fit.deviance, n, fit.edf_total()) {
                Ok(g) => {
                    if warm.as_ref().map_or(true, |(best, _)| g < *best) {
                        warm = Some((g, fit.beta.clone()));
                    }
                    g
                }
                Err(e) => {
                    last_error = Some(e);
                    f64::INFINITY
                }
            },
            Err(e) => {
                last_error = Some(e);
                f64::INFINITY
            }
        }
    };
    let nm = NelderMeadOptions {
        max_evals: options.max_evals,
        x_tol: options.log_lambda_tol,
        lower: options.log_lambda_bounds.0,
        upper: options.log_lambda_bounds.1,
        ..Default::default()
    };
    let first = nelder_mead(&mut score, &vec![0.0; m], &nm);
    let mut evals = first.evals;
    let mut best = first;
    if m > 0 {
        let second = nelder_mead(&mut score, &vec![options.restart_log_lambda; m], &nm);
        evals += second.evals;
        let sum = |x: &[f64]| x.iter().sum::<f64>();
        if second.f < best.f || (second.f == best.f && sum(&second.x) > sum(&best.x)) {
            best = second;
        }
    }
    if !best.f.is_finite() {
        return Err(last_error.unwrap_or(FitError::NoUsableRows));
    }
    // refit at the optimum from the standard initialization
    let fit = pirls(design, &best.x, family, None)?;
    Ok(InnerOptimum { log_lambdas: best.x, fit, evals, converged: best.converged })
}

/// Select smoothing parameters by GCV and, for the negative binomial family,
/// the dispersion by golden-section maximization of the log-likelihood at the
/// inner optimum.
pub fn select_smoothing(spec: &ModelSpec, panel: &Panel, options: &FitOptions) -> Result<FitResult, FitError> {
    let design = build_design(spec, panel)?;
    let (inner, family, phi_evals) = match spec.family {
        Family::Poisson => (select_lambdas(&design, CountFamily::Poisson, options, None)?, CountFamily::Poisson, 0),
        Family::NegBin => {
            let mut evaluated: Vec<(f64, Result<InnerOptimum, FitError>)> = Vec::new();
            let golden = golden_section_max(
                |log_phi| {
                    let family = CountFamily::NegBin { phi: log_phi.exp() };
                    let start = evaluated.iter().rev().find_map(|(_, r)| r.as_ref().ok()).map(|o| o.fit.beta.clone());
                    let inner = select_lambdas(&design, family, options, start.as_ref());
                    let value = match &inner {
                        Ok(opt) => opt.fit.loglik(&design.y, family),
                        Err(_) => f64::NEG_INFINITY,
                    };
                    evaluated.push((log_phi, inner));
                    value
                },
                options.log_phi_bounds.0,
                options.log_phi_bounds.1,
                options.log_phi_tol,
            );
            let index = evaluated
                .iter()
                .position(|(x, _)| *x == golden.x)
                .expect("golden section returns an evaluated point");
            let (log_phi, inner) = evaluated.swap_remove(index);
            let inner = match inner {
                Ok(opt) => opt,
                Err(e) => {
                    // every trial failed: surface the most recent error
                    return Err(evaluated.into_iter().rev().find_map(|(_, r)| r.err()).unwrap_or(e));
                }
            };
            (inner, CountFamily::NegBin { phi: log_phi.exp() }, golden.evals)
        }
    };
    let mut result = FitResult::from_pirls(spec, &design, &inner.fit, &inner.log_lambdas, family)?;
    result.converged = inner.converged;
    result.gcv_evaluations = inner.evals;
    result.phi_evaluations = phi_evals;
    if !inner.converged {
        result
            .warnings
            .push(format!("smoothing-parameter search stopped at the {}-evaluation budget", options.max_evals));
    }
    if let Some(phi) = result.phi {
        let (lo, hi) = options.log_phi_bounds;
        if (phi.ln() - lo) < 2.0 * options.log_phi_tol || (hi - phi.ln()) < 2.0 * options.log_phi_tol {
            result.warnings.push(format!("dispersion estimate {phi:.4e} is at the edge of the search range"));
        }
    }
    Ok(result)
}

/// In-sample linear predictor `Xβ` (offset excluded) of a design.
pub fn linear_predictor(design: &ModelDesign, coefficients: &[f64]) -> Vec<f64> {
    (&design.x * DVector::from_column_slice(coefficients)).iter().copied().collect()
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::data::{Panel, PanelRow};
    use crate::family::sample_nb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// One row per unit (month 0) with the given covariate columns.
    pub fn panel(deaths: &[u64], popsize: &[u64], covariates: &[(&str, Vec<f64>)]) -> Panel {
        let rows = deaths
            .iter()
            .zip(popsize)
            .enumerate()
            .map(|(i, (&d, &p))| PanelRow {
                unit_id: format!("{:06}", i),
                month_index: 0,
                deaths: d,
                popsize: p,
                latitude: 0.0,
                longitude: 0.0,
                covariates: covariates.iter().map(|(n, v)| (n.to_string(), Some(v[i]))).collect(),
            })
            .collect();
        Panel::from_rows(rows).unwrap()
    }

    /// Counts with `log μ = offset + f(covariates)` for three standard-normal-ish covariates.
    pub fn glm_data(n: usize, phi: f64, seed: u64) -> (Panel, Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pop: Vec<u64> = (0..n).map(|_| rng.random_range(20_000..2_000_000)).collect();
        let offset: Vec<f64> = pop.iter().map(|&p| (p as f64 / 1e5 / 12.0).ln()).collect();
        let deaths: Vec<u64> = (0..n)
            .map(|i| {
                let eta = 4.0 + 0.5 * cols[0][i] - 0.3 * cols[1][i] + 0.2 * cols[2][i];
                sample_nb((offset[i] + eta).exp(), phi, &mut rng).unwrap()
            })
            .collect();
        let panel = panel(&deaths, &pop, &[("c1", cols[0].clone()), ("c2", cols[1].clone()), ("c3", cols[2].clone())]);
        (panel, cols, offset)
    }
}
