//! Penalized iteratively reweighted least squares for log-link count models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::design::ModelDesign;
use super::FitError;
use crate::family::CountFamily;

pub const MAX_ITERATIONS: usize = 200;
pub const DEVIANCE_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 40;
const REFINEMENT_STEPS: usize = 3;
/// Linear predictors (offset included) are capped here to keep `exp` finite.
const ETA_CAP: f64 = 700.0;

#[derive(Debug, Clone)]
pub struct PirlsFit {
    pub beta: DVector<f64>,
    /// `Xβ`, offset excluded.
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub deviance: f64,
    pub penalized_deviance: f64,
    /// Diagonal of the influence matrix `(XᵀWX + Σλ_gS_g)⁻¹XᵀWX`.
    pub edf: DVector<f64>,
    pub iterations: usize,
    /// Penalized deviance after every accepted iteration.
    pub trace: Vec<f64>,
    pub ridge_used: bool,
}

impl PirlsFit {
    pub fn edf_total(&self) -> f64 {
        self.edf.sum()
    }

    pub fn loglik(&self, y: &[f64], family: CountFamily) -> f64 {
        y.iter().zip(self.mu.iter()).map(|(&yi, &mi)| family.logpmf(yi, mi)).sum()
    }
}

/// `Σ λ_g S_g` embedded in a `p x p` matrix.
pub fn total_penalty(design: &ModelDesign, log_lambdas: &[f64]) -> DMatrix<f64> {
    let p = design.ncols();
    let mut s = DMatrix::zeros(p, p);
    for (block, &ll) in design.penalties.iter().zip(log_lambdas) {
        let lambda = ll.exp();
        let k = block.size();
        let mut view = s.view_mut((block.offset, block.offset), (k, k));
        view += &block.matrix * lambda;
    }
    s
}

fn means(eta: &DVector<f64>, offset: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        eta.len(),
        eta.iter().zip(offset).map(|(e, o)| (e + o).min(ETA_CAP).exp().max(f64::MIN_POSITIVE)),
    )
}

fn deviance(y: &[f64], mu: &DVector<f64>, family: CountFamily) -> f64 {
    y.iter().zip(mu.iter()).map(|(&yi, &mi)| family.unit_deviance(yi, mi)).sum()
}

fn quad(beta: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    beta.dot(&(s * beta))
}

/// `XᵀWX` and `XᵀWz`.
fn weighted_normal_equations(
    x: &DMatrix<f64>,
    w: &[f64],
    z: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let (n, p) = x.shape();
    let root: Vec<f64> = w.iter().map(|wi| wi.sqrt()).collect();
    let mut xw = DMatrix::zeros(n, p);
    for j in 0..p {
        for (i, (dst, src)) in xw.column_mut(j).iter_mut().zip(x.column(j).iter()).enumerate() {
            *dst = src * root[i];
        }
    }
    let xwt = xw.transpose();
    let g = &xwt * &xw;
    let wz = DVector::from_iterator(n, root.iter().zip(z).map(|(ri, zi)| ri * zi));
    let r = &xwt * wz;
    (g, r)
}

/// Cholesky factor, refusing numerically singular pivots.
fn spd_factor(h: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(h.clone())?;
    let max_diag = h.diagonal().amax();
    let min_pivot = chol.l_dirty().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-13 * max_diag {
        return None;
    }
    Some(chol)
}

/// Factorize `XᵀWX + S`. A `1e-10·trace` ridge is added only when the plain
/// factorization fails and the system is penalized at all.
fn factorize(h: &DMatrix<f64>, penalized: bool, ridge_used: &mut bool) -> Result<Cholesky<f64, Dyn>, FitError> {
    if let Some(c) = spd_factor(h) {
        return Ok(c);
    }
    if !penalized {
        return Err(FitError::RankDeficient);
    }
    let ridge = 1e-10 * h.trace().abs().max(f64::MIN_POSITIVE);
    let mut hr = h.clone();
    for i in 0..hr.nrows() {
        hr[(i, i)] += ridge;
    }
    *ridge_used = true;
    Cholesky::new(hr).ok_or(FitError::RankDeficient)
}

/// Solve `h·x = r` with the factor of `h` (possibly ridged), then apply a few
/// steps of iterative refinement. Large smoothing parameters make `h` badly
/// conditioned, and refinement recovers the digits a single solve loses.
/// A step is kept only while it shrinks the residual.
fn refined_solve(chol: &Cholesky<f64, Dyn>, h: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let mut x = chol.solve(r);
    let mut residual = r - h * &x;
    let mut norm = residual.norm();
    for _ in 0..REFINEMENT_STEPS {
        if !(norm > 0.0) {
            break;
        }
        let candidate = &x + chol.solve(&residual);
        let next = r - h * &candidate;
        let next_norm = next.norm();
        if !(next_norm < norm) {
            break;
        }
        x = candidate;
        residual = next;
        norm = next_norm;
    }
    x
}

/// Penalized MLE at fixed smoothing parameters and family.
///
/// `start` warm-starts from given coefficients; otherwise the iteration starts
/// from `μ = y + 0.5`.
pub fn pirls(
    design: &ModelDesign,
    log_lambdas: &[f64],
    family: CountFamily,
    start: Option<&DVector<f64>>,
) -> Result<PirlsFit, FitError> {
    if log_lambdas.len() != design.penalties.len() {
        return Err(FitError::Shape(format!(
            "{} smoothing parameters for {} penalties",
            log_lambdas.len(),
            design.penalties.len()
        )));
    }
    let x = &design.x;
    let y = &design.y;
    let n = x.nrows();
    let s = total_penalty(design, log_lambdas);
    let penalized = s.amax() > 0.0;
    let mut ridge_used = false;

    let (mut beta, mut eta, mut pdev) = match start {
        Some(b) => {
            let eta = x * b;
            let mu = means(&eta, &design.offset);
            let pd = deviance(y, &mu, family) + quad(b, &s);
            (Some(b.clone()), eta, pd)
        }
        None => {
            let eta = DVector::from_iterator(
                n,
                y.iter().zip(&design.offset).map(|(yi, o)| (yi + 0.5).ln() - o),
            );
            (None, eta, f64::INFINITY)
        }
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut small_change_before = false;
    let mut iterations = 0;
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mu = means(&eta, &design.offset);
        for i in 0..n {
            w[i] = family.working_weight(mu[i]);
            z[i] = eta[i] + (y[i] - mu[i]) / mu[i];
        }
        let (g, r) = weighted_normal_equations(x, &w, &z);
        let h = g + &s;
        let chol = factorize(&h, penalized, &mut ridge_used)?;
        let proposal = refined_solve(&chol, &h, &r);
        if proposal.iter().any(|v| !v.is_finite()) {
            return Err(FitError::Diverged { trace });
        }

        // step halving on the penalized deviance
        let mut candidate = proposal.clone();
        let mut cand_eta = x * &candidate;
        let mut cand_pdev = deviance(y, &means(&cand_eta, &design.offset), family) + quad(&candidate, &s);
        if let Some(old) = &beta {
            let mut step = 1.0;
            let mut halvings = 0;
            while !(cand_pdev <= pdev) && halvings < MAX_HALVINGS {
                step *= 0.5;
                halvings += 1;
                candidate = old + (&proposal - old) * step;
                cand_eta = x * &candidate;
                cand_pdev = deviance(y, &means(&cand_eta, &design.offset), family) + quad(&candidate, &s);
            }
            if !(cand_pdev <= pdev) {
                // no descent direction left: the current iterate is the optimum to working precision
                converged = true;
                break;
            }
        }
        let change = (pdev - cand_pdev).abs();
        let step_size = match &beta {
            Some(old) => (&candidate - old).amax(),
            None => f64::INFINITY,
        };
        let scale = candidate.amax().max(1.0);
        beta = Some(candidate);
        eta = cand_eta;
        pdev = cand_pdev;
        trace.push(pdev);
        let small_change = change < DEVIANCE_TOL * (pdev.abs() + 0.1);
        // one extra iteration after the deviance settles unless the coefficients have too
        if small_change && (step_size < 1e-7 * scale || small_change_before) {
            converged = true;
            break;
        }
        small_change_before = small_change;
    }
    let beta = beta.ok_or(FitError::Diverged { trace: trace.clone() })?;
    if !converged {
        return Err(FitError::NotConverged { trace });
    }

    let mu = means(&eta, &design.offset);
    for i in 0..n {
        w[i] = family.working_weight(mu[i]);
    }
    let (g, _) = weighted_normal_equations(x, &w, &z);
    let h = &g + &s;
    let chol = factorize(&h, penalized, &mut ridge_used)?;
    let influence = chol.solve(&g);
    let edf = influence.diagonal();
    let dev = deviance(y, &mu, family);
    Ok(PirlsFit {
        penalized_deviance: dev + quad(&beta, &s),
        beta,
        eta,
        mu,
        deviance: dev,
        edf,
        iterations,
        trace,
        ridge_used,
    })
}
