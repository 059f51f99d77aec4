//! B-spline marginal bases, difference penalties and tensor-product term blocks.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BasisError {
    #[error("value {value} outside basis domain [{lo}, {hi}]")]
    OutOfDomain { value: f64, lo: f64, hi: f64 },
    #[error("degenerate knot vector: {0}")]
    DegenerateKnots(String),
    #[error("difference order {order} must be at least 1 and below the basis size {num_basis}")]
    PenaltyOrder { num_basis: usize, order: usize },
    #[error("anisotropy group of size {0}; only 1-D and 2-D groups are supported")]
    GroupSize(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Clamped B-spline basis on `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalBasis {
    knots: Vec<f64>,
    degree: usize,
}

impl MarginalBasis {
    /// Build from a full knot vector whose end knots are repeated `degree + 1` times.
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self, BasisError> {
        if knots.len() < 2 * (degree + 1) {
            return Err(BasisError::DegenerateKnots(format!(
                "{} knots cannot support degree {degree}",
                knots.len()
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(BasisError::DegenerateKnots("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(BasisError::DegenerateKnots("knots decrease".into()));
        }
        let lo = knots[0];
        let hi = knots[knots.len() - 1];
        if hi <= lo {
            return Err(BasisError::DegenerateKnots(format!(
                "empty domain [{lo}, {hi}]"
            )));
        }
        let clamped = knots[..=degree].iter().all(|&k| k == lo)
            && knots[knots.len() - degree - 1..].iter().all(|&k| k == hi);
        if !clamped {
            return Err(BasisError::DegenerateKnots(
                "end knots must be repeated degree + 1 times".into(),
            ));
        }
        let interior = &knots[degree + 1..knots.len() - degree - 1];
        if interior.iter().any(|&k| k <= lo || k >= hi) {
            return Err(BasisError::DegenerateKnots(
                "interior knots must lie strictly inside the domain".into(),
            ));
        }
        Ok(MarginalBasis { knots, degree })
    }

    /// Clamped basis with equally spaced interior knots.
    pub fn uniform(lo: f64, hi: f64, num_basis: usize, degree: usize) -> Result<Self, BasisError> {
        if num_basis < degree + 1 {
            return Err(BasisError::DegenerateKnots(format!(
                "{num_basis} basis functions cannot support degree {degree}"
            )));
        }
        let n_interior = num_basis - degree - 1;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| lo + (hi - lo) * j as f64 / (n_interior + 1) as f64)
            .collect();
        Self::new(clamp_knots(lo, hi, &interior, degree), degree)
    }

    /// Clamped basis with interior knots at quantiles of the distinct data values.
    ///
    /// Falls back to equal spacing when there are too few distinct values to give
    /// strictly increasing quantile knots.
    pub fn from_data(values: &[f64], num_basis: usize, degree: usize) -> Result<Self, BasisError> {
        let mut distinct: Vec<f64> = values.to_vec();
        if distinct.iter().any(|v| !v.is_finite()) {
            return Err(BasisError::DegenerateKnots("non-finite data value".into()));
        }
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let (lo, hi) = match (distinct.first(), distinct.last()) {
            (Some(&lo), Some(&hi)) if hi > lo => (lo, hi),
            _ => {
                return Err(BasisError::DegenerateKnots(
                    "variable takes fewer than two distinct values".into(),
                ))
            }
        };
        if num_basis < degree + 1 {
            return Err(BasisError::DegenerateKnots(format!(
                "{num_basis} basis functions cannot support degree {degree}"
            )));
        }
        let n_interior = num_basis - degree - 1;
        let interior: Vec<f64> = (1..=n_interior)
            .map(|j| quantile_sorted(&distinct, j as f64 / (n_interior + 1) as f64))
            .collect();
        let ok = interior.iter().all(|&k| k > lo && k < hi)
            && interior.windows(2).all(|w| w[1] > w[0]);
        if ok {
            Self::new(clamp_knots(lo, hi, &interior, degree), degree)
        } else {
            Self::uniform(lo, hi, num_basis, degree)
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    /// Knot span index `i` with `knots[i] <= x < knots[i+1]`; the right end maps to the last span.
    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.num_basis();
        if x >= self.knots[n] {
            return n - 1;
        }
        // knots[p..=n] bracket every non-degenerate span
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Values of the `degree + 1` basis functions that are non-zero at `x`,
    /// together with the index of the first of them.
    pub fn eval_nonzero(&self, x: f64) -> Result<(usize, Vec<f64>), BasisError> {
        let (lo, hi) = self.domain();
        if !(x >= lo && x <= hi) {
            return Err(BasisError::OutOfDomain { value: x, lo, hi });
        }
        let p = self.degree;
        let i = self.span(x);
        let t = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[i + 1 - j];
            right[j] = t[i + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((i - p, n))
    }

    /// Full row of basis values at `x`.
    pub fn eval_row(&self, x: f64) -> Result<Vec<f64>, BasisError> {
        let (first, vals) = self.eval_nonzero(x)?;
        let mut row = vec![0.0; self.num_basis()];
        row[first..first + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }
}

fn clamp_knots(lo: f64, hi: f64, interior: &[f64], degree: usize) -> Vec<f64> {
    let mut knots = vec![lo; degree + 1];
    knots.extend_from_slice(interior);
    knots.extend(std::iter::repeat(hi).take(degree + 1));
    knots
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h.floor() as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

/// `n x num_basis` design of B-spline values evaluated by the Cox–de Boor recursion.
pub fn bspline_design(x: &[f64], basis: &MarginalBasis) -> Result<DMatrix<f64>, BasisError> {
    let mut out = DMatrix::zeros(x.len(), basis.num_basis());
    for (r, &xi) in x.iter().enumerate() {
        let (first, vals) = basis.eval_nonzero(xi)?;
        for (j, v) in vals.into_iter().enumerate() {
            out[(r, first + j)] = v;
        }
    }
    Ok(out)
}

/// `DᵀD` for the `order`-th forward difference operator on `num_basis` coefficients.
pub fn difference_penalty(num_basis: usize, order: usize) -> Result<DMatrix<f64>, BasisError> {
    if order == 0 || order >= num_basis {
        return Err(BasisError::PenaltyOrder { num_basis, order });
    }
    let mut d = DMatrix::<f64>::identity(num_basis, num_basis);
    for _ in 0..order {
        let rows = d.nrows() - 1;
        let mut next = DMatrix::zeros(rows, num_basis);
        for r in 0..rows {
            for c in 0..num_basis {
                next[(r, c)] = d[(r + 1, c)] - d[(r, c)];
            }
        }
        d = next;
    }
    Ok(d.transpose() * d)
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Difference order used for every marginal (second-order P-splines).
pub const PENALTY_ORDER: usize = 2;

/// Cubic unless the basis is too small to support it.
pub fn marginal_degree(num_basis: usize) -> usize {
    3.min(num_basis - 1)
}

fn marginal_penalty(m: &MarginalBasis) -> Result<DMatrix<f64>, BasisError> {
    let k = m.num_basis();
    difference_penalty(k, PENALTY_ORDER.min(k - 1))
}

/// Sum-to-zero constraint `cᵀβ = 0`, absorbed by a Householder reflection.
///
/// The constrained basis is `Z = H[:, 1..]` where `H = I - 2vvᵀ/(vᵀv)` maps `c`
/// onto the first axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SumToZero {
    householder: Vec<f64>,
}

impl SumToZero {
    /// Constraint from the column sums of the unconstrained design.
    pub fn from_design(design: &DMatrix<f64>) -> Self {
        let c: Vec<f64> = design.column_iter().map(|col| col.sum()).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = c;
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * norm;
        SumToZero { householder: v }
    }

    pub fn unconstrained_dim(&self) -> usize {
        self.householder.len()
    }

    /// `X Z`: apply the reflection to each row and drop the first column.
    pub fn constrain_design(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let v = DVector::from_column_slice(&self.householder);
        let vv = v.dot(&v);
        let p = v.len();
        if vv == 0.0 {
            return x.columns(1, p - 1).into_owned();
        }
        // X H = X - (2/vᵀv) (X v) vᵀ
        let xv = x * &v;
        let xh = x - (xv * v.transpose()) * (2.0 / vv);
        xh.columns(1, p - 1).into_owned()
    }

    /// `Z` as an explicit `p x (p-1)` matrix.
    pub fn basis(&self) -> DMatrix<f64> {
        let p = self.householder.len();
        self.constrain_design(&DMatrix::identity(p, p))
    }

    /// `Zᵀ S Z`, symmetrised.
    pub fn constrain_penalty(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        let v = DVector::from_column_slice(&self.householder);
        let vv = v.dot(&v);
        let p = v.len();
        let sym = (s + s.transpose()) * 0.5;
        if vv == 0.0 {
            return sym.view((1, 1), (p - 1, p - 1)).into_owned();
        }
        // H S H = S - b(w vᵀ + v wᵀ) + b² (vᵀw) v vᵀ with w = S v, b = 2/vᵀv
        let b = 2.0 / vv;
        let w = &sym * &v;
        let c = v.dot(&w);
        let out = DMatrix::from_fn(p - 1, p - 1, |i, j| {
            let (i, j) = (i + 1, j + 1);
            sym[(i, j)] - b * (w[i] * v[j] + v[i] * w[j]) + b * b * c * v[i] * v[j]
        });
        (&out + out.transpose()) * 0.5
    }

    /// Map constrained coefficients back to the unconstrained basis (`Z β`).
    pub fn expand(&self, beta: &[f64]) -> Vec<f64> {
        let z = self.basis();
        (z * DVector::from_column_slice(beta)).iter().copied().collect()
    }
}

/// Design columns, penalties and bookkeeping for one smooth term.
#[derive(Debug, Clone)]
pub struct TermBlock {
    pub design: DMatrix<f64>,
    pub penalties: Vec<DMatrix<f64>>,
    /// First column of this block in the full model design.
    pub col_offset: usize,
    pub group_labels: Vec<String>,
    pub constraint: SumToZero,
}

impl TermBlock {
    pub fn ncols(&self) -> usize {
        self.design.ncols()
    }
}

/// Unconstrained tensor-product design: each row is the Kronecker product of the
/// marginal rows, the last variable varying fastest.
pub fn raw_tensor_design(
    marginals: &[MarginalBasis],
    data_columns: &[&[f64]],
) -> Result<DMatrix<f64>, BasisError> {
    if marginals.len() != data_columns.len() || marginals.is_empty() {
        return Err(BasisError::Shape(format!(
            "{} marginals for {} data columns",
            marginals.len(),
            data_columns.len()
        )));
    }
    let n = data_columns[0].len();
    if data_columns.iter().any(|c| c.len() != n) {
        return Err(BasisError::Shape("data columns differ in length".into()));
    }
    let ncols: usize = marginals.iter().map(MarginalBasis::num_basis).product();
    let mut out = DMatrix::zeros(n, ncols);
    let mut row: Vec<f64> = Vec::with_capacity(ncols);
    let mut next: Vec<f64> = Vec::with_capacity(ncols);
    for r in 0..n {
        row.clear();
        row.push(1.0);
        for (m, col) in marginals.iter().zip(data_columns) {
            let (first, vals) = m.eval_nonzero(col[r])?;
            let k = m.num_basis();
            next.clear();
            next.resize(row.len() * k, 0.0);
            for (a, &ra) in row.iter().enumerate() {
                if ra == 0.0 {
                    continue;
                }
                for (j, &v) in vals.iter().enumerate() {
                    next[a * k + first + j] = ra * v;
                }
            }
            std::mem::swap(&mut row, &mut next);
        }
        for (c, &v) in row.iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    Ok(out)
}

/// One unconstrained penalty per d-group: `I ⊗ … ⊗ S_g ⊗ … ⊗ I`, where a 2-D
/// group ties its axes as `S_a ⊗ I_b + I_a ⊗ S_b`.
pub fn tensor_penalties(
    marginals: &[MarginalBasis],
    d_groups: &[usize],
) -> Result<Vec<DMatrix<f64>>, BasisError> {
    if d_groups.iter().sum::<usize>() != marginals.len() {
        return Err(BasisError::Shape(format!(
            "d-groups cover {} variables but {} marginals were given",
            d_groups.iter().sum::<usize>(),
            marginals.len()
        )));
    }
    let dims: Vec<usize> = marginals.iter().map(MarginalBasis::num_basis).collect();
    let mut penalties = Vec::with_capacity(d_groups.len());
    let mut start = 0;
    for &d in d_groups {
        let group_penalty = match d {
            1 => marginal_penalty(&marginals[start])?,
            2 => {
                let (a, b) = (&marginals[start], &marginals[start + 1]);
                let ia = DMatrix::identity(a.num_basis(), a.num_basis());
                let ib = DMatrix::identity(b.num_basis(), b.num_basis());
                kron(&marginal_penalty(a)?, &ib) + kron(&ia, &marginal_penalty(b)?)
            }
            other => return Err(BasisError::GroupSize(other)),
        };
        let before: usize = dims[..start].iter().product();
        let after: usize = dims[start + d..].iter().product();
        let full = kron(
            &kron(&DMatrix::identity(before, before), &group_penalty),
            &DMatrix::identity(after, after),
        );
        penalties.push(full);
        start += d;
    }
    Ok(penalties)
}

/// Build the constrained design and penalties of a tensor-product smooth.
///
/// Penalties are rescaled so that each has the same Frobenius norm as the
/// constrained `XᵀX`, which puts smoothing parameters on a comparable scale
/// across terms. `labels` names each d-group.
pub fn tensor_term(
    marginals: &[MarginalBasis],
    d_groups: &[usize],
    data_columns: &[&[f64]],
    labels: Vec<String>,
) -> Result<TermBlock, BasisError> {
    if let Some(&bad) = d_groups.iter().find(|&&d| d == 0 || d > 2) {
        return Err(BasisError::GroupSize(bad));
    }
    if labels.len() != d_groups.len() {
        return Err(BasisError::Shape("one label per d-group required".into()));
    }
    let raw = raw_tensor_design(marginals, data_columns)?;
    let raw_penalties = tensor_penalties(marginals, d_groups)?;
    let constraint = SumToZero::from_design(&raw);
    let design = constraint.constrain_design(&raw);
    let xtx_norm = (design.transpose() * &design).norm();
    let penalties = raw_penalties
        .iter()
        .map(|s| {
            let s = constraint.constrain_penalty(s);
            let sn = s.norm();
            if sn > 0.0 && xtx_norm > 0.0 {
                s * (xtx_norm / sn)
            } else {
                s
            }
        })
        .collect();
    Ok(TermBlock {
        design,
        penalties,
        col_offset: 0,
        group_labels: labels,
        constraint,
    })
}
