//! Assembly of the full model design from a [`ModelSpec`] and a [`Panel`].

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::FitError;
use crate::basis::{marginal_degree, raw_tensor_design, tensor_term, BasisError, MarginalBasis, SumToZero};
use crate::data::{person_years_offset, Panel};
use crate::model_dsl::{ModelSpec, OffsetRule, SmoothTerm};

/// Everything needed to rebuild a smooth term's design rows at new covariate values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothBasis {
    pub label: String,
    pub variables: Vec<String>,
    pub d_groups: Vec<usize>,
    pub marginals: Vec<MarginalBasis>,
    pub constraint: SumToZero,
}

impl SmoothBasis {
    pub fn ncols(&self) -> usize {
        self.constraint.unconstrained_dim() - 1
    }

    /// Constrained design rows for the given columns (one per variable).
    pub fn design(&self, columns: &[&[f64]]) -> Result<DMatrix<f64>, BasisError> {
        let raw = raw_tensor_design(&self.marginals, columns)?;
        Ok(self.constraint.constrain_design(&raw))
    }

    /// Dimension of the joint penalty null space after the centring constraint.
    pub fn null_space_dim(&self) -> usize {
        let mut start = 0;
        let mut dim = 1usize;
        for &d in &self.d_groups {
            for m in &self.marginals[start..start + d] {
                dim *= crate::basis::PENALTY_ORDER.min(m.num_basis() - 1);
            }
            start += d;
        }
        dim - 1
    }
}

/// A penalty occupying a square diagonal block of the coefficient vector.
#[derive(Debug, Clone)]
pub struct PenaltyBlock {
    pub offset: usize,
    pub matrix: DMatrix<f64>,
    pub label: String,
}

impl PenaltyBlock {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Full model design for the usable rows of a panel.
#[derive(Debug, Clone)]
pub struct ModelDesign {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
    pub penalties: Vec<PenaltyBlock>,
    /// Coefficient names: `(Intercept)`, parametric columns, then `label.j` per smooth column.
    pub coefficient_names: Vec<String>,
    /// Column range of each term; the intercept is the first term.
    pub terms: Vec<(String, Range<usize>)>,
    pub smooths: Vec<SmoothBasis>,
    pub parametric: Vec<String>,
    /// Panel row index of every design row.
    pub rows_used: Vec<usize>,
    pub rows_dropped: usize,
}

impl ModelDesign {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Intercept, parametric columns and the smooth null spaces.
    pub fn null_space_dim(&self) -> usize {
        1 + self.parametric.len() + self.smooths.iter().map(SmoothBasis::null_space_dim).sum::<usize>()
    }
}

fn group_labels(term: &SmoothTerm) -> Vec<String> {
    let label = term.label();
    term.groups()
        .iter()
        .map(|g| format!("{label}:{}", g.join("+")))
        .collect()
}

/// Build the design. Rows missing any referenced covariate (or the offset) are dropped.
pub fn build_design(spec: &ModelSpec, panel: &Panel) -> Result<ModelDesign, FitError> {
    let fetch = |name: &str| panel.column(name).ok_or_else(|| FitError::UnknownColumn(name.to_string()));
    let response = fetch(&spec.response)?;
    let covariates = spec.covariates();
    let columns: Vec<Vec<Option<f64>>> = covariates.iter().map(|c| fetch(c)).collect::<Result<_, _>>()?;
    let offset_col: Option<Vec<Option<f64>>> = match &spec.offset_rule {
        OffsetRule::Column(name) => Some(fetch(name)?),
        _ => None,
    };

    let n_all = panel.len();
    let usable = |i: usize| {
        columns.iter().all(|c| c[i].is_some_and(f64::is_finite))
            && response[i].is_some()
            && offset_col.as_ref().map_or(true, |c| c[i].is_some_and(f64::is_finite))
    };
    let rows_used: Vec<usize> = (0..n_all).filter(|&i| usable(i)).collect();
    let n = rows_used.len();
    if n == 0 {
        return Err(FitError::NoUsableRows);
    }

    let mut y = Vec::with_capacity(n);
    for &i in &rows_used {
        let v = response[i].expect("filtered");
        if v < 0.0 || v.fract() != 0.0 {
            return Err(FitError::InvalidResponse(format!(
                "`{}` must hold non-negative integer counts, found {v}",
                spec.response
            )));
        }
        y.push(v);
    }
    let offset: Vec<f64> = match &spec.offset_rule {
        OffsetRule::PersonYears100k => rows_used
            .iter()
            .map(|&i| person_years_offset(panel.popsize()[i]).map_err(|e| FitError::InvalidResponse(e.to_string())))
            .collect::<Result<_, _>>()?,
        OffsetRule::None => vec![0.0; n],
        OffsetRule::Column(_) => {
            let c = offset_col.as_ref().expect("column rule");
            rows_used.iter().map(|&i| c[i].expect("filtered")).collect()
        }
    };

    let used_values = |name: &str| -> Vec<f64> {
        let k = covariates.iter().position(|c| c == name).expect("covariate listed");
        rows_used.iter().map(|&i| columns[k][i].expect("filtered")).collect()
    };

    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut coefficient_names = vec!["(Intercept)".to_string()];
    let mut terms = vec![("(Intercept)".to_string(), 0..1)];
    let mut col = 1;
    blocks.push(DMatrix::from_element(n, 1, 1.0));
    for p in &spec.parametric_terms {
        blocks.push(DMatrix::from_column_slice(n, 1, &used_values(p)));
        coefficient_names.push(p.clone());
        terms.push((p.clone(), col..col + 1));
        col += 1;
    }

    let mut penalties = Vec::new();
    let mut smooths = Vec::new();
    for term in &spec.smooth_terms {
        let data: Vec<Vec<f64>> = term.variables.iter().map(|v| used_values(v)).collect();
        let mut marginals = Vec::with_capacity(term.variables.len());
        let mut var = 0;
        for (&d, &k) in term.d_groups.iter().zip(&term.basis_dims) {
            for _ in 0..d {
                let m = MarginalBasis::from_data(&data[var], k, marginal_degree(k)).map_err(|e| {
                    FitError::Basis(format!("{} ({}): {e}", term.label(), term.variables[var]))
                })?;
                marginals.push(m);
                var += 1;
            }
        }
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let labels = group_labels(term);
        let block = tensor_term(&marginals, &term.d_groups, &refs, labels.clone())
            .map_err(|e| FitError::Basis(format!("{}: {e}", term.label())))?;
        let width = block.ncols();
        for (s, label) in block.penalties.iter().zip(labels) {
            penalties.push(PenaltyBlock { offset: col, matrix: s.clone(), label });
        }
        let label = term.label();
        coefficient_names.extend((1..=width).map(|j| format!("{label}.{j}")));
        terms.push((label.clone(), col..col + width));
        smooths.push(SmoothBasis {
            label,
            variables: term.variables.clone(),
            d_groups: term.d_groups.clone(),
            marginals,
            constraint: block.constraint.clone(),
        });
        blocks.push(block.design);
        col += width;
    }

    let mut x = DMatrix::zeros(n, col);
    let mut at = 0;
    for b in blocks {
        x.columns_mut(at, b.ncols()).copy_from(&b);
        at += b.ncols();
    }

    Ok(ModelDesign {
        x,
        y,
        offset,
        penalties,
        coefficient_names,
        terms,
        smooths,
        parametric: spec.parametric_terms.clone(),
        rows_used,
        rows_dropped: n_all - n,
    })
}
