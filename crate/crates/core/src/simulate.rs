//! Synthetic count panels from known link-scale surfaces, and the B-spline
//! demonstration tables.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::basis::bspline_design;
use crate::data::{format_month, person_years_offset, DataError, Panel, PanelRow};
use crate::family::{sample_nb, FamilyError};
use crate::fitter::{predict, select_smoothing, FitError, FitOptions, FitResult};
use crate::model_dsl::{Family, ModelSpec, OffsetRule, SmoothTerm};

/// Largest link-scale value a surface may take.
pub const MAX_LINK: f64 = 30.0;
/// Name of the per-unit lattice covariate used by the one-dimensional surfaces.
pub const X_COLUMN: &str = "x";

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error("unknown surface `{name}`; expected one of {}", Surface::ALL.map(|s| s.name()).join(", "))]
    UnknownSurface { name: String },
    #[error("surface `{surface}` takes {expected} parameters, got {got}")]
    Arity { surface: &'static str, expected: usize, got: usize },
    #[error("link value {value} at unit {unit}, month {month} exceeds {MAX_LINK}")]
    Overflow { value: f64, unit: String, month: i32 },
    #[error("simulated {deaths} deaths exceed population {popsize} for unit {unit}")]
    CountExceedsPopulation { deaths: u64, popsize: u64, unit: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fit(#[from] FitError),
}

/// Catalog of true link-scale surfaces.
///
/// Arguments: `x` is the unit's lattice covariate in `(0, 1)`, `(u, v)` its
/// position in the unit square and `t` the month rescaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Surface {
    /// `[c]`: `c`.
    Constant,
    /// `[a, b]`: `a + b·x`.
    Linear,
    /// `[a, b, c]`: `a + b·x + c·x²`.
    Quadratic,
    /// `[a, amp, freq]`: `a + amp·sin(2π·freq·x)`.
    Sine,
    /// `[a, amp, cx, cy, width]`: `a + amp·exp(−((u−cx)² + (v−cy)²) / (2·width²))`.
    GaussianBump2d,
    /// `[a, amp_s, amp_t]`: `a + amp_s·exp(−((u−½)² + (v−½)²)/0.125) + amp_t·sin(2πt)`.
    SeparableSpaceTime,
    /// `[a, bx, bt, amp]`: `a + bx·x + bt·t + amp·4(x−½)(t−½)`.
    Interaction,
}

impl Surface {
    pub const ALL: [Surface; 7] = [
        Surface::Constant,
        Surface::Linear,
        Surface::Quadratic,
        Surface::Sine,
        Surface::GaussianBump2d,
        Surface::SeparableSpaceTime,
        Surface::Interaction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Surface::Constant => "constant",
            Surface::Linear => "linear",
            Surface::Quadratic => "quadratic",
            Surface::Sine => "sine",
            Surface::GaussianBump2d => "gaussian-bump-2d",
            Surface::SeparableSpaceTime => "separable-space-time",
            Surface::Interaction => "interaction",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Surface::Constant => 1,
            Surface::Linear => 2,
            Surface::Quadratic => 3,
            Surface::Sine => 3,
            Surface::GaussianBump2d => 5,
            Surface::SeparableSpaceTime => 3,
            Surface::Interaction => 4,
        }
    }

    /// Link-scale value; `p` must have length [`Surface::arity`].
    pub fn eval(self, p: &[f64], x: f64, u: f64, v: f64, t: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Surface::Constant => p[0],
            Surface::Linear => p[0] + p[1] * x,
            Surface::Quadratic => p[0] + p[1] * x + p[2] * x * x,
            Surface::Sine => p[0] + p[1] * (2.0 * PI * p[2] * x).sin(),
            Surface::GaussianBump2d => {
                let r2 = (u - p[2]).powi(2) + (v - p[3]).powi(2);
                p[0] + p[1] * (-r2 / (2.0 * p[4] * p[4])).exp()
            }
            Surface::SeparableSpaceTime => {
                let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
                p[0] + p[1] * (-r2 / 0.125).exp() + p[2] * (2.0 * PI * t).sin()
            }
            Surface::Interaction => p[0] + p[1] * x + p[2] * t + p[3] * 4.0 * (x - 0.5) * (t - 0.5),
        }
    }
}

impl fmt::Display for Surface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Surface {
    type Err = SimulateError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Surface::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| SimulateError::UnknownSurface { name: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_units: usize,
    pub n_months: usize,
    /// Mean and standard deviation of log population.
    pub popsize_meanlog: f64,
    pub popsize_sdlog: f64,
    pub surface: Surface,
    pub surface_params: Vec<f64>,
    pub phi: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_units: 100,
            n_months: 12,
            popsize_meanlog: 50_000f64.ln(),
            popsize_sdlog: 1.0,
            surface: Surface::Constant,
            surface_params: vec![100f64.ln()],
            phi: 10.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimulateError> {
        if self.surface_params.len() != self.surface.arity() {
            return Err(SimulateError::Arity {
                surface: self.surface.name(),
                expected: self.surface.arity(),
                got: self.surface_params.len(),
            });
        }
        if self.n_units == 0 || self.n_months == 0 {
            return Err(SimulateError::Config("n_units and n_months must be positive".into()));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(SimulateError::Config(format!("phi must be positive and finite, got {}", self.phi)));
        }
        if !(self.popsize_sdlog >= 0.0 && self.popsize_meanlog.is_finite()) {
            return Err(SimulateError::Config("invalid population law".into()));
        }
        if self.surface_params.iter().any(|p| !p.is_finite()) {
            return Err(SimulateError::Config("surface parameters must be finite".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` file. Blank lines and `#` comments are ignored;
    /// `params` is a comma-separated list.
    pub fn parse(text: &str) -> Result<SimConfig, SimulateError> {
        let mut cfg = SimConfig::default();
        let mut params: Option<Vec<f64>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SimulateError::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| SimulateError::Config(format!("line {}: invalid {what} `{value}`", lineno + 1));
            match key {
                "n_units" => cfg.n_units = value.parse().map_err(|_| bad(key))?,
                "n_months" => cfg.n_months = value.parse().map_err(|_| bad(key))?,
                "popsize_meanlog" => cfg.popsize_meanlog = value.parse().map_err(|_| bad(key))?,
                "popsize_sdlog" => cfg.popsize_sdlog = value.parse().map_err(|_| bad(key))?,
                "surface" => cfg.surface = value.parse()?,
                "params" => {
                    params = Some(
                        value
                            .split(',')
                            .map(|p| p.trim().parse::<f64>().map_err(|_| bad(key)))
                            .collect::<Result<_, _>>()?,
                    )
                }
                "phi" => cfg.phi = value.parse().map_err(|_| bad(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                other => return Err(SimulateError::Config(format!("line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        cfg.surface_params = match params {
            Some(p) => p,
            None if cfg.surface == Surface::Constant => cfg.surface_params,
            None => return Err(SimulateError::Config("missing `params`".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let params: Vec<String> = self.surface_params.iter().map(|p| format!("{p:?}")).collect();
        format!(
            "n_units = {}\nn_months = {}\npopsize_meanlog = {:?}\npopsize_sdlog = {:?}\nsurface = {}\nparams = {}\nphi = {:?}\nseed = {}\n",
            self.n_units,
            self.n_months,
            self.popsize_meanlog,
            self.popsize_sdlog,
            self.surface,
            params.join(","),
            self.phi,
            self.seed
        )
    }

    /// Config of replicate `index`: the same settings with seed `seed + index`.
    pub fn replicate(&self, index: u64) -> SimConfig {
        SimConfig { seed: self.seed.wrapping_add(index), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub unit: String,
    pub month: i32,
    pub true_link: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub panel: Panel,
    pub truth: Vec<TruthRow>,
    /// Lattice row and column of each unit, for building adjacency.
    pub lattice: BTreeMap<String, (usize, usize)>,
    pub lattice_side: usize,
}

pub fn unit_id(index: usize) -> String {
    format!("{:05}", index + 1)
}

/// Simulate a panel. Units sit on a jittered `g x g` lattice in the unit
/// square (`g = ⌈√n_units⌉`) mapped to latitude `25 + 24v` and longitude
/// `−124 + 57u`; each unit also gets a distinct lattice covariate `x`.
pub fn simulate_panel(config: &SimConfig) -> Result<Simulation, SimulateError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_units;
    let side = (n as f64).sqrt().ceil() as usize;
    let positions: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let (r, c) = (i / side, i % side);
            let ju: f64 = rng.random_range(-0.25..0.25);
            let jv: f64 = rng.random_range(-0.25..0.25);
            ((c as f64 + 0.5 + ju) / side as f64, (r as f64 + 0.5 + jv) / side as f64)
        })
        .collect();
    let mut xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
    xs.shuffle(&mut rng);
    let law = LogNormal::new(config.popsize_meanlog, config.popsize_sdlog)
        .map_err(|e| SimulateError::Config(e.to_string()))?;
    let pops: Vec<u64> = (0..n).map(|_| (law.sample(&mut rng).round() as u64).max(1)).collect();

    let t_scale = if config.n_months > 1 { (config.n_months - 1) as f64 } else { 1.0 };
    let mut rows = Vec::with_capacity(n * config.n_months);
    let mut truth = Vec::with_capacity(n * config.n_months);
    for i in 0..n {
        let unit = unit_id(i);
        let (u, v) = positions[i];
        let offset = person_years_offset(pops[i])?;
        for m in 0..config.n_months {
            let month = m as i32;
            let f = config.surface.eval(&config.surface_params, xs[i], u, v, m as f64 / t_scale);
            if !(f <= MAX_LINK) {
                return Err(SimulateError::Overflow { value: f, unit, month });
            }
            let deaths = sample_nb((offset + f).exp(), config.phi, &mut rng)?;
            if deaths > pops[i] {
                return Err(SimulateError::CountExceedsPopulation { deaths, popsize: pops[i], unit });
            }
            rows.push(PanelRow {
                unit_id: unit.clone(),
                month_index: month,
                deaths,
                popsize: pops[i],
                latitude: 25.0 + 24.0 * v,
                longitude: -124.0 + 57.0 * u,
                covariates: [(X_COLUMN.to_string(), Some(xs[i]))].into(),
            });
            truth.push(TruthRow { unit: unit.clone(), month, true_link: f });
        }
    }
    let lattice = (0..n).map(|i| (unit_id(i), (i / side, i % side))).collect();
    Ok(Simulation { panel: Panel::from_rows(rows)?, truth, lattice, lattice_side: side })
}

impl Simulation {
    /// Rook adjacency of the occupied lattice cells.
    pub fn rook_edges(&self) -> Vec<(String, String)> {
        let by_cell: BTreeMap<(usize, usize), &String> = self.lattice.iter().map(|(u, &rc)| (rc, u)).collect();
        let mut edges = Vec::new();
        for (&(r, c), &u) in &by_cell {
            for next in [(r, c + 1), (r + 1, c)] {
                if let Some(&w) = by_cell.get(&next) {
                    edges.push((u.clone(), w.clone()));
                }
            }
        }
        edges
    }

    pub fn write_truth<W: std::io::Write>(&self, writer: W) -> Result<(), SimulateError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| SimulateError::Data(DataError::Csv(e));
        w.write_record(["unit", "month", "true_link"]).map_err(io)?;
        for t in &self.truth {
            w.write_record([t.unit.clone(), format_month(t.month), format!("{:?}", t.true_link)]).map_err(io)?;
        }
        w.flush().map_err(|e| SimulateError::Data(DataError::Io(e)))?;
        Ok(())
    }
}

/// Covariate rows of a panel for the variables a fit needs.
pub fn panel_covariate_rows(panel: &Panel, names: &[String]) -> Result<Vec<BTreeMap<String, f64>>, FitError> {
    let columns: Vec<Vec<Option<f64>>> = names
        .iter()
        .map(|n| panel.column(n).ok_or_else(|| FitError::UnknownColumn(n.clone())))
        .collect::<Result<_, _>>()?;
    (0..panel.len())
        .map(|i| {
            names
                .iter()
                .zip(&columns)
                .map(|(n, c)| {
                    c[i].map(|v| (n.clone(), v))
                        .ok_or_else(|| FitError::MissingCovariate { row: i, column: n.clone() })
                })
                .collect()
        })
        .collect()
}

/// Root mean square difference between a fit's linear predictor and the true
/// link values at every panel row.
pub fn truth_rmse(fit: &FitResult, sim: &Simulation) -> Result<f64, FitError> {
    let rows = panel_covariate_rows(&sim.panel, &fit.spec.covariates())?;
    let pred = predict(fit, &rows, &BTreeMap::new())?;
    let ss: f64 = pred.iter().zip(&sim.truth).map(|(p, t)| (p.linear_predictor - t.true_link).powi(2)).sum();
    Ok((ss / pred.len() as f64).sqrt())
}

/// True curve of the spline demonstration.
pub fn demo_truth(x: f64) -> f64 {
    2.0 + (2.0 * std::f64::consts::PI * x).sin()
}

pub const DEMO_POINTS: usize = 200;
pub const DEMO_GRID: usize = 101;
pub const DEMO_BASIS_DIM: usize = 8;
pub const DEMO_PHI: f64 = 20.0;

/// The three tables of the B-spline demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineDemo {
    /// `(x, y)` observations.
    pub data: Vec<(f64, u64)>,
    pub grid: Vec<f64>,
    /// Unconstrained B-spline values on the grid, one row per grid point.
    pub basis: Vec<Vec<f64>>,
    /// Basis values multiplied by the fitted coefficients in the unconstrained basis.
    pub weighted: Vec<Vec<f64>>,
    pub intercept: f64,
    /// Fitted link-scale curve on the grid.
    pub fitted: Vec<f64>,
    pub truth: Vec<f64>,
    pub fit: FitResult,
}

impl SplineDemo {
    pub fn fitted_rmse(&self) -> f64 {
        rmse(&self.fitted, &self.truth)
    }

    /// RMSE of the best constant approximation to the true curve on the grid.
    pub fn constant_rmse(&self) -> f64 {
        let mean = self.truth.iter().sum::<f64>() / self.truth.len() as f64;
        rmse(&vec![mean; self.truth.len()], &self.truth)
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Simulate counts around [`demo_truth`], fit `y ~ s(x, k=8)` and decompose the
/// fitted curve into weighted basis functions.
pub fn spline_demo(seed: u64) -> Result<SplineDemo, SimulateError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..DEMO_POINTS).map(|i| i as f64 / (DEMO_POINTS - 1) as f64).collect();
    let mut data = Vec::with_capacity(DEMO_POINTS);
    let mut rows = Vec::with_capacity(DEMO_POINTS);
    for (i, &x) in xs.iter().enumerate() {
        let y = sample_nb(demo_truth(x).exp(), DEMO_PHI, &mut rng)?;
        data.push((x, y));
        rows.push(PanelRow {
            unit_id: unit_id(i),
            month_index: 0,
            deaths: y,
            popsize: u32::MAX as u64,
            latitude: 0.0,
            longitude: 0.0,
            covariates: [(X_COLUMN.to_string(), Some(x))].into(),
        });
    }
    let panel = Panel::from_rows(rows)?;
    let mut term = SmoothTerm::s(X_COLUMN);
    term.basis_dims = vec![DEMO_BASIS_DIM];
    let spec = ModelSpec {
        response: "deaths".into(),
        parametric_terms: vec![],
        smooth_terms: vec![term],
        family: Family::NegBin,
        offset_rule: OffsetRule::None,
    };
    let fit = select_smoothing(&spec, &panel, &FitOptions::default())?;

    let smooth = &fit.smooths[0];
    let marginal = &smooth.marginals[0];
    let (lo, hi) = marginal.domain();
    let grid: Vec<f64> = (0..DEMO_GRID)
        .map(|i| if i + 1 == DEMO_GRID { hi } else { lo + (hi - lo) * i as f64 / (DEMO_GRID - 1) as f64 })
        .collect();
    let b = bspline_design(&grid, marginal).map_err(|e| FitError::Basis(e.to_string()))?;
    let alpha = smooth.constraint.expand(&fit.coefficients[1..]);
    let basis: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
    let weighted = basis.iter().map(|r| r.iter().zip(&alpha).map(|(v, a)| v * a).collect()).collect();
    let grid_rows: Vec<BTreeMap<String, f64>> = grid.iter().map(|&x| [(X_COLUMN.to_string(), x)].into()).collect();
    let fitted = predict(&fit, &grid_rows, &BTreeMap::new())?.into_iter().map(|p| p.linear_predictor).collect();
    Ok(SplineDemo {
        data,
        truth: grid.iter().map(|&x| demo_truth(x)).collect(),
        grid,
        basis,
        weighted,
        intercept: fit.coefficients[0],
        fitted,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(surface: Surface, params: Vec<f64>) -> SimConfig {
        SimConfig { surface, surface_params: params, ..Default::default() }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = SimConfig { seed: 42, phi: 3.5, ..config(Surface::Sine, vec![4.0, 0.5, 1.0]) };
        assert_eq!(SimConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(matches!(SimConfig::parse("surface = wobbly\n"), Err(SimulateError::UnknownSurface { .. })));
        assert!(matches!(
            SimConfig::parse("surface = linear\nparams = 1\n"),
            Err(SimulateError::Arity { expected: 2, got: 1, .. })
        ));
        assert!(SimConfig::parse("colour = blue\n").is_err());
    }

    #[test]
    fn same_seed_same_panel() {
        let cfg = config(Surface::Linear, vec![4.0, 1.0]);
        assert_eq!(simulate_panel(&cfg).unwrap(), simulate_panel(&cfg).unwrap());
        assert_ne!(simulate_panel(&cfg.replicate(1)).unwrap().panel, simulate_panel(&cfg).unwrap().panel);
    }

    #[test]
    fn overflow_is_rejected() {
        let cfg = config(Surface::Constant, vec![31.0]);
        assert!(matches!(simulate_panel(&cfg), Err(SimulateError::Overflow { .. })));
    }

    #[test]
    fn constant_surface_pooled_rate() {
        let cfg = SimConfig { n_units: 400, n_months: 24, seed: 7, ..config(Surface::Constant, vec![100f64.ln()]) };
        let sim = simulate_panel(&cfg).unwrap();
        let p = &sim.panel;
        let deaths: f64 = p.deaths().iter().map(|&d| d as f64).sum();
        let exposures: Vec<f64> = p.popsize().iter().map(|&n| n as f64 / 1e5 / 12.0).collect();
        let exposure: f64 = exposures.iter().sum();
        let rate = deaths / exposure;
        // variance of the pooled count under the NB model
        let var: f64 = exposures.iter().map(|e| {
            let mu = 100.0 * e;
            mu + mu * mu / cfg.phi
        }).sum();
        let se = var.sqrt() / exposure;
        assert!((rate - 100.0).abs() < 3.0 * se, "rate {rate}, se {se}");
    }

    #[test]
    fn poisson_limit_dispersion_index() {
        let cfg = SimConfig { n_units: 400, n_months: 24, phi: 1e9, seed: 3, ..config(Surface::Constant, vec![100f64.ln()]) };
        let sim = simulate_panel(&cfg).unwrap();
        let p = &sim.panel;
        let pearson: f64 = p
            .deaths()
            .iter()
            .zip(p.popsize())
            .map(|(&d, &n)| {
                let mu = 100.0 * n as f64 / 1e5 / 12.0;
                (d as f64 - mu).powi(2) / mu
            })
            .sum::<f64>()
            / p.len() as f64;
        assert!((pearson - 1.0).abs() < 0.1, "dispersion index {pearson}");
    }

    #[test]
    fn lattice_geometry() {
        let cfg = config(Surface::Constant, vec![1.0]);
        let sim = simulate_panel(&cfg).unwrap();
        assert_eq!(sim.lattice_side, 10);
        assert_eq!(sim.rook_edges().len(), 2 * 10 * 9);
        for (&lat, &lon) in sim.panel.latitude().iter().zip(sim.panel.longitude()) {
            assert!((25.0..=49.0).contains(&lat) && (-124.0..=-67.0).contains(&lon));
        }
    }
}
