//! Derivative-free optimizers used for smoothing-parameter and dispersion selection.

/// Relative vertex spread below which the simplex counts as collapsed.
const COLLAPSE_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    pub max_evals: usize,
    /// Stop when the spread of simplex values is below `f_tol·(|f_best| + f_tol)` ...
    pub f_tol: f64,
    /// ... and every vertex is within `x_tol` (max-norm) of the best one.
    pub x_tol: f64,
    /// Box applied to every coordinate; trial points are projected into it.
    pub lower: f64,
    pub upper: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            initial_step: 2.0,
            max_evals: 500,
            f_tol: 1e-8,
            x_tol: 1e-3,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Vertex ordering: lower value first; ties go to the larger coordinate sum.
fn better(a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)) -> std::cmp::Ordering {
    a.1.total_cmp(&b.1).then_with(|| {
        let sa: f64 = a.0.iter().sum();
        let sb: f64 = b.0.iter().sum();
        sb.total_cmp(&sa)
    })
}

/// Nelder–Mead simplex minimisation with standard coefficients
/// (reflection 1, expansion 2, contraction ½, shrink ½).
///
/// NaN objective values are treated as `+∞`.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], opts: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let project = |x: &mut Vec<f64>| {
        for v in x.iter_mut() {
            *v = v.clamp(opts.lower, opts.upper);
        }
    };
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    if n == 0 {
        let v = eval(x0, &mut evals);
        return Minimum { x: Vec::new(), f: v, evals, converged: true };
    }

    let mut start = x0.to_vec();
    project(&mut start);
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let f0 = eval(&start, &mut evals);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut x = start.clone();
        x[i] += opts.initial_step;
        if x[i] > opts.upper {
            x[i] = start[i] - opts.initial_step;
        }
        project(&mut x);
        let v = eval(&x, &mut evals);
        simplex.push((x, v));
    }

    loop {
        simplex.sort_by(better);
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = if best.is_finite() && worst.is_finite() {
            worst - best
        } else if best == worst {
            0.0
        } else {
            f64::INFINITY
        };
        let size = simplex[1..]
            .iter()
            .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let reach = simplex[0].0.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        // a simplex collapsed to working precision cannot improve; any remaining
        // spread is noise in the objective
        let collapsed = size <= COLLAPSE_TOL * reach;
        if (spread <= opts.f_tol * (best.abs() + opts.f_tol) && size <= opts.x_tol) || collapsed {
            return Minimum { x: simplex[0].0.clone(), f: best, evals, converged: true };
        }
        if evals >= opts.max_evals {
            return Minimum { x: simplex[0].0.clone(), f: best, evals, converged: false };
        }

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut p);
            p
        };

        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        if fr < simplex[n].1 {
            let xc = along(0.5);
            let fc = eval(&xc, &mut evals);
            if fc <= fr {
                simplex[n] = (xc, fc);
                continue;
            }
        } else {
            let xc = along(-0.5);
            let fc = eval(&xc, &mut evals);
            if fc < simplex[n].1 {
                simplex[n] = (xc, fc);
                continue;
            }
        }
        // shrink toward the best vertex
        let best_x = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let mut x: Vec<f64> = vertex
                .0
                .iter()
                .zip(&best_x)
                .map(|(v, b)| b + 0.5 * (v - b))
                .collect();
            project(&mut x);
            let v = eval(&x, &mut evals);
            *vertex = (x, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenMaximum {
    pub x: f64,
    pub value: f64,
    pub evals: usize,
}

/// Golden-section search for the maximum of a unimodal `g` on `[lo, hi]`,
/// stopping when the bracket is narrower than `tol`.
pub fn golden_section_max<G>(mut g: G, lo: f64, hi: f64, tol: f64) -> GoldenMaximum
where
    G: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let guard = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    let mut fc = guard(g(c));
    let mut fd = guard(g(d));
    let mut evals = 2;
    while (b - a) > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = guard(g(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = guard(g(d));
        }
        evals += 1;
    }
    if fc >= fd {
        GoldenMaximum { x: c, value: fc, evals }
    } else {
        GoldenMaximum { x: d, value: fd, evals }
    }
}
