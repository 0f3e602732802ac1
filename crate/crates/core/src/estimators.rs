//! Benchmark and auxiliary estimators: least squares, instrumental
//! variables, two-step GMM and the global EL estimator, plus the
//! derivative-free simplex search that drives the last two.

use thiserror::Error;

use crate::el_core::{ElError, ElProblem, LambdaSolution, MomentModel, Sample};
use crate::numerics::{cholesky_solve, lu_solve, Cholesky, NumericsError, SquareMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    El(#[from] ElError),
    #[error("no evaluated point has zero inside the moment convex hull")]
    AllInfeasible,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

pub type Result<T> = std::result::Result<T, EstimatorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub theta_hat: Vec<f64>,
    pub method: &'static str,
    pub converged: bool,
    /// Criterion value at `theta_hat`: the sum of squared residuals for LS,
    /// zero for IV, the weighted GMM criterion, or `nΛₙ(θ̂)` for EL.
    pub objective_at_opt: f64,
    pub inner_diagnostics: Option<LambdaSolution>,
}

/// `X` or `Z` as an `n × d` row-major block, reusing the observation store.
pub type Design = Sample;

fn cross(a: &Design, b: &Design) -> SquareMatrix {
    let d = a.width();
    let mut out = SquareMatrix::zeros(d);
    for (ra, rb) in a.rows().zip(b.rows()) {
        for i in 0..d {
            for j in 0..d {
                out[(i, j)] += ra[i] * rb[j];
            }
        }
    }
    out
}

fn cross_vec(a: &Design, y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.width()];
    for (r, yi) in a.rows().zip(y) {
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x * yi);
    }
    out
}

fn check_rows(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(EstimatorError::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn residual_ss(y: &[f64], x: &Design, theta: &[f64]) -> f64 {
    y.iter()
        .zip(x.rows())
        .map(|(yi, r)| {
            let e = yi - r.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>();
            e * e
        })
        .sum()
}

/// `θ̂ = (XᵀX)⁻¹Xᵀy`.
pub fn least_squares(y: &[f64], x: &Design) -> Result<EstimateResult> {
    check_rows(x.n(), y.len())?;
    let theta = cholesky_solve(&cross(x, x), &cross_vec(x, y))?;
    Ok(EstimateResult {
        objective_at_opt: residual_ss(y, x, &theta),
        theta_hat: theta,
        method: "LS",
        converged: true,
        inner_diagnostics: None,
    })
}

/// `θ̂ = (ZᵀX)⁻¹Zᵀy` for the just-identified case.
pub fn instrumental_variables(y: &[f64], x: &Design, z: &Design) -> Result<EstimateResult> {
    check_rows(x.n(), y.len())?;
    check_rows(x.n(), z.n())?;
    check_rows(x.width(), z.width())?;
    let theta = lu_solve(&cross(z, x), &cross_vec(z, y))?;
    Ok(EstimateResult {
        theta_hat: theta,
        method: "IV",
        converged: true,
        objective_at_opt: 0.0,
        inner_diagnostics: None,
    })
}

/// Axis-aligned box; infinite ends are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_rows(lower.len(), upper.len())?;
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(EstimatorError::InvalidBounds(format!(
                "coordinate {i}: lower {} exceeds upper {}",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    /// `center ± half_width` in every coordinate.
    pub fn around(center: &[f64], half_width: &[f64]) -> Result<Self> {
        check_rows(center.len(), half_width.len())?;
        Self::new(
            center.iter().zip(half_width).map(|(c, h)| c - h).collect(),
            center.iter().zip(half_width).map(|(c, h)| c + h).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| *l <= *v && *v <= *u)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Stop once every vertex lies within this distance of the best one.
    pub diameter_tol: f64,
    /// Evaluation budget per parameter.
    pub evals_per_dim: usize,
    /// Initial edge length relative to `max(|xᵢ|, scale_floor)`.
    pub relative_step: f64,
    pub scale_floor: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            diameter_tol: 1e-8,
            evals_per_dim: 500,
            relative_step: 0.1,
            scale_floor: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexResult {
    pub argmax: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Nelder–Mead maximization with every trial point clipped into `bounds`.
///
/// Non-finite objective values count as `−∞`; such points are never
/// returned unless nothing finite was ever seen. Ties keep the earlier
/// vertex, so a flat objective returns `start` unchanged.
pub fn simplex_search<F>(
    mut objective: F,
    start: &[f64],
    bounds: &Bounds,
    opts: &SimplexOptions,
) -> SimplexResult
where
    F: FnMut(&[f64]) -> f64,
{
    let d = start.len();
    assert_eq!(bounds.dim(), d, "bounds and start differ in dimension");
    let budget = opts.evals_per_dim * d.max(1);
    let mut evaluations = 0;
    let mut eval = |x: &[f64], evaluations: &mut usize| {
        *evaluations += 1;
        let v = objective(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };

    let mut x0 = start.to_vec();
    bounds.clip(&mut x0);
    let f0 = eval(&x0, &mut evaluations);
    let mut simplex = vec![(x0.clone(), f0)];
    for i in 0..d {
        let step = opts.relative_step * x0[i].abs().max(opts.scale_floor);
        let mut v = x0.clone();
        v[i] += step;
        if v[i] > bounds.upper[i] {
            v[i] = x0[i] - step;
        }
        bounds.clip(&mut v);
        let f = eval(&v, &mut evaluations);
        simplex.push((v, f));
    }
    if d == 0 {
        return SimplexResult {
            argmax: x0,
            value: f0,
            evaluations,
            converged: true,
        };
    }

    let point = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> {
        let mut p: Vec<f64> = c.iter().zip(w).map(|(a, b)| a + t * (b - a)).collect();
        bounds.clip(&mut p);
        p
    };
    let mut converged = false;
    loop {
        // best first; stable so ties keep their order
        simplex.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let best = &simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .map(|(v, _)| {
                v.iter()
                    .zip(best)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diameter <= opts.diameter_tol {
            converged = true;
            break;
        }
        if evaluations >= budget {
            break;
        }
        let mut centroid = vec![0.0; d];
        for (v, _) in &simplex[..d] {
            centroid
                .iter_mut()
                .zip(v)
                .for_each(|(c, x)| *c += x / d as f64);
        }
        let (worst, f_worst) = simplex[d].clone();
        let f_best = simplex[0].1;
        let f_second = simplex[d - 1].1;

        let xr = point(&centroid, &worst, -1.0);
        let fr = eval(&xr, &mut evaluations);
        if fr > f_best {
            let xe = point(&centroid, &worst, -2.0);
            let fe = eval(&xe, &mut evaluations);
            simplex[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr > f_second {
            simplex[d] = (xr, fr);
            continue;
        }
        // outside contraction must beat the reflection, inside the worst vertex
        let (t, threshold) = if fr > f_worst {
            (-0.5, fr)
        } else {
            (0.5, f_worst)
        };
        let xc = point(&centroid, &worst, t);
        let fc = eval(&xc, &mut evaluations);
        if fc > threshold {
            simplex[d] = (xc, fc);
            continue;
        }
        let best = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let xs = point(&best, &entry.0, 0.5);
            let fs = eval(&xs, &mut evaluations);
            *entry = (xs, fs);
        }
    }
    let (argmax, value) = simplex.swap_remove(0);
    SimplexResult {
        argmax,
        value,
        evaluations,
        converged,
    }
}

fn check_start(theta_init: &[f64], d: usize, bounds: &Bounds) -> Result<()> {
    check_rows(d, theta_init.len())?;
    check_rows(d, bounds.dim())?;
    if !bounds.contains(theta_init) {
        return Err(EstimatorError::InvalidBounds(format!(
            "start {theta_init:?} lies outside the box"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GmmOptions {
    /// Keep `W = I` in the second step.
    pub force_identity: bool,
    pub simplex: SimplexOptions,
}

/// `m̄(θ)ᵀ W⁻¹ m̄(θ)`, or `+∞` when the moments cannot be formed.
fn gmm_criterion<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta: &[f64],
    weight: Option<&Cholesky>,
) -> f64 {
    match problem.moments(theta) {
        Ok(m) => {
            let g = m.mean();
            let wg = match weight {
                Some(c) => c.solve(&g),
                None => g.clone(),
            };
            g.iter().zip(&wg).map(|(a, b)| a * b).sum()
        }
        Err(_) => f64::INFINITY,
    }
}

/// Two-step GMM: identity weighting first, then the inverse of the
/// moment second-moment matrix at the first-step estimate.
pub fn gmm_two_step<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta_init: &[f64],
    bounds: &Bounds,
    opts: &GmmOptions,
) -> Result<EstimateResult> {
    check_start(theta_init, problem.model.param_dim(), bounds)?;
    let step1 = simplex_search(
        |t| -gmm_criterion(problem, t, None),
        theta_init,
        bounds,
        &opts.simplex,
    );
    if opts.force_identity {
        return Ok(EstimateResult {
            theta_hat: step1.argmax,
            method: "GMM",
            converged: step1.converged,
            objective_at_opt: -step1.value,
            inner_diagnostics: None,
        });
    }
    let omega = problem.moments(&step1.argmax)?.second_moment();
    let chol = Cholesky::new(&omega)?;
    let step2 = simplex_search(
        |t| -gmm_criterion(problem, t, Some(&chol)),
        &step1.argmax,
        bounds,
        &opts.simplex,
    );
    Ok(EstimateResult {
        theta_hat: step2.argmax,
        method: "GMM",
        converged: step1.converged && step2.converged,
        objective_at_opt: -step2.value,
        inner_diagnostics: None,
    })
}

/// Global EL: maximizes `nΛₙ(θ)` over the box, treating points outside the
/// moment hull (or with an unconverged inner solve) as `−∞`.
pub fn el_global<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta_init: &[f64],
    bounds: &Bounds,
    opts: &SimplexOptions,
) -> Result<EstimateResult> {
    check_start(theta_init, problem.model.param_dim(), bounds)?;
    let objective = |t: &[f64]| match problem.point(t) {
        Ok(p) => p.log_el(),
        Err(_) => f64::NEG_INFINITY,
    };
    let found = simplex_search(objective, theta_init, bounds, opts);
    if !found.value.is_finite() {
        return Err(EstimatorError::AllInfeasible);
    }
    let solution = problem.solve(&found.argmax)?;
    Ok(EstimateResult {
        theta_hat: found.argmax,
        method: "EL",
        converged: found.converged && solution.converged,
        objective_at_opt: found.value,
        inner_diagnostics: Some(solution),
    })
}
