//! Moment models, the inner dual solve for the Lagrange multiplier, implied
//! probabilities and the profile log empirical likelihood.
//!
//! For a fixed `θ` the multiplier `λ` maximizes the concave dual
//! `Σᵢ log(1 + λᵀmᵢ(θ))` over `{λ : 1 + λᵀmᵢ ≥ 1/n}`. At the optimum
//! the implied probabilities are `p̃ᵢ = 1 / (n (1 + λᵀmᵢ))` and the profile
//! value is `nΛₙ(θ) = Σᵢ log(n p̃ᵢ) = −Σᵢ log(1 + λᵀmᵢ) ≤ 0`.
//!
//! When zero is not an interior point of the convex hull of the moments the
//! dual is unbounded. The solver detects this with a separating-direction
//! certificate and reports [`HullStatus::Outside`]; [`log_el`] then yields
//! [`LogElValue::OutsideHull`], which outer optimizers treat as `−∞`.

use thiserror::Error;

use crate::numerics::{dot, norm_inf, Cholesky, NumericsError, SquareMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sample has {n} observations but the model needs at least {needed}")]
    InsufficientObservations { n: usize, needed: usize },
    #[error("observation width {got} does not match the model (expected {expected})")]
    ObservationWidth { expected: usize, got: usize },
    #[error("parameter vector has length {got}, model expects {expected}")]
    ParamDim { expected: usize, got: usize },
    #[error("moment function is not finite at observation {obs}")]
    NonFiniteMoment { obs: usize },
    #[error("moment second-moment matrix is rank deficient (pivot {pivot})")]
    DegenerateMoments { pivot: usize },
    #[error("multiplier violates 1 + λᵀmᵢ ≥ 1/n at observation {obs}")]
    InfeasibleLambda { obs: usize },
    #[error("dual solve did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("zero is outside the convex hull of the moments at θ = {theta:?}")]
    OutsideHull { theta: Vec<f64> },
    #[error("model has no analytic Jacobian")]
    NoJacobian,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
}

pub type Result<T> = std::result::Result<T, ElError>;

/// A moment restriction `m(x, θ) ∈ ℝᵏ` with `E m(X, θ₀) = 0`.
///
/// Implementations must be pure: the same `(obs, θ)` always yields the same
/// moments, and models are shared read-only across worker threads.
pub trait MomentModel: Sync {
    /// Parameter dimension `d`.
    fn param_dim(&self) -> usize;

    /// Moment dimension `k ≥ d`.
    fn moment_dim(&self) -> usize;

    /// Number of reals per observation.
    fn observation_width(&self) -> usize;

    /// Writes `m(obs, θ)` into `out` (length `k`).
    fn evaluate(&self, obs: &[f64], theta: &[f64], out: &mut [f64]);

    /// Analytic `∂m/∂θᵀ` as a row-major `k × d` block, if available.
    fn jacobian(&self, _obs: &[f64], _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

/// `n` fixed-width observations stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    width: usize,
    data: Vec<f64>,
}

impl Sample {
    pub fn new(width: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || data.is_empty() || data.len() % width != 0 {
            return Err(ElError::InvalidSample(format!(
                "{} values cannot form rows of width {width}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ElError::InvalidSample(format!(
                "non-finite entry in observation {}",
                pos / width
            )));
        }
        Ok(Self { width, data })
    }

    /// Builds a sample from equally long columns.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let width = columns.len();
        let n = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n) {
            return Err(ElError::InvalidSample(
                "columns have different lengths".into(),
            ));
        }
        let mut data = Vec::with_capacity(n * width);
        for i in 0..n {
            data.extend(columns.iter().map(|c| c[i]));
        }
        Self::new(width, data)
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }
}

/// Moments of every observation at one `θ`, row-major `n × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix {
    k: usize,
    data: Vec<f64>,
}

impl MomentMatrix {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || data.is_empty() || data.len() % k != 0 {
            return Err(ElError::InvalidSample(format!(
                "{} moment values cannot form rows of width {k}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(ElError::NonFiniteMoment { obs: pos / k });
        }
        Ok(Self { k, data })
    }

    /// Scalar moments, one per observation.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::new(1, values.to_vec())
    }

    pub fn n(&self) -> usize {
        self.data.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.k)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.k];
        for r in self.rows() {
            s.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        let n = self.n() as f64;
        s.iter_mut().for_each(|v| *v /= n);
        s
    }

    /// `(1/n) Σ mᵢ mᵢᵀ`.
    pub fn second_moment(&self) -> SquareMatrix {
        weighted_outer(self, |_| 1.0)
    }
}

fn weighted_outer(m: &MomentMatrix, weight: impl Fn(usize) -> f64) -> SquareMatrix {
    let k = m.k();
    let mut acc = SquareMatrix::zeros(k);
    for (i, r) in m.rows().enumerate() {
        let w = weight(i);
        for a in 0..k {
            let ra = w * r[a];
            for b in a..k {
                acc[(a, b)] += ra * r[b];
            }
        }
    }
    let n = m.n() as f64;
    for a in 0..k {
        for b in a..k {
            let v = acc[(a, b)] / n;
            acc[(a, b)] = v;
            acc[(b, a)] = v;
        }
    }
    acc
}

/// Evaluates the moment function at every observation.
pub fn moments<M: MomentModel + ?Sized>(
    model: &M,
    sample: &Sample,
    theta: &[f64],
) -> Result<MomentMatrix> {
    if theta.len() != model.param_dim() {
        return Err(ElError::ParamDim {
            expected: model.param_dim(),
            got: theta.len(),
        });
    }
    if sample.width() != model.observation_width() {
        return Err(ElError::ObservationWidth {
            expected: model.observation_width(),
            got: sample.width(),
        });
    }
    let k = model.moment_dim();
    let mut data = vec![0.0; sample.n() * k];
    for (obs, out) in sample.rows().zip(data.chunks_exact_mut(k)) {
        model.evaluate(obs, theta, out);
    }
    MomentMatrix::new(k, data)
}

/// Options for the damped Newton dual solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Bound on `‖(1/n) Σ mᵢ / (1 + λᵀmᵢ)‖∞`.
    pub tol: f64,
    /// Bound on `|Σ p̃ᵢ − 1|`.
    pub prob_sum_tol: f64,
    pub max_iter: usize,
    /// Step shrink factor in the backtracking line search.
    pub backtrack: f64,
    /// Fraction of the current distance to `1/n` that every step must keep.
    pub boundary_fraction: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            prob_sum_tol: 1e-12,
            max_iter: 100,
            backtrack: 0.5,
            boundary_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HullStatus {
    Inside,
    /// A direction `v` with `vᵀmᵢ ≥ 0` for all `i` (and `> 0` for some) was
    /// found, so no strictly positive weights can average the moments to zero.
    Outside,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSolution {
    pub lambda: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `minᵢ (1 + λᵀmᵢ) − 1/n`.
    pub feasibility_margin: f64,
    pub hull: HullStatus,
    /// `(1/n) Σ log(1 + λᵀmᵢ)` at the returned multiplier.
    pub dual_value: f64,
    /// Dual objective after every accepted step, starting from `λ = 0`,
    /// accumulated from the per-step increments.
    pub dual_path: Vec<f64>,
}

impl LambdaSolution {
    pub fn lambda_norm(&self) -> f64 {
        crate::numerics::norm2(&self.lambda)
    }
}

/// Solves for `λ` at `θ`.
pub fn solve_lambda<M: MomentModel + ?Sized>(
    model: &M,
    sample: &Sample,
    theta: &[f64],
    opts: &SolverOptions,
) -> Result<LambdaSolution> {
    if sample.n() < model.moment_dim() + 1 {
        return Err(ElError::InsufficientObservations {
            n: sample.n(),
            needed: model.moment_dim() + 1,
        });
    }
    solve_lambda_moments(&moments(model, sample, theta)?, opts)
}

struct DualState {
    w: Vec<f64>,
    value: f64,
}

fn dual_state(m: &MomentMatrix, lambda: &[f64]) -> Option<DualState> {
    let mut w = Vec::with_capacity(m.n());
    let mut value = 0.0;
    for r in m.rows() {
        let s = dot(lambda, r);
        let wi = 1.0 + s;
        if !(wi > 0.0) {
            return None;
        }
        value += s.ln_1p();
        w.push(wi);
    }
    Some(DualState {
        w,
        value: value / m.n() as f64,
    })
}

fn gradient_norm(m: &MomentMatrix, w: &[f64]) -> f64 {
    let mut grad = vec![0.0; m.k()];
    for (r, &wi) in m.rows().zip(w) {
        grad.iter_mut().zip(r).for_each(|(g, v)| *g += v / wi);
    }
    norm_inf(&grad) / m.n() as f64
}

/// Damped Newton on the concave dual for a precomputed moment matrix.
pub fn solve_lambda_moments(m: &MomentMatrix, opts: &SolverOptions) -> Result<LambdaSolution> {
    let n = m.n();
    let k = m.k();
    let inv_n = 1.0 / n as f64;
    let omega = m.second_moment();
    let trace = omega.trace();
    if !(trace > 0.0) {
        return Err(ElError::DegenerateMoments { pivot: 0 });
    }
    if let Err(e) = Cholesky::with_pivot_floor(&omega, 1e-14 * trace) {
        return match e {
            NumericsError::NotPositiveDefinite { pivot, .. } => {
                Err(ElError::DegenerateMoments { pivot })
            }
            other => Err(other.into()),
        };
    }

    let mut lambda = vec![0.0; k];
    let mut state = dual_state(m, &lambda).expect("λ = 0 is always feasible");
    let mut dual_path = vec![state.value];
    let mut hull = HullStatus::Inside;
    let mut iterations = 0;
    let mut residual;
    let mut converged = false;

    loop {
        // gradient (1/n) Σ mᵢ/wᵢ and negative Hessian (1/n) Σ mᵢmᵢᵀ/wᵢ²
        let mut grad = vec![0.0; k];
        let mut psum = 0.0;
        for (r, &wi) in m.rows().zip(&state.w) {
            let inv = 1.0 / wi;
            psum += inv;
            grad.iter_mut().zip(r).for_each(|(g, v)| *g += v * inv);
        }
        grad.iter_mut().for_each(|g| *g *= inv_n);
        psum *= inv_n;
        residual = norm_inf(&grad);
        if residual <= opts.tol && (psum - 1.0).abs() <= opts.prob_sum_tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        let w = &state.w;
        let neg_hess = weighted_outer(m, |i| 1.0 / (w[i] * w[i]));
        let step = match Cholesky::new(&neg_hess) {
            Ok(c) => c.solve(&grad),
            Err(_) => {
                let ridge = 1e-12 * neg_hess.trace().max(f64::MIN_POSITIVE);
                match Cholesky::new(&neg_hess.add_diagonal(ridge)) {
                    Ok(c) => c.solve(&grad),
                    Err(_) => break,
                }
            }
        };

        let slopes: Vec<f64> = m.rows().map(|r| dot(&step, r)).collect();
        if slopes.iter().all(|&s| s >= 0.0) && slopes.iter().any(|&s| s > 0.0) {
            hull = HullStatus::Outside;
            break;
        }

        // fraction-to-boundary: keep every weight above 1/n + f·(wᵢ_min − 1/n)
        let w_min = state.w.iter().copied().fold(f64::INFINITY, f64::min);
        let floor = inv_n + opts.boundary_fraction * (w_min - inv_n);
        let mut alpha: f64 = 1.0;
        for (&wi, &s) in state.w.iter().zip(&slopes) {
            if s < 0.0 {
                alpha = alpha.min((wi - floor) / -s);
            }
        }
        let directional = dot(&grad, &step);
        let mut accepted = None;
        while alpha > 1e-14 {
            let trial: Vec<f64> = lambda
                .iter()
                .zip(&step)
                .map(|(l, s)| l + alpha * s)
                .collect();
            if trial == lambda {
                break;
            }
            if let Some(st) = dual_state(m, &trial) {
                let min_w = st.w.iter().copied().fold(f64::INFINITY, f64::min);
                if min_w >= inv_n {
                    // the increment summed term by term keeps its own relative
                    // accuracy where the difference of two totals would not
                    let gain = state
                        .w
                        .iter()
                        .zip(&slopes)
                        .map(|(wi, sl)| (alpha * sl / wi).ln_1p())
                        .sum::<f64>()
                        * inv_n;
                    let sufficient = gain >= 1e-4 * alpha * directional;
                    if gain >= 0.0 && (sufficient || gradient_norm(m, &st.w) < residual) {
                        accepted = Some((trial, st, gain));
                        break;
                    }
                }
            }
            alpha *= opts.backtrack;
        }
        match accepted {
            Some((trial, st, gain)) => {
                lambda = trial;
                state = st;
                let last = *dual_path.last().expect("path starts at λ = 0");
                dual_path.push(last + gain);
            }
            None => break,
        }
    }

    let feasibility_margin = state.w.iter().copied().fold(f64::INFINITY, f64::min) - inv_n;
    Ok(LambdaSolution {
        lambda,
        residual_norm: residual,
        iterations,
        converged,
        feasibility_margin,
        hull,
        dual_value: state.value,
        dual_path,
    })
}

/// `p̃ᵢ = 1 / (n (1 + λᵀmᵢ))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpliedProbabilities {
    pub p: Vec<f64>,
}

impl ImpliedProbabilities {
    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }
}

pub fn implied_probs(m: &MomentMatrix, lambda: &[f64]) -> Result<ImpliedProbabilities> {
    let n = m.n() as f64;
    let p = m
        .rows()
        .enumerate()
        .map(|(i, r)| {
            let w = 1.0 + dot(lambda, r);
            if w >= 1.0 / n {
                Ok(1.0 / (n * w))
            } else {
                Err(ElError::InfeasibleLambda { obs: i })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImpliedProbabilities { p })
}

/// `Σᵢ pᵢ mᵢ(θ)`.
pub fn moment_residual(m: &MomentMatrix, probs: &ImpliedProbabilities) -> Result<Vec<f64>> {
    if probs.p.len() != m.n() {
        return Err(ElError::InvalidSample(format!(
            "{} probabilities for {} observations",
            probs.p.len(),
            m.n()
        )));
    }
    let mut out = vec![0.0; m.k()];
    for (r, p) in m.rows().zip(&probs.p) {
        out.iter_mut().zip(r).for_each(|(o, v)| *o += p * v);
    }
    Ok(out)
}

/// Profile log-EL `nΛₙ(θ)`, or the outside-hull sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogElValue {
    Finite(f64),
    OutsideHull,
}

impl LogElValue {
    /// The value with the sentinel mapped to `−∞`.
    pub fn value(self) -> f64 {
        match self {
            LogElValue::Finite(v) => v,
            LogElValue::OutsideHull => f64::NEG_INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, LogElValue::Finite(_))
    }
}

/// A solved profile point: the multiplier and the per-observation
/// `log(1 + λᵀmᵢ)` terms that every log-ratio is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfilePoint {
    pub theta: Vec<f64>,
    pub solution: LambdaSolution,
    pub moments: MomentMatrix,
    log_w: Vec<f64>,
}

impl ProfilePoint {
    pub fn n(&self) -> usize {
        self.log_w.len()
    }

    /// `nΛₙ(θ) = −Σ log(1 + λᵀmᵢ)`.
    pub fn log_el(&self) -> f64 {
        -self.log_w.iter().sum::<f64>()
    }

    /// `Λₙ(self, other) = (1/n) Σ log(p̃ᵢ(self) / p̃ᵢ(other))`, summed as
    /// per-observation differences.
    pub fn log_ratio(&self, other: &ProfilePoint) -> f64 {
        debug_assert_eq!(self.n(), other.n());
        let s: f64 = other
            .log_w
            .iter()
            .zip(&self.log_w)
            .map(|(b, a)| b - a)
            .sum();
        s / self.n() as f64
    }

    pub fn implied_probs(&self) -> ImpliedProbabilities {
        let n = self.n() as f64;
        ImpliedProbabilities {
            p: self.log_w.iter().map(|lw| (-lw).exp() / n).collect(),
        }
    }
}

/// A model bound to a sample and solver settings.
#[derive(Debug, Clone, Copy)]
pub struct ElProblem<'a, M: ?Sized> {
    pub model: &'a M,
    pub sample: &'a Sample,
    pub opts: SolverOptions,
}

impl<'a, M: MomentModel + ?Sized> ElProblem<'a, M> {
    pub fn new(model: &'a M, sample: &'a Sample) -> Self {
        Self {
            model,
            sample,
            opts: SolverOptions::default(),
        }
    }

    pub fn with_options(model: &'a M, sample: &'a Sample, opts: SolverOptions) -> Self {
        Self {
            model,
            sample,
            opts,
        }
    }

    pub fn n(&self) -> usize {
        self.sample.n()
    }

    pub fn moments(&self, theta: &[f64]) -> Result<MomentMatrix> {
        moments(self.model, self.sample, theta)
    }

    pub fn solve(&self, theta: &[f64]) -> Result<LambdaSolution> {
        solve_lambda(self.model, self.sample, theta, &self.opts)
    }

    /// Solves at `θ`, failing unless the solve converged inside the hull.
    pub fn point(&self, theta: &[f64]) -> Result<ProfilePoint> {
        if self.sample.n() < self.model.moment_dim() + 1 {
            return Err(ElError::InsufficientObservations {
                n: self.sample.n(),
                needed: self.model.moment_dim() + 1,
            });
        }
        let m = self.moments(theta)?;
        let solution = solve_lambda_moments(&m, &self.opts)?;
        if solution.hull == HullStatus::Outside {
            return Err(ElError::OutsideHull {
                theta: theta.to_vec(),
            });
        }
        if !solution.converged {
            return Err(ElError::NotConverged {
                iterations: solution.iterations,
                residual: solution.residual_norm,
            });
        }
        let log_w = m.rows().map(|r| dot(&solution.lambda, r).ln_1p()).collect();
        Ok(ProfilePoint {
            theta: theta.to_vec(),
            solution,
            moments: m,
            log_w,
        })
    }

    pub fn log_el(&self, theta: &[f64]) -> Result<LogElValue> {
        match self.point(theta) {
            Ok(p) => Ok(LogElValue::Finite(p.log_el())),
            Err(ElError::OutsideHull { .. }) => Ok(LogElValue::OutsideHull),
            Err(e) => Err(e),
        }
    }

    pub fn log_el_ratio(&self, theta1: &[f64], theta2: &[f64]) -> Result<f64> {
        let a = self.point(theta1)?;
        if theta1 == theta2 {
            return Ok(0.0);
        }
        let b = self.point(theta2)?;
        Ok(a.log_ratio(&b))
    }
}

/// `nΛₙ(θ)` with the outside-hull sentinel.
pub fn log_el<M: MomentModel + ?Sized>(
    model: &M,
    sample: &Sample,
    theta: &[f64],
    opts: &SolverOptions,
) -> Result<LogElValue> {
    ElProblem::with_options(model, sample, *opts).log_el(theta)
}

/// `Λₙ(θ₁, θ₂)`.
pub fn log_el_ratio<M: MomentModel + ?Sized>(
    model: &M,
    sample: &Sample,
    theta1: &[f64],
    theta2: &[f64],
    opts: &SolverOptions,
) -> Result<f64> {
    ElProblem::with_options(model, sample, *opts).log_el_ratio(theta1, theta2)
}
