//! Le Cam type one-step local estimator built on the EL log-likelihood ratio.
//!
//! Given an auxiliary estimate snapped to a `δₙ`-lattice, the quadratic
//! term `Kₙ` and linear term `Sₙ` of the local linear-quadratic surrogate
//! `τ ↦ τᵀSₙ − ½τᵀKₙτ ≈ Λₙ(θ* + δₙτ, θ*)` are read off from finite
//! differences of `Λₙ`, and the estimate is the surrogate's argmax
//! `Tₙ = θ* + δₙKₙ⁻¹Sₙ`. [`iterate`] repeats the step from `Tₙ` until the
//! local parameter `τ` vanishes.
//!
//! Everything is expressed with the *average* log-ratio `Λₙ`, so on a smooth
//! just-identified model `δₙ⁻²Kₙ` tends to `A₂ = JᵀΩ⁻¹J` with unit scale
//! (see [`validate_against_a2`]).
//!
//! The finite-difference ("definition") construction and the derivative
//! form assembled from Romberg directional derivatives of `λᵀmᵢ` both live
//! here; they estimate the same curvature and are cross-checked in tests.

use thiserror::Error;

use crate::el_core::{ElError, ElProblem, MomentModel, ProfilePoint};
use crate::numerics::{
    bisect_root, dot, invert_spd_ridge, lu_solve, norm2, norm_inf, romberg_derivative,
    romberg_derivative_vec, NumericsError, RombergOptions, SquareMatrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("inner evaluation failed at θ = {theta:?}: {source}")]
    Evaluation { theta: Vec<f64>, source: ElError },
    #[error("direction matrix is ill conditioned (condition number {condition:e})")]
    IllConditionedDirections { condition: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("model has no analytic Jacobian")]
    NoJacobian,
    #[error("A₂ comparison needs a just-identified model (k = {k}, d = {d})")]
    NotJustIdentified { k: usize, d: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, LocalError>;

/// Anything that supplies the average log-likelihood ratio `Λₙ(θ₁, θ₂)`.
///
/// Points are evaluated once and then compared pairwise, so a profile solve
/// is never repeated inside one stencil.
pub trait LocalSurface: Sync {
    type Point: Clone + Send;

    fn dim(&self) -> usize;

    /// Sample size that drives the default `δₙ`.
    fn sample_size(&self) -> usize;

    fn evaluate(&self, theta: &[f64]) -> Result<Self::Point>;

    fn theta<'p>(&self, point: &'p Self::Point) -> &'p [f64];

    /// `Λₙ(a, b)`.
    fn log_ratio(&self, a: &Self::Point, b: &Self::Point) -> f64;

    /// `‖λₙ‖` at a point; zero for surfaces without a multiplier.
    fn lambda_norm(&self, _point: &Self::Point) -> f64 {
        0.0
    }

    /// `d/dt Λₙ(θ + t·dir, θ)` at `t = 0`.
    fn directional_derivative(
        &self,
        theta: &[f64],
        dir: &[f64],
        romberg: &RombergOptions,
    ) -> Result<f64> {
        let base = self.evaluate(theta)?;
        let h0 = romberg.step_at(0.0);
        let cell = std::cell::RefCell::new(None::<LocalError>);
        let f = |t: f64| {
            let shifted: Vec<f64> = theta.iter().zip(dir).map(|(a, b)| a + t * b).collect();
            match self.evaluate(&shifted) {
                Ok(p) => self.log_ratio(&p, &base),
                Err(e) => {
                    cell.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            }
        };
        let est = romberg_derivative(f, 0.0, h0, romberg.levels);
        if let Some(e) = cell.into_inner() {
            return Err(e);
        }
        Ok(est?.value)
    }
}

impl<'a, M: MomentModel + ?Sized> LocalSurface for ElProblem<'a, M> {
    type Point = ProfilePoint;

    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn sample_size(&self) -> usize {
        self.sample.n()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<ProfilePoint> {
        self.point(theta).map_err(|source| LocalError::Evaluation {
            theta: theta.to_vec(),
            source,
        })
    }

    fn theta<'p>(&self, point: &'p ProfilePoint) -> &'p [f64] {
        &point.theta
    }

    fn log_ratio(&self, a: &ProfilePoint, b: &ProfilePoint) -> f64 {
        a.log_ratio(b)
    }

    fn lambda_norm(&self, point: &ProfilePoint) -> f64 {
        point.solution.lambda_norm()
    }

    /// Chain rule through the implied probabilities:
    /// `∂ log p̃ᵢ = −∂(λᵀmᵢ) / (1 + λᵀmᵢ) = −n p̃ᵢ ∂(λᵀmᵢ)`, so the
    /// derivative of the average is `−Σᵢ p̃ᵢ ∂(λᵀmᵢ)`. Each `∂(λᵀmᵢ)` is a
    /// Romberg derivative because `λ(θ)` has no closed form.
    fn directional_derivative(
        &self,
        theta: &[f64],
        dir: &[f64],
        romberg: &RombergOptions,
    ) -> Result<f64> {
        let base = self.evaluate(theta)?;
        let h0 = romberg.step_at(0.0);
        let products = |t: f64| -> Result<Vec<f64>> {
            let shifted: Vec<f64> = theta.iter().zip(dir).map(|(a, b)| a + t * b).collect();
            let p = self.evaluate(&shifted)?;
            Ok(p.moments
                .rows()
                .map(|r| dot(&p.solution.lambda, r))
                .collect())
        };
        let d = romberg_derivative_vec(products, 0.0, h0, romberg.levels)?;
        let probs = base.implied_probs();
        Ok(-probs
            .p
            .iter()
            .zip(&d.values)
            .map(|(p, dq)| p * dq)
            .sum::<f64>())
    }
}

/// Exactly linear-quadratic surface `L(θ) = aᵀθ − ½θᵀBθ` with
/// `Λₙ(θ₁, θ₂) = L(θ₁) − L(θ₂)`.
#[derive(Debug, Clone)]
pub struct QuadraticSurface {
    pub linear: Vec<f64>,
    pub curvature: SquareMatrix,
    pub n: usize,
}

impl QuadraticSurface {
    pub fn new(linear: Vec<f64>, curvature: SquareMatrix, n: usize) -> Self {
        assert_eq!(linear.len(), curvature.dim());
        Self {
            linear,
            curvature,
            n,
        }
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        dot(&self.linear, theta) - 0.5 * dot(theta, &self.curvature.mul_vec(theta))
    }

    /// `∇L(θ) = a − Bθ`.
    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let bt = self.curvature.mul_vec(theta);
        self.linear.iter().zip(bt).map(|(a, b)| a - b).collect()
    }
}

impl LocalSurface for QuadraticSurface {
    type Point = Vec<f64>;

    fn dim(&self) -> usize {
        self.linear.len()
    }

    fn sample_size(&self) -> usize {
        self.n
    }

    fn evaluate(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.to_vec())
    }

    fn theta<'p>(&self, point: &'p Vec<f64>) -> &'p [f64] {
        point
    }

    fn log_ratio(&self, a: &Vec<f64>, b: &Vec<f64>) -> f64 {
        self.value(a) - self.value(b)
    }
}

/// Localization rate as a function of the sample size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeltaRule {
    /// `δₙ = n^(−1/2)`.
    RootN,
    /// `δₙ = n^(−exponent)`.
    Power(f64),
    Fixed(f64),
}

impl DeltaRule {
    pub fn delta(&self, n: usize) -> f64 {
        match *self {
            DeltaRule::RootN => (n as f64).powf(-0.5),
            DeltaRule::Power(e) => (n as f64).powf(-e),
            DeltaRule::Fixed(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    /// Three-point finite differences of `Λₙ`.
    Definition,
    /// Romberg directional derivatives of `λᵀmᵢ`.
    Directional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    Coordinate,
    /// Step chosen by [`choose_direction_bisection`]; scalar models only.
    Bisection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConfig {
    pub delta: DeltaRule,
    /// Step length `u` along each direction.
    pub direction_step: f64,
    pub sparsify_constant: f64,
    /// Stop once `‖τ‖∞` falls to this level.
    pub tau_tol: f64,
    pub max_iter: usize,
    pub hessian_mode: HessianMode,
    pub direction_mode: DirectionMode,
    /// Initial ridge handed to [`invert_spd_ridge`].
    pub ridge: f64,
    pub romberg: RombergOptions,
    /// Bracket (as offsets from `θ*`) for the bisection direction search.
    pub bisection_bracket: (f64, f64),
    /// Per-coordinate scales `sⱼ`: coordinate directions become `u·sⱼ·eⱼ`
    /// and the lattice mesh `c·δₙ·sⱼ`. `None` means unit scale.
    pub scales: Option<Vec<f64>>,
    /// Direction basis: column `j` times `u` replaces the `j`-th coordinate
    /// direction. Takes precedence over `scales` for the directions only.
    pub basis: Option<SquareMatrix>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            delta: DeltaRule::RootN,
            direction_step: 1.0,
            sparsify_constant: 1.0,
            tau_tol: 1e-6,
            max_iter: 50,
            hessian_mode: HessianMode::Definition,
            direction_mode: DirectionMode::Coordinate,
            ridge: 0.0,
            romberg: RombergOptions::default(),
            bisection_bracket: (-1.0, 1.0),
            scales: None,
            basis: None,
        }
    }
}

/// Nearest point of the lattice `{c·δ·z : z ∈ ℤᵈ}`.
pub fn sparsify(theta: &[f64], delta: f64, c: f64) -> Vec<f64> {
    assert!(delta > 0.0 && c > 0.0, "lattice spacing must be positive");
    let mesh = c * delta;
    theta.iter().map(|t| (t / mesh).round() * mesh).collect()
}

/// Per-coordinate lattice `{c·δ·sⱼ·z : z ∈ ℤ}`.
pub fn sparsify_scaled(theta: &[f64], delta: f64, c: f64, scales: &[f64]) -> Vec<f64> {
    assert_eq!(theta.len(), scales.len());
    theta
        .iter()
        .zip(scales)
        .map(|(t, s)| sparsify(&[*t], delta, c * s)[0])
        .collect()
}

/// `sⱼ = √(Â₂⁻¹)ⱼⱼ` at `θ`, the per-coordinate spread that puts every local
/// parameter on a unit-information scale.
pub fn information_scales<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let a2 = empirical_a2(problem, theta)?;
    let inv = crate::numerics::Cholesky::new(&a2)?.inverse();
    Ok((0..a2.dim()).map(|j| inv[(j, j)].sqrt()).collect())
}

/// Lower Cholesky factor `L` of `Â₂⁻¹` at `θ`: directions `Leⱼ` decorrelate
/// the local parameters, and the row norms of `L` equal [`information_scales`].
pub fn information_basis<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta: &[f64],
) -> Result<SquareMatrix> {
    let a2 = empirical_a2(problem, theta)?;
    let inv = crate::numerics::Cholesky::new(&a2)?.inverse();
    Ok(crate::numerics::Cholesky::new(&inv)?.lower().clone())
}

/// Direction vectors `u₁..u_d` (columns of `U`).
#[derive(Debug, Clone, PartialEq)]
pub struct Directions {
    vectors: Vec<Vec<f64>>,
}

impl Directions {
    pub fn coordinate(dim: usize, step: f64) -> Self {
        let vectors = (0..dim)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i] = step;
                v
            })
            .collect();
        Self { vectors }
    }

    /// `uⱼ = step·sⱼ·eⱼ`.
    pub fn scaled_coordinate(step: f64, scales: &[f64]) -> Self {
        let mut dirs = Self::coordinate(scales.len(), step);
        dirs.vectors
            .iter_mut()
            .zip(scales)
            .enumerate()
            .for_each(|(j, (v, s))| v[j] *= s);
        dirs
    }

    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let d = vectors.len();
        if d == 0 {
            return Err(LocalError::InvalidArgument(
                "at least one direction is required".into(),
            ));
        }
        if let Some(v) = vectors.iter().find(|v| v.len() != d) {
            return Err(LocalError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// `U` with `uᵢ` as column `i`.
    pub fn matrix(&self) -> SquareMatrix {
        let d = self.dim();
        let mut u = SquareMatrix::zeros(d);
        for (j, v) in self.vectors.iter().enumerate() {
            for i in 0..d {
                u[(i, j)] = v[i];
            }
        }
        u
    }

    fn is_coordinate(&self) -> bool {
        self.vectors
            .iter()
            .enumerate()
            .all(|(i, v)| v.iter().enumerate().all(|(j, &x)| (i == j) || x == 0.0))
    }

    /// Frobenius condition number `‖U‖_F ‖U⁻¹‖_F`.
    pub fn condition(&self) -> f64 {
        let u = self.matrix();
        let d = self.dim();
        let mut inv_sq = 0.0;
        for j in 0..d {
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            match lu_solve(&u, &e) {
                Ok(col) => inv_sq += col.iter().map(|v| v * v).sum::<f64>(),
                Err(_) => return f64::INFINITY,
            }
        }
        u.frobenius_norm() * inv_sq.sqrt()
    }
}

fn offset(theta: &[f64], delta: f64, dirs: &[&[f64]]) -> Vec<f64> {
    let mut out = theta.to_vec();
    for d in dirs {
        out.iter_mut()
            .zip(d.iter())
            .for_each(|(o, u)| *o += delta * u);
    }
    out
}

/// The evaluations behind Steps 2 and 3: `Λₙ(θ* + δuᵢ, θ*)` and
/// `Λₙ(θ* + δ(uᵢ+uⱼ), θ*)`.
#[derive(Debug, Clone)]
struct Stencil<P> {
    base: P,
    single: Vec<f64>,
    pair: SquareMatrix,
}

fn stencil<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    delta: f64,
    dirs: &Directions,
) -> Result<Stencil<S::Point>> {
    let d = surface.dim();
    if theta_star.len() != d {
        return Err(LocalError::DimensionMismatch {
            expected: d,
            got: theta_star.len(),
        });
    }
    if dirs.dim() != d {
        return Err(LocalError::DimensionMismatch {
            expected: d,
            got: dirs.dim(),
        });
    }
    let base = surface.evaluate(theta_star)?;
    let mut single = Vec::with_capacity(d);
    for i in 0..d {
        let p = surface.evaluate(&offset(theta_star, delta, &[dirs.get(i)]))?;
        single.push(surface.log_ratio(&p, &base));
    }
    let mut pair = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in i..d {
            let p = surface.evaluate(&offset(theta_star, delta, &[dirs.get(i), dirs.get(j)]))?;
            let v = surface.log_ratio(&p, &base);
            pair[(i, j)] = v;
            pair[(j, i)] = v;
        }
    }
    Ok(Stencil { base, single, pair })
}

/// Quadratic term of the local surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct KMatrix {
    /// `K_{n,i,j}` exactly as the three-point formula gives it, i.e. the
    /// quadratic form evaluated on the directions, `uᵢᵀKₙuⱼ`.
    pub directional: SquareMatrix,
    /// `Kₙ` itself in parameter coordinates, `U⁻ᵀ (directional) U⁻¹`.
    pub matrix: SquareMatrix,
    /// Relative asymmetry before symmetrization.
    pub asymmetry: f64,
}

fn k_from_stencil<P>(st: &Stencil<P>, dirs: &Directions) -> Result<KMatrix> {
    let d = st.single.len();
    let mut raw = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            raw[(i, j)] = -(st.pair[(i, j)] - st.single[i] - st.single[j]);
        }
    }
    let asymmetry = raw.asymmetry();
    let directional = raw.symmetrized();
    let matrix = to_parameter_basis(&directional, dirs)?;
    Ok(KMatrix {
        directional,
        matrix,
        asymmetry,
    })
}

fn to_parameter_basis(directional: &SquareMatrix, dirs: &Directions) -> Result<SquareMatrix> {
    if dirs.is_coordinate() {
        let d = dirs.dim();
        let mut k = directional.clone();
        for i in 0..d {
            for j in 0..d {
                k[(i, j)] /= dirs.get(i)[i] * dirs.get(j)[j];
            }
        }
        return Ok(k.symmetrized());
    }
    check_conditioning(dirs)?;
    // K = U⁻ᵀ Kᵤ U⁻¹, column by column
    let u = dirs.matrix();
    let ut = u.transpose();
    let d = dirs.dim();
    let mut left = SquareMatrix::zeros(d); // U⁻ᵀ Kᵤ
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| directional[(i, j)]).collect();
        let x = lu_solve(&ut, &col)?;
        for i in 0..d {
            left[(i, j)] = x[i];
        }
    }
    let mut k = SquareMatrix::zeros(d); // (U⁻ᵀ (U⁻ᵀ Kᵤ)ᵀ)ᵀ = U⁻ᵀ Kᵤ U⁻¹ for symmetric Kᵤ
    let lt = left.transpose();
    for j in 0..d {
        let col: Vec<f64> = (0..d).map(|i| lt[(i, j)]).collect();
        let x = lu_solve(&ut, &col)?;
        for i in 0..d {
            k[(j, i)] = x[i];
        }
    }
    Ok(k.symmetrized())
}

fn check_conditioning(dirs: &Directions) -> Result<()> {
    let condition = dirs.condition();
    if !(condition <= 1e8) {
        return Err(LocalError::IllConditionedDirections { condition });
    }
    Ok(())
}

/// Step 2: `K_{n,i,j} = −{Λₙ[θ*+δ(uᵢ+uⱼ),θ*] − Λₙ[θ*+δuᵢ,θ*] − Λₙ[θ*+δuⱼ,θ*]}`.
pub fn build_k<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    delta: f64,
    dirs: &Directions,
) -> Result<KMatrix> {
    k_from_stencil(&stencil(surface, theta_star, delta, dirs)?, dirs)
}

fn s_from_stencil<P>(st: &Stencil<P>, k: &KMatrix, dirs: &Directions) -> Result<Vec<f64>> {
    check_conditioning(dirs)?;
    let rhs: Vec<f64> = (0..dirs.dim())
        .map(|j| st.single[j] + 0.5 * k.directional[(j, j)])
        .collect();
    Ok(lu_solve(&dirs.matrix().transpose(), &rhs)?)
}

/// Step 3: solves `uⱼᵀSₙ = Λₙ[θ*+δuⱼ, θ*] + ½K_{n,j,j}` for `Sₙ`.
pub fn build_s<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    delta: f64,
    dirs: &Directions,
    k: &KMatrix,
) -> Result<Vec<f64>> {
    check_conditioning(dirs)?;
    let st = stencil(surface, theta_star, delta, dirs)?;
    s_from_stencil(&st, k, dirs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneStep {
    pub tau: Vec<f64>,
    pub estimate: Vec<f64>,
    pub ridge_used: f64,
}

/// Step 4: `Tₙ = θ* + δₙKₙ⁻¹Sₙ`, the argmax of `τᵀSₙ − ½τᵀKₙτ` shifted back
/// to the parameter scale.
pub fn one_step(
    theta_star: &[f64],
    k: &SquareMatrix,
    s: &[f64],
    delta: f64,
    ridge: f64,
) -> Result<OneStep> {
    if s.len() != k.dim() || theta_star.len() != k.dim() {
        return Err(LocalError::DimensionMismatch {
            expected: k.dim(),
            got: s.len().min(theta_star.len()),
        });
    }
    let inv = invert_spd_ridge(&k.symmetrized(), ridge)?;
    let tau = inv.inverse.mul_vec(s);
    let estimate = theta_star
        .iter()
        .zip(&tau)
        .map(|(t, x)| t + delta * x)
        .collect();
    Ok(OneStep {
        tau,
        estimate,
        ridge_used: inv.ridge_used,
    })
}

/// `d/dt Λₙ(θ + t·dir, θ)` at `t = 0`, the directional derivative of the
/// average log implied probability.
pub fn directional_grad_logp<S: LocalSurface>(
    surface: &S,
    theta: &[f64],
    dir: &[f64],
    romberg: &RombergOptions,
) -> Result<f64> {
    if dir.len() != surface.dim() {
        return Err(LocalError::DimensionMismatch {
            expected: surface.dim(),
            got: dir.len(),
        });
    }
    surface.directional_derivative(theta, dir, romberg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalHessian {
    /// Curvature on the `δₙ⁻²Kₙ` scale, symmetrized.
    pub matrix: SquareMatrix,
    pub asymmetry: f64,
}

/// Curvature from differences of directional derivatives:
/// `H_{ij} = −[D_j Λₙ(θ* + hᵢeᵢ) − D_j Λₙ(θ*)] / hᵢ` with `hᵢ = θ̃ᵢ − θ*ᵢ`.
///
/// Comparable with `δₙ⁻²Kₙ` from [`build_k`].
pub fn hessian_directional<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    theta_tilde: &[f64],
    romberg: &RombergOptions,
) -> Result<DirectionalHessian> {
    let d = surface.dim();
    if theta_star.len() != d || theta_tilde.len() != d {
        return Err(LocalError::DimensionMismatch {
            expected: d,
            got: theta_tilde.len().min(theta_star.len()),
        });
    }
    let unit = |j: usize| {
        let mut e = vec![0.0; d];
        e[j] = 1.0;
        e
    };
    let base_grad = (0..d)
        .map(|j| surface.directional_derivative(theta_star, &unit(j), romberg))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = SquareMatrix::zeros(d);
    for i in 0..d {
        let h = theta_tilde[i] - theta_star[i];
        if h == 0.0 || !h.is_finite() {
            return Err(LocalError::InvalidArgument(format!(
                "θ̃ coincides with θ* in coordinate {i}"
            )));
        }
        let mut shifted = theta_star.to_vec();
        shifted[i] += h;
        for j in 0..d {
            let g = surface.directional_derivative(&shifted, &unit(j), romberg)?;
            raw[(i, j)] = -(g - base_grad[j]) / h;
        }
    }
    Ok(DirectionalHessian {
        asymmetry: raw.asymmetry(),
        matrix: raw.symmetrized(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionChoice {
    pub theta_tilde: Vec<f64>,
    /// Set when the reflection equation had no usable root and the
    /// coordinate step `θ* + δₙeⱼ` was substituted.
    pub fallback: Vec<bool>,
}

impl DirectionChoice {
    pub fn any_fallback(&self) -> bool {
        self.fallback.iter().any(|&f| f)
    }
}

/// Per coordinate, solves `λ(θ*)ᵀ[Σmᵢ(θ*) + Σmᵢ(θ̃)] = 0` for `θ̃` by
/// bisection over `θ*ⱼ + bracket`, holding the other coordinates at `θ*`.
pub fn choose_direction_bisection<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta_star: &[f64],
    bracket: (f64, f64),
    delta: f64,
) -> Result<DirectionChoice> {
    let d = problem.dim();
    if theta_star.len() != d {
        return Err(LocalError::DimensionMismatch {
            expected: d,
            got: theta_star.len(),
        });
    }
    let base = problem.evaluate(theta_star)?;
    let lambda = &base.solution.lambda;
    let base_mean = base.moments.mean();
    let anchor = dot(lambda, &base_mean);
    let mut theta_tilde = theta_star.to_vec();
    let mut fallback = vec![false; d];
    for j in 0..d {
        let g = |t: f64| {
            let mut th = theta_star.to_vec();
            th[j] = t;
            match problem.moments(&th) {
                Ok(m) => anchor + dot(lambda, &m.mean()),
                Err(_) => f64::NAN,
            }
        };
        let scale = norm_inf(lambda) * (1.0 + norm_inf(&base_mean));
        let root = if lambda.iter().all(|&l| l == 0.0) {
            None
        } else {
            bisect_root(
                g,
                theta_star[j] + bracket.0,
                theta_star[j] + bracket.1,
                1e-14 * scale.max(1e-300),
            )
            .ok()
            .map(|b| b.root)
            .filter(|r| (r - theta_star[j]).abs() > 1e-12 * (1.0 + theta_star[j].abs()))
        };
        match root {
            Some(r) => theta_tilde[j] = r,
            None => {
                theta_tilde[j] = theta_star[j] + delta;
                fallback[j] = true;
            }
        }
    }
    Ok(DirectionChoice {
        theta_tilde,
        fallback,
    })
}

/// `δₙ⁻¹Sₙ` along one direction as the weighted average of two forward
/// slopes, `(3/2)[f(δu) − f(0)]/(δu) − (1/2)[f(2δu) − f(δu)]/(δu)` with
/// `f(t) = Λₙ(θ* + t·dir, θ*)`.
pub fn weighted_s<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    delta: f64,
    dir: &[f64],
    u: f64,
) -> Result<f64> {
    if dir.len() != surface.dim() {
        return Err(LocalError::DimensionMismatch {
            expected: surface.dim(),
            got: dir.len(),
        });
    }
    let h = delta * u;
    let base = surface.evaluate(theta_star)?;
    let at = |t: f64| -> Result<f64> {
        let th: Vec<f64> = theta_star.iter().zip(dir).map(|(a, b)| a + t * b).collect();
        Ok(surface.log_ratio(&surface.evaluate(&th)?, &base))
    };
    let f1 = at(h)?;
    let f2 = at(2.0 * h)?;
    Ok(1.5 * f1 / h - 0.5 * (f2 - f1) / h)
}

/// Conversion between `δₙ⁻²Kₙ` and `A₂`.
///
/// `Λₙ` is an average, so to second order
/// `Λₙ(θ* + δτ, θ*) ≈ −δ ĝᵀτ − ½δ²τᵀA₂τ` and the three-point difference
/// returns `δ²A₂` exactly: the scale is one. A doubled log-ratio on the
/// left of the expansion would not change `Kₙ`, which is defined directly
/// from `Λₙ`.
pub const A2_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct A2Check {
    /// `Â₂ = Ĵᵀ(Σmmᵀ/n)⁻¹Ĵ`.
    pub a2: SquareMatrix,
    /// `δₙ⁻²Kₙ`.
    pub scaled_k: SquareMatrix,
    pub relative_error: f64,
}

/// Empirical `Â₂` at `θ₀` and its Frobenius-relative distance from `δₙ⁻²Kₙ`.
pub fn validate_against_a2<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta0: &[f64],
    k: &SquareMatrix,
    delta: f64,
) -> Result<A2Check> {
    let a2 = empirical_a2(problem, theta0)?;
    if k.dim() != a2.dim() {
        return Err(LocalError::DimensionMismatch {
            expected: a2.dim(),
            got: k.dim(),
        });
    }
    let scaled_k = k.scaled(1.0 / (delta * delta));
    let relative_error =
        scaled_k.sub(&a2.scaled(A2_SCALE)).frobenius_norm() / (A2_SCALE * a2.frobenius_norm());
    Ok(A2Check {
        a2,
        scaled_k,
        relative_error,
    })
}

/// `Ĵᵀ Ω̂⁻¹ Ĵ` with `Ĵ = Σ(∂m/∂θᵀ)/n` and `Ω̂ = Σmmᵀ/n`.
pub fn empirical_a2<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    theta0: &[f64],
) -> Result<SquareMatrix> {
    let model = problem.model;
    let (k, d) = (model.moment_dim(), model.param_dim());
    if k != d {
        return Err(LocalError::NotJustIdentified { k, d });
    }
    let mut jac = vec![0.0; k * d];
    for obs in problem.sample.rows() {
        let j = model.jacobian(obs, theta0).ok_or(LocalError::NoJacobian)?;
        jac.iter_mut().zip(&j).for_each(|(a, b)| *a += b);
    }
    let n = problem.sample.n() as f64;
    jac.iter_mut().for_each(|v| *v /= n);
    let omega = problem
        .moments(theta0)
        .map_err(|source| LocalError::Evaluation {
            theta: theta0.to_vec(),
            source,
        })?
        .second_moment();
    let chol = crate::numerics::Cholesky::new(&omega)?;
    // columns of Ω⁻¹J
    let mut a2 = SquareMatrix::zeros(d);
    let cols: Vec<Vec<f64>> = (0..d)
        .map(|c| chol.solve(&(0..k).map(|r| jac[r * d + c]).collect::<Vec<_>>()))
        .collect();
    for a in 0..d {
        for b in 0..d {
            a2[(a, b)] = (0..k).map(|r| jac[r * d + a] * cols[b][r]).sum();
        }
    }
    Ok(a2.symmetrized())
}

/// One row of the local iteration trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// `‖λₙ(θ⁽ᵗ⁾)‖₂` at the expansion point.
    pub lambda_norm: f64,
    /// `‖τ⁽ᵗ⁾‖∞`.
    pub tau_norm: f64,
    /// `θ⁽ᵗ⁺¹⁾ = Tₙ`.
    pub estimate: Vec<f64>,
}

/// The quantities of the last completed local step.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalStep {
    pub theta_star: Vec<f64>,
    pub k: KMatrix,
    pub s: Vec<f64>,
    pub tau: Vec<f64>,
    /// `θ* + δₙτ`.
    pub t_n: Vec<f64>,
    pub ridge_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub delta: f64,
    /// Auxiliary estimate snapped to the `δₙ`-lattice.
    pub theta_start: Vec<f64>,
    pub last_step: Option<LocalStep>,
    /// Final `Tₙ` when converged, otherwise the visited point with the
    /// largest profile value.
    pub estimate: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    pub failure: Option<String>,
    pub direction_fallback: bool,
}

impl LocalFit {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }
}

struct Best<P> {
    point: P,
}

/// Steps 1–4 applied repeatedly from `theta_aux`.
///
/// Persistent inner failures (infeasible profile points, a curvature that
/// no admissible ridge makes positive definite) end the loop early with
/// `converged = false`; the returned estimate is then the best profile
/// point visited.
pub fn iterate<S: LocalSurface>(
    surface: &S,
    theta_aux: &[f64],
    config: &LocalConfig,
) -> Result<LocalFit>
where
    S: MaybeElProblem,
{
    let d = surface.dim();
    if theta_aux.len() != d {
        return Err(LocalError::DimensionMismatch {
            expected: d,
            got: theta_aux.len(),
        });
    }
    if config.max_iter == 0 {
        return Err(LocalError::InvalidArgument(
            "max_iter must be at least 1".into(),
        ));
    }
    let delta = config.delta.delta(surface.sample_size());
    if !(delta > 0.0) {
        return Err(LocalError::InvalidArgument(format!(
            "δₙ must be positive, got {delta}"
        )));
    }
    let theta_start = match &config.scales {
        None => sparsify(theta_aux, delta, config.sparsify_constant),
        Some(sc) => {
            if sc.len() != d {
                return Err(LocalError::DimensionMismatch {
                    expected: d,
                    got: sc.len(),
                });
            }
            if !sc.iter().all(|v| *v > 0.0 && v.is_finite()) {
                return Err(LocalError::InvalidArgument(format!(
                    "scales must be positive and finite, got {sc:?}"
                )));
            }
            sparsify_scaled(theta_aux, delta, config.sparsify_constant, sc)
        }
    };
    if let Some(b) = &config.basis {
        if b.dim() != d {
            return Err(LocalError::DimensionMismatch {
                expected: d,
                got: b.dim(),
            });
        }
        if config.hessian_mode == HessianMode::Directional {
            return Err(LocalError::InvalidArgument(
                "a direction basis requires the definition Hessian".into(),
            ));
        }
    }
    let mut fit = LocalFit {
        delta,
        theta_start: theta_start.clone(),
        last_step: None,
        estimate: theta_start.clone(),
        trace: Vec::new(),
        converged: false,
        failure: None,
        direction_fallback: false,
    };
    let mut best: Option<Best<S::Point>> = None;
    let consider = |p: S::Point, best: &mut Option<Best<S::Point>>| match best {
        Some(b) if surface.log_ratio(&p, &b.point) <= 0.0 => {}
        _ => *best = Some(Best { point: p }),
    };

    let mut theta = theta_start;
    for t in 0..config.max_iter {
        match local_step(surface, &theta, delta, config) {
            Ok((step, base, fallback)) => {
                fit.direction_fallback |= fallback;
                let tau_norm = norm_inf(&step.tau);
                fit.trace.push(TraceRow {
                    iteration: t + 1,
                    lambda_norm: surface.lambda_norm(&base),
                    tau_norm,
                    estimate: step.t_n.clone(),
                });
                consider(base, &mut best);
                theta = step.t_n.clone();
                fit.last_step = Some(step);
                if tau_norm <= config.tau_tol {
                    fit.converged = true;
                    fit.estimate = theta.clone();
                    return Ok(fit);
                }
            }
            Err(e) => {
                fit.failure = Some(e.to_string());
                break;
            }
        }
    }
    if fit.failure.is_none() {
        fit.failure = Some(format!(
            "‖τ‖∞ above {} after {} iterations",
            config.tau_tol, config.max_iter
        ));
        if let Ok(p) = surface.evaluate(&theta) {
            consider(p, &mut best);
        }
    }
    if let Some(b) = best {
        fit.estimate = surface.theta(&b.point).to_vec();
    }
    Ok(fit)
}

/// Lets [`iterate`] use the bisection direction search when the surface is
/// an EL profile. Other surfaces fall back to coordinate directions.
pub trait MaybeElProblem {
    fn choose_direction(
        &self,
        _theta_star: &[f64],
        _bracket: (f64, f64),
        _delta: f64,
    ) -> Option<Result<DirectionChoice>> {
        None
    }
}

impl MaybeElProblem for QuadraticSurface {}

impl<'a, M: MomentModel + ?Sized> MaybeElProblem for ElProblem<'a, M> {
    fn choose_direction(
        &self,
        theta_star: &[f64],
        bracket: (f64, f64),
        delta: f64,
    ) -> Option<Result<DirectionChoice>> {
        Some(choose_direction_bisection(self, theta_star, bracket, delta))
    }
}

fn local_step<S: LocalSurface + MaybeElProblem>(
    surface: &S,
    theta: &[f64],
    delta: f64,
    config: &LocalConfig,
) -> Result<(LocalStep, S::Point, bool)> {
    let d = surface.dim();
    let mut fallback = false;
    let coordinate = || match (&config.basis, &config.scales) {
        (Some(b), _) => Directions::new(
            (0..d)
                .map(|j| (0..d).map(|i| config.direction_step * b[(i, j)]).collect())
                .collect(),
        ),
        (None, Some(sc)) => Ok(Directions::scaled_coordinate(config.direction_step, sc)),
        (None, None) => Ok(Directions::coordinate(d, config.direction_step)),
    };
    let dirs = match config.direction_mode {
        DirectionMode::Coordinate => coordinate()?,
        DirectionMode::Bisection => {
            match surface.choose_direction(theta, config.bisection_bracket, delta) {
                Some(choice) => {
                    let choice = choice?;
                    fallback = choice.any_fallback();
                    let steps: Vec<f64> = choice
                        .theta_tilde
                        .iter()
                        .zip(theta)
                        .map(|(a, b)| (a - b) / delta)
                        .collect();
                    Directions::new(
                        (0..d)
                            .map(|i| {
                                let mut v = vec![0.0; d];
                                v[i] = steps[i];
                                v
                            })
                            .collect(),
                    )?
                }
                None => coordinate()?,
            }
        }
    };
    match config.hessian_mode {
        HessianMode::Definition => {
            let st = stencil(surface, theta, delta, &dirs)?;
            let k = k_from_stencil(&st, &dirs)?;
            let s = s_from_stencil(&st, &k, &dirs)?;
            let os = one_step(theta, &k.matrix, &s, delta, config.ridge)?;
            let step = LocalStep {
                theta_star: theta.to_vec(),
                k,
                s,
                tau: os.tau,
                t_n: os.estimate,
                ridge_used: os.ridge_used,
            };
            Ok((step, st.base, fallback))
        }
        HessianMode::Directional => {
            let base = surface.evaluate(theta)?;
            let tilde: Vec<f64> = (0..d).map(|i| theta[i] + delta * dirs.get(i)[i]).collect();
            let h = hessian_directional(surface, theta, &tilde, &config.romberg)?;
            let kmat = h.matrix.scaled(delta * delta);
            let k = KMatrix {
                directional: kmat.clone(),
                matrix: kmat,
                asymmetry: h.asymmetry,
            };
            let s = (0..d)
                .map(|j| {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    surface
                        .directional_derivative(theta, &e, &config.romberg)
                        .map(|g| delta * g)
                })
                .collect::<Result<Vec<_>>>()?;
            let os = one_step(theta, &k.matrix, &s, delta, config.ridge)?;
            let step = LocalStep {
                theta_star: theta.to_vec(),
                k,
                s,
                tau: os.tau,
                t_n: os.estimate,
                ridge_used: os.ridge_used,
            };
            Ok((step, base, fallback))
        }
    }
}

/// Largest deviation of the local surrogate from the exact log-ratio at the
/// given local parameters, on the summed scale `n·|Λₙ(θ*+δτ, θ*) − (τᵀSₙ − ½τᵀKₙτ)|`.
pub fn surrogate_residuals<S: LocalSurface>(
    surface: &S,
    theta_star: &[f64],
    delta: f64,
    k: &SquareMatrix,
    s: &[f64],
    taus: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let base = surface.evaluate(theta_star)?;
    let n = surface.sample_size() as f64;
    taus.iter()
        .map(|tau| {
            let th: Vec<f64> = theta_star
                .iter()
                .zip(tau)
                .map(|(a, b)| a + delta * b)
                .collect();
            let exact = surface.log_ratio(&surface.evaluate(&th)?, &base);
            let approx = dot(tau, s) - 0.5 * dot(tau, &k.mul_vec(tau));
            Ok(n * (exact - approx).abs())
        })
        .collect()
}

/// `‖·‖₂` of a difference, used in tests and diagnostics.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>())
}
