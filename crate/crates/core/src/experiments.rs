//! Simulation designs, the Monte Carlo runner, summary metrics and plot
//! data.
//!
//! Two designs are provided: a contaminated just-identified linear IV model
//! and a contaminated CKLS short-rate model with four moment conditions.
//! Every replication draws from its own `RngStream(seed, replication)`, so
//! results do not depend on the method list order or on the worker count.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::el_core::{ElProblem, LogElValue, MomentModel, Sample};
use crate::el_local::{information_basis, information_scales, iterate, LocalConfig, LocalFit};
use crate::estimators::{
    el_global, gmm_two_step, instrumental_variables, least_squares, Bounds, EstimateResult,
    GmmOptions, SimplexOptions,
};
use crate::numerics::{sample_mixture, NormalComponent, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("rate path needed {corrections} positivity corrections in {steps} steps")]
    PathDegenerate { corrections: usize, steps: usize },
    #[error("no estimates to summarize")]
    EmptyEstimates,
    #[error("need at least {needed} estimates, got {got}")]
    TooFewEstimates { needed: usize, got: usize },
    #[error("estimates have zero spread")]
    DegenerateSpread,
    #[error("worker pool: {0}")]
    WorkerPool(String),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::InvalidConfig(msg.into())
}

// ---------------------------------------------------------------------------
// linear IV design

/// `y = xθ₀ + ε`, `x = zπ + u`, `ε = R·u + ε′`, with `u` drawn from
/// `(1−c)𝒩(0,1) + c𝒩(L,1)` and `z = z_mean + z_noise_sd·𝒩(0,1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDgpConfig {
    pub n: usize,
    pub theta0: f64,
    pub pi: f64,
    pub r: f64,
    pub c: f64,
    pub l: f64,
    pub z_mean: f64,
    pub z_noise_sd: f64,
    pub seed: u64,
}

impl Default for LinearDgpConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            theta0: 2.0,
            pi: 1.0,
            r: 0.1,
            c: 0.0,
            l: 0.0,
            z_mean: 0.3,
            z_noise_sd: 0.1,
            seed: 0,
        }
    }
}

impl LinearDgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(invalid(format!(
                "linear n must be at least 10, got {}",
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(invalid(format!(
                "contamination probability {} outside [0, 1]",
                self.c
            )));
        }
        if !(self.z_noise_sd > 0.0) {
            return Err(invalid("z_noise_sd must be positive"));
        }
        if ![self.theta0, self.pi, self.r, self.l, self.z_mean]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("linear design parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearData {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl LinearData {
    /// Observations `(yᵢ, xᵢ, zᵢ)` for [`LinearIvModel`].
    pub fn sample(&self) -> Sample {
        Sample::from_columns(&[&self.y, &self.x, &self.z]).expect("columns share a length")
    }
}

pub fn gen_linear(config: &LinearDgpConfig, rng: &mut RngStream) -> Result<LinearData> {
    config.validate()?;
    let n = config.n;
    let z: Vec<f64> = (0..n)
        .map(|_| config.z_mean + config.z_noise_sd * rng.standard_normal())
        .collect();
    let u = sample_mixture(
        rng,
        config.c,
        NormalComponent::STANDARD,
        NormalComponent::new(config.l, 1.0),
        n,
    );
    let x: Vec<f64> = z
        .iter()
        .zip(&u)
        .map(|(zi, ui)| zi * config.pi + ui)
        .collect();
    let y: Vec<f64> = x
        .iter()
        .zip(&u)
        .map(|(xi, ui)| xi * config.theta0 + config.r * ui + rng.standard_normal())
        .collect();
    Ok(LinearData { y, x, z })
}

/// `m(θ) = z(y − xθ)` on observations `(y, x, z)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LinearIvModel;

impl MomentModel for LinearIvModel {
    fn param_dim(&self) -> usize {
        1
    }

    fn moment_dim(&self) -> usize {
        1
    }

    fn observation_width(&self) -> usize {
        3
    }

    fn evaluate(&self, obs: &[f64], theta: &[f64], out: &mut [f64]) {
        out[0] = obs[2] * (obs[0] - obs[1] * theta[0]);
    }

    fn jacobian(&self, obs: &[f64], _theta: &[f64]) -> Option<Vec<f64>> {
        Some(vec![-obs[2] * obs[1]])
    }
}

// ---------------------------------------------------------------------------
// CKLS short-rate design

/// Euler scheme `r_{t+1} = r_t + α + βr_t + σ r_t^γ √Δt u_t` with
/// contaminated shocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CklsConfig {
    pub t: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub r0: f64,
    pub dt: f64,
    pub c: f64,
    pub l: f64,
    pub seed: u64,
}

impl Default for CklsConfig {
    fn default() -> Self {
        Self {
            t: 1000,
            alpha: 0.05,
            beta: -0.1,
            gamma: 0.5,
            sigma: 0.2,
            r0: 0.05,
            dt: 1.0 / 12.0,
            c: 0.0,
            l: 0.0,
            seed: 0,
        }
    }
}

/// Rates are reflected at this floor.
pub const RATE_FLOOR: f64 = 1e-6;

impl CklsConfig {
    pub fn theta0(&self) -> Vec<f64> {
        vec![self.alpha, self.beta, self.gamma, self.sigma]
    }

    pub fn validate(&self) -> Result<()> {
        if self.t < 10 {
            return Err(invalid(format!(
                "CKLS path length must be at least 10, got {}",
                self.t
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(invalid("sigma must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(invalid("dt must be positive"));
        }
        if !(self.r0 > 0.0) {
            return Err(invalid("r0 must be positive"));
        }
        if !(0.0..=1.0).contains(&self.c) {
            return Err(invalid(format!(
                "contamination probability {} outside [0, 1]",
                self.c
            )));
        }
        if ![self.alpha, self.beta, self.gamma, self.l]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(invalid("CKLS parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CklsPath {
    /// `r₀..r_T`.
    pub rates: Vec<f64>,
    pub corrections: usize,
}

impl CklsPath {
    /// Consecutive pairs `(r_t, r_{t+1})` for [`CklsModel`].
    pub fn sample(&self) -> Sample {
        let data = self.rates.windows(2).flat_map(|w| [w[0], w[1]]).collect();
        Sample::new(2, data).expect("pairs have width two")
    }
}

pub fn gen_ckls(config: &CklsConfig, rng: &mut RngStream) -> Result<CklsPath> {
    config.validate()?;
    let shocks = sample_mixture(
        rng,
        config.c,
        NormalComponent::STANDARD,
        NormalComponent::new(config.l, 1.0),
        config.t,
    );
    gen_ckls_with_shocks(config, &shocks)
}

/// The recursion driven by given shocks `u₀..u_{T−1}`.
pub fn gen_ckls_with_shocks(config: &CklsConfig, shocks: &[f64]) -> Result<CklsPath> {
    config.validate()?;
    if shocks.len() != config.t {
        return Err(invalid(format!(
            "expected {} shocks, got {}",
            config.t,
            shocks.len()
        )));
    }
    let mut rates = Vec::with_capacity(config.t + 1);
    rates.push(config.r0);
    let mut corrections = 0;
    let scale = config.sigma * config.dt.sqrt();
    for &u in shocks {
        let r = *rates.last().unwrap();
        let mut next = r + config.alpha + config.beta * r + scale * r.powf(config.gamma) * u;
        if next < RATE_FLOOR {
            next = 2.0 * RATE_FLOOR - next;
            corrections += 1;
        }
        rates.push(next);
    }
    if corrections * 10 > config.t {
        return Err(ExperimentError::PathDegenerate {
            corrections,
            steps: config.t,
        });
    }
    Ok(CklsPath { rates, corrections })
}

/// `[ε, εr, ε² − σ²r^{2γ}Δt, (ε² − σ²r^{2γ}Δt)r]` with
/// `ε = r_{t+1} − r_t − α − βr_t`, parameters `(α, β, γ, σ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CklsModel {
    pub dt: f64,
}

impl MomentModel for CklsModel {
    fn param_dim(&self) -> usize {
        4
    }

    fn moment_dim(&self) -> usize {
        4
    }

    fn observation_width(&self) -> usize {
        2
    }

    fn evaluate(&self, obs: &[f64], theta: &[f64], out: &mut [f64]) {
        let (r, next) = (obs[0], obs[1]);
        let (alpha, beta, gamma, sigma) = (theta[0], theta[1], theta[2], theta[3]);
        let eps = next - r - alpha - beta * r;
        let v = eps * eps - sigma * sigma * r.powf(2.0 * gamma) * self.dt;
        out[0] = eps;
        out[1] = eps * r;
        out[2] = v;
        out[3] = v * r;
    }

    fn jacobian(&self, obs: &[f64], theta: &[f64]) -> Option<Vec<f64>> {
        let (r, next) = (obs[0], obs[1]);
        let (alpha, beta, gamma, sigma) = (theta[0], theta[1], theta[2], theta[3]);
        let eps = next - r - alpha - beta * r;
        let r2g = r.powf(2.0 * gamma);
        let dv = [
            -2.0 * eps,
            -2.0 * eps * r,
            -2.0 * sigma * sigma * self.dt * r2g * r.ln(),
            -2.0 * sigma * r2g * self.dt,
        ];
        let mut j = vec![-1.0, -r, 0.0, 0.0, -r, -r * r, 0.0, 0.0];
        j.extend_from_slice(&dv);
        j.extend(dv.iter().map(|v| v * r));
        Some(j)
    }
}

/// `E log χ²₁`.
const LOG_CHI2_MEAN: f64 = -1.270_362_845_461_478;

/// Closed-form start for the CKLS search: OLS of `Δr` on `(1, r)` for
/// `(α, β)`, then OLS of `log ε̂²` on `(1, log r)` for `(γ, σ)`.
pub fn ckls_start(path: &CklsPath, dt: f64) -> Vec<f64> {
    let (r, dr): (Vec<f64>, Vec<f64>) = path.rates.windows(2).map(|w| (w[0], w[1] - w[0])).unzip();
    let (a, b) = simple_ols(&r, &dr);
    let (lr, le): (Vec<f64>, Vec<f64>) = r
        .iter()
        .zip(&dr)
        .filter_map(|(ri, di)| {
            let e = di - a - b * ri;
            (e != 0.0).then(|| (ri.ln(), (e * e).ln()))
        })
        .unzip();
    let (icpt, slope) = simple_ols(&lr, &le);
    let gamma = (0.5 * slope).clamp(CKLS_BOUNDS_LOWER[2], CKLS_BOUNDS_UPPER[2]);
    let sigma = ((icpt - LOG_CHI2_MEAN).exp() / dt)
        .sqrt()
        .clamp(CKLS_BOUNDS_LOWER[3], CKLS_BOUNDS_UPPER[3]);
    vec![
        a.clamp(CKLS_BOUNDS_LOWER[0], CKLS_BOUNDS_UPPER[0]),
        b.clamp(CKLS_BOUNDS_LOWER[1], CKLS_BOUNDS_UPPER[1]),
        gamma,
        sigma,
    ]
}

fn simple_ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

const CKLS_BOUNDS_LOWER: [f64; 4] = [-1.0, -1.0, 0.0, 1e-6];
const CKLS_BOUNDS_UPPER: [f64; 4] = [1.0, 1.0, 2.5, 5.0];

/// Search box for `(α, β, γ, σ)`.
pub fn ckls_bounds() -> Bounds {
    Bounds::new(CKLS_BOUNDS_LOWER.to_vec(), CKLS_BOUNDS_UPPER.to_vec())
        .expect("static box is valid")
}

/// Half-width of the linear-model search box around the LS start.
pub const LINEAR_BOX_HALF_WIDTH: f64 = 5.0;

// ---------------------------------------------------------------------------
// methods and the Monte Carlo runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Auxiliary {
    Ls,
    Iv,
    El,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Ls,
    Iv,
    Gmm,
    El,
    LocalEl(Auxiliary),
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::Iv => "IV",
            Method::Gmm => "GMM",
            Method::El => "EL",
            Method::LocalEl(Auxiliary::Ls) => "LocalEL(LS)",
            Method::LocalEl(Auxiliary::Iv) => "LocalEL(IV)",
            Method::LocalEl(Auxiliary::El) => "LocalEL(EL)",
        }
    }

    /// Accepts the labels above and the config spellings `ls`, `iv`, `gmm`,
    /// `el`, `local-el(ls)`, `local-el(iv)`, `local-el(el)`.
    pub fn parse(s: &str) -> Option<Method> {
        let key: String = s
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '-' && *c != '_')
            .collect();
        Some(match key.as_str() {
            "ls" => Method::Ls,
            "iv" => Method::Iv,
            "gmm" => Method::Gmm,
            "el" => Method::El,
            "localel(ls)" => Method::LocalEl(Auxiliary::Ls),
            "localel(iv)" => Method::LocalEl(Auxiliary::Iv),
            "localel(el)" => Method::LocalEl(Auxiliary::El),
            _ => return None,
        })
    }

    /// Config spelling, inverse of [`Method::parse`].
    pub fn key(&self) -> &'static str {
        match self {
            Method::Ls => "ls",
            Method::Iv => "iv",
            Method::Gmm => "gmm",
            Method::El => "el",
            Method::LocalEl(Auxiliary::Ls) => "local-el(ls)",
            Method::LocalEl(Auxiliary::Iv) => "local-el(iv)",
            Method::LocalEl(Auxiliary::El) => "local-el(el)",
        }
    }
}

/// Observed data supplied in place of a simulated design; every replication
/// sees the same observations.
#[derive(Debug, Clone, PartialEq)]
pub enum FixtureData {
    Linear(LinearData),
    Ckls { path: CklsPath, dt: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub data: FixtureData,
    /// Reference value the metrics are computed against.
    pub theta0: Vec<f64>,
}

impl Fixture {
    pub fn validate(&self) -> Result<()> {
        let (n, d) = match &self.data {
            FixtureData::Linear(l) => {
                if l.x.len() != l.y.len() || l.z.len() != l.y.len() {
                    return Err(invalid("fixture columns y, x, z differ in length"));
                }
                (l.y.len(), 1)
            }
            FixtureData::Ckls { path, dt } => {
                if !(*dt > 0.0) {
                    return Err(invalid("dt must be positive"));
                }
                if path.rates.iter().any(|r| !(*r > 0.0)) {
                    return Err(invalid("fixture rates must be positive"));
                }
                (path.rates.len().saturating_sub(1), 4)
            }
        };
        if n < 10 {
            return Err(invalid(format!(
                "fixture needs at least 10 observations, got {n}"
            )));
        }
        if self.theta0.len() != d || self.theta0.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "fixture theta0 must hold {d} finite values"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dgp {
    Linear(LinearDgpConfig),
    Ckls(CklsConfig),
    Fixture(Fixture),
}

impl Dgp {
    /// Zero for fixtures, which draw no random numbers.
    pub fn seed(&self) -> u64 {
        match self {
            Dgp::Linear(c) => c.seed,
            Dgp::Ckls(c) => c.seed,
            Dgp::Fixture(_) => 0,
        }
    }

    pub fn theta0(&self) -> Vec<f64> {
        match self {
            Dgp::Linear(c) => vec![c.theta0],
            Dgp::Ckls(c) => c.theta0(),
            Dgp::Fixture(f) => f.theta0.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Dgp::Linear(c) => c.validate(),
            Dgp::Ckls(c) => c.validate(),
            Dgp::Fixture(f) => f.validate(),
        }
    }

    fn is_ckls(&self) -> bool {
        matches!(
            self,
            Dgp::Ckls(_)
                | Dgp::Fixture(Fixture {
                    data: FixtureData::Ckls { .. },
                    ..
                })
        )
    }

    /// Whether `method` can run on this design.
    pub fn supports(&self, method: Method) -> bool {
        !self.is_ckls()
            || matches!(
                method,
                Method::Gmm | Method::El | Method::LocalEl(Auxiliary::El)
            )
    }
}

/// How the local step scales each coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalScaling {
    /// Directions and lattice as configured.
    Unit,
    /// Per-coordinate scales `√(Â₂⁻¹)ⱼⱼ` evaluated at the auxiliary estimate.
    Information,
    /// Information scales for the lattice and the Cholesky factor of `Â₂⁻¹`
    /// for the directions.
    Whitened,
}

impl LocalScaling {
    /// Unit scale for the scalar linear design; whitened directions for CKLS,
    /// whose four parameters differ in scale by orders of magnitude and whose
    /// `(γ, σ)` coordinates are strongly correlated.
    pub fn default_for(dgp: &Dgp) -> Self {
        if dgp.is_ckls() {
            LocalScaling::Whitened
        } else {
            LocalScaling::Unit
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSpec {
    pub dgp: Dgp,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Worker threads; zero means one per available processor.
    pub workers: usize,
    pub local: LocalConfig,
    pub local_scaling: LocalScaling,
    pub simplex: SimplexOptions,
}

/// Everything one replication produced for one method.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodOutcome {
    Estimate { theta: Vec<f64>, converged: bool },
    Failed(String),
}

impl MethodOutcome {
    pub fn theta(&self) -> Option<&[f64]> {
        match self {
            MethodOutcome::Estimate { theta, .. } => Some(theta),
            MethodOutcome::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    /// Outcomes aligned with `McSpec::methods`.
    pub outcomes: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub mean: f64,
    pub median: f64,
    pub mse: f64,
    pub rmse: f64,
    pub iqr: f64,
    pub mad: f64,
    pub reps_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult {
    pub methods: Vec<Method>,
    pub theta0: Vec<f64>,
    pub replications: Vec<Replication>,
    /// One row per method; for multi-parameter designs the row summarizes
    /// the stacked errors `θ̂ⱼ − θ₀ⱼ` over parameters and replications.
    pub metrics: Vec<MetricsRow>,
    /// `per_param[m][j]`: method `m`, parameter `j`, on the estimate scale.
    pub per_param: Vec<Vec<MetricsRow>>,
    /// Failed replications per method.
    pub failures: Vec<usize>,
    /// Replications per method that returned an estimate without meeting
    /// the convergence criterion.
    pub nonconverged: Vec<usize>,
}

impl McResult {
    /// `(method index, estimate)` pairs of successful replications.
    pub fn estimates(&self, method: usize) -> Vec<Vec<f64>> {
        self.replications
            .iter()
            .filter_map(|r| r.outcomes[method].theta().map(|t| t.to_vec()))
            .collect()
    }

    pub fn row(&self, method: Method) -> Option<&MetricsRow> {
        self.methods
            .iter()
            .position(|m| *m == method)
            .map(|i| &self.metrics[i])
    }
}

impl McSpec {
    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if self.reps == 0 {
            return Err(invalid("reps must be at least 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        if let Some(m) = self.methods.iter().find(|m| !self.dgp.supports(**m)) {
            return Err(invalid(format!(
                "method {} is not available for this experiment",
                m.label()
            )));
        }
        if self.local.max_iter == 0 {
            return Err(invalid("local max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Runs every method on every replication and summarizes per method.
pub fn run_mc(spec: &McSpec) -> Result<McResult> {
    spec.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if spec.workers > 0 {
        builder = builder.num_threads(spec.workers);
    }
    let pool = builder
        .build()
        .map_err(|e| ExperimentError::WorkerPool(e.to_string()))?;
    let replications: Vec<Replication> = pool.install(|| {
        (0..spec.reps)
            .into_par_iter()
            .map(|r| run_replication(spec, r))
            .collect()
    });
    summarize(spec, replications)
}

fn summarize(spec: &McSpec, replications: Vec<Replication>) -> Result<McResult> {
    let theta0 = spec.dgp.theta0();
    let d = theta0.len();
    let mut metrics = Vec::new();
    let mut per_param = Vec::new();
    let mut failures = Vec::new();
    let mut nonconverged = Vec::new();
    for (mi, method) in spec.methods.iter().enumerate() {
        let ests: Vec<&[f64]> = replications
            .iter()
            .filter_map(|r| r.outcomes[mi].theta())
            .collect();
        failures.push(replications.len() - ests.len());
        nonconverged.push(
            replications
                .iter()
                .filter(|r| {
                    matches!(
                        r.outcomes[mi],
                        MethodOutcome::Estimate {
                            converged: false,
                            ..
                        }
                    )
                })
                .count(),
        );
        let label = method.label().to_string();
        if ests.is_empty() {
            metrics.push(empty_row(&label));
            per_param.push((0..d).map(|_| empty_row(&label)).collect());
            continue;
        }
        let row = if d == 1 {
            let v: Vec<f64> = ests.iter().map(|t| t[0]).collect();
            compute_metrics(&v, theta0[0])?
        } else {
            let errors: Vec<f64> = ests
                .iter()
                .flat_map(|t| t.iter().zip(&theta0).map(|(a, b)| a - b))
                .collect();
            let mut row = compute_metrics(&errors, 0.0)?;
            row.reps_used = ests.len();
            row
        };
        metrics.push(MetricsRow {
            method: label.clone(),
            ..row
        });
        let mut rows = Vec::with_capacity(d);
        for j in 0..d {
            let v: Vec<f64> = ests.iter().map(|t| t[j]).collect();
            rows.push(MetricsRow {
                method: label.clone(),
                ..compute_metrics(&v, theta0[j])?
            });
        }
        per_param.push(rows);
    }
    Ok(McResult {
        methods: spec.methods.clone(),
        theta0,
        replications,
        metrics,
        per_param,
        failures,
        nonconverged,
    })
}

fn empty_row(label: &str) -> MetricsRow {
    MetricsRow {
        method: label.to_string(),
        mean: f64::NAN,
        median: f64::NAN,
        mse: f64::NAN,
        rmse: f64::NAN,
        iqr: f64::NAN,
        mad: f64::NAN,
        reps_used: 0,
    }
}

/// Lazily computed per-replication estimates shared between methods.
struct Cache {
    ls: Option<std::result::Result<Vec<f64>, String>>,
    iv: Option<std::result::Result<Vec<f64>, String>>,
    el: Option<std::result::Result<EstimateResult, String>>,
}

enum Data {
    Linear(LinearData, Sample),
    Ckls(CklsPath, Sample, f64),
}

fn replication_data(dgp: &Dgp, index: usize) -> Result<Data> {
    let mut rng = RngStream::new(dgp.seed(), index as u64);
    Ok(match dgp {
        Dgp::Linear(c) => {
            let d = gen_linear(c, &mut rng)?;
            let s = d.sample();
            Data::Linear(d, s)
        }
        Dgp::Ckls(c) => {
            let p = gen_ckls(c, &mut rng)?;
            let s = p.sample();
            Data::Ckls(p, s, c.dt)
        }
        Dgp::Fixture(f) => {
            f.validate()?;
            match &f.data {
                FixtureData::Linear(d) => Data::Linear(d.clone(), d.sample()),
                FixtureData::Ckls { path, dt } => Data::Ckls(path.clone(), path.sample(), *dt),
            }
        }
    })
}

/// Generates replication `index` of `dgp`.
pub fn replication_sample(dgp: &Dgp, index: usize) -> Result<(Sample, Option<LinearData>)> {
    Ok(match replication_data(dgp, index)? {
        Data::Linear(d, s) => (s, Some(d)),
        Data::Ckls(_, s, _) => (s, None),
    })
}

fn run_replication(spec: &McSpec, index: usize) -> Replication {
    let data = match replication_data(&spec.dgp, index) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return Replication {
                index,
                outcomes: spec
                    .methods
                    .iter()
                    .map(|_| MethodOutcome::Failed(msg.clone()))
                    .collect(),
            };
        }
    };
    let mut cache = Cache {
        ls: None,
        iv: None,
        el: None,
    };
    let outcomes = spec
        .methods
        .iter()
        .map(|m| run_method(spec, &data, *m, &mut cache))
        .collect();
    Replication { index, outcomes }
}

fn run_method(spec: &McSpec, data: &Data, method: Method, cache: &mut Cache) -> MethodOutcome {
    match data {
        Data::Linear(d, sample) => {
            let problem = ElProblem::new(&LinearIvModel, sample);
            run_linear(spec, d, &problem, method, cache)
        }
        Data::Ckls(path, sample, dt) => {
            let model = CklsModel { dt: *dt };
            let problem = ElProblem::new(&model, sample);
            run_ckls(spec, path, *dt, &problem, method, cache)
        }
    }
}

fn outcome(r: std::result::Result<Vec<f64>, String>) -> MethodOutcome {
    match r {
        Ok(theta) if theta.iter().all(|v| v.is_finite()) => MethodOutcome::Estimate {
            theta,
            converged: true,
        },
        Ok(theta) => MethodOutcome::Failed(format!("non-finite estimate {theta:?}")),
        Err(e) => MethodOutcome::Failed(e),
    }
}

fn local_outcome(fit: std::result::Result<LocalFit, String>) -> MethodOutcome {
    match fit {
        Ok(f) if f.estimate.iter().all(|v| v.is_finite()) => MethodOutcome::Estimate {
            theta: f.estimate,
            converged: f.converged,
        },
        Ok(f) => MethodOutcome::Failed(format!("non-finite estimate {:?}", f.estimate)),
        Err(e) => MethodOutcome::Failed(e),
    }
}

fn columns(d: &LinearData) -> (Sample, Sample) {
    (
        Sample::from_columns(&[&d.x]).unwrap(),
        Sample::from_columns(&[&d.z]).unwrap(),
    )
}

fn linear_ls(d: &LinearData, cache: &mut Cache) -> std::result::Result<Vec<f64>, String> {
    cache
        .ls
        .get_or_insert_with(|| {
            let (x, _) = columns(d);
            least_squares(&d.y, &x)
                .map(|r| r.theta_hat)
                .map_err(|e| e.to_string())
        })
        .clone()
}

fn linear_iv(d: &LinearData, cache: &mut Cache) -> std::result::Result<Vec<f64>, String> {
    cache
        .iv
        .get_or_insert_with(|| {
            let (x, z) = columns(d);
            instrumental_variables(&d.y, &x, &z)
                .map(|r| r.theta_hat)
                .map_err(|e| e.to_string())
        })
        .clone()
}

fn linear_box(center: &[f64]) -> Bounds {
    Bounds::around(center, &[LINEAR_BOX_HALF_WIDTH]).expect("finite centre")
}

fn linear_el(
    spec: &McSpec,
    d: &LinearData,
    problem: &ElProblem<'_, LinearIvModel>,
    cache: &mut Cache,
) -> std::result::Result<EstimateResult, String> {
    if cache.el.is_none() {
        let r = linear_ls(d, cache).and_then(|start| {
            el_global(problem, &start, &linear_box(&start), &spec.simplex)
                .map_err(|e| e.to_string())
        });
        cache.el = Some(r);
    }
    cache.el.clone().unwrap()
}

fn run_linear(
    spec: &McSpec,
    d: &LinearData,
    problem: &ElProblem<'_, LinearIvModel>,
    method: Method,
    cache: &mut Cache,
) -> MethodOutcome {
    match method {
        Method::Ls => outcome(linear_ls(d, cache)),
        Method::Iv => outcome(linear_iv(d, cache)),
        Method::Gmm => outcome(linear_ls(d, cache).and_then(|start| {
            let opts = GmmOptions {
                force_identity: false,
                simplex: spec.simplex,
            };
            gmm_two_step(problem, &start, &linear_box(&start), &opts)
                .map(|r| r.theta_hat)
                .map_err(|e| e.to_string())
        })),
        Method::El => match linear_el(spec, d, problem, cache) {
            Ok(r) => MethodOutcome::Estimate {
                converged: r.converged,
                theta: r.theta_hat,
            },
            Err(e) => MethodOutcome::Failed(e),
        },
        Method::LocalEl(aux) => {
            let start = match aux {
                Auxiliary::Ls => linear_ls(d, cache),
                Auxiliary::Iv => linear_iv(d, cache),
                Auxiliary::El => linear_el(spec, d, problem, cache).map(|r| r.theta_hat),
            };
            local_outcome(start.and_then(|s| run_local(spec, problem, &s)))
        }
    }
}

fn ckls_el(
    spec: &McSpec,
    path: &CklsPath,
    dt: f64,
    problem: &ElProblem<'_, CklsModel>,
    cache: &mut Cache,
) -> std::result::Result<EstimateResult, String> {
    if cache.el.is_none() {
        let start = ckls_start(path, dt);
        cache.el = Some(
            el_global(problem, &start, &ckls_bounds(), &spec.simplex).map_err(|e| e.to_string()),
        );
    }
    cache.el.clone().unwrap()
}

fn run_ckls(
    spec: &McSpec,
    path: &CklsPath,
    dt: f64,
    problem: &ElProblem<'_, CklsModel>,
    method: Method,
    cache: &mut Cache,
) -> MethodOutcome {
    match method {
        Method::Gmm => {
            let start = ckls_start(path, dt);
            let opts = GmmOptions {
                force_identity: false,
                simplex: spec.simplex,
            };
            outcome(
                gmm_two_step(problem, &start, &ckls_bounds(), &opts)
                    .map(|r| r.theta_hat)
                    .map_err(|e| e.to_string()),
            )
        }
        Method::El => match ckls_el(spec, path, dt, problem, cache) {
            Ok(r) => MethodOutcome::Estimate {
                converged: r.converged,
                theta: r.theta_hat,
            },
            Err(e) => MethodOutcome::Failed(e),
        },
        Method::LocalEl(Auxiliary::El) => local_outcome(
            ckls_el(spec, path, dt, problem, cache)
                .and_then(|r| run_local(spec, problem, &r.theta_hat)),
        ),
        other => MethodOutcome::Failed(format!(
            "{} is not available for the CKLS design",
            other.label()
        )),
    }
}

fn run_local<M: MomentModel + ?Sized>(
    spec: &McSpec,
    problem: &ElProblem<'_, M>,
    start: &[f64],
) -> std::result::Result<LocalFit, String> {
    let mut cfg = spec.local.clone();
    if spec.local_scaling != LocalScaling::Unit && cfg.scales.is_none() {
        cfg.scales = Some(information_scales(problem, start).map_err(|e| e.to_string())?);
    }
    if spec.local_scaling == LocalScaling::Whitened && cfg.basis.is_none() {
        cfg.basis = Some(information_basis(problem, start).map_err(|e| e.to_string())?);
    }
    iterate(problem, start, &cfg).map_err(|e| e.to_string())
}

/// The local fit that `run_mc` would compute for `LocalEl(aux)` on
/// replication `index`, with its full trace.
pub fn replication_local_fit(
    spec: &McSpec,
    index: usize,
    aux: Auxiliary,
) -> std::result::Result<LocalFit, String> {
    spec.validate().map_err(|e| e.to_string())?;
    if !spec.dgp.supports(Method::LocalEl(aux)) {
        return Err(format!(
            "{} is not available for this experiment",
            Method::LocalEl(aux).label()
        ));
    }
    let mut cache = Cache {
        ls: None,
        iv: None,
        el: None,
    };
    match replication_data(&spec.dgp, index).map_err(|e| e.to_string())? {
        Data::Linear(data, sample) => {
            let problem = ElProblem::new(&LinearIvModel, &sample);
            let start = match aux {
                Auxiliary::Ls => linear_ls(&data, &mut cache),
                Auxiliary::Iv => linear_iv(&data, &mut cache),
                Auxiliary::El => linear_el(spec, &data, &problem, &mut cache).map(|r| r.theta_hat),
            }?;
            run_local(spec, &problem, &start)
        }
        Data::Ckls(path, sample, dt) => {
            let model = CklsModel { dt };
            let problem = ElProblem::new(&model, &sample);
            let el = ckls_el(spec, &path, dt, &problem, &mut cache)?;
            run_local(spec, &problem, &el.theta_hat)
        }
    }
}

// ---------------------------------------------------------------------------
// metrics and plot data

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile (`h = (n−1)p`) of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile_sorted(&sorted(values), 0.5)
}

pub fn compute_metrics(estimates: &[f64], theta0: f64) -> Result<MetricsRow> {
    if estimates.is_empty() {
        return Err(ExperimentError::EmptyEstimates);
    }
    let n = estimates.len() as f64;
    let s = sorted(estimates);
    let mean = estimates.iter().sum::<f64>() / n;
    let med = quantile_sorted(&s, 0.5);
    let mse = estimates.iter().map(|e| (e - theta0).powi(2)).sum::<f64>() / n;
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let mad = median(
        &estimates
            .iter()
            .map(|e| (e - med).abs())
            .collect::<Vec<_>>(),
    );
    Ok(MetricsRow {
        method: String::new(),
        mean,
        median: med,
        mse,
        rmse: mse.sqrt(),
        iqr,
        mad,
        reps_used: estimates.len(),
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pairs of (standard normal quantile at `(i−0.5)/n`, i-th smallest
/// standardized estimate).
pub fn emit_qq(estimates: &[f64]) -> Result<Vec<(f64, f64)>> {
    if estimates.len() < 20 {
        return Err(ExperimentError::TooFewEstimates {
            needed: 20,
            got: estimates.len(),
        });
    }
    let (mean, sd) = mean_sd(estimates);
    if !(sd > 0.0) {
        return Err(ExperimentError::DegenerateSpread);
    }
    let normal = Normal::standard();
    let n = estimates.len() as f64;
    Ok(sorted(estimates)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (normal.inverse_cdf((i as f64 + 0.5) / n), (v - mean) / sd))
        .collect())
}

/// Largest gap between the QQ pairs on the probability scale,
/// `maxᵢ |Φ(empiricalᵢ) − Φ(theoreticalᵢ)|`: the Kolmogorov distance of the
/// standardized estimates evaluated at the plotting positions.
pub fn qq_max_deviation(pairs: &[(f64, f64)]) -> f64 {
    let normal = Normal::standard();
    pairs
        .iter()
        .map(|(t, e)| (normal.cdf(*e) - normal.cdf(*t)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// `1.06·sd·n^(−1/5)`.
    Auto,
    Fixed(f64),
}

/// Gaussian kernel density on `grid` equispaced points spanning
/// `[min − 3h, max + 3h]`.
pub fn emit_density(
    estimates: &[f64],
    grid: usize,
    bandwidth: Bandwidth,
) -> Result<Vec<(f64, f64)>> {
    if estimates.len() < 20 {
        return Err(ExperimentError::TooFewEstimates {
            needed: 20,
            got: estimates.len(),
        });
    }
    if grid < 2 {
        return Err(invalid("density grid needs at least two points"));
    }
    let n = estimates.len() as f64;
    let h = match bandwidth {
        Bandwidth::Auto => 1.06 * mean_sd(estimates).1 * n.powf(-0.2),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > 0.0) {
        return Err(ExperimentError::DegenerateSpread);
    }
    let (lo, hi) = estimates
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let (start, end) = (lo - 3.0 * h, hi + 3.0 * h);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok((0..grid)
        .map(|i| {
            let x = start + (end - start) * i as f64 / (grid - 1) as f64;
            let dens = estimates
                .iter()
                .map(|e| (-0.5 * ((x - e) / h).powi(2)).exp())
                .sum::<f64>()
                * norm;
            (x, dens)
        })
        .collect())
}

/// `(θ, nΛₙ(θ))` over a grid; points where zero leaves the moment hull or
/// the inner solve fails carry `−∞`.
pub fn emit_likelihood_profile<M: MomentModel + ?Sized>(
    problem: &ElProblem<'_, M>,
    grid: &[Vec<f64>],
) -> Vec<(Vec<f64>, f64)> {
    grid.iter()
        .map(|t| {
            let v = match problem.log_el(t) {
                Ok(LogElValue::Finite(v)) => v,
                _ => f64::NEG_INFINITY,
            };
            (t.clone(), v)
        })
        .collect()
}

/// `points` equispaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        _ => (0..points)
            .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
            .collect(),
    }
}
