//! Run configuration: a line-oriented `key = value` format with `[section]`
//! headers.
//!
//! ```text
//! experiment = linear
//! methods = ls, iv, el, local-el(ls)
//! reps = 500
//!
//! [linear]
//! c = 0.005
//! l = 10
//! ```
//!
//! Inside a section, `key` is shorthand for `section.key`; dotted keys are
//! also accepted anywhere. Overrides of the form `key=value` are applied
//! after the file, in order, and win over it.

use std::fmt;
use std::path::{Path, PathBuf};

use localel::el_local::{DeltaRule, DirectionMode, HessianMode, LocalConfig};
use localel::estimators::SimplexOptions;
use localel::experiments::{Bandwidth, CklsConfig, LinearDgpConfig, LocalScaling, Method};
use thiserror::Error;

/// Where a configuration value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    /// 1-based line of the configuration file.
    Line(usize),
    /// 1-based position among the overrides.
    Override(usize),
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(l) => write!(f, "line {l}"),
            Origin::Override(i) => write!(f, "override #{i}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Syntax { origin: Origin, message: String },
    #[error("{origin}: unknown key `{key}` (did you mean `{suggestion}`?)")]
    UnknownKey {
        key: String,
        origin: Origin,
        suggestion: String,
    },
    #[error("{origin}: key `{key}` expects {expected}, got `{value}`")]
    TypeMismatch {
        key: String,
        origin: Origin,
        expected: &'static str,
        value: String,
    },
    #[error("line {second}: key `{key}` already set on line {first}")]
    DuplicateKey {
        key: String,
        first: usize,
        second: usize,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Linear,
    Ckls,
    CustomFixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureModel {
    Linear,
    Ckls,
}

/// Observed data for `experiment = custom-fixture`: a delimited file with a
/// header naming columns `y`, `x`, `z` (linear) or `r` (CKLS rates).
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub path: String,
    pub model: FixtureModel,
    pub theta0: Vec<f64>,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalingChoice {
    /// Unit for scalar designs, whitened for CKLS; information scales when
    /// the directional Hessian rules out a direction basis.
    Auto,
    Fixed(LocalScaling),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceConfig {
    pub replication: usize,
    /// `None` picks the first local-el entry of `methods`.
    pub method: Option<Method>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotConfig {
    pub density_grid: usize,
    pub bandwidth: Bandwidth,
    pub profile_param: usize,
    /// `None` means `θ₀ⱼ ∓ 0.25·max(|θ₀ⱼ|, 0.1)`.
    pub profile_lo: Option<f64>,
    pub profile_hi: Option<f64>,
    pub profile_points: usize,
    pub profile_replication: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub methods: Vec<Method>,
    pub reps: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `seed` is taken from the top-level key.
    pub linear: LinearDgpConfig,
    pub ckls: CklsConfig,
    pub fixture: FixtureSpec,
    pub local: LocalConfig,
    pub scaling: ScalingChoice,
    pub simplex: SimplexOptions,
    pub trace: TraceConfig,
    pub plot: PlotConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: Experiment::Linear,
            methods: vec![
                Method::Ls,
                Method::Iv,
                Method::El,
                Method::LocalEl(localel::experiments::Auxiliary::Ls),
            ],
            reps: 500,
            seed: 20240101,
            output_dir: PathBuf::from("out"),
            linear: LinearDgpConfig::default(),
            ckls: CklsConfig::default(),
            fixture: FixtureSpec {
                path: String::new(),
                model: FixtureModel::Linear,
                theta0: vec![2.0],
                dt: 1.0 / 12.0,
            },
            local: LocalConfig::default(),
            scaling: ScalingChoice::Auto,
            simplex: SimplexOptions::default(),
            trace: TraceConfig {
                replication: 0,
                method: None,
            },
            plot: PlotConfig {
                density_grid: 512,
                bandwidth: Bandwidth::Auto,
                profile_param: 0,
                profile_lo: None,
                profile_hi: None,
                profile_points: 201,
                profile_replication: 0,
            },
        }
    }
}

/// A configuration value's text form.
trait Value: Sized {
    const EXPECTED: &'static str;
    fn parse(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

impl Value for f64 {
    const EXPECTED: &'static str = "a real number";
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn show(&self) -> String {
        format!("{self}")
    }
}

impl Value for usize {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse(s: &str) -> Option<Self> {
        s.replace('_', "").parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    const EXPECTED: &'static str = "a 64-bit unsigned integer";
    fn parse(s: &str) -> Option<Self> {
        s.replace('_', "").parse().ok()
    }
    fn show(&self) -> String {
        self.to_string()
    }
}

impl Value for String {
    const EXPECTED: &'static str = "text";
    fn parse(s: &str) -> Option<Self> {
        Some(s.to_string())
    }
    fn show(&self) -> String {
        self.clone()
    }
}

impl Value for PathBuf {
    const EXPECTED: &'static str = "a path";
    fn parse(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl<T: Value> Value for Option<T> {
    const EXPECTED: &'static str = "`auto` or a value";
    fn parse(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(None)
        } else {
            T::parse(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "auto".to_string(), T::show)
    }
}

impl Value for Vec<f64> {
    const EXPECTED: &'static str = "a comma-separated list of reals";
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|v| v.trim().parse().ok()).collect()
    }
    fn show(&self) -> String {
        self.iter().map(f64::show).collect::<Vec<_>>().join(", ")
    }
}

impl Value for Method {
    const EXPECTED: &'static str = "one of ls, iv, gmm, el, local-el(ls|iv|el)";
    fn parse(s: &str) -> Option<Self> {
        Method::parse(s)
    }
    fn show(&self) -> String {
        self.key().to_string()
    }
}

impl Value for Vec<Method> {
    const EXPECTED: &'static str = "a comma-separated list of ls, iv, gmm, el, local-el(ls|iv|el)";
    fn parse(s: &str) -> Option<Self> {
        if s.trim().is_empty() {
            return Some(vec![]);
        }
        s.split(',').map(Method::parse).collect()
    }
    fn show(&self) -> String {
        self.iter().map(|m| m.key()).collect::<Vec<_>>().join(", ")
    }
}

/// Implements [`Value`] for a fieldless enum from a table of spellings.
macro_rules! keyword_value {
    ($ty:ty, $expected:literal, [$($word:literal => $variant:expr),+ $(,)?]) => {
        impl Value for $ty {
            const EXPECTED: &'static str = $expected;
            fn parse(s: &str) -> Option<Self> {
                match s {
                    $($word => Some($variant),)+
                    _ => None,
                }
            }
            fn show(&self) -> String {
                $(if *self == $variant { return $word.to_string(); })+
                unreachable!()
            }
        }
    };
}

keyword_value!(Experiment, "one of linear, ckls, custom-fixture", [
    "linear" => Experiment::Linear,
    "ckls" => Experiment::Ckls,
    "custom-fixture" => Experiment::CustomFixture,
]);
keyword_value!(FixtureModel, "one of linear, ckls", ["linear" => FixtureModel::Linear, "ckls" => FixtureModel::Ckls]);
keyword_value!(HessianMode, "one of definition, directional", [
    "definition" => HessianMode::Definition,
    "directional" => HessianMode::Directional,
]);
keyword_value!(DirectionMode, "one of coordinate, bisection", [
    "coordinate" => DirectionMode::Coordinate,
    "bisection" => DirectionMode::Bisection,
]);
keyword_value!(ScalingChoice, "one of auto, unit, information, whitened", [
    "auto" => ScalingChoice::Auto,
    "unit" => ScalingChoice::Fixed(LocalScaling::Unit),
    "information" => ScalingChoice::Fixed(LocalScaling::Information),
    "whitened" => ScalingChoice::Fixed(LocalScaling::Whitened),
]);

impl Value for DeltaRule {
    const EXPECTED: &'static str = "root-n, power(E) or fixed(D)";
    fn parse(s: &str) -> Option<Self> {
        let arg = |prefix: &str| {
            s.strip_prefix(prefix)?
                .strip_suffix(')')?
                .trim()
                .parse::<f64>()
                .ok()
        };
        if s == "root-n" {
            Some(DeltaRule::RootN)
        } else if let Some(e) = arg("power(") {
            Some(DeltaRule::Power(e))
        } else {
            arg("fixed(").map(DeltaRule::Fixed)
        }
    }
    fn show(&self) -> String {
        match self {
            DeltaRule::RootN => "root-n".to_string(),
            DeltaRule::Power(e) => format!("power({e})"),
            DeltaRule::Fixed(d) => format!("fixed({d})"),
        }
    }
}

impl Value for Bandwidth {
    const EXPECTED: &'static str = "`auto` or a positive real";
    fn parse(s: &str) -> Option<Self> {
        if s == "auto" {
            Some(Bandwidth::Auto)
        } else {
            s.parse().ok().map(Bandwidth::Fixed)
        }
    }
    fn show(&self) -> String {
        match self {
            Bandwidth::Auto => "auto".to_string(),
            Bandwidth::Fixed(h) => format!("{h}"),
        }
    }
}

struct KeyDef {
    name: &'static str,
    expected: &'static str,
    set: fn(&mut RunConfig, &str) -> bool,
    get: fn(&RunConfig) -> String,
}

macro_rules! key {
    ($name:literal, $ty:ty, |$c:ident| $field:expr) => {
        KeyDef {
            name: $name,
            expected: <$ty as Value>::EXPECTED,
            set: |$c, v| match <$ty as Value>::parse(v) {
                Some(x) => {
                    $field = x;
                    true
                }
                None => false,
            },
            get: |$c| <$ty as Value>::show(&$field),
        }
    };
}

const KEYS: &[KeyDef] = &[
    key!("experiment", Experiment, |c| c.experiment),
    key!("methods", Vec<Method>, |c| c.methods),
    key!("reps", usize, |c| c.reps),
    key!("seed", u64, |c| c.seed),
    key!("output_dir", PathBuf, |c| c.output_dir),
    key!("linear.n", usize, |c| c.linear.n),
    key!("linear.theta0", f64, |c| c.linear.theta0),
    key!("linear.pi", f64, |c| c.linear.pi),
    key!("linear.r", f64, |c| c.linear.r),
    key!("linear.c", f64, |c| c.linear.c),
    key!("linear.l", f64, |c| c.linear.l),
    key!("linear.z_mean", f64, |c| c.linear.z_mean),
    key!("linear.z_noise_sd", f64, |c| c.linear.z_noise_sd),
    key!("ckls.t", usize, |c| c.ckls.t),
    key!("ckls.alpha", f64, |c| c.ckls.alpha),
    key!("ckls.beta", f64, |c| c.ckls.beta),
    key!("ckls.gamma", f64, |c| c.ckls.gamma),
    key!("ckls.sigma", f64, |c| c.ckls.sigma),
    key!("ckls.r0", f64, |c| c.ckls.r0),
    key!("ckls.dt", f64, |c| c.ckls.dt),
    key!("ckls.c", f64, |c| c.ckls.c),
    key!("ckls.l", f64, |c| c.ckls.l),
    key!("fixture.path", String, |c| c.fixture.path),
    key!("fixture.model", FixtureModel, |c| c.fixture.model),
    key!("fixture.theta0", Vec<f64>, |c| c.fixture.theta0),
    key!("fixture.dt", f64, |c| c.fixture.dt),
    key!("local.delta", DeltaRule, |c| c.local.delta),
    key!("local.direction_step", f64, |c| c.local.direction_step),
    key!("local.sparsify_constant", f64, |c| c
        .local
        .sparsify_constant),
    key!("local.tau_tol", f64, |c| c.local.tau_tol),
    key!("local.max_iter", usize, |c| c.local.max_iter),
    key!("local.hessian", HessianMode, |c| c.local.hessian_mode),
    key!("local.directions", DirectionMode, |c| c
        .local
        .direction_mode),
    key!("local.ridge", f64, |c| c.local.ridge),
    key!("local.romberg_levels", usize, |c| c.local.romberg.levels),
    key!("local.romberg_h0", Option<f64>, |c| c.local.romberg.h0),
    key!("local.bisection_lo", f64, |c| c.local.bisection_bracket.0),
    key!("local.bisection_hi", f64, |c| c.local.bisection_bracket.1),
    key!("local.scaling", ScalingChoice, |c| c.scaling),
    key!("simplex.diameter_tol", f64, |c| c.simplex.diameter_tol),
    key!("simplex.evals_per_dim", usize, |c| c.simplex.evals_per_dim),
    key!("simplex.relative_step", f64, |c| c.simplex.relative_step),
    key!("simplex.scale_floor", f64, |c| c.simplex.scale_floor),
    key!("trace.replication", usize, |c| c.trace.replication),
    key!("trace.method", Option<Method>, |c| c.trace.method),
    key!("plot.density_grid", usize, |c| c.plot.density_grid),
    key!("plot.bandwidth", Bandwidth, |c| c.plot.bandwidth),
    key!("plot.profile_param", usize, |c| c.plot.profile_param),
    key!("plot.profile_lo", Option<f64>, |c| c.plot.profile_lo),
    key!("plot.profile_hi", Option<f64>, |c| c.plot.profile_hi),
    key!("plot.profile_points", usize, |c| c.plot.profile_points),
    key!("plot.profile_replication", usize, |c| c
        .plot
        .profile_replication),
];

/// Every accepted key, in serialization order.
pub fn known_keys() -> impl Iterator<Item = &'static str> {
    KEYS.iter().map(|k| k.name)
}

fn nearest(name: &str, candidates: impl Iterator<Item = String>) -> String {
    candidates
        .map(|c| (strsim::levenshtein(name, &c), c))
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
        .map(|(_, c)| c)
        .unwrap_or_default()
}

fn sections() -> Vec<&'static str> {
    let mut s: Vec<&str> = KEYS
        .iter()
        .filter_map(|k| k.name.split_once('.').map(|(a, _)| a))
        .collect();
    s.dedup();
    s
}

fn assign(cfg: &mut RunConfig, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
    let Some(def) = KEYS.iter().find(|k| k.name == key) else {
        return Err(ConfigError::UnknownKey {
            key: key.to_string(),
            origin,
            suggestion: nearest(key, known_keys().map(str::to_string)),
        });
    };
    if (def.set)(cfg, value) {
        Ok(())
    } else {
        Err(ConfigError::TypeMismatch {
            key: key.to_string(),
            origin,
            expected: def.expected,
            value: value.to_string(),
        })
    }
}

fn split_pair(text: &str, origin: Origin) -> Result<(String, String), ConfigError> {
    let (k, v) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
        origin,
        message: format!("expected `key = value`, got `{text}`"),
    })?;
    let k = k.trim();
    if k.is_empty() {
        return Err(ConfigError::Syntax {
            origin,
            message: "empty key".to_string(),
        });
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Parses configuration text, applies `overrides` and validates the
/// result. A relative `fixture.path` is resolved against `base_dir`.
pub fn parse_config_str(
    text: &str,
    base_dir: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<(String, usize)> = Vec::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let origin = Origin::Line(i + 1);
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax {
                    origin,
                    message: format!("unterminated section header `{line}`"),
                })?
                .trim();
            if !sections().contains(&name) {
                return Err(ConfigError::UnknownKey {
                    key: format!("[{name}]"),
                    origin,
                    suggestion: nearest(
                        &format!("[{name}]"),
                        sections().iter().map(|s| format!("[{s}]")),
                    ),
                });
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = split_pair(line, origin)?;
        let key = match &section {
            Some(s) if !k.contains('.') => format!("{s}.{k}"),
            _ => k,
        };
        if let Some((_, first)) = seen.iter().find(|(name, _)| *name == key) {
            return Err(ConfigError::DuplicateKey {
                key,
                first: *first,
                second: i + 1,
            });
        }
        assign(&mut cfg, &key, &v, origin)?;
        seen.push((key, i + 1));
    }
    for (i, o) in overrides.iter().enumerate() {
        let origin = Origin::Override(i + 1);
        let (k, v) = split_pair(o, origin)?;
        assign(&mut cfg, &k, &v, origin)?;
    }
    if let Some(base) = base_dir {
        if !cfg.fixture.path.is_empty() && Path::new(&cfg.fixture.path).is_relative() {
            cfg.fixture.path = base.join(&cfg.fixture.path).display().to_string();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (or starts from the defaults when `None`) and applies
/// `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config_str(&text, p.parent(), overrides)
        }
        None => parse_config_str("", None, overrides),
    }
}

impl RunConfig {
    /// Every key with its resolved value, grouped by section; parsing the
    /// result yields an identical configuration.
    pub fn serialize(&self) -> String {
        self.render(|_| true)
    }

    /// [`RunConfig::serialize`] without `output_dir`, which does not affect
    /// any result.
    pub fn canonical(&self) -> String {
        self.render(|name| name != "output_dir")
    }

    fn render(&self, include: impl Fn(&str) -> bool) -> String {
        let mut out = String::new();
        let mut current = "";
        for def in KEYS.iter().filter(|k| include(k.name)) {
            let (section, key) = def.name.split_once('.').unwrap_or(("", def.name));
            if section != current {
                out.push_str(&format!("\n[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {}\n", (def.get)(self)));
        }
        out
    }

    /// The `[section]`-free `key = value` form used in manifests.
    pub fn flat_entries(&self) -> Vec<(&'static str, String)> {
        KEYS.iter().map(|k| (k.name, (k.get)(self))).collect()
    }

    pub fn is_ckls(&self) -> bool {
        match self.experiment {
            Experiment::Linear => false,
            Experiment::Ckls => true,
            Experiment::CustomFixture => self.fixture.model == FixtureModel::Ckls,
        }
    }

    pub fn param_dim(&self) -> usize {
        if self.is_ckls() {
            4
        } else {
            1
        }
    }

    /// Scaling actually used by the local step.
    pub fn resolved_scaling(&self) -> LocalScaling {
        match self.scaling {
            ScalingChoice::Fixed(s) => s,
            ScalingChoice::Auto if !self.is_ckls() => LocalScaling::Unit,
            ScalingChoice::Auto if self.local.hessian_mode == HessianMode::Directional => {
                LocalScaling::Information
            }
            ScalingChoice::Auto => LocalScaling::Whitened,
        }
    }

    /// The local-el method `trace` follows.
    pub fn trace_method(&self) -> Option<Method> {
        self.trace.method.or_else(|| {
            self.methods
                .iter()
                .copied()
                .find(|m| matches!(m, Method::LocalEl(_)))
        })
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.methods.is_empty() {
            return bad("methods must list at least one estimator".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad(format!("method {} listed twice", m.key()));
            }
            if self.is_ckls()
                && !matches!(
                    m,
                    Method::Gmm | Method::El | Method::LocalEl(localel::experiments::Auxiliary::El)
                )
            {
                return bad(format!(
                    "method {} is not available for the CKLS design (use gmm, el, local-el(el))",
                    m.key()
                ));
            }
        }
        if let Some(m) = self.trace.method {
            if !matches!(m, Method::LocalEl(_)) {
                return bad(format!(
                    "trace.method must be a local-el method, got {}",
                    m.key()
                ));
            }
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.local.max_iter == 0 {
            return bad("local.max_iter must be at least 1".into());
        }
        if !(self.local.tau_tol > 0.0) {
            return bad("local.tau_tol must be positive".into());
        }
        if self.local.direction_mode == DirectionMode::Bisection && self.param_dim() != 1 {
            return bad("local.directions = bisection needs a scalar parameter".into());
        }
        if self.resolved_scaling() == LocalScaling::Whitened
            && self.local.hessian_mode == HessianMode::Directional
        {
            return bad("local.scaling = whitened needs local.hessian = definition".into());
        }
        if self.experiment == Experiment::CustomFixture {
            if self.fixture.path.is_empty() {
                return bad("experiment = custom-fixture needs fixture.path".into());
            }
            if self.fixture.theta0.len() != self.param_dim() {
                return bad(format!("fixture.theta0 needs {} values", self.param_dim()));
            }
        }
        if self.plot.profile_param >= self.param_dim() {
            return bad(format!(
                "plot.profile_param must be below {}",
                self.param_dim()
            ));
        }
        if self.plot.profile_points < 2 || self.plot.density_grid < 2 {
            return bad("plot grids need at least two points".into());
        }
        let linear = LinearDgpConfig {
            seed: self.seed,
            ..self.linear
        };
        let ckls = CklsConfig {
            seed: self.seed,
            ..self.ckls
        };
        match self.experiment {
            Experiment::Linear => linear.validate(),
            Experiment::Ckls => ckls.validate(),
            Experiment::CustomFixture => Ok(()),
        }
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
