//! The `run`, `trace` and `plotdata` commands.

use std::fs;
use std::path::{Path, PathBuf};

use localel::el_core::{ElProblem, MomentModel, Sample};
use localel::el_local::LocalFit;
use localel::experiments::{
    emit_density, emit_likelihood_profile, emit_qq, linspace, replication_local_fit,
    replication_sample, run_mc, CklsModel, CklsPath, Dgp, Fixture, FixtureData, LinearData,
    LinearIvModel, McResult, McSpec, Method, MetricsRow,
};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, Experiment, FixtureModel, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("{0}")]
    Experiment(String),
    #[error("no estimates at {path}; {hint}")]
    MissingEstimates { path: PathBuf, hint: String },
    #[error("no local-el method to trace; add one to `methods` or set `trace.method`")]
    NoLocalMethod,
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// 17 significant digits.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Files written by one command; removed again unless [`Outputs::commit`]
/// is reached.
struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
    rows: Vec<(String, usize)>,
    committed: bool,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: vec![],
            rows: vec![],
            committed: false,
        })
    }

    /// Writes a header and data lines, LF-terminated.
    fn csv(&mut self, name: &str, header: &str, lines: &[String]) -> Result<()> {
        let mut text = String::with_capacity(64 * (lines.len() + 1));
        text.push_str(header);
        text.push('\n');
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        self.file(name, &text)?;
        self.rows.push((name.to_string(), lines.len()));
        Ok(())
    }

    fn file(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        self.written.push(path.clone());
        fs::write(&path, text).map_err(io_err(&path))
    }

    fn manifest(
        &mut self,
        name: &str,
        cfg: &RunConfig,
        command: &str,
        sections: &[(&str, Vec<(String, String)>)],
    ) -> Result<()> {
        let mut text = String::from("[run]\n");
        text.push_str(&format!("command = {command}\n"));
        text.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        text.push_str(&format!("config_sha256 = {}\n", config_hash(cfg)));
        text.push_str("\n[files]\n");
        for (file, rows) in &self.rows {
            text.push_str(&format!("{file} = {rows}\n"));
        }
        for (section, entries) in sections {
            text.push_str(&format!("\n[{section}]\n"));
            for (k, v) in entries {
                text.push_str(&format!("{k} = {v}\n"));
            }
        }
        text.push_str("\n[config]\n");
        for (k, v) in cfg.flat_entries() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        self.file(name, &text)
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

/// SHA-256 of the canonical configuration text.
pub fn config_hash(cfg: &RunConfig) -> String {
    let digest = Sha256::digest(cfg.canonical().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_fixture(cfg: &RunConfig) -> Result<Fixture> {
    let path = &cfg.fixture.path;
    let fail = |message: String| CliError::Fixture {
        path: path.clone(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| fail(e.to_string()))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let wanted: &[&str] = match cfg.fixture.model {
        FixtureModel::Linear => &["y", "x", "z"],
        FixtureModel::Ckls => &["r"],
    };
    let idx: Vec<usize> = wanted
        .iter()
        .map(|w| {
            headers
                .iter()
                .position(|h| h == w)
                .ok_or_else(|| fail(format!("missing column `{w}`")))
        })
        .collect::<Result<_>>()?;
    let mut cols = vec![Vec::new(); wanted.len()];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fail(e.to_string()))?;
        for (col, &i) in cols.iter_mut().zip(&idx) {
            let field = record.get(i).unwrap_or("");
            let v: f64 = field
                .parse()
                .map_err(|_| fail(format!("row {}: `{field}` is not a number", line + 2)))?;
            col.push(v);
        }
    }
    let data = match cfg.fixture.model {
        FixtureModel::Linear => {
            let mut it = cols.into_iter();
            let (y, x, z) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            FixtureData::Linear(LinearData { y, x, z })
        }
        FixtureModel::Ckls => FixtureData::Ckls {
            path: CklsPath {
                rates: cols.pop().unwrap(),
                corrections: 0,
            },
            dt: cfg.fixture.dt,
        },
    };
    let fixture = Fixture {
        data,
        theta0: cfg.fixture.theta0.clone(),
    };
    fixture.validate().map_err(|e| fail(e.to_string()))?;
    Ok(fixture)
}

/// The simulation design or observed data the configuration describes.
pub fn build_dgp(cfg: &RunConfig) -> Result<Dgp> {
    Ok(match cfg.experiment {
        Experiment::Linear => Dgp::Linear(localel::experiments::LinearDgpConfig {
            seed: cfg.seed,
            ..cfg.linear
        }),
        Experiment::Ckls => Dgp::Ckls(localel::experiments::CklsConfig {
            seed: cfg.seed,
            ..cfg.ckls
        }),
        Experiment::CustomFixture => Dgp::Fixture(load_fixture(cfg)?),
    })
}

/// `workers = 0` uses every available processor.
pub fn build_spec(cfg: &RunConfig, workers: usize) -> Result<McSpec> {
    Ok(McSpec {
        dgp: build_dgp(cfg)?,
        methods: cfg.methods.clone(),
        reps: cfg.reps,
        workers,
        local: cfg.local.clone(),
        local_scaling: cfg.resolved_scaling(),
        simplex: cfg.simplex,
    })
}

fn resolved_workers(workers: usize) -> usize {
    if workers > 0 {
        workers
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

fn metrics_line(prefix: &str, r: &MetricsRow) -> String {
    format!(
        "{prefix},{},{},{},{},{},{},{}",
        num(r.mean),
        num(r.median),
        num(r.mse),
        num(r.rmse),
        num(r.iqr),
        num(r.mad),
        r.reps_used
    )
}

/// Runs the Monte Carlo study and writes `metrics.csv`,
/// `metrics_by_param.csv`, `estimates.csv` and `run.manifest`.
pub fn cmd_run(cfg: &RunConfig, workers: usize) -> Result<McResult> {
    let spec = build_spec(cfg, workers)?;
    let mut out = Outputs::open(&cfg.output_dir)?;
    let result = run_mc(&spec).map_err(|e| CliError::Experiment(e.to_string()))?;

    let metrics: Vec<String> = result
        .metrics
        .iter()
        .map(|r| metrics_line(&r.method, r))
        .collect();
    out.csv(
        "metrics.csv",
        "method,mean,median,mse,rmse,iqr,mad,reps_used",
        &metrics,
    )?;

    let by_param: Vec<String> = result
        .per_param
        .iter()
        .flat_map(|rows| {
            rows.iter()
                .enumerate()
                .map(|(j, r)| metrics_line(&format!("{},{j}", r.method), r))
        })
        .collect();
    out.csv(
        "metrics_by_param.csv",
        "method,param_index,mean,median,mse,rmse,iqr,mad,reps_used",
        &by_param,
    )?;

    let d = result.theta0.len();
    let mut estimates = Vec::with_capacity(result.replications.len() * result.methods.len() * d);
    for rep in &result.replications {
        for (m, o) in result.methods.iter().zip(&rep.outcomes) {
            for j in 0..d {
                let v = o.theta().map_or(f64::NAN, |t| t[j]);
                estimates.push(format!("{},{},{j},{}", rep.index, m.label(), num(v)));
            }
        }
    }
    out.csv(
        "estimates.csv",
        "replication,method,param_index,estimate",
        &estimates,
    )?;

    let outcomes = result
        .methods
        .iter()
        .enumerate()
        .flat_map(|(i, m)| {
            [
                (
                    format!("{}.failed", m.key()),
                    result.failures[i].to_string(),
                ),
                (
                    format!("{}.nonconverged", m.key()),
                    result.nonconverged[i].to_string(),
                ),
            ]
        })
        .collect();
    let run_info = vec![
        ("workers".to_string(), resolved_workers(workers).to_string()),
        (
            "local_scaling".to_string(),
            format!("{:?}", spec.local_scaling).to_ascii_lowercase(),
        ),
        (
            "theta0".to_string(),
            result
                .theta0
                .iter()
                .map(|v| num(*v))
                .collect::<Vec<_>>()
                .join(" "),
        ),
    ];
    out.manifest(
        "run.manifest",
        cfg,
        "run",
        &[("resolved", run_info), ("outcomes", outcomes)],
    )?;
    out.commit();
    Ok(result)
}

/// Traces the local iteration on replication `trace.replication` and writes
/// `trace.csv` and `trace.manifest`.
pub fn cmd_trace(cfg: &RunConfig, workers: usize) -> Result<LocalFit> {
    let method = cfg.trace_method().ok_or(CliError::NoLocalMethod)?;
    let Method::LocalEl(aux) = method else {
        return Err(CliError::NoLocalMethod);
    };
    let mut spec = build_spec(cfg, workers)?;
    if !spec.methods.contains(&method) {
        spec.methods.push(method);
    }
    let mut out = Outputs::open(&cfg.output_dir)?;
    let fit =
        replication_local_fit(&spec, cfg.trace.replication, aux).map_err(CliError::Experiment)?;

    let d = cfg.param_dim();
    let estimate_cols = if d == 1 {
        "estimate".to_string()
    } else {
        (0..d)
            .map(|j| format!("estimate_{j}"))
            .collect::<Vec<_>>()
            .join(",")
    };
    let rows: Vec<String> = fit
        .trace
        .iter()
        .map(|r| {
            let est: Vec<String> = r.estimate.iter().map(|v| num(*v)).collect();
            format!(
                "{},{},{},{}",
                r.iteration,
                num(r.lambda_norm),
                num(r.tau_norm),
                est.join(",")
            )
        })
        .collect();
    out.csv(
        "trace.csv",
        &format!("iter,lambda_norm,tau_norm,{estimate_cols}"),
        &rows,
    )?;

    let join = |v: &[f64]| v.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ");
    let info = vec![
        ("method".to_string(), method.key().to_string()),
        ("replication".to_string(), cfg.trace.replication.to_string()),
        ("converged".to_string(), fit.converged.to_string()),
        ("iterations".to_string(), fit.iterations().to_string()),
        ("delta".to_string(), num(fit.delta)),
        ("theta_start".to_string(), join(&fit.theta_start)),
        ("estimate".to_string(), join(&fit.estimate)),
        (
            "direction_fallback".to_string(),
            fit.direction_fallback.to_string(),
        ),
        (
            "failure".to_string(),
            fit.failure.clone().unwrap_or_else(|| "none".to_string()),
        ),
        (
            "local_scaling".to_string(),
            format!("{:?}", spec.local_scaling).to_ascii_lowercase(),
        ),
    ];
    out.manifest("trace.manifest", cfg, "trace", &[("trace", info)])?;
    out.commit();
    Ok(fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Qq,
    Density,
    Profile,
}

impl PlotKind {
    fn name(self) -> &'static str {
        match self {
            PlotKind::Qq => "qq",
            PlotKind::Density => "density",
            PlotKind::Profile => "profile",
        }
    }
}

/// File-name form of a method label: `LocalEL(LS)` becomes `localel-ls`.
pub fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    s.trim_matches('-').to_string()
}

/// Per method label in file order, per parameter, the finite estimates.
fn read_estimates(path: &Path) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    if !path.exists() {
        return Err(CliError::MissingEstimates {
            path: path.to_path_buf(),
            hint: "run `localel run` with the same configuration and --out first".to_string(),
        });
    }
    let bad = |message: String| CliError::Fixture {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut groups: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let (method, j, v) = match (
            record.get(1),
            record.get(2).and_then(|s| s.parse::<usize>().ok()),
            record.get(3).and_then(|s| s.parse::<f64>().ok()),
        ) {
            (Some(m), Some(j), Some(v)) => (m, j, v),
            _ => {
                return Err(bad(format!(
                    "malformed row {:?}",
                    record.iter().collect::<Vec<_>>()
                )))
            }
        };
        let idx = match groups.iter().position(|(m, _)| m == method) {
            Some(i) => i,
            None => {
                groups.push((method.to_string(), Vec::new()));
                groups.len() - 1
            }
        };
        let per_param = &mut groups[idx].1;
        if per_param.len() <= j {
            per_param.resize(j + 1, Vec::new());
        }
        if v.is_finite() {
            per_param[j].push(v);
        }
    }
    if groups.is_empty() {
        return Err(CliError::MissingEstimates {
            path: path.to_path_buf(),
            hint: "the file has no rows; rerun `localel run`".to_string(),
        });
    }
    Ok(groups)
}

fn profile_values<M: MomentModel>(model: &M, sample: &Sample, grid: &[Vec<f64>]) -> Vec<f64> {
    let problem = ElProblem::new(model, sample);
    emit_likelihood_profile(&problem, grid)
        .into_iter()
        .map(|(_, v)| v)
        .collect()
}

fn profile_for(dgp: &Dgp, replication: usize, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (sample, _) =
        replication_sample(dgp, replication).map_err(|e| CliError::Experiment(e.to_string()))?;
    let dt = match dgp {
        Dgp::Linear(_)
        | Dgp::Fixture(Fixture {
            data: FixtureData::Linear(_),
            ..
        }) => None,
        Dgp::Ckls(c) => Some(c.dt),
        Dgp::Fixture(Fixture {
            data: FixtureData::Ckls { dt, .. },
            ..
        }) => Some(*dt),
    };
    Ok(match dt {
        None => profile_values(&LinearIvModel, &sample, grid),
        Some(dt) => profile_values(&CklsModel { dt }, &sample, grid),
    })
}

/// Writes `qq_<method>.csv`, `density_<method>.csv` or `profile.csv`, plus
/// `plotdata_<kind>.manifest`.
pub fn cmd_plotdata(cfg: &RunConfig, kind: PlotKind) -> Result<Vec<PathBuf>> {
    let estimates_path = cfg.output_dir.join("estimates.csv");
    let groups = match kind {
        PlotKind::Qq | PlotKind::Density => read_estimates(&estimates_path)?,
        PlotKind::Profile => Vec::new(),
    };
    let mut out = Outputs::open(&cfg.output_dir)?;
    let mut info = vec![("kind".to_string(), kind.name().to_string())];
    match kind {
        PlotKind::Qq | PlotKind::Density => {
            for (label, per_param) in &groups {
                let mut rows = Vec::new();
                for (j, values) in per_param.iter().enumerate() {
                    let pairs = match kind {
                        PlotKind::Qq => emit_qq(values),
                        _ => emit_density(values, cfg.plot.density_grid, cfg.plot.bandwidth),
                    }
                    .map_err(|e| CliError::Experiment(format!("{label}, parameter {j}: {e}")))?;
                    rows.extend(
                        pairs
                            .into_iter()
                            .map(|(a, b)| format!("{j},{},{}", num(a), num(b))),
                    );
                }
                let header = match kind {
                    PlotKind::Qq => "param_index,theoretical,empirical",
                    _ => "param_index,x,density",
                };
                out.csv(
                    &format!("{}_{}.csv", kind.name(), slug(label)),
                    header,
                    &rows,
                )?;
                info.push((
                    format!("{}.estimates", slug(label)),
                    per_param.iter().map(Vec::len).sum::<usize>().to_string(),
                ));
            }
            if let localel::experiments::Bandwidth::Fixed(h) = cfg.plot.bandwidth {
                info.push(("bandwidth".to_string(), num(h)));
            }
        }
        PlotKind::Profile => {
            let dgp = build_dgp(cfg)?;
            let theta0 = dgp.theta0();
            let j = cfg.plot.profile_param;
            let half = 0.25 * theta0[j].abs().max(0.1);
            let lo = cfg.plot.profile_lo.unwrap_or(theta0[j] - half);
            let hi = cfg.plot.profile_hi.unwrap_or(theta0[j] + half);
            let grid: Vec<Vec<f64>> = linspace(lo, hi, cfg.plot.profile_points)
                .into_iter()
                .map(|t| {
                    let mut theta = theta0.clone();
                    theta[j] = t;
                    theta
                })
                .collect();
            let values = profile_for(&dgp, cfg.plot.profile_replication, &grid)?;
            let clean = match &dgp {
                Dgp::Linear(c) => Some(Dgp::Linear(localel::experiments::LinearDgpConfig {
                    c: 0.0,
                    ..*c
                })),
                Dgp::Ckls(c) => Some(Dgp::Ckls(localel::experiments::CklsConfig { c: 0.0, ..*c })),
                Dgp::Fixture(_) => None,
            };
            let (header, rows): (&str, Vec<String>) = match clean {
                Some(clean) => {
                    let clean_values = profile_for(&clean, cfg.plot.profile_replication, &grid)?;
                    let rows = grid
                        .iter()
                        .zip(&values)
                        .zip(&clean_values)
                        .map(|((t, v), c)| format!("{},{},{}", num(t[j]), num(*v), num(*c)))
                        .collect();
                    ("theta,log_el,log_el_clean", rows)
                }
                None => (
                    "theta,log_el",
                    grid.iter()
                        .zip(&values)
                        .map(|(t, v)| format!("{},{}", num(t[j]), num(*v)))
                        .collect(),
                ),
            };
            out.csv("profile.csv", header, &rows)?;
            info.push(("profile_param".to_string(), j.to_string()));
            info.push((
                "profile_range".to_string(),
                format!("{} {}", num(lo), num(hi)),
            ));
        }
    }
    let files = out.written.clone();
    out.manifest(
        &format!("plotdata_{}.manifest", kind.name()),
        cfg,
        "plotdata",
        &[("plotdata", info)],
    )?;
    out.commit();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_carry_seventeen_significant_digits() {
        assert_eq!(num(0.1), "1.0000000000000001e-1");
        assert_eq!(num(2.0), "2.0000000000000000e0");
        assert_eq!(num(0.1).parse::<f64>().unwrap(), 0.1);
        assert_eq!(num(f64::NAN), "NaN");
    }

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("LocalEL(LS)"), "localel-ls");
        assert_eq!(slug("GMM"), "gmm");
    }
}
