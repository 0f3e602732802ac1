use localel::el_core::ElProblem;
use localel::el_local::LocalConfig;
use localel::estimators::SimplexOptions;
use localel::experiments::{
    gen_ckls, gen_linear, run_mc, Auxiliary, CklsConfig, CklsModel, CklsPath, Dgp, Fixture,
    FixtureData, LinearDgpConfig, LinearIvModel, LocalScaling, McSpec, Method, MethodOutcome,
};
use localel::numerics::RngStream;

fn linear_spec(methods: Vec<Method>, reps: usize, workers: usize) -> McSpec {
    let dgp = Dgp::Linear(LinearDgpConfig {
        n: 300,
        c: 0.005,
        l: 10.0,
        seed: 99,
        ..Default::default()
    });
    McSpec {
        local_scaling: LocalScaling::default_for(&dgp),
        dgp,
        methods,
        reps,
        workers,
        local: LocalConfig::default(),
        simplex: SimplexOptions::default(),
    }
}

fn all_linear_methods() -> Vec<Method> {
    vec![
        Method::Ls,
        Method::Iv,
        Method::El,
        Method::LocalEl(Auxiliary::Ls),
        Method::LocalEl(Auxiliary::Iv),
    ]
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let one = run_mc(&linear_spec(all_linear_methods(), 24, 1)).unwrap();
    let many = run_mc(&linear_spec(all_linear_methods(), 24, 4)).unwrap();
    assert_eq!(one.metrics, many.metrics);
    assert_eq!(one.replications, many.replications);
    let again = run_mc(&linear_spec(all_linear_methods(), 24, 3)).unwrap();
    for (a, b) in one.metrics.iter().zip(&again.metrics) {
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
    }
}

#[test]
fn permuting_methods_leaves_rows_unchanged() {
    let forward = all_linear_methods();
    let mut backward = forward.clone();
    backward.reverse();
    let a = run_mc(&linear_spec(forward.clone(), 12, 2)).unwrap();
    let b = run_mc(&linear_spec(backward, 12, 2)).unwrap();
    for m in forward {
        assert_eq!(a.row(m), b.row(m), "{}", m.label());
    }
}

#[test]
fn single_replication_has_one_estimate_per_method() {
    let r = run_mc(&linear_spec(all_linear_methods(), 1, 0)).unwrap();
    assert_eq!(r.replications.len(), 1);
    assert_eq!(r.replications[0].outcomes.len(), 5);
    for (i, row) in r.metrics.iter().enumerate() {
        assert_eq!(row.reps_used + r.failures[i], 1);
        assert_eq!(r.estimates(i).len(), row.reps_used);
    }
}

#[test]
fn ckls_rejects_unsupported_methods() {
    let dgp = Dgp::Ckls(CklsConfig {
        t: 200,
        ..Default::default()
    });
    let spec = McSpec {
        local_scaling: LocalScaling::default_for(&dgp),
        dgp,
        methods: vec![Method::Gmm, Method::LocalEl(Auxiliary::Ls)],
        reps: 1,
        workers: 1,
        local: LocalConfig::default(),
        simplex: SimplexOptions::default(),
    };
    assert!(run_mc(&spec).is_err());
}

#[test]
fn ckls_monte_carlo_runs_all_supported_methods() {
    let dgp = Dgp::Ckls(CklsConfig {
        t: 500,
        seed: 5,
        ..Default::default()
    });
    let spec = McSpec {
        local_scaling: LocalScaling::default_for(&dgp),
        dgp,
        methods: vec![Method::Gmm, Method::El, Method::LocalEl(Auxiliary::El)],
        reps: 4,
        workers: 0,
        local: LocalConfig::default(),
        simplex: SimplexOptions::default(),
    };
    let r = run_mc(&spec).unwrap();
    assert_eq!(r.per_param.len(), 3);
    assert!(r.per_param.iter().all(|rows| rows.len() == 4));
    for rep in &r.replications {
        for o in &rep.outcomes {
            match o {
                MethodOutcome::Estimate { theta, .. } => assert_eq!(theta.len(), 4),
                MethodOutcome::Failed(msg) => panic!("replication {} failed: {msg}", rep.index),
            }
        }
    }
    // stacked errors: four parameters per replication
    assert!(r
        .metrics
        .iter()
        .all(|m| m.reps_used == 4 && m.rmse.is_finite()));
}

/// OLS slope of `Δr` on `r` with its conventional standard error.
fn drift_regression(rates: &[f64]) -> (f64, f64) {
    let x = &rates[..rates.len() - 1];
    let dy: Vec<f64> = rates.windows(2).map(|w| w[1] - w[0]).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, dy.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(&dy).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(&dy)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    (slope, (rss / (n - 2.0) / sxx).sqrt())
}

#[test]
fn clean_ckls_path_recovers_drift_slope() {
    let cfg = CklsConfig {
        t: 10_000,
        seed: 3,
        ..Default::default()
    };
    let path = gen_ckls(&cfg, &mut RngStream::new(3, 0)).unwrap();
    assert_eq!(path.corrections, 0);
    let (slope, se) = drift_regression(&path.rates);
    assert!((slope - cfg.beta).abs() <= 3.0 * se, "slope {slope} ± {se}");
}

#[test]
fn contaminated_shock_count_matches_binomial_mean() {
    let cfg = CklsConfig {
        t: 100_000,
        c: 0.001,
        l: 1000.0,
        seed: 4,
        ..Default::default()
    };
    let path = gen_ckls(&cfg, &mut RngStream::new(4, 0)).unwrap();
    assert_eq!(path.corrections, 0);
    // standardized shocks recovered from the recursion
    let count = path
        .rates
        .windows(2)
        .filter(|w| {
            let eps = w[1] - w[0] - cfg.alpha - cfg.beta * w[0];
            eps / (cfg.sigma * w[0].powf(cfg.gamma) * cfg.dt.sqrt()) > cfg.l / 2.0
        })
        .count() as f64;
    let (mean, sd) = (
        cfg.c * cfg.t as f64,
        (cfg.c * (1.0 - cfg.c) * cfg.t as f64).sqrt(),
    );
    assert!(
        (count - mean).abs() <= 4.0 * sd,
        "count {count}, expected {mean} ± {sd}"
    );
}

#[test]
fn mean_moments_at_truth_obey_clt_bounds() {
    let cfg = LinearDgpConfig {
        n: 10_000,
        seed: 8,
        ..Default::default()
    };
    let d = gen_linear(&cfg, &mut RngStream::new(8, 0)).unwrap();
    let sample = d.sample();
    let m = ElProblem::new(&LinearIvModel, &sample)
        .moments(&[2.0])
        .unwrap();
    let n = m.n() as f64;
    let sd = (m.second_moment()[(0, 0)] - m.mean()[0].powi(2)).sqrt();
    assert!(m.mean()[0].abs() <= 3.0 * sd / n.sqrt());
    // 5·k/√n bound for the implied-probability residual at θ₀
    let p = ElProblem::new(&LinearIvModel, &sample)
        .point(&[2.0])
        .unwrap();
    let weighted: f64 = p
        .implied_probs()
        .p
        .iter()
        .zip(m.rows())
        .map(|(pi, r)| pi * r[0])
        .sum();
    assert!(weighted.abs() <= 5.0 / n.sqrt());

    let ck = CklsConfig {
        t: 20_000,
        seed: 9,
        ..Default::default()
    };
    let path = gen_ckls(&ck, &mut RngStream::new(9, 0)).unwrap();
    let sample = path.sample();
    let model = CklsModel { dt: ck.dt };
    let m = ElProblem::new(&model, &sample)
        .moments(&ck.theta0())
        .unwrap();
    let t = m.n() as f64;
    let omega = m.second_moment();
    let mean = m.mean();
    let max_sd = (0..4)
        .map(|j| (omega[(j, j)] - mean[j].powi(2)).sqrt())
        .fold(0.0, f64::max);
    assert!(
        mean.iter().all(|v| v.abs() <= 4.0 * max_sd / t.sqrt()),
        "{mean:?}"
    );
}

#[test]
fn fixture_reproduces_the_replication_it_was_taken_from() {
    let spec = linear_spec(all_linear_methods(), 1, 1);
    let Dgp::Linear(cfg) = spec.dgp else {
        unreachable!()
    };
    let data = gen_linear(&cfg, &mut RngStream::new(cfg.seed, 0)).unwrap();
    let fixture = McSpec {
        dgp: Dgp::Fixture(Fixture {
            data: FixtureData::Linear(data),
            theta0: vec![cfg.theta0],
        }),
        ..spec.clone()
    };
    let simulated = run_mc(&spec).unwrap();
    let observed = run_mc(&fixture).unwrap();
    assert_eq!(simulated.replications, observed.replications);
    assert_eq!(simulated.metrics, observed.metrics);

    let short = Fixture {
        data: FixtureData::Ckls {
            path: CklsPath {
                rates: vec![0.05; 5],
                corrections: 0,
            },
            dt: 1.0,
        },
        theta0: vec![0.0; 4],
    };
    assert!(short.validate().is_err());
    assert!(!Dgp::Fixture(short).supports(Method::Ls));
}
