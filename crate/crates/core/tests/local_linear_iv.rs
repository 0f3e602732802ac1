use localel::el_core::{ElProblem, MomentModel, Sample};
use localel::el_local::{
    build_k, build_s, choose_direction_bisection, directional_grad_logp, hessian_directional,
    iterate, one_step, validate_against_a2, weighted_s, DirectionMode, Directions, HessianMode,
    LocalConfig, LocalSurface,
};
use localel::estimators::{instrumental_variables, least_squares};
use localel::experiments::{gen_linear, LinearData, LinearDgpConfig, LinearIvModel};
use localel::numerics::{invert_spd_ridge, Cholesky, RngStream, RombergOptions, SquareMatrix};

fn linear_fixture(n: usize, c: f64, l: f64, seed: u64) -> LinearData {
    let cfg = LinearDgpConfig {
        n,
        c,
        l,
        seed,
        ..Default::default()
    };
    gen_linear(&cfg, &mut RngStream::new(seed, 0)).unwrap()
}

fn column(v: &[f64]) -> Sample {
    Sample::from_columns(&[v]).unwrap()
}

fn iv_estimate(d: &LinearData) -> f64 {
    instrumental_variables(&d.y, &column(&d.x), &column(&d.z))
        .unwrap()
        .theta_hat[0]
}

/// `Ĵ²/Ω̂` for the scalar linear-IV moment, written out directly.
fn scalar_a2(d: &LinearData, theta: f64) -> f64 {
    let n = d.y.len() as f64;
    let j = d.x.iter().zip(&d.z).map(|(x, z)| -z * x).sum::<f64>() / n;
    let omega =
        d.y.iter()
            .zip(&d.x)
            .zip(&d.z)
            .map(|((y, x), z)| (z * (y - x * theta)).powi(2))
            .sum::<f64>()
            / n;
    j * j / omega
}

#[test]
fn k_matches_a2_on_clean_large_sample() {
    let d = linear_fixture(10_000, 0.0, 0.0, 11);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let delta = 1.0 / 100.0;
    let theta0 = [2.0];
    let k = build_k(&problem, &theta0, delta, &Directions::coordinate(1, 1.0)).unwrap();
    let check = validate_against_a2(&problem, &theta0, &k.matrix, delta).unwrap();
    assert!((check.a2[(0, 0)] - scalar_a2(&d, 2.0)).abs() <= 1e-12 * scalar_a2(&d, 2.0));
    assert!(
        check.relative_error <= 0.10,
        "relative error {}",
        check.relative_error
    );
    assert!(Cholesky::new(&k.matrix).is_ok());
    assert_eq!(invert_spd_ridge(&k.matrix, 0.0).unwrap().ridge_used, 0.0);
}

#[test]
fn definition_and_directional_hessians_agree() {
    let d = linear_fixture(10_000, 0.0, 0.0, 12);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let delta = 1.0 / 100.0;
    for theta in [2.0, iv_estimate(&d), 2.01] {
        let k = build_k(&problem, &[theta], delta, &Directions::coordinate(1, 1.0)).unwrap();
        let h = hessian_directional(
            &problem,
            &[theta],
            &[theta + delta],
            &RombergOptions::default(),
        )
        .unwrap();
        let scaled = k.matrix.scaled(1.0 / (delta * delta));
        let gap = scaled.sub(&h.matrix).frobenius_norm() / scaled.frobenius_norm();
        assert!(gap <= 0.05, "θ = {theta}: gap {gap}");
    }
}

#[test]
fn step_three_matches_weighted_average_form() {
    let d = linear_fixture(2_000, 0.0, 0.0, 13);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let delta = 1.0 / (2_000f64).sqrt();
    let dirs = Directions::coordinate(1, 1.0);
    for theta in [iv_estimate(&d) - 0.05, 2.0, iv_estimate(&d) + 0.03] {
        let k = build_k(&problem, &[theta], delta, &dirs).unwrap();
        let s = build_s(&problem, &[theta], delta, &dirs, &k).unwrap();
        let w = weighted_s(&problem, &[theta], delta, &[1.0], 1.0).unwrap();
        assert!(
            (s[0] / delta - w).abs() <= 2.0 * delta,
            "θ = {theta}: {} vs {w}",
            s[0] / delta
        );
    }
}

#[test]
fn surrogate_step_does_not_lose_likelihood() {
    let d = linear_fixture(1_000, 0.0, 0.0, 14);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let delta = 1.0 / (1_000f64).sqrt();
    let dirs = Directions::coordinate(1, 1.0);
    for start in [1.9, 2.0, 2.1] {
        let k = build_k(&problem, &[start], delta, &dirs).unwrap();
        let s = build_s(&problem, &[start], delta, &dirs, &k).unwrap();
        let step = one_step(&[start], &k.matrix, &s, delta, 0.0).unwrap();
        let gain = problem.log_el_ratio(&step.estimate, &[start]).unwrap();
        assert!(
            gain >= -step.tau[0].abs() * s[0].abs(),
            "start {start}: {gain}"
        );
        assert!(gain >= 0.0, "clean smooth fixture should improve: {gain}");
    }
}

#[test]
fn directional_gradient_matches_secant() {
    let d = linear_fixture(5_000, 0.0, 0.0, 15);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let a2 = scalar_a2(&d, 2.0);
    for theta in [1.95, 2.04] {
        let g =
            directional_grad_logp(&problem, &[theta], &[1.0], &RombergOptions::default()).unwrap();
        for delta in [1e-2, 1e-3] {
            let secant = problem.log_el_ratio(&[theta + delta], &[theta]).unwrap() / delta;
            assert!(
                (g - secant).abs() <= 2.0 * delta * a2,
                "θ = {theta}, δ = {delta}: {g} vs {secant}"
            );
            assert_eq!(g.signum(), secant.signum());
        }
    }
}

#[test]
fn bisection_direction_solves_reflection_equation() {
    let d = linear_fixture(1_000, 0.0, 0.0, 16);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let iv = iv_estimate(&d);
    for theta_star in [iv - 0.04, iv + 0.025] {
        let choice =
            choose_direction_bisection(&problem, &[theta_star], (-1.0, 1.0), 0.03).unwrap();
        assert!(!choice.any_fallback());
        let lambda = problem.solve(&[theta_star]).unwrap().lambda[0];
        let mean = |t: f64| problem.moments(&[t]).unwrap().mean()[0];
        let residual = lambda * (mean(theta_star) + mean(choice.theta_tilde[0]));
        assert!(residual.abs() <= 1e-10, "{residual}");
        // the mean moment is linear in θ, so θ̃ mirrors θ* about the IV root
        assert!((choice.theta_tilde[0] - iv + (theta_star - iv)).abs() <= 1e-8);
    }
}

#[test]
fn bisection_direction_falls_back_when_multiplier_vanishes() {
    // m = z(y − xθ) = ±0.5 at θ = 1 exactly
    let sample = Sample::from_columns(&[&[1.5, 0.5, 1.5, 0.5], &[1.0; 4], &[1.0; 4]]).unwrap();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    assert_eq!(problem.solve(&[1.0]).unwrap().lambda, vec![0.0]);
    let choice = choose_direction_bisection(&problem, &[1.0], (-1.0, 1.0), 0.25).unwrap();
    assert!(choice.any_fallback());
    assert_eq!(choice.theta_tilde, vec![1.25]);
}

#[test]
fn contaminated_fixture_curvatures_and_ridge() {
    let d = linear_fixture(1_000, 0.005, 10.0, 17);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let delta = 1.0 / (1_000f64).sqrt();
    let ls = least_squares(&d.y, &column(&d.x)).unwrap().theta_hat[0];
    let k = build_k(&problem, &[ls], delta, &Directions::coordinate(1, 1.0)).unwrap();
    let h =
        hessian_directional(&problem, &[ls], &[ls + delta], &RombergOptions::default()).unwrap();
    let scaled = k.matrix.scaled(1.0 / (delta * delta));
    let from_k = invert_spd_ridge(&scaled, 0.0).unwrap();
    let from_h = invert_spd_ridge(&h.matrix, 0.0).unwrap();
    assert_eq!(from_k.ridge_used, from_h.ridge_used);
    let gap = scaled.sub(&h.matrix).frobenius_norm() / scaled.frobenius_norm();
    assert!(gap <= 0.25, "gap {gap}");

    // a curvature that is not positive definite is ridged, and the ridge is reported
    let flat = SquareMatrix::diagonal(&[scaled[(0, 0)], 0.0]);
    let ridged = invert_spd_ridge(&flat, 0.0).unwrap();
    assert!(ridged.ridge_used > 0.0);
}

#[test]
fn contaminated_iteration_reproduces_trace_pattern() {
    // the derivative-based curvature with bisection-chosen directions, as in
    // the implementation notes behind the published trace
    let config = LocalConfig {
        hessian_mode: HessianMode::Directional,
        direction_mode: DirectionMode::Bisection,
        ..Default::default()
    };
    for seed in [18, 19, 20] {
        let d = linear_fixture(1_000, 0.005, 10.0, seed);
        let sample = d.sample();
        let problem = ElProblem::new(&LinearIvModel, &sample);
        let ls = least_squares(&d.y, &column(&d.x)).unwrap().theta_hat[0];
        let fit = iterate(&problem, &[ls], &config).unwrap();
        assert!(fit.converged, "{:?}", fit.failure);
        assert!(fit.iterations() > 1 && fit.iterations() <= 50);
        let last = fit.trace.last().unwrap();
        assert!(last.tau_norm <= 1e-6);
        let tail: Vec<f64> = fit
            .trace
            .iter()
            .rev()
            .take(5)
            .map(|r| r.lambda_norm)
            .collect();
        assert!(tail.windows(2).all(|w| w[0] <= w[1]), "{tail:?}");
        for (row, next) in fit.trace.iter().zip(fit.trace.iter().skip(1)) {
            assert_eq!(row.iteration + 1, next.iteration);
        }
        assert_eq!(fit.estimate, last.estimate);
        // the directional curvature drives the iteration to the EL maximum
        assert!((fit.estimate[0] - iv_estimate(&d)).abs() <= 1e-6);
    }
}

#[test]
fn definition_form_converges_near_the_el_maximum() {
    let d = linear_fixture(1_000, 0.005, 10.0, 18);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let ls = least_squares(&d.y, &column(&d.x)).unwrap().theta_hat[0];
    let fit = iterate(&problem, &[ls], &LocalConfig::default()).unwrap();
    assert!(fit.converged, "{:?}", fit.failure);
    assert!(fit.trace.last().unwrap().tau_norm <= 1e-6);
    // the one-sided stencil is exact only for quadratics; its fixed point
    // sits O(δₙ²) from the maximum
    let delta = fit.delta;
    assert!((fit.estimate[0] - iv_estimate(&d)).abs() <= delta * delta);
}

#[test]
fn local_surface_matches_profile_definitions() {
    let d = linear_fixture(300, 0.0, 0.0, 19);
    let sample = d.sample();
    let problem = ElProblem::new(&LinearIvModel, &sample);
    let (a, b) = (
        problem.evaluate(&[2.05]).unwrap(),
        problem.evaluate(&[1.98]).unwrap(),
    );
    assert_eq!(
        LocalSurface::log_ratio(&problem, &a, &b),
        problem.log_el_ratio(&[2.05], &[1.98]).unwrap()
    );
    assert_eq!(problem.lambda_norm(&a), a.solution.lambda[0].abs());
    assert_eq!(problem.dim(), LinearIvModel.param_dim());
}
