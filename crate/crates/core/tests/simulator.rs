use nalgebra::{DVector, Matrix3, Vector3};
use wpv_core::regression::{ols, Design};
use wpv_core::sim::{generate, Scenario, SimConfig};

fn var(x: &DVector<f64>) -> f64 {
    let m = x.mean();
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn cov(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let (mx, my) = (x.mean(), y.mean());
    x.iter().zip(y.iter()).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn big(scenario: Scenario) -> SimConfig {
    SimConfig {
        n_persons: 1_000_000,
        k_times: 4,
        phi2: 10.0,
        scenario,
        seed: 31,
        ..SimConfig::default()
    }
}

/// Population covariance of (Y*, A*, L*) at each occasion, propagated
/// through the recursion in reduced form.
fn analytic_within_cov(k_times: usize) -> Vec<Matrix3<f64>> {
    let ly: Vector3<f64> = Vector3::new(0.2, 0.2, 0.5);
    let yy: Vector3<f64> = Vector3::new(0.4, 0.4, 0.1);
    let ay: Vector3<f64> = yy * 0.2 + ly * 0.3 + Vector3::new(0.0, 0.4, 0.0);
    let m = Matrix3::from_rows(&[yy.transpose(), ay.transpose(), ly.transpose()]);
    let g = Matrix3::new(1.0, 0.0, 0.0, 0.2, 1.0, 0.3, 0.0, 0.0, 1.0);
    let mut c = Matrix3::from_element(3.0) + Matrix3::identity() * 7.0;
    let mut out = vec![c];
    for _ in 0..k_times {
        c = m * c * m.transpose() + g * g.transpose() * 5.0;
        out.push(c);
    }
    out
}

#[test]
fn within_variances_follow_the_recursion() {
    let p = generate(&big(Scenario::Clean)).unwrap();
    let want = analytic_within_cov(4);
    for v in 0..3 {
        for k in 0..=4 {
            let x = p.true_within[v].column(k).into_owned();
            let s2 = var(&x);
            assert!((s2 / want[k][(v, v)] - 1.0).abs() < 0.01, "variable {v} time {k}: {s2}");
        }
    }
    // close to 10 early on, drifting upward toward the stationary value
    assert!((want[1][(0, 0)] / 10.0 - 1.0).abs() < 0.03);
    assert!(want[4][(0, 0)] > 12.0);
}

#[test]
fn observed_baseline_variance_adds_trait_variance() {
    let p = generate(&big(Scenario::Clean)).unwrap();
    let y0 = p.observed.series(0).column(0).into_owned();
    assert!((var(&y0) / 20.0 - 1.0).abs() < 0.01, "{}", var(&y0));
}

#[test]
fn initial_covariance_is_recovered() {
    let p = generate(&big(Scenario::Clean)).unwrap();
    let c: Vec<DVector<f64>> = (0..3).map(|v| p.true_within[v].column(0).into_owned()).collect();
    for a in 0..3 {
        for b in 0..3 {
            let want = if a == b { 10.0 } else { 3.0 };
            let got = cov(&c[a], &c[b]);
            assert!((got / want - 1.0).abs() < 0.01, "({a},{b}): {got}");
        }
    }
    let t: Vec<DVector<f64>> = (0..3).map(|v| p.true_traits.column(v).into_owned()).collect();
    assert!((var(&t[0]) / 10.0 - 1.0).abs() < 0.01);
    assert!((cov(&t[0], &t[1]) / 3.0 - 1.0).abs() < 0.02);
}

#[test]
fn quadratic_confounding_is_recoverable() {
    let p = generate(&big(Scenario::QuadraticConfounding)).unwrap();
    let w = &p.true_within;
    for k in 1..=4 {
        let mut d = Design::with_intercept(p.observed.n_persons());
        let y = w[0].column(k).into_owned();
        d.push("Y", y.clone());
        d.push("Y2", y.map(|v| v * v));
        d.push("A_prev", w[1].column(k - 1).into_owned());
        d.push("L", w[2].column(k).into_owned());
        let fit = ols(&d, &w[1].column(k).into_owned(), "check").unwrap();
        let q = fit.coefficient("Y2").unwrap();
        assert!((q / 0.08 - 1.0).abs() < 0.05, "time {k}: {q}");
        assert!((fit.coefficient("Y").unwrap() - 0.2).abs() < 0.01);
    }
}

#[test]
fn measurement_error_has_the_configured_variance() {
    let mut c = big(Scenario::MeasurementError10);
    c.n_persons = 200_000;
    let p = generate(&c).unwrap();
    for v in 0..3 {
        let e = DVector::from_fn(c.n_persons, |i, _| {
            p.observed.series(v)[(i, 2)] - p.true_traits[(i, v)] - p.true_within[v][(i, 2)]
        });
        assert!((var(&e) / 2.0 - 1.0).abs() < 0.02, "{}", var(&e));
    }
}

#[test]
fn timevarying_loadings_break_the_additive_decomposition() {
    let c = SimConfig {
        n_persons: 100,
        scenario: Scenario::TimevaryingLoadings,
        ..SimConfig::default()
    };
    let p = generate(&c).unwrap();
    let mut max_gap: f64 = 0.0;
    for v in 0..3 {
        for i in 0..100 {
            for k in 0..5 {
                let gap = p.observed.series(v)[(i, k)] - p.true_traits[(i, v)] - p.true_within[v][(i, k)];
                max_gap = max_gap.max(gap.abs());
            }
        }
    }
    assert!(max_gap > 0.1);
}
