mod common;

use shiftshare::dynamics::{build_event_design, fit_iv_event_study, Window};
use shiftshare::regression::RegressionSpec;
use shiftshare::simulator::TruthParams;

use common::*;

#[test]
fn single_post_period_matches_static_fit_on_common_sample() {
    let w = world(&recovery_config(), &TruthParams::default());
    let mut b = baseline(&w);
    let ny = b.frame.calendar.n_years;
    let y = b.frame.get("y_all").unwrap();
    let trimmed: Vec<f64> = y.iter().enumerate().map(|(r, &v)| if r % ny == ny - 1 { f64::NAN } else { v }).collect();
    b.frame.insert("y_trim", trimmed).unwrap();

    let spec = RegressionSpec::baseline("y_trim");
    let stat = spec.fit(&b.frame).unwrap();
    let design = build_event_design(&b.frame, "m", &spec.instruments, Window::new(-1, 0).unwrap()).unwrap();
    let es = fit_iv_event_study(&b.frame, &design, &spec).unwrap();
    assert_eq!(es.fit.n_obs, stat.n_obs);
    let mu0 = es.coefs.iter().find(|c| c.j == 0).unwrap();
    assert!((mu0.mu - stat.coef[0]).abs() < 1e-9 * stat.coef[0].abs().max(1.0), "{} vs {}", mu0.mu, stat.coef[0]);
    assert!((mu0.se - stat.se()[0]).abs() < 1e-9 * stat.se()[0]);
}

#[test]
fn simulated_event_study_is_flat_then_steps_to_phi() {
    let params = TruthParams::default();
    let w = world(&recovery_config(), &params);
    let b = baseline(&w);
    let spec = RegressionSpec::baseline("y_all");
    let inst = vec!["b".to_string(), "b_sigma".to_string()];
    let design = build_event_design(&b.frame, "m", &inst, Window::new(-3, 3).unwrap()).unwrap();
    let es = fit_iv_event_study(&b.frame, &design, &spec).unwrap();
    for c in es.coefs.iter().filter(|c| c.j != -1) {
        let target = if c.j >= 0 { params.phi } else { 0.0 };
        assert!((c.mu - target).abs() < 3.0 * c.se, "j = {}: {} ± {}", c.j, c.mu, c.se);
    }
}
