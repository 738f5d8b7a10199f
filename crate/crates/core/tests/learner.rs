use hevopt::learner::{fit, scripted_replay, settling_time, Learner, ModeBuffer, ReplayConfig};
use hevopt::solver::Clarabel;
use hevopt::{ConvexModel, DrivingMode, FullModel, VehicleParams};

fn labelled(threshold: f64, v: f64) -> ModeBuffer {
    let mut b = ModeBuffer::new(100);
    for i in 0..40 {
        let p = 500.0 * i as f64;
        let mode = if p >= threshold { DrivingMode::Hev } else { DrivingMode::Ev };
        b.push(p, v, mode, i as f64);
    }
    b
}

#[test]
fn separable_buffer_gives_the_midpoint() {
    let b = labelled(7e3, 14.0);
    let r = fit(&b, 1.0, &[], 800.0, 20e3, &Clarabel::default());
    assert!((r.p_crit - 6750.0).abs() < 50.0, "{}", r.p_crit);
    assert!(r.m[0] >= 1e5 * r.m[1]);
    // A weak slack penalty buys a flatter separator with some margin
    // violations; a strong one enforces the hard margin.
    assert!(!r.separable);
    let hard = fit(&b, 100.0, &[], 800.0, 20e3, &Clarabel::default());
    assert!(hard.separable, "{hard:?}");
    assert!((hard.p_crit - 6750.0).abs() < 50.0);
}

#[test]
fn estimate_is_clamped_to_motor_limit() {
    let mut b = ModeBuffer::new(10);
    b.push(25e3, 14.0, DrivingMode::Ev, 0.0);
    b.push(30e3, 14.0, DrivingMode::Hev, 1.0);
    let r = fit(&b, 1.0, &[], 800.0, 20e3, &Clarabel::default());
    assert_eq!(r.p_crit, 20e3);
}

#[test]
fn overlapping_labels_are_tolerated() {
    let mut b = labelled(7e3, 14.0);
    b.push(2e3, 14.0, DrivingMode::Hev, 50.0);
    b.push(15e3, 14.0, DrivingMode::Ev, 51.0);
    let r = fit(&b, 1.0, &[], 800.0, 20e3, &Clarabel::default());
    assert!(!r.separable);
    assert!(r.slack_hev > 0.0 && r.slack_ev > 0.0);
    assert!((r.p_crit - 6750.0).abs() < 1500.0, "{}", r.p_crit);
}

#[test]
fn vanished_costate_overrides_the_fit() {
    let mut l = Learner::new(100, 1.0, 800.0, 20e3);
    for (i, s) in labelled(7e3, 14.0).iter().enumerate() {
        l.push(s.p_req, s.v, if s.hev { DrivingMode::Hev } else { DrivingMode::Ev }, i as f64);
    }
    for _ in 0..9 {
        l.observe_lambda(0.0);
    }
    let r = l.fit(&Clarabel::default());
    assert!(r.zero_lambda);
    assert_eq!(l.p_crit, 20e3);
    l.observe_lambda(2.5);
    l.fit(&Clarabel::default());
    assert!(l.p_crit < 8e3);
}

#[test]
fn replay_settles_on_the_true_threshold() {
    let params = VehicleParams::default();
    let plant = FullModel::new(params.clone());
    let model = ConvexModel::fit(&plant.maps, &params).unwrap();
    let cfg = ReplayConfig {
        n_b: 25,
        ..ReplayConfig::default()
    };
    let lambda = vec![3.0; 200];
    let trace = scripted_replay(&lambda, &cfg, 100.0, &model, &params, &Clarabel::default()).unwrap();
    let truth = trace[0].p_crit_true.unwrap();
    assert!(truth > 0.0 && truth < 20e3);
    let settled = settling_time(&trace, 0, trace.len(), cfg.p_step).expect("settles");
    assert!(settled <= cfg.n_b + cfg.fit_period, "settled at {settled}");
}
