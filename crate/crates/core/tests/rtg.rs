use hevopt::drivecycle::Signal;
use hevopt::rtg::generate_reference;
use hevopt::solver::Clarabel;
use hevopt::{ConvexModel, DriveCycle, FullModel, VehicleParams};

fn setup() -> (VehicleParams, ConvexModel) {
    let params = VehicleParams::default();
    let plant = FullModel::new(params.clone());
    let model = ConvexModel::fit(&plant.maps, &params).unwrap();
    (params, model)
}

fn constant(v: f64, elev: Vec<f64>) -> DriveCycle {
    let n = elev.len();
    DriveCycle::new(vec![v; n], vec![v; n], vec![v; n], elev).unwrap()
}

#[test]
fn cruise_reference_returns_to_start() {
    let (p, m) = setup();
    let cycle = constant(15.0, vec![0.0; 301]);
    let e0 = p.e_init();
    let r = generate_reference(&cycle, e0, &m, &p, &Clarabel::default()).unwrap();
    assert_eq!(r.e_b.len(), cycle.len());
    assert_eq!(r.e_b[0], e0);
    assert!((r.e_b.last().unwrap() - e0).abs() < 1.0);
    assert!(r.e_b.iter().all(|&e| e >= p.e_min() && e <= p.e_max()));
    // The energy trajectory is the integral of the planned source power.
    for (k, w) in r.e_b.windows(2).enumerate() {
        assert!((w[0] - r.solution.p_sb[k] - w[1]).abs() < 1e-6 * e0);
    }
}

#[test]
fn parked_mission_without_load_keeps_its_energy() {
    let (mut p, m) = setup();
    p.p_aux = 0.0;
    let cycle = constant(0.0, vec![0.0; 61]);
    let r = generate_reference(&cycle, p.e_init(), &m, &p, &Clarabel::default()).unwrap();
    assert!(r.e_b.iter().all(|&e| (e - p.e_init()).abs() < 1.0));
}

#[test]
fn reference_makes_room_before_a_long_descent() {
    let (p, m) = setup();
    // 200 s flat, 300 s down a 7 % grade at 15 m/s, 200 s flat.
    let elev: Vec<f64> = (0..=700)
        .map(|k| -0.07 * 15.0 * (k.clamp(200, 500) - 200) as f64)
        .collect();
    let cycle = constant(15.0, elev);
    let e0 = p.e_init();
    let r = generate_reference(&cycle, e0, &m, &p, &Clarabel::default()).unwrap();
    let (argmin, min) = r
        .e_b
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (k, &e)| if e < b.1 { (k, e) } else { b });
    assert!(min < e0 - 1e4, "battery is drawn down first: {min}");
    assert!((150..=260).contains(&argmin), "lowest point at {argmin}");
    assert!(r.e_b[500] > r.e_b[200]);
}

#[test]
fn targets_follow_position_and_hand_over_at_the_end() {
    let (p, m) = setup();
    let cycle = constant(15.0, vec![0.0; 301]);
    let e0 = p.e_init();
    let r = generate_reference(&cycle, e0, &m, &p, &Clarabel::default()).unwrap();
    let at = r.target_at(&cycle, 0, 100, Signal::VHat);
    assert!((at - r.energy_at(cycle.s[100])).abs() < 1e-9);
    assert_eq!(r.target_at(&cycle, 250, 100, Signal::VHat), e0);
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), cycle.len() + 1);
}
