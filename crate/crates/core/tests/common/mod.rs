#![allow(dead_code)]

use std::f64::consts::PI;

use hevopt::dp::DpGrid;
use hevopt::drivecycle::integrate_distance;
use hevopt::powertrain::{split_powers, BatteryState};
use hevopt::{ConvexModel, DriveCycle, DrivingMode, FullModel, VehicleParams};

pub fn models() -> (FullModel, ConvexModel) {
    let plant = FullModel::new(VehicleParams::default());
    let model = ConvexModel::fit(&plant.maps, &plant.params).unwrap();
    (plant, model)
}

/// Two minutes of rolling traffic up a steady 3 % grade. The request never
/// drops below a few kW, so motor 1 can always recharge and no grid state
/// is a dead end.
pub fn rolling_cycle() -> DriveCycle {
    let v: Vec<f64> = (0..=120)
        .map(|t| 11.0 + 1.5 * (2.0 * PI * t as f64 / 40.0).sin())
        .collect();
    let elev = integrate_distance(&v).iter().map(|s| 0.03 * s).collect();
    DriveCycle::new(v.clone(), v.clone(), v, elev).unwrap()
}

fn lerp(table: &[f64], grid: &DpGrid, e: f64) -> f64 {
    let last = table.len() - 1;
    let x = ((e - grid.e_min) / grid.de()).clamp(0.0, last as f64);
    let i = (x.floor() as usize).min(last - 1);
    let t = x - i as f64;
    (1.0 - t) * table[i] + t * table[i + 1]
}

/// Best (cost, fuel, next energy) over every grid control from `e`,
/// evaluated through the plant's public step function.
fn best_control(model: &FullModel, grid: &DpGrid, cycle: &DriveCycle, k: usize, e: f64, next: &[f64]) -> Option<(f64, f64, f64)> {
    let p = &model.params;
    let st = cycle.step(k);
    let state = BatteryState::from_energy(e, p);
    let mut best: Option<(f64, f64, f64)> = None;
    for mode in DrivingMode::ALL {
        let p_req = p.request_power(st.v, st.a, st.grade, mode);
        let n2 = if mode.c0() { grid.n_u } else { 1 };
        for i1 in 0..grid.n_u {
            for i2 in 0..n2 {
                let d = split_powers(p_req, grid.split(i1), grid.split(i2), mode, p.eta_gb);
                let Ok(r) = model.simulate_step(&st, &d, &state) else {
                    continue;
                };
                if !r.violations.is_empty() {
                    continue;
                }
                let cost = r.fuel_kg + lerp(next, grid, r.e_next);
                if best.is_none_or(|b| cost < b.0) {
                    best = Some((cost, r.fuel_kg, r.e_next));
                }
            }
        }
    }
    best
}

pub struct Oracle {
    pub cost_to_go: Vec<Vec<f64>>,
    pub total_cost: f64,
}

pub fn brute_force(model: &FullModel, grid: &DpGrid, cycle: &DriveCycle) -> Oracle {
    let n = cycle.steps();
    let e0 = model.params.e_init();
    let mut v = vec![vec![f64::INFINITY; grid.n_e]; n + 1];
    for i in 0..grid.n_e {
        v[n][i] = grid.terminal_cost(e0, grid.energy(i));
    }
    for k in (0..n).rev() {
        for i in 0..grid.n_e {
            let (cost, _, _) = best_control(model, grid, cycle, k, grid.energy(i), &v[k + 1]).unwrap_or_else(|| panic!("no control at step {k} node {i}"));
            v[k][i] = cost;
        }
    }
    let mut e = e0;
    let mut fuel = 0.0;
    for k in 0..n {
        let (_, f, next) = best_control(model, grid, cycle, k, e, &v[k + 1]).unwrap();
        fuel += f;
        e = next;
    }
    Oracle {
        cost_to_go: v,
        total_cost: fuel + grid.terminal_cost(e0, e),
    }
}

