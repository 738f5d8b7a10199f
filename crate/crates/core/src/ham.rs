//! Real-time level: pointwise minimization of the Hamiltonian
//! `H = P_f + s·P_sb` on the convex surrogate.
//!
//! The continuous splits are searched on a uniform grid per driving mode and
//! the mode with the smallest minimum wins. `s ≥ 0` is the equivalence
//! factor handed down by the MPC (fuel power per unit of battery source
//! power).

use thiserror::Error;

use crate::convex::{ConvexError, ConvexModel, LocalModel};
use crate::cop::{hev_possible, RECUP_MIN_SPEED};
use crate::powertrain::{split_powers, ControlDecision, DrivingMode, Speeds, VehicleParams};

pub const DEFAULT_DU: f64 = 0.01;
const FEAS_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum HamError {
    #[error("grid resolution {0} outside (0, 0.5]")]
    Resolution(f64),
    #[error("equivalence factor {0} is not finite")]
    Lambda(f64),
    #[error("no mode switch: {0:?} is optimal for every request")]
    NoSwitch(DrivingMode),
    #[error(transparent)]
    Model(#[from] ConvexError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamQuery {
    /// Request with the clutch closed (W); Recuperation adds engine drag.
    pub p_req: f64,
    /// Request with the clutch open (W).
    pub p_req_open: f64,
    pub v: f64,
    pub lambda: f64,
    pub du: f64,
    /// Admissible battery source power for this step (W).
    pub p_sb_range: (f64, f64),
}

impl HamQuery {
    pub fn new(v: f64, a: f64, grade: f64, lambda: f64, params: &VehicleParams) -> Self {
        Self {
            p_req: params.request_power(v, a, grade, DrivingMode::Hev),
            p_req_open: params.request_power(v, a, grade, DrivingMode::Ev),
            v,
            lambda,
            du: DEFAULT_DU,
            p_sb_range: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Constant-speed query: both clutch states see the same request.
    pub fn steady(p_req: f64, v: f64, lambda: f64) -> Self {
        Self {
            p_req,
            p_req_open: p_req,
            v,
            lambda,
            du: DEFAULT_DU,
            p_sb_range: (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// Restricts the source power so that a 1 s step keeps `e_b` in bounds.
    pub fn within_energy(mut self, e_b: f64, params: &VehicleParams) -> Self {
        self.p_sb_range = (e_b - params.e_max(), e_b - params.e_min());
        self
    }

    fn validate(&self) -> Result<(), HamError> {
        if !(self.du > 0.0 && self.du <= 0.5) {
            return Err(HamError::Resolution(self.du));
        }
        if !self.lambda.is_finite() {
            return Err(HamError::Lambda(self.lambda));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HamResult {
    pub decision: ControlDecision,
    /// Minimum per mode in HEV, Recuperation, EV order; `+∞` when the mode
    /// is excluded or has no feasible grid point.
    pub h: [f64; 3],
    pub mode: DrivingMode,
    pub p_f: f64,
    pub p_sb: f64,
    /// No grid point was feasible; `decision` violates limits by
    /// `violation` watts in total.
    pub saturated: bool,
    pub violation: f64,
}

impl HamResult {
    pub fn h_min(&self) -> f64 {
        self.h.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// One mode's grid problem.
struct ModeGrid<'a> {
    mode: DrivingMode,
    p_req: f64,
    local: LocalModel,
    p1: (f64, f64),
    p2: (f64, f64),
    pe_max: f64,
    params: &'a VehicleParams,
}

#[derive(Debug, Clone, Copy)]
struct Point {
    decision: ControlDecision,
    p_f: f64,
    p_sb: f64,
    h: f64,
    violation: f64,
}

impl ModeGrid<'_> {
    fn new<'a>(
        mode: DrivingMode,
        q: &HamQuery,
        model: &ConvexModel,
        params: &'a VehicleParams,
    ) -> Result<ModeGrid<'a>, HamError> {
        let speeds = params.rotational_speeds(q.v, mode);
        let p_req = match mode {
            DrivingMode::Hev => q.p_req,
            DrivingMode::Recuperation => q.p_req + params.engine_drag(speeds.we),
            DrivingMode::Ev => q.p_req_open,
        };
        Ok(ModeGrid {
            mode,
            p_req,
            local: model.at(&speeds)?,
            p1: params.p1_limits(speeds.w1),
            p2: if mode.c0() {
                params.p2_limits(speeds.w2)
            } else {
                (0.0, 0.0)
            },
            pe_max: if mode.e0() { params.pe_max_at(speeds.we) } else { 0.0 },
            params,
        })
    }

    fn eval(&self, u1: f64, u2: f64, q: &HamQuery) -> Point {
        let p = self.params;
        let d = split_powers(self.p_req, u1, u2, self.mode, p.eta_gb);
        let excess = |x: f64, (lo, hi): (f64, f64)| (lo - x).max(0.0) + (x - hi).max(0.0);
        let p_f = self.local.fuel_power(d.p_me, self.mode.e0());
        let p_sb = self.local.source_power(d.p_m1, d.p_m2, p.p_aux);
        let violation = excess(d.p_m1, self.p1)
            + excess(d.p_m2, self.p2)
            + (d.p_me - self.pe_max).max(0.0)
            + (p.pbrk_min - d.p_brk).max(0.0)
            + d.deficit.max(0.0)
            + excess(p_sb, q.p_sb_range);
        Point {
            decision: d,
            p_f,
            p_sb,
            h: p_f + q.lambda * p_sb,
            violation,
        }
    }

    /// Best feasible point and least-violating point, scanning u1 then u2
    /// in ascending order (first minimum wins).
    fn search(&self, q: &HamQuery, nodes: &[f64]) -> (Option<Point>, Point) {
        let u2_nodes: &[f64] = if self.mode.c0() { nodes } else { &[0.0] };
        let mut best: Option<Point> = None;
        let mut least: Option<Point> = None;
        for &u1 in nodes {
            for &u2 in u2_nodes {
                let pt = self.eval(u1, u2, q);
                if pt.violation <= FEAS_TOL {
                    if best.map_or(true, |b| pt.h < b.h) {
                        best = Some(pt);
                    }
                } else if least.map_or(true, |l| {
                    pt.violation < l.violation || (pt.violation == l.violation && pt.h < l.h)
                }) {
                    least = Some(pt);
                }
            }
        }
        let least = best.or(least).expect("grid has at least one node");
        (best, least)
    }
}

fn grid_nodes(du: f64) -> Vec<f64> {
    let n = (2.0 / du).round().max(1.0) as usize + 1;
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

/// Modes the vehicle can physically be in at speed `v`.
pub fn admissible_modes(v: f64, params: &VehicleParams) -> [bool; 3] {
    let hev = hev_possible(v, params);
    [hev, hev && v >= RECUP_MIN_SPEED, true]
}

/// Minimizes the Hamiltonian over the split grid of every admissible mode.
/// Ties between modes go to EV, then Recuperation, then HEV.
pub fn minimize_hamiltonian(
    q: &HamQuery,
    model: &ConvexModel,
    params: &VehicleParams,
) -> Result<HamResult, HamError> {
    q.validate()?;
    let nodes = grid_nodes(q.du);
    let allowed = admissible_modes(q.v, params);
    let mut h = [f64::INFINITY; 3];
    let mut chosen: Option<Point> = None;
    let mut fallback: Option<Point> = None;
    for idx in [2, 1, 0] {
        if !allowed[idx] {
            continue;
        }
        let grid = ModeGrid::new(DrivingMode::ALL[idx], q, model, params)?;
        let (best, least) = grid.search(q, &nodes);
        if let Some(b) = best {
            h[idx] = b.h;
            if chosen.map_or(true, |c| b.h < c.h) {
                chosen = Some(b);
            }
        }
        if fallback.map_or(true, |f| {
            least.violation < f.violation || (least.violation == f.violation && least.h < f.h)
        }) {
            fallback = Some(least);
        }
    }
    let (pt, saturated) = match chosen {
        Some(c) => (c, false),
        None => (fallback.expect("EV is always admissible"), true),
    };
    Ok(HamResult {
        decision: pt.decision,
        h,
        mode: pt.decision.mode,
        p_f: pt.p_f,
        p_sb: pt.p_sb,
        saturated,
        violation: if saturated { pt.violation } else { 0.0 },
    })
}

/// Recomputes `P_f + s·P_sb` of a decision on the surrogate.
pub fn hamiltonian_at(
    d: &ControlDecision,
    v: f64,
    lambda: f64,
    model: &ConvexModel,
    params: &VehicleParams,
) -> Result<f64, HamError> {
    let local = model.at(&params.rotational_speeds(v, d.mode))?;
    let p_f = local.fuel_power(d.p_me, d.mode.e0());
    let p_sb = local.source_power(d.p_m1, d.p_m2, params.p_aux);
    Ok(p_f + lambda * p_sb)
}

/// Analytic HEV/EV switching request for a single lossless motor, unit
/// gearbox efficiency and no auxiliary load, with fuel
/// `κ0 + κ1·P_e + κ2·P_e²` and source power `r1·P_m + r2·P_m²`.
///
/// Equating the minimized HEV Hamiltonian with the EV one gives a
/// quadratic in the request whose discriminant is `4s²r2²·κ0(κ2 + s·r2)`;
/// the root with positive switching power is returned. For `s ≤ 0`
/// electric driving is never more expensive and EV wins everywhere.
pub fn critical_power(lambda: f64, kappa: [f64; 3], r1: f64, r2: f64) -> Result<f64, HamError> {
    if !lambda.is_finite() {
        return Err(HamError::Lambda(lambda));
    }
    let [k0, k1, k2] = kappa;
    if lambda <= 0.0 || r2 <= 0.0 {
        return Err(HamError::NoSwitch(DrivingMode::Ev));
    }
    let radicand = k0 * (k2 + lambda * r2);
    if radicand < 0.0 {
        return Err(HamError::NoSwitch(DrivingMode::Hev));
    }
    Ok(((k1 - lambda * r1) + 2.0 * radicand.sqrt()) / (2.0 * lambda * r2))
}

/// [`critical_power`] with the coefficients of the surrogate at the HEV
/// operating speeds of `v`.
pub fn critical_power_closed_form(
    lambda: f64,
    speeds: &Speeds,
    model: &ConvexModel,
) -> Result<f64, HamError> {
    let local = model.at(speeds)?;
    critical_power(lambda, local.kappa, local.battery.r1_plus, local.battery.r2_plus)
}

/// Optimal mode over an ascending grid of steady requests at one speed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeScan {
    pub p_req: Vec<f64>,
    pub modes: Vec<DrivingMode>,
}

impl ModeScan {
    /// Whether HEV/EV form a single threshold: no EV above any HEV point.
    pub fn is_threshold(&self) -> bool {
        let first_hev = self.modes.iter().position(|&m| m == DrivingMode::Hev);
        match first_hev {
            Some(i) => self.modes[i..].iter().all(|&m| m != DrivingMode::Ev),
            None => true,
        }
    }

    /// First request at which HEV is optimal.
    pub fn threshold(&self) -> Option<f64> {
        self.modes
            .iter()
            .position(|&m| m == DrivingMode::Hev)
            .map(|i| self.p_req[i])
    }
}

pub fn mode_scan(
    v: f64,
    lambda: f64,
    p_req: &[f64],
    du: f64,
    model: &ConvexModel,
    params: &VehicleParams,
) -> Result<ModeScan, HamError> {
    let modes = p_req
        .iter()
        .map(|&p| {
            let q = HamQuery {
                du,
                ..HamQuery::steady(p, v, lambda)
            };
            minimize_hamiltonian(&q, model, params).map(|r| r.mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModeScan {
        p_req: p_req.to_vec(),
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::powertrain::FullModel;

    fn setup() -> (ConvexModel, VehicleParams) {
        let p = VehicleParams::default();
        let full = FullModel::new(p.clone());
        (ConvexModel::fit(&full.maps, &p).unwrap(), p)
    }

    #[test]
    fn grid_has_201_nodes_by_default() {
        let n = grid_nodes(DEFAULT_DU);
        assert_eq!(n.len(), 201);
        assert_eq!(n[0], -1.0);
        assert_eq!(n[200], 1.0);
        assert!(n[100].abs() < 1e-12);
    }

    #[test]
    fn free_electricity_drives_electric() {
        let (m, p) = setup();
        let r = minimize_hamiltonian(&HamQuery::steady(8e3, 12.0, 0.0), &m, &p).unwrap();
        assert_eq!(r.mode, DrivingMode::Ev);
        assert!(!r.saturated);
    }

    #[test]
    fn decision_reproduces_minimum() {
        let (m, p) = setup();
        for (preq, s) in [(5e3, 2.5), (25e3, 2.5), (-12e3, 2.0), (15e3, 3.5)] {
            let r = minimize_hamiltonian(&HamQuery::steady(preq, 14.0, s), &m, &p).unwrap();
            let h = hamiltonian_at(&r.decision, 14.0, s, &m, &p).unwrap();
            assert!((h - r.h_min()).abs() <= 1e-9 * r.h_min().abs().max(1.0));
            assert!(r.decision.balance_residual().abs() < 1e-6);
        }
    }

    #[test]
    fn adding_a_constant_does_not_move_the_argmin() {
        let (m, p) = setup();
        let mut shifted = p.clone();
        shifted.p_aux += 300.0;
        let q = HamQuery::steady(12e3, 14.0, 2.6);
        // The extra auxiliary load enters P_sb through the battery
        // quadratic, so only a zero-curvature battery gives a pure shift.
        let mut lin = m.clone();
        lin.battery.r2_plus = 0.0;
        lin.battery.r2_minus = 0.0;
        let a_lin = minimize_hamiltonian(&q, &lin, &p).unwrap();
        let b_lin = minimize_hamiltonian(&q, &lin, &shifted).unwrap();
        assert_eq!(a_lin.decision.u1, b_lin.decision.u1);
        assert_eq!(a_lin.decision.u2, b_lin.decision.u2);
        assert_eq!(a_lin.mode, b_lin.mode);
    }

    #[test]
    fn recuperation_needs_motion() {
        let (m, p) = setup();
        let r = minimize_hamiltonian(&HamQuery::steady(-2e3, 0.5, 2.5), &m, &p).unwrap();
        assert!(r.h[1].is_infinite());
        assert!(r.h[0].is_infinite());
    }

    #[test]
    fn hard_braking_prefers_recuperation() {
        let (m, p) = setup();
        let v = 14.0;
        let we = p.rotational_speeds(v, DrivingMode::Hev).we;
        let preq = p.p1_min - p.engine_drag(we) - 8e3;
        let r = minimize_hamiltonian(&HamQuery::steady(preq, v, 2.5), &m, &p).unwrap();
        assert_eq!(r.mode, DrivingMode::Recuperation);
    }

    #[test]
    fn excessive_request_saturates() {
        let (m, p) = setup();
        let r = minimize_hamiltonian(&HamQuery::steady(200e3, 14.0, 2.5), &m, &p).unwrap();
        assert!(r.saturated);
        assert!(r.violation > 0.0);
    }

    #[test]
    fn energy_bounds_restrict_discharge() {
        let (m, p) = setup();
        let q = HamQuery::steady(8e3, 12.0, 0.0).within_energy(p.e_min() + 100.0, &p);
        let r = minimize_hamiltonian(&q, &m, &p).unwrap();
        assert!(r.p_sb <= 100.0 + 1e-6);
        assert_eq!(r.mode, DrivingMode::Hev);
    }

    #[test]
    fn bad_queries_are_rejected() {
        let (m, p) = setup();
        let mut q = HamQuery::steady(1e3, 10.0, 2.0);
        q.du = 0.0;
        assert_eq!(minimize_hamiltonian(&q, &m, &p), Err(HamError::Resolution(0.0)));
        q.du = 0.01;
        q.lambda = f64::NAN;
        assert!(matches!(minimize_hamiltonian(&q, &m, &p), Err(HamError::Lambda(_))));
    }

    #[test]
    fn closed_form_root_at_zero() {
        // c̃ = 0 with κ1 < s·r1 puts the switch at zero request.
        let (k0, k2, r1, r2, s): (f64, f64, f64, f64, f64) = (1000.0, 1e-5, 1.0, 2e-5, 2.0);
        let k1 = s * r1 - 2.0 * (k0 * (k2 + s * r2)).sqrt();
        let p = critical_power(s, [k0, k1, k2], r1, r2).unwrap();
        assert!(p.abs() < 1e-6, "{p}");
    }

    #[test]
    fn closed_form_balances_hamiltonians() {
        let (kappa, r1, r2) = ([1800.0, 2.6, 2e-5], 1.02, 1.5e-5);
        for s in [1.5, 2.5, 3.5] {
            let p = critical_power(s, kappa, r1, r2).unwrap();
            // HEV optimum over the split versus pure electric.
            let [k0, k1, k2] = kappa;
            let a = (k2 + s * r2) * p * p;
            let b = -(2.0 * k2 * p + k1 - s * r1) * p;
            let c = k2 * p * p + k1 * p + k0;
            let h1 = c - b * b / (4.0 * a);
            let h3 = s * (r1 * p + r2 * p * p);
            assert!((h1 - h3).abs() < 1e-6 * h3.abs(), "{h1} {h3}");
        }
    }

    #[test]
    fn closed_form_decreases_with_lambda() {
        let (kappa, r1, r2) = ([1800.0, 2.6, 2e-5], 1.02, 1.5e-5);
        let ps: Vec<f64> = (1..=40)
            .map(|i| critical_power(0.5 + 0.1 * i as f64, kappa, r1, r2).unwrap())
            .collect();
        assert!(ps.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(critical_power(0.0, kappa, r1, r2), Err(HamError::NoSwitch(DrivingMode::Ev)));
    }

    #[test]
    fn scan_at_city_speed_is_a_threshold() {
        let (m, p) = setup();
        let v = 50.0 / 3.6;
        assert_eq!(p.gear(v), 4);
        let grid: Vec<f64> = (0..=40).map(|i| 500.0 * i as f64).collect();
        for s in [2.3, 2.6, 3.0] {
            let scan = mode_scan(v, s, &grid, DEFAULT_DU, &m, &p).unwrap();
            assert!(scan.is_threshold(), "s = {s}: {:?}", scan.modes);
        }
    }
}
