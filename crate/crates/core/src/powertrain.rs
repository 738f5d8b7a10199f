//! Full quasi-static model of the P4/P0 parallel hybrid.
//!
//! Motor 1 (P4) drives the rear axle. The front axle is fed through the
//! gearbox by the engine and the belt-driven motor 2 (P0) on the crankshaft.
//! Every step is 1 s long; powers are in W, energies in J.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drivecycle::Step;

const GRAVITY: f64 = 9.81;
/// Tolerance used when checking component limits.
pub const LIMIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("battery overload: P_b = {p_b:.1} W exceeds V_oc^2/(4 R_i) = {limit:.1} W")]
    BatteryOverload { p_b: f64, limit: f64 },
    #[error("map query ({x:.3}, {y:.3}) outside {map} range")]
    MapRange { map: &'static str, x: f64, y: f64 },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DrivingMode {
    Hev = 1,
    Recuperation = 2,
    Ev = 3,
}

impl DrivingMode {
    pub const ALL: [DrivingMode; 3] = [DrivingMode::Hev, DrivingMode::Recuperation, DrivingMode::Ev];

    pub fn from_u3(u3: u8) -> Option<Self> {
        match u3 {
            1 => Some(Self::Hev),
            2 => Some(Self::Recuperation),
            3 => Some(Self::Ev),
            _ => None,
        }
    }

    pub fn u3(self) -> u8 {
        self as u8
    }

    /// Clutch engaged.
    pub fn c0(self) -> bool {
        self != Self::Ev
    }

    /// Engine fired.
    pub fn e0(self) -> bool {
        self == Self::Hev
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub mass: f64,
    pub wheel_radius: f64,
    pub gamma_1: f64,
    pub gamma_2: f64,
    pub gamma_diff: f64,
    /// Lower speed thresholds (m/s) of each gear, ascending, first is 0.
    pub gear_speeds: Vec<f64>,
    pub gear_ratios: Vec<f64>,
    pub eta_gb: f64,
    /// Rotational equivalent mass with the clutch closed / open.
    pub m_rot_closed: f64,
    pub m_rot_open: f64,
    /// Resistive force f0 + f2·v².
    pub drag_f0: f64,
    pub drag_f2: f64,
    pub q_max: f64,
    /// Open-circuit voltage V_oc(SoC) = c0 + c1·SoC + c2·SoC².
    pub voc_coeffs: [f64; 3],
    pub r_i: f64,
    pub p_aux: f64,
    pub h_l: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub p1_min: f64,
    pub p1_max: f64,
    pub p2_min: f64,
    pub p2_max: f64,
    pub pe_max: f64,
    pub pbrk_min: f64,
    pub t1_max: f64,
    pub t2_max: f64,
    pub te_max: f64,
    pub we_idle: f64,
    pub we_max: f64,
    pub w1_max: f64,
    pub w2_max: f64,
    /// Motored engine losses P_le = d0 + d2·ω_e².
    pub drag_d0: f64,
    pub drag_d2: f64,
    /// Willans coefficients used to synthesize the fuel map:
    /// κ0 = k00 + k02·ω², κ1 = k10 + k12·(ω − w_opt)², κ2 = k2/ω.
    pub willans_k00: f64,
    pub willans_k02: f64,
    pub willans_k10: f64,
    pub willans_k12: f64,
    pub willans_w_opt: f64,
    pub willans_k2: f64,
    /// Relative amplitude of the smooth fuel-map ripple.
    pub fuel_ripple: f64,
    /// Motor loss (kw1·ω + kw2·ω² + kc·T²)·(1 + kv·(V_ref − V)/V_ref).
    pub motor1_loss: [f64; 3],
    pub motor2_loss: [f64; 3],
    pub loss_voltage_gain: f64,
    pub loss_voltage_ref: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            mass: 1917.0,
            wheel_radius: 0.33,
            gamma_1: 8.0,
            gamma_2: 2.8,
            gamma_diff: 3.2,
            gear_speeds: vec![0.0, 4.0, 8.0, 12.5, 17.0, 22.0, 28.0],
            gear_ratios: vec![4.5, 2.9, 1.95, 1.45, 1.12, 0.90, 0.75],
            eta_gb: 0.95,
            m_rot_closed: 95.0,
            m_rot_open: 45.0,
            drag_f0: 169.0,
            drag_f2: 0.386,
            // 770 Wh at 48 V nominal.
            q_max: 770.0 * 3600.0 / 48.0,
            voc_coeffs: [41.5, 11.0, -4.0],
            r_i: 0.008,
            p_aux: 450.0,
            h_l: 42.5e6,
            soc_min: 0.3,
            soc_max: 0.8,
            soc_init: 0.55,
            p1_min: -20e3,
            p1_max: 20e3,
            p2_min: -10e3,
            p2_max: 10e3,
            pe_max: 146e3,
            pbrk_min: -250e3,
            t1_max: 200.0,
            t2_max: 50.0,
            te_max: 280.0,
            we_idle: 80.0,
            we_max: 650.0,
            w1_max: 1100.0,
            w2_max: 1820.0,
            drag_d0: 500.0,
            drag_d2: 0.05,
            willans_k00: 2500.0,
            willans_k02: 0.15,
            willans_k10: 2.45,
            willans_k12: 3e-6,
            willans_w_opt: 220.0,
            willans_k2: 6e-4,
            fuel_ripple: 0.02,
            motor1_loss: [0.15, 3e-4, 0.05],
            motor2_loss: [0.3, 5e-4, 0.8],
            loss_voltage_gain: 0.4,
            loss_voltage_ref: 46.0,
        }
    }
}

impl VehicleParams {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let p: Self = toml::from_str(text).map_err(|e| ModelError::InvalidParams(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::InvalidParams(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("parameters serialize")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: &str| Err(ModelError::InvalidParams(m.to_string()));
        let positive = [
            self.mass,
            self.wheel_radius,
            self.gamma_1,
            self.gamma_2,
            self.gamma_diff,
            self.q_max,
            self.r_i,
            self.h_l,
            self.pe_max,
            self.t1_max,
            self.t2_max,
            self.te_max,
            self.we_idle,
        ];
        if positive.iter().any(|&x| !(x > 0.0)) {
            return err("masses, radii, ratios, capacities and limits must be positive");
        }
        if !(self.eta_gb > 0.0 && self.eta_gb <= 1.0) {
            return err("eta_gb must lie in (0, 1]");
        }
        if !(self.p1_min < 0.0 && self.p1_max > 0.0 && self.p2_min < 0.0 && self.p2_max > 0.0) {
            return err("motor limits must bracket zero");
        }
        if self.pbrk_min >= 0.0 {
            return err("pbrk_min must be negative");
        }
        if self.gear_speeds.len() != self.gear_ratios.len() || self.gear_ratios.is_empty() {
            return err("gear table needs one ratio per speed threshold");
        }
        if self.gear_speeds[0] != 0.0 || self.gear_speeds.windows(2).any(|w| w[1] <= w[0]) {
            return err("gear thresholds must start at 0 and ascend");
        }
        if self.gear_ratios.iter().any(|&g| !(g > 0.0)) {
            return err("gear ratios must be positive");
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_init && self.soc_init < self.soc_max && self.soc_max <= 1.0) {
            return err("need 0 <= soc_min < soc_init < soc_max <= 1");
        }
        if !(self.we_idle < self.we_max) {
            return err("engine speed range is empty");
        }
        if (0..=20).any(|i| self.voc(i as f64 / 20.0) <= 0.0) {
            return err("open-circuit voltage must be positive on [0, 1]");
        }
        if self.m_rot_closed < 0.0 || self.m_rot_open < 0.0 || self.p_aux < 0.0 {
            return err("rotational masses and auxiliary power must be non-negative");
        }
        Ok(())
    }

    pub fn gear_ratio(&self, v: f64) -> f64 {
        let i = self.gear_speeds.partition_point(|&s| s <= v).max(1) - 1;
        self.gear_ratios[i]
    }

    /// Gear number, 1-based.
    pub fn gear(&self, v: f64) -> usize {
        self.gear_speeds.partition_point(|&s| s <= v).max(1)
    }

    pub fn voc(&self, soc: f64) -> f64 {
        let [a, b, c] = self.voc_coeffs;
        a + b * soc + c * soc * soc
    }

    pub fn energy_from_soc(&self, soc: f64) -> f64 {
        soc * self.q_max * self.voc(soc)
    }

    /// Inverts `E_b = SoC·Q_max·V_oc(SoC)` (monotone on [0, 1]).
    pub fn soc_from_energy(&self, e: f64) -> f64 {
        let [a, b, c] = self.voc_coeffs;
        let target = e / self.q_max;
        let mut s = target / self.voc(0.5);
        for _ in 0..30 {
            let f = a * s + b * s * s + c * s * s * s - target;
            let df = a + 2.0 * b * s + 3.0 * c * s * s;
            let step = f / df;
            s -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        s
    }

    pub fn e_min(&self) -> f64 {
        self.energy_from_soc(self.soc_min)
    }

    pub fn e_max(&self) -> f64 {
        self.energy_from_soc(self.soc_max)
    }

    pub fn e_init(&self) -> f64 {
        self.energy_from_soc(self.soc_init)
    }

    pub fn engine_drag(&self, we: f64) -> f64 {
        self.drag_d0 + self.drag_d2 * we * we
    }

    pub fn willans(&self, we: f64) -> [f64; 3] {
        let dw = we - self.willans_w_opt;
        [
            self.willans_k00 + self.willans_k02 * we * we,
            self.willans_k10 + self.willans_k12 * dw * dw,
            self.willans_k2 / we,
        ]
    }

    pub fn m_rot(&self, mode: DrivingMode) -> f64 {
        if mode.c0() {
            self.m_rot_closed
        } else {
            self.m_rot_open
        }
    }

    pub fn pe_max_at(&self, we: f64) -> f64 {
        self.pe_max.min(self.te_max * we)
    }

    pub fn p1_limits(&self, w1: f64) -> (f64, f64) {
        let t = self.t1_max * w1;
        (self.p1_min.max(-t), self.p1_max.min(t))
    }

    pub fn p2_limits(&self, w2: f64) -> (f64, f64) {
        let t = self.t2_max * w2;
        (self.p2_min.max(-t), self.p2_max.min(t))
    }

    /// Rotational speeds (ω_w, ω_1, ω_2, ω_e) in rad/s.
    pub fn rotational_speeds(&self, v: f64, mode: DrivingMode) -> Speeds {
        let ww = v / self.wheel_radius;
        let w1 = ww * self.gamma_1;
        let (we, w2) = if mode.c0() {
            let we = ww * self.gamma_diff * self.gear_ratio(v);
            (we, we * self.gamma_2)
        } else {
            (0.0, 0.0)
        };
        Speeds { ww, w1, w2, we }
    }

    /// Driver power request at the wheels for the given mode.
    ///
    /// In Recuperation mode the motored engine's drag power is added on top.
    pub fn request_power(&self, v: f64, a: f64, grade: f64, mode: DrivingMode) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        let m_tot = self.mass + self.m_rot(mode);
        let force = self.drag_f0
            + self.drag_f2 * v * v
            + m_tot * a
            + self.mass * GRAVITY * grade.sin();
        let mut p = force * v;
        if mode == DrivingMode::Recuperation {
            let we = self.rotational_speeds(v, mode).we;
            p += self.engine_drag(we);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Speeds {
    pub ww: f64,
    pub w1: f64,
    pub w2: f64,
    pub we: f64,
}

/// Regular 2-D grid with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major: `z[i * y.len() + j]` at `(x[i], y[j])`.
    pub z: Vec<f64>,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
        .collect()
}

fn bracket(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    let i = axis.partition_point(|&a| a <= x).clamp(1, n - 1) - 1;
    let t = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, t.clamp(0.0, 1.0))
}

impl Grid2 {
    pub fn tabulate(x: Vec<f64>, y: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Self {
        let z = x
            .iter()
            .flat_map(|&xi| y.iter().map(move |&yj| (xi, yj)))
            .map(|(xi, yj)| f(xi, yj))
            .collect();
        Self { x, y, z }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.z[i * self.y.len() + j]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let tol = 1e-9;
        x >= self.x[0] - tol
            && x <= self.x[self.x.len() - 1] + tol
            && y >= self.y[0] - tol
            && y <= self.y[self.y.len() - 1] + tol
    }

    /// Bilinear interpolation; the query is clamped to the grid.
    pub fn interp(&self, x: f64, y: f64) -> f64 {
        let (i, tx) = bracket(&self.x, x);
        let (j, ty) = bracket(&self.y, y);
        let z00 = self.at(i, j);
        let z01 = self.at(i, j + 1);
        let z10 = self.at(i + 1, j);
        let z11 = self.at(i + 1, j + 1);
        let lo = z00 + (z01 - z00) * ty;
        let hi = z10 + (z11 - z10) * ty;
        lo + (hi - lo) * tx
    }

    /// CSV with the `y` axis as header row and the `x` axis as first column.
    pub fn write_csv<W: Write>(&self, mut w: W, corner: &str) -> std::io::Result<()> {
        write!(w, "{corner}")?;
        for y in &self.y {
            write!(w, ",{y}")?;
        }
        writeln!(w)?;
        for (i, x) in self.x.iter().enumerate() {
            write!(w, "{x}")?;
            for j in 0..self.y.len() {
                write!(w, ",{}", self.at(i, j))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::InvalidParams(m);
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty grid file".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let y = header
            .split(',')
            .skip(1)
            .map(parse)
            .collect::<Result<Vec<_>, _>>()?;
        let (mut x, mut z) = (Vec::new(), Vec::new());
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals = line.split(',').map(parse).collect::<Result<Vec<_>, _>>()?;
            if vals.len() != y.len() + 1 {
                return Err(bad(format!("grid row has {} columns", vals.len())));
            }
            x.push(vals[0]);
            z.extend_from_slice(&vals[1..]);
        }
        if x.len() < 2 || y.len() < 2 {
            return Err(bad("grid needs at least 2x2 nodes".into()));
        }
        Ok(Self { x, y, z })
    }
}

/// Motor loss map on (T, ω) at two open-circuit voltages; losses are
/// interpolated linearly in V between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MotorMap {
    pub v_lo: f64,
    pub v_hi: f64,
    pub lo: Grid2,
    pub hi: Grid2,
    pub t_max: f64,
}

impl MotorMap {
    fn synthetic(k: [f64; 3], t_max: f64, w_max: f64, p: &VehicleParams) -> Self {
        let (v_lo, v_hi) = (40.0, 52.0);
        let layer = |v: f64| {
            let scale = 1.0 + p.loss_voltage_gain * (p.loss_voltage_ref - v) / p.loss_voltage_ref;
            Grid2::tabulate(linspace(-t_max, t_max, 41), linspace(0.0, w_max, 46), |t, w| {
                (k[0] * w + k[1] * w * w + k[2] * t * t) * scale
            })
        };
        Self {
            v_lo,
            v_hi,
            lo: layer(v_lo),
            hi: layer(v_hi),
            t_max,
        }
    }

    /// Torque used for a mechanical power at speed ω (0 at standstill).
    pub fn torque(p_m: f64, w: f64) -> f64 {
        if w > 0.0 {
            p_m / w
        } else {
            0.0
        }
    }

    /// Losses at the two voltage layers for mechanical power `p_m`.
    pub fn layers(&self, p_m: f64, w: f64) -> (f64, f64) {
        let t = Self::torque(p_m, w);
        (self.lo.interp(t, w), self.hi.interp(t, w))
    }

    pub fn voltage_weight(&self, voc: f64) -> f64 {
        (voc - self.v_lo) / (self.v_hi - self.v_lo)
    }

    pub fn blend(layers: (f64, f64), weight: f64) -> f64 {
        layers.0 + weight * (layers.1 - layers.0)
    }

    pub fn loss(&self, p_m: f64, w: f64, voc: f64) -> f64 {
        Self::blend(self.layers(p_m, w), self.voltage_weight(voc))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMaps {
    /// Fuel mass flow (kg/s) on (ω_e, T_e).
    pub fuel: Grid2,
    pub motor1: MotorMap,
    pub motor2: MotorMap,
}

impl ComponentMaps {
    /// Maps generated from the Willans and loss forms in `params`, with a
    /// smooth ripple on the fuel map that vanishes at zero torque.
    pub fn synthetic(p: &VehicleParams) -> Self {
        let ripple = p.fuel_ripple;
        let fuel = Grid2::tabulate(
            linspace(p.we_idle, p.we_max, 33),
            linspace(0.0, p.te_max, 29),
            |w, t| {
                let [k0, k1, k2] = p.willans(w);
                let pe = t * w;
                let wobble = 1.0
                    + ripple
                        * (std::f64::consts::PI * t / p.te_max).sin()
                        * (w / 50.0).cos();
                (k0 + k1 * pe + k2 * pe * pe) / p.h_l * wobble
            },
        );
        Self {
            fuel,
            motor1: MotorMap::synthetic(p.motor1_loss, p.t1_max, p.w1_max, p),
            motor2: MotorMap::synthetic(p.motor2_loss, p.t2_max, p.w2_max, p),
        }
    }

    /// Fuel mass flow in kg/s with the engine on.
    pub fn fuel_rate(&self, we: f64, te: f64) -> Result<f64, ModelError> {
        if !self.fuel.contains(we, te) {
            return Err(ModelError::MapRange {
                map: "fuel",
                x: we,
                y: te,
            });
        }
        Ok(self.fuel.interp(we, te).max(0.0))
    }
}

/// Inputs and derived component powers for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlDecision {
    pub u1: f64,
    pub u2: f64,
    pub mode: DrivingMode,
    pub p_req: f64,
    pub p_m1: f64,
    pub p_m2: f64,
    pub p_me: f64,
    /// Friction brake power (≤ 0) at the u1 node.
    pub p_brk: f64,
    pub p_gb_e: f64,
    pub p_gb_2: f64,
    /// Front-axle power the chosen mode cannot route (> 0 means the engine
    /// would be needed but is off).
    pub deficit: f64,
}

impl ControlDecision {
    /// Power balance residual at the u1 node.
    pub fn balance_residual(&self) -> f64 {
        self.p_req - (self.p_m1 + self.p_gb_e + self.p_gb_2 + self.p_brk) - self.deficit
    }
}

/// Applies the two power splits.
///
/// The front axle receives `P_req·(1 − u1)`; `u2` gives motor 2 its share at
/// gearbox level and the remainder goes to the engine (traction) or the
/// friction brake (braking). Motor 2's direction follows the sign of its own
/// gearbox-level power.
pub fn split_powers(p_req: f64, u1: f64, u2: f64, mode: DrivingMode, eta: f64) -> ControlDecision {
    let p_m1 = p_req * u1;
    let front = p_req * (1.0 - u1);
    let mut d = ControlDecision {
        u1,
        u2,
        mode,
        p_req,
        p_m1,
        p_m2: 0.0,
        p_me: 0.0,
        p_brk: 0.0,
        p_gb_e: 0.0,
        p_gb_2: 0.0,
        deficit: 0.0,
    };
    if mode == DrivingMode::Ev {
        if front < 0.0 {
            d.p_brk = front;
        } else {
            d.deficit = front;
        }
        return d;
    }
    d.p_gb_2 = front * u2;
    d.p_m2 = if d.p_gb_2 >= 0.0 {
        d.p_gb_2 / eta
    } else {
        d.p_gb_2 * eta
    };
    let rest = front * (1.0 - u2);
    if front >= 0.0 {
        if mode == DrivingMode::Hev {
            d.p_gb_e = rest;
            d.p_me = rest / eta;
        } else {
            d.deficit = rest;
        }
    } else {
        d.p_brk = rest;
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryState {
    pub e_b: f64,
    pub soc: f64,
    pub voc: f64,
}

impl BatteryState {
    pub fn from_energy(e_b: f64, p: &VehicleParams) -> Self {
        let soc = p.soc_from_energy(e_b);
        Self {
            e_b,
            soc,
            voc: p.voc(soc),
        }
    }
}

/// Electrical power drawn at the battery terminals.
pub fn battery_power(p_m1: f64, l1: f64, p_m2: f64, l2: f64, p_aux: f64) -> f64 {
    (p_m1 + l1) + (p_m2 + l2) + p_aux
}

/// Thévenin battery: returns (P_sb, I_b) for terminal power `p_b`.
pub fn battery_response(p_b: f64, voc: f64, r_i: f64) -> Result<(f64, f64), ModelError> {
    let disc = voc * voc - 4.0 * r_i * p_b;
    if disc < 0.0 {
        return Err(ModelError::BatteryOverload {
            p_b,
            limit: voc * voc / (4.0 * r_i),
        });
    }
    let i = (voc - disc.sqrt()) / (2.0 * r_i);
    Ok((p_b + r_i * i * i, i))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Violation {
    Motor1Limit,
    Motor2Limit,
    EngineLimit,
    EngineSpeed,
    BrakeLimit,
    ModeDeficit,
    BatteryLow,
    BatteryHigh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub fuel_kg: f64,
    pub e_next: f64,
    pub p_sb: f64,
    pub i_b: f64,
    pub violations: Vec<Violation>,
}

impl StepResult {
    pub fn feasible(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn fuel_g(&self) -> f64 {
        self.fuel_kg * 1e3
    }
}

/// The full plant: parameters plus component maps.
#[derive(Debug, Clone)]
pub struct FullModel {
    pub params: VehicleParams,
    pub maps: ComponentMaps,
}

impl FullModel {
    pub fn new(params: VehicleParams) -> Self {
        let maps = ComponentMaps::synthetic(&params);
        Self { params, maps }
    }

    /// One-step battery update for given motor powers.
    pub fn battery_step(
        &self,
        p_m1: f64,
        p_m2: f64,
        w1: f64,
        w2: f64,
        state: &BatteryState,
    ) -> Result<(f64, f64, f64), ModelError> {
        let l1 = self.maps.motor1.loss(p_m1, w1, state.voc);
        let l2 = self.maps.motor2.loss(p_m2, w2, state.voc);
        let p_b = battery_power(p_m1, l1, p_m2, l2, self.params.p_aux);
        let (p_sb, i_b) = battery_response(p_b, state.voc, self.params.r_i)?;
        Ok((state.e_b - p_sb, p_sb, i_b))
    }

    /// Limit checks that do not depend on the battery state.
    pub fn component_violations(&self, d: &ControlDecision, s: &Speeds) -> Vec<Violation> {
        let p = &self.params;
        let mut out = Vec::new();
        let (lo1, hi1) = p.p1_limits(s.w1);
        if d.p_m1 < lo1 - LIMIT_TOL || d.p_m1 > hi1 + LIMIT_TOL {
            out.push(Violation::Motor1Limit);
        }
        if d.mode.c0() {
            let (lo2, hi2) = p.p2_limits(s.w2);
            if d.p_m2 < lo2 - LIMIT_TOL || d.p_m2 > hi2 + LIMIT_TOL {
                out.push(Violation::Motor2Limit);
            }
        }
        if d.mode == DrivingMode::Hev {
            if s.we < p.we_idle - 1e-9 || s.we > p.we_max + 1e-9 {
                out.push(Violation::EngineSpeed);
            }
            if d.p_me < -LIMIT_TOL || d.p_me > p.pe_max_at(s.we) + LIMIT_TOL {
                out.push(Violation::EngineLimit);
            }
        }
        if d.mode == DrivingMode::Recuperation && s.we <= 0.0 {
            out.push(Violation::EngineSpeed);
        }
        if d.p_brk < p.pbrk_min - LIMIT_TOL || d.p_brk > LIMIT_TOL {
            out.push(Violation::BrakeLimit);
        }
        if d.deficit > LIMIT_TOL {
            out.push(Violation::ModeDeficit);
        }
        out
    }

    /// Fuel mass over one 1 s step; the engine speed is clamped into the map
    /// so an out-of-range request still burns fuel (and is flagged elsewhere).
    pub fn step_fuel(&self, d: &ControlDecision, we: f64) -> f64 {
        if d.mode != DrivingMode::Hev {
            return 0.0;
        }
        let p = &self.params;
        let we = we.clamp(p.we_idle, p.we_max);
        let te = (d.p_me.max(0.0) / we).min(p.te_max);
        self.maps.fuel.interp(we, te).max(0.0)
    }

    /// Simulates one 1 s step of the full model.
    pub fn simulate_step(
        &self,
        step: &Step,
        d: &ControlDecision,
        state: &BatteryState,
    ) -> Result<StepResult, ModelError> {
        let s = self.params.rotational_speeds(step.v, d.mode);
        let mut violations = self.component_violations(d, &s);
        let fuel_kg = self.step_fuel(d, s.we);
        let (e_next, p_sb, i_b) = self.battery_step(d.p_m1, d.p_m2, s.w1, s.w2, state)?;
        if e_next < self.params.e_min() - 1e-6 {
            violations.push(Violation::BatteryLow);
        }
        if e_next > self.params.e_max() + 1e-6 {
            violations.push(Violation::BatteryHigh);
        }
        Ok(StepResult {
            fuel_kg,
            e_next,
            p_sb,
            i_b,
            violations,
        })
    }
}
