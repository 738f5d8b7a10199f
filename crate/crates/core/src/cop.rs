//! Convex optimal control problem over a prediction window.
//!
//! Driving modes are fixed per step beforehand, which leaves a convex
//! program in the continuous split variables. Every nonlinear relation of the
//! surrogate is written as an epigraph inequality; the costate is read off
//! the duals of the battery dynamics.
//!
//! Internally powers are in kW and energies in kJ, which keeps the interior
//! point iterations well conditioned.

use log::debug;
use thiserror::Error;

use crate::convex::{active_pieces, max_affine, ConvexError, ConvexModel, LocalModel};
use crate::drivecycle::{DriveCycle, Step};
use crate::powertrain::{DrivingMode, Speeds, VehicleParams};
use crate::solver::{ConicBackend, ConicProblem, SolverError};

/// Objective weight on the engine-power slack.
pub const SLACK_WEIGHT: f64 = 1e5;
/// Slack below this (W) counts as zero.
pub const SLACK_TOL: f64 = 1e-3;
/// Recuperation needs a turning engine; below this speed it is never chosen.
pub const RECUP_MIN_SPEED: f64 = 1.0;

const KW: f64 = 1e3;
const NV: usize = 10;
const PM1: usize = 0;
const PGBE: usize = 1;
const PBRK: usize = 2;
const PM2: usize = 3;
const PL1: usize = 4;
const PL2: usize = 5;
const PSB: usize = 6;
const PF: usize = 7;
const EPS: usize = 8;
const EN: usize = 9;

#[derive(Debug, Error)]
pub enum CopError {
    #[error("empty prediction window")]
    EmptyWindow,
    #[error("window has {steps} steps but {modes} mode estimates")]
    ModeCount { steps: usize, modes: usize },
    #[error(transparent)]
    Model(#[from] ConvexError),
    #[error("solver failure: {0}")]
    Solver(#[from] SolverError),
    #[error("engine slack still active after reiteration at steps {steps:?}")]
    InfeasibleAfterSlack { steps: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopStatus {
    Optimal,
    Reiterated,
}

/// Whether the engine can run at this speed with the clutch closed.
pub fn hev_possible(v: f64, params: &VehicleParams) -> bool {
    let we = params.rotational_speeds(v, DrivingMode::Hev).we;
    v > 0.0 && we >= params.we_idle && we <= params.we_max
}

/// The control map: HEV at or above `p_crit`, Recuperation below the
/// motor-1 limit less the engine drag, EV in between.
pub fn map_mode(p_req_hat: f64, p_crit: f64, recup_threshold: f64) -> DrivingMode {
    if p_req_hat >= p_crit {
        DrivingMode::Hev
    } else if p_req_hat < recup_threshold {
        DrivingMode::Recuperation
    } else {
        DrivingMode::Ev
    }
}

/// Mode estimates for every step of `window`, using the HEV request formula.
/// Steps where the engine cannot run fall back to EV.
pub fn estimate_modes(window: &DriveCycle, p_crit: f64, params: &VehicleParams) -> Vec<DrivingMode> {
    (0..window.steps())
        .map(|k| {
            let st = window.step(k);
            let p_hat = params.request_power(st.v, st.a, st.grade, DrivingMode::Hev);
            let we = params.rotational_speeds(st.v, DrivingMode::Hev).we;
            let threshold = params.p1_min - params.engine_drag(we);
            let hev_ok = hev_possible(st.v, params);
            match map_mode(p_hat, p_crit, threshold) {
                DrivingMode::Hev if hev_ok => DrivingMode::Hev,
                DrivingMode::Recuperation if hev_ok && st.v >= RECUP_MIN_SPEED => {
                    DrivingMode::Recuperation
                }
                _ => DrivingMode::Ev,
            }
        })
        .collect()
}

/// Per-step data of the program (SI units).
#[derive(Debug, Clone)]
pub struct StepData {
    pub step: Step,
    pub mode: DrivingMode,
    pub p_req: f64,
    pub speeds: Speeds,
    pub hev_ok: bool,
    pub local: LocalModel,
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub pe_max: f64,
}

/// A fully assembled program, ready to solve.
#[derive(Debug, Clone)]
pub struct CopProgram {
    pub steps: Vec<StepData>,
    pub e0: f64,
    pub target: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub p_aux: f64,
    pub eta: f64,
    pub pbrk_min: f64,
    problem: ConicProblem,
}

#[derive(Debug, Clone)]
pub struct CopSolution {
    pub status: CopStatus,
    pub modes: Vec<DrivingMode>,
    pub p_m1: Vec<f64>,
    pub p_gb_e: Vec<f64>,
    pub p_brk: Vec<f64>,
    pub p_m2: Vec<f64>,
    pub p_l1: Vec<f64>,
    pub p_l2: Vec<f64>,
    pub p_sb: Vec<f64>,
    pub p_f: Vec<f64>,
    pub slack: Vec<f64>,
    /// Battery energy, one entry per sample (steps + 1).
    pub energy: Vec<f64>,
    /// Costate per step as a fuel-per-electric-power equivalence factor.
    pub lambda: Vec<f64>,
    /// Fuel energy plus slack penalty (J).
    pub objective: f64,
    pub iterations: u32,
}

impl CopSolution {
    pub fn horizon(&self) -> usize {
        self.p_m1.len()
    }

    /// Costate handed to the real-time level: the first-step dual.
    pub fn lambda0(&self) -> f64 {
        self.lambda[0]
    }

    pub fn slack_active(&self) -> Vec<bool> {
        self.slack.iter().map(|&e| e > SLACK_TOL).collect()
    }

    pub fn slacked_steps(&self) -> Vec<usize> {
        (0..self.slack.len()).filter(|&k| self.slack[k] > SLACK_TOL).collect()
    }

    /// Fuel energy (J) without the slack penalty.
    pub fn fuel_energy(&self) -> f64 {
        self.p_f.iter().sum()
    }
}

fn var(t: usize, k: usize) -> usize {
    NV * t + k
}

impl CopProgram {
    /// Builds the program for `window` (its `v` signal) with fixed modes.
    pub fn build(
        window: &DriveCycle,
        modes: &[DrivingMode],
        e0: f64,
        target: f64,
        model: &ConvexModel,
        params: &VehicleParams,
    ) -> Result<Self, CopError> {
        let h = window.steps();
        if h == 0 {
            return Err(CopError::EmptyWindow);
        }
        if modes.len() != h {
            return Err(CopError::ModeCount {
                steps: h,
                modes: modes.len(),
            });
        }
        let mut steps = Vec::with_capacity(h);
        for (k, &mode) in modes.iter().enumerate() {
            let st = window.step(k);
            let hev = params.rotational_speeds(st.v, DrivingMode::Hev);
            let speeds = params.rotational_speeds(st.v, mode);
            // Engine coefficients come from the closed-clutch speed so that a
            // slacked EV step still prices its engine power sensibly.
            let local = model.at(&Speeds { w2: speeds.w2, ..hev })?;
            let p2 = if mode.c0() {
                params.p2_limits(speeds.w2)
            } else {
                (0.0, 0.0)
            };
            steps.push(StepData {
                step: st,
                mode,
                p_req: params.request_power(st.v, st.a, st.grade, mode),
                speeds,
                hev_ok: hev_possible(st.v, params),
                local,
                p1: params.p1_limits(speeds.w1),
                p2,
                pe_max: if hev.we > 0.0 { params.pe_max_at(hev.we) } else { 0.0 },
            });
        }
        let e_min = params.e_min();
        let e_max = params.e_max();
        let mut prog = Self {
            steps,
            e0,
            target: target.clamp(e_min, e_max),
            e_min,
            e_max,
            p_aux: params.p_aux,
            eta: params.eta_gb,
            pbrk_min: params.pbrk_min,
            problem: ConicProblem::new(NV * h),
        };
        prog.assemble();
        Ok(prog)
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn problem(&self) -> &ConicProblem {
        &self.problem
    }

    fn assemble(&mut self) {
        let eta = self.eta;
        let aux = self.p_aux / KW;
        let pb = &mut self.problem;
        for (t, sd) in self.steps.iter().enumerate() {
            let v = |k| var(t, k);
            let preq = sd.p_req / KW;
            pb.q[v(PF)] = 1.0;
            pb.q[v(EPS)] = SLACK_WEIGHT;

            pb.ge(vec![(v(PM1), 1.0)], sd.p1.0 / KW);
            pb.le(vec![(v(PM1), 1.0)], sd.p1.1 / KW);
            pb.ge(vec![(v(PM2), 1.0)], sd.p2.0 / KW);
            pb.le(vec![(v(PM2), 1.0)], sd.p2.1 / KW);
            pb.ge(vec![(v(PBRK), 1.0)], self.pbrk_min / KW);
            pb.le(vec![(v(PBRK), 1.0)], 0.0);
            pb.ge(vec![(v(PGBE), 1.0)], 0.0);
            pb.ge(vec![(v(EPS), 1.0)], 0.0);
            // Clutch-gated engine bound with slack.
            let cap = if sd.mode.c0() { sd.pe_max / KW } else { 0.0 };
            pb.le(vec![(v(PGBE), 1.0 / eta), (v(EPS), -1.0)], cap);

            // Motor 2 covers the gearbox balance: P_m2 ≥ max(η·P_GB2, P_GB2/η)
            // with P_GB2 = P_req − P_m1 − P_GB_e − P_brk.
            for g in [eta, 1.0 / eta] {
                pb.le(
                    vec![(v(PM1), -g), (v(PGBE), -g), (v(PBRK), -g), (v(PM2), -1.0)],
                    -g * preq,
                );
            }
            // Pieces never active within the step's power limits are dropped.
            for (a, b) in active_pieces(&sd.local.pwl1, sd.p1.0, sd.p1.1) {
                pb.le(vec![(v(PM1), a), (v(PL1), -1.0)], -b / KW);
            }
            for (a, b) in active_pieces(&sd.local.pwl2, sd.p2.0, sd.p2.1) {
                pb.le(vec![(v(PM2), a), (v(PL2), -1.0)], -b / KW);
            }

            // Source power above both battery branches.
            let x: Vec<(usize, f64)> = [PM1, PL1, PM2, PL2].iter().map(|&k| (v(k), 1.0)).collect();
            let bat = sd.local.battery;
            let mut branches = vec![(bat.r1_plus, bat.r2_plus)];
            if (bat.r1_plus, bat.r2_plus) != (bat.r1_minus, bat.r2_minus) {
                branches.push((bat.r1_minus, bat.r2_minus));
            }
            for (r1, r2) in branches {
                let mut y = vec![(v(PSB), 1.0)];
                y.extend(x.iter().map(|&(j, _)| (j, -r1)));
                let y_off = -r1 * aux;
                if r2 > 0.0 {
                    pb.quad_epigraph(y, y_off, x.clone(), aux, r2 * KW, 1.0);
                } else {
                    pb.ge(y, -y_off);
                }
            }

            // Fuel power above the Willans curve of the engine's gearbox power.
            let [k0, k1, k2] = sd.local.kappa;
            let idle = if sd.mode.e0() { k0 / KW } else { 0.0 };
            let y = vec![(v(PF), 1.0), (v(PGBE), -k1 / eta)];
            if k2 > 0.0 {
                pb.quad_epigraph(y, -idle, vec![(v(PGBE), 1.0)], 0.0, k2 * KW / (eta * eta), 1.0);
            } else {
                pb.ge(y, idle);
            }

            // Battery dynamics, Δt = 1 s.
            let mut row = vec![(v(EN), 1.0), (v(PSB), 1.0)];
            let rhs = if t == 0 {
                self.e0 / KW
            } else {
                row.push((var(t - 1, EN), -1.0));
                0.0
            };
            pb.eq(row, rhs);
            pb.ge(vec![(v(EN), 1.0)], self.e_min / KW);
            pb.le(vec![(v(EN), 1.0)], self.e_max / KW);
        }
        let last = var(self.steps.len() - 1, EN);
        pb.ge(vec![(last, 1.0)], self.target / KW);
    }

    pub fn solve(&self, backend: &dyn ConicBackend) -> Result<CopSolution, CopError> {
        let sol = backend.solve(&self.problem)?;
        let h = self.horizon();
        let col = |k: usize| -> Vec<f64> { (0..h).map(|t| sol.x[var(t, k)] * KW).collect() };
        let mut energy = vec![self.e0];
        energy.extend((0..h).map(|t| sol.x[var(t, EN)] * KW));
        // The equality dual is the sensitivity of the optimum to energy
        // injected at that step: fuel saved per unit of electric energy.
        let lambda = sol.y_eq[..h].to_vec();
        debug!(
            "cop solved: horizon {h}, {} iterations, objective {:.3} kJ",
            sol.iterations, sol.objective
        );
        Ok(CopSolution {
            status: CopStatus::Optimal,
            modes: self.steps.iter().map(|s| s.mode).collect(),
            p_m1: col(PM1),
            p_gb_e: col(PGBE),
            p_brk: col(PBRK),
            p_m2: col(PM2),
            p_l1: col(PL1),
            p_l2: col(PL2),
            p_sb: col(PSB),
            p_f: col(PF),
            slack: col(EPS),
            energy,
            lambda,
            objective: sol.objective * KW,
            iterations: sol.iterations,
        })
    }

    /// Largest relative gap among epigraph inequalities whose variable has a
    /// positive cost sensitivity at the optimum. Gaps are measured in kW
    /// against `max(1 kW, |bound|)`.
    pub fn tightness_gap(&self, sol: &CopSolution) -> f64 {
        const LAMBDA_MIN: f64 = 1e-6;
        let rel = |lhs: f64, rhs: f64| (lhs - rhs) / KW / (rhs.abs() / KW).max(1.0);
        let mut worst: f64 = 0.0;
        for (t, sd) in self.steps.iter().enumerate() {
            let eta = self.eta;
            let fuel = sd.local.fuel_power(sol.p_gb_e[t] / eta, sd.mode.e0());
            worst = worst.max(rel(sol.p_f[t], fuel));
            if sol.lambda[t] <= LAMBDA_MIN {
                continue;
            }
            worst = worst.max(rel(sol.p_l1[t], max_affine(&sd.local.pwl1, sol.p_m1[t])));
            let p_b = sol.p_m1[t] + sol.p_l1[t] + sol.p_m2[t] + sol.p_l2[t] + self.p_aux;
            worst = worst.max(rel(sol.p_sb[t], sd.local.battery.source_power(p_b)));
            if sd.mode.c0() {
                worst = worst.max(rel(sol.p_l2[t], max_affine(&sd.local.pwl2, sol.p_m2[t])));
                let at_lower = sol.p_m2[t] <= sd.p2.0 + 1e-3;
                if !at_lower {
                    let gb2 = sd.p_req - sol.p_m1[t] - sol.p_gb_e[t] - sol.p_brk[t];
                    worst = worst.max(rel(sol.p_m2[t], (eta * gb2).max(gb2 / eta)));
                }
            }
        }
        worst
    }
}

/// Builds and solves the program once.
pub fn build_and_solve(
    window: &DriveCycle,
    modes: &[DrivingMode],
    e0: f64,
    target: f64,
    model: &ConvexModel,
    params: &VehicleParams,
    backend: &dyn ConicBackend,
) -> Result<CopSolution, CopError> {
    CopProgram::build(window, modes, e0, target, model, params)?.solve(backend)
}

/// Feasibility repair: steps that needed engine slack are switched to HEV
/// and the program is solved once more. An unslacked solution is returned
/// unchanged.
#[allow(clippy::too_many_arguments)]
pub fn reiterate_if_slacked(
    sol: CopSolution,
    window: &DriveCycle,
    e0: f64,
    target: f64,
    model: &ConvexModel,
    params: &VehicleParams,
    backend: &dyn ConicBackend,
) -> Result<CopSolution, CopError> {
    let slacked = sol.slacked_steps();
    if slacked.is_empty() {
        return Ok(sol);
    }
    let mut modes = sol.modes.clone();
    for &k in &slacked {
        if hev_possible(window.step(k).v, params) {
            modes[k] = DrivingMode::Hev;
        }
    }
    let mut again = build_and_solve(window, &modes, e0, target, model, params, backend)?;
    let left = again.slacked_steps();
    if !left.is_empty() {
        return Err(CopError::InfeasibleAfterSlack { steps: left });
    }
    again.status = CopStatus::Reiterated;
    Ok(again)
}

/// One MPC update: solve with the given modes and repair if needed.
pub fn solve_with_repair(
    window: &DriveCycle,
    modes: &[DrivingMode],
    e0: f64,
    target: f64,
    model: &ConvexModel,
    params: &VehicleParams,
    backend: &dyn ConicBackend,
) -> Result<CopSolution, CopError> {
    let first = build_and_solve(window, modes, e0, target, model, params, backend)?;
    reiterate_if_slacked(first, window, e0, target, model, params, backend)
}
