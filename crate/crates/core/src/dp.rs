//! Dynamic-programming benchmark on the full model.
//!
//! The single state is the battery energy on a uniform grid; the controls
//! are the two power splits on `[-1, 1]` and the driving mode. Cost-to-go is
//! interpolated linearly in energy, infeasible transitions cost `+∞`, and
//! the terminal charge constraint is a steep linear penalty below the
//! initial energy.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::drivecycle::{DriveCycle, Step};
use crate::powertrain::{
    battery_power, battery_response, split_powers, BatteryState, ControlDecision, DrivingMode,
    FullModel, MotorMap,
};

/// Terminal penalty slope (kg per J below the initial energy). Far above any
/// plausible fuel value of electric energy (~6e-8 kg/J).
pub const TERMINAL_SLOPE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("grid needs at least 3 points per axis (got n_e = {n_e}, n_u = {n_u})")]
    Grid { n_e: usize, n_u: usize },
    #[error("no feasible control at step {step} from E_b = {e_b:.1} J")]
    NoFeasiblePolicy { step: usize, e_b: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpGrid {
    pub n_e: usize,
    pub n_u: usize,
    pub e_min: f64,
    pub e_max: f64,
    pub terminal_slope: f64,
}

impl DpGrid {
    pub fn new(model: &FullModel, n_e: usize, n_u: usize) -> Result<Self, DpError> {
        if n_e < 3 || n_u < 3 {
            return Err(DpError::Grid { n_e, n_u });
        }
        Ok(Self {
            n_e,
            n_u,
            e_min: model.params.e_min(),
            e_max: model.params.e_max(),
            terminal_slope: TERMINAL_SLOPE,
        })
    }

    /// Accuracy/runtime trade used by default: 201 energy points, 21 split points.
    pub fn standard(model: &FullModel) -> Self {
        Self::new(model, 201, 21).expect("valid default grid")
    }

    /// Benchmark grid for judging online controllers: 401 energy points,
    /// 81 split points. A 0.1 split step leaves the benchmark about 1 %
    /// above what a finely gridded online controller can reach.
    pub fn fine(model: &FullModel) -> Self {
        Self::new(model, 401, 81).expect("valid fine grid")
    }

    pub fn de(&self) -> f64 {
        (self.e_max - self.e_min) / (self.n_e - 1) as f64
    }

    pub fn energy(&self, i: usize) -> f64 {
        self.e_min + self.de() * i as f64
    }

    pub fn split(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.n_u - 1) as f64
    }

    pub fn terminal_cost(&self, e0: f64, e: f64) -> f64 {
        self.terminal_slope * (e0 - e).max(0.0)
    }

    /// Controls in tie-break order: u1 index, then u2 index, then mode.
    pub fn controls(&self) -> impl Iterator<Item = (usize, usize, DrivingMode)> + '_ {
        (0..self.n_u).flat_map(move |i1| {
            (0..self.n_u).flat_map(move |i2| DrivingMode::ALL.into_iter().map(move |m| (i1, i2, m)))
        })
    }

    /// Linear interpolation of a grid table; `+∞` outside `band`, the
    /// feasible energy interval of that sample.
    ///
    /// Next to an infeasible node the feasible neighbour's value is used
    /// as is. Blending with `+∞` instead would let infeasibility creep one
    /// node per step into the feasible region whenever the per-step energy
    /// change is below a grid cell (e.g. the auxiliary drain at standstill);
    /// the band keeps the true feasibility boundary exact.
    pub fn interp(&self, table: &[f64], e: f64, band: (f64, f64)) -> f64 {
        if e < band.0 - 1e-6 || e > band.1 + 1e-6 {
            return f64::INFINITY;
        }
        let x = (e - self.e_min) / self.de();
        let last = (self.n_e - 1) as f64;
        if !(-1e-9..=last + 1e-9).contains(&x) {
            return f64::INFINITY;
        }
        let x = x.clamp(0.0, last);
        let i = (x.floor() as usize).min(self.n_e - 2);
        let t = x - i as f64;
        let (a, b) = (table[i], table[i + 1]);
        // Exact node hits must not see an infeasible neighbour.
        if t < 1e-9 {
            return a;
        }
        if t > 1.0 - 1e-9 {
            return b;
        }
        match (a.is_finite(), b.is_finite()) {
            (true, true) => (1.0 - t) * a + t * b,
            (true, false) => a,
            (false, true) => b,
            (false, false) => f64::INFINITY,
        }
    }
}

/// One second of the optimal rollout.
#[derive(Debug, Clone, Serialize)]
pub struct DpStep {
    pub t: f64,
    pub v: f64,
    /// Request with the HEV formula, comparable across modes.
    pub p_req: f64,
    pub u1: f64,
    pub u2: f64,
    pub mode: u8,
    pub e_b: f64,
    pub fuel_kg: f64,
}

#[derive(Debug, Clone)]
pub struct DpSolution {
    pub grid: DpGrid,
    pub e0: f64,
    /// Cost-to-go per sample (steps + 1 tables), kg.
    pub cost_to_go: Vec<Vec<f64>>,
    /// Feasible energy interval per sample.
    pub bands: Vec<(f64, f64)>,
    /// Index into `grid.controls()` of the optimal control per step and node.
    pub policy: Vec<Vec<u32>>,
    pub rollout: Vec<DpStep>,
    pub e_final: f64,
    pub total_fuel_kg: f64,
    /// Fuel plus terminal penalty, kg.
    pub total_cost: f64,
}

/// A control with everything that does not depend on the battery state.
#[derive(Debug, Clone)]
struct Candidate {
    index: u32,
    decision: ControlDecision,
    fuel: f64,
    l1: (f64, f64),
    l2: (f64, f64),
}

fn candidates(model: &FullModel, grid: &DpGrid, st: &Step) -> Vec<Candidate> {
    let p = &model.params;
    let mut out = Vec::new();
    for (index, (i1, i2, mode)) in grid.controls().enumerate() {
        // u2 is unused with the clutch open; keep only its first node.
        if !mode.c0() && i2 > 0 {
            continue;
        }
        let p_req = p.request_power(st.v, st.a, st.grade, mode);
        let d = split_powers(p_req, grid.split(i1), grid.split(i2), mode, p.eta_gb);
        let speeds = p.rotational_speeds(st.v, mode);
        if !model.component_violations(&d, &speeds).is_empty() {
            continue;
        }
        out.push(Candidate {
            index: index as u32,
            fuel: model.step_fuel(&d, speeds.we),
            l1: model.maps.motor1.layers(d.p_m1, speeds.w1),
            l2: model.maps.motor2.layers(d.p_m2, speeds.w2),
            decision: d,
        });
    }
    out
}

/// Next energy for a candidate ignoring the energy bounds; `None` on overload.
fn successor(model: &FullModel, c: &Candidate, state: &BatteryState) -> Option<f64> {
    let maps = &model.maps;
    let l1 = MotorMap::blend(c.l1, maps.motor1.voltage_weight(state.voc));
    let l2 = MotorMap::blend(c.l2, maps.motor2.voltage_weight(state.voc));
    let p_b = battery_power(c.decision.p_m1, l1, c.decision.p_m2, l2, model.params.p_aux);
    let (p_sb, _) = battery_response(p_b, state.voc, model.params.r_i).ok()?;
    Some(state.e_b - p_sb)
}

/// Next energy for a candidate, or `None` on overload or a bound violation.
fn transition(model: &FullModel, grid: &DpGrid, c: &Candidate, state: &BatteryState) -> Option<f64> {
    let e = successor(model, c, state)?;
    (e >= grid.e_min - 1e-6 && e <= grid.e_max + 1e-6).then_some(e)
}

/// Best control from a state: (cost, candidate position, next energy).
fn best(
    model: &FullModel,
    grid: &DpGrid,
    cands: &[Candidate],
    state: &BatteryState,
    next: &[f64],
    band: (f64, f64),
) -> Option<(f64, usize, f64)> {
    let mut out: Option<(f64, usize, f64)> = None;
    for (j, c) in cands.iter().enumerate() {
        let Some(e) = transition(model, grid, c, state) else {
            continue;
        };
        let cost = c.fuel + grid.interp(next, e, band);
        if cost.is_finite() && out.map_or(true, |(b, _, _)| cost < b) {
            out = Some((cost, j, e));
        }
    }
    out
}

/// Feasible energy interval per sample, by backward propagation of the
/// bound lines: the lowest state that still has a control reaching the next
/// lower line, and likewise from above.
fn feasible_bands(model: &FullModel, grid: &DpGrid, cands: &[Vec<Candidate>]) -> Vec<(f64, f64)> {
    let n = cands.len();
    let mut bands = vec![(grid.e_min, grid.e_max); n + 1];
    // Energy E with successor(E) = target for control c (fixed point; the
    // source power barely depends on E through the open-circuit voltage).
    let solve = |c: &Candidate, target: f64| -> Option<f64> {
        let mut e = target;
        for _ in 0..4 {
            let state = BatteryState::from_energy(e.clamp(grid.e_min, grid.e_max), &model.params);
            let next = successor(model, c, &state)?;
            e += target - next;
        }
        Some(e)
    };
    for k in (0..n).rev() {
        let (lo_next, hi_next) = bands[k + 1];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &cands[k] {
            if let Some(e) = solve(c, lo_next) {
                lo = lo.min(e);
            }
            if let Some(e) = solve(c, hi_next) {
                hi = hi.max(e);
            }
        }
        bands[k] = (lo.max(grid.e_min), hi.min(grid.e_max));
    }
    bands
}

/// Node index ranges that can influence the rollout from `e0`, found by a
/// forward pass: each range holds the interpolation neighbours of every
/// successor of the previous range. Monotonicity of `E − P_sb(E)` in `E` for
/// a fixed control makes the node extremes sufficient, provided successors
/// are taken before the bound check and clamped afterwards.
fn reachable(model: &FullModel, grid: &DpGrid, e0: f64, cands: &[Vec<Candidate>]) -> Vec<(usize, usize)> {
    let de = grid.de();
    let bracket = |lo: f64, hi: f64| -> (usize, usize) {
        let a = ((lo - grid.e_min) / de).floor().max(0.0) as usize;
        let b = ((hi - grid.e_min) / de).ceil().min((grid.n_e - 1) as f64) as usize;
        (a.min(grid.n_e - 1), b.max(a.min(grid.n_e - 1)))
    };
    let mut ranges = vec![bracket(e0, e0)];
    for cs in cands {
        let (a, b) = *ranges.last().unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in [a, b] {
            let state = BatteryState::from_energy(grid.energy(i), &model.params);
            for c in cs {
                if let Some(e) = successor(model, c, &state) {
                    lo = lo.min(e);
                    hi = hi.max(e);
                }
            }
        }
        if lo > hi {
            ranges.push((0, grid.n_e - 1));
        } else {
            ranges.push(bracket(lo.max(grid.e_min), hi.min(grid.e_max)));
        }
    }
    ranges
}

/// Solves the benchmark on the cycle's measured speed `v`.
pub fn dp_solve(cycle: &DriveCycle, model: &FullModel, grid: &DpGrid) -> Result<DpSolution, DpError> {
    solve_impl(cycle, model, grid, true)
}

/// Same as [`dp_solve`] but sweeps the full energy grid at every step.
pub fn dp_solve_unpruned(
    cycle: &DriveCycle,
    model: &FullModel,
    grid: &DpGrid,
) -> Result<DpSolution, DpError> {
    solve_impl(cycle, model, grid, false)
}

fn solve_impl(
    cycle: &DriveCycle,
    model: &FullModel,
    grid: &DpGrid,
    prune: bool,
) -> Result<DpSolution, DpError> {
    let p = &model.params;
    let n = cycle.steps();
    let e0 = p.e_init();
    let cands: Vec<Vec<Candidate>> = (0..n)
        .into_par_iter()
        .map(|k| candidates(model, grid, &cycle.step(k)))
        .collect();
    let bands = feasible_bands(model, grid, &cands);
    let ranges = if prune {
        reachable(model, grid, e0, &cands)
    } else {
        vec![(0, grid.n_e - 1); n + 1]
    };
    let states: Vec<BatteryState> = (0..grid.n_e)
        .map(|i| BatteryState::from_energy(grid.energy(i), p))
        .collect();

    let mut cost_to_go = vec![vec![f64::INFINITY; grid.n_e]; n + 1];
    let mut policy = vec![vec![u32::MAX; grid.n_e]; n];
    for (i, c) in cost_to_go[n].iter_mut().enumerate() {
        *c = grid.terminal_cost(e0, grid.energy(i));
    }
    for k in (0..n).rev() {
        let (a, b) = ranges[k];
        let (head, tail) = cost_to_go.split_at_mut(k + 1);
        let next = &tail[0];
        let row: Vec<(f64, u32)> = (a..=b)
            .into_par_iter()
            .map(|i| match best(model, grid, &cands[k], &states[i], next, bands[k + 1]) {
                Some((cost, j, _)) => (cost, cands[k][j].index),
                None => (f64::INFINITY, u32::MAX),
            })
            .collect();
        for (off, (cost, idx)) in row.into_iter().enumerate() {
            head[k][a + off] = cost;
            policy[k][a + off] = idx;
        }
    }

    let mut rollout = Vec::with_capacity(n);
    let mut e = e0;
    let mut fuel = 0.0;
    for k in 0..n {
        let state = BatteryState::from_energy(e, p);
        let (_, j, e_next) = best(model, grid, &cands[k], &state, &cost_to_go[k + 1], bands[k + 1])
            .ok_or(DpError::NoFeasiblePolicy { step: k, e_b: e })?;
        let c = &cands[k][j];
        let st = cycle.step(k);
        rollout.push(DpStep {
            t: cycle.t[k],
            v: st.v,
            p_req: p.request_power(st.v, st.a, st.grade, DrivingMode::Hev),
            u1: c.decision.u1,
            u2: c.decision.u2,
            mode: c.decision.mode.u3(),
            e_b: e,
            fuel_kg: c.fuel,
        });
        fuel += c.fuel;
        e = e_next;
    }
    Ok(DpSolution {
        grid: grid.clone(),
        e0,
        cost_to_go,
        bands,
        policy,
        rollout,
        e_final: e,
        total_fuel_kg: fuel,
        total_cost: fuel + grid.terminal_cost(e0, e),
    })
}

impl DpSolution {
    /// Signed terminal charge deviation relative to the start.
    pub fn charge_deviation(&self) -> f64 {
        (self.e_final - self.e0) / self.e0
    }

    pub fn write_rollout_csv<W: Write>(&self, w: W) -> Result<(), DpError> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.rollout {
            out.serialize(s).map_err(std::io::Error::other)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// One point of the optimal-mode scatter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub t: f64,
    pub p_req: f64,
    pub v: f64,
    pub mode: u8,
}

pub fn mode_scatter(sol: &DpSolution) -> Vec<ScatterPoint> {
    sol.rollout
        .iter()
        .map(|s| ScatterPoint {
            t: s.t,
            p_req: s.p_req,
            v: s.v,
            mode: s.mode,
        })
        .collect()
}

pub fn write_scatter_csv<W: Write>(points: &[ScatterPoint], w: W) -> Result<(), DpError> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p).map_err(std::io::Error::other)?;
    }
    out.flush()?;
    Ok(())
}

/// Rollout indices where the energy is within one grid step of a bound.
pub fn bound_activations(sol: &DpSolution) -> Vec<usize> {
    let de = sol.grid.de();
    sol.rollout
        .iter()
        .enumerate()
        .filter(|(_, s)| (s.e_b - sol.grid.e_min).abs() < de || (sol.grid.e_max - s.e_b).abs() < de)
        .map(|(i, _)| i)
        .collect()
}

/// Splits the scatter into runs separated by bound activations. Activation
/// samples themselves are dropped.
pub fn split_windows(points: &[ScatterPoint], activations: &[usize]) -> Vec<Vec<ScatterPoint>> {
    let mut out = vec![Vec::new()];
    let mut act = activations.iter().peekable();
    for (i, p) in points.iter().enumerate() {
        if act.peek() == Some(&&i) {
            act.next();
            if !out.last().unwrap().is_empty() {
                out.push(Vec::new());
            }
            continue;
        }
        out.last_mut().unwrap().push(*p);
    }
    out.retain(|w| !w.is_empty());
    out
}

/// Best constant threshold separating HEV (at or above) from EV (below) in
/// `p_req`; returns (threshold, misclassified fraction of the HEV/EV points).
/// Other modes are ignored. `None` when there are no HEV or EV points.
pub fn best_threshold(points: &[ScatterPoint]) -> Option<(f64, f64)> {
    let mut pts: Vec<(f64, bool)> = points
        .iter()
        .filter(|p| p.mode == 1 || p.mode == 3)
        .map(|p| (p.p_req, p.mode == 1))
        .collect();
    if pts.is_empty() {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pts.len();
    // Threshold just below point i: points < i are called EV.
    let hev_total = pts.iter().filter(|p| p.1).count();
    let mut hev_below = 0;
    let mut best = (pts[0].0, n - hev_total);
    for i in 0..n {
        if pts[i].1 {
            hev_below += 1;
        }
        let ev_above = (n - hev_total) - ((i + 1) - hev_below);
        let errs = hev_below + ev_above;
        let thr = if i + 1 < n {
            0.5 * (pts[i].0 + pts[i + 1].0)
        } else {
            pts[i].0 + 1.0
        };
        if errs < best.1 {
            best = (thr, errs);
        }
    }
    Some((best.0, best.1 as f64 / n as f64))
}
