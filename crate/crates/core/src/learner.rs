//! Online estimate of the critical power request.
//!
//! The real-time level's mode decisions are buffered as `(P_req, v)` pairs
//! and periodically separated by a soft-margin linear classifier whose
//! normal is forced to be (almost) parallel to the power axis, so the
//! separator is a constant request threshold.
//!
//! The classifier is solved in kW and m/s.

use std::collections::VecDeque;

use log::warn;
use serde::Serialize;

use crate::convex::ConvexModel;
use crate::ham::{minimize_hamiltonian, mode_scan, HamQuery, DEFAULT_DU};
use crate::powertrain::{DrivingMode, VehicleParams};
use crate::solver::{ConicBackend, ConicProblem};

/// Lower bound on `m1 / m2`.
pub const SLOPE_RATIO: f64 = 1e5;
pub const Q_MAX: f64 = 1e4;
/// Seconds of zero costate after which EV is always preferred.
pub const ZERO_LAMBDA_SECONDS: usize = 9;
pub const ZERO_LAMBDA_TOL: f64 = 1e-6;
const KW: f64 = 1e3;
const SLACK_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub p_req: f64,
    pub v: f64,
    /// HEV (`true`) or EV (`false`).
    pub hev: bool,
    pub t: f64,
}

/// First-in first-out buffer of labelled HEV/EV samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBuffer {
    capacity: usize,
    entries: VecDeque<Sample>,
}

impl ModeBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.entries.iter()
    }

    /// Stores HEV and EV decisions; Recuperation is ignored.
    pub fn push(&mut self, p_req: f64, v: f64, mode: DrivingMode, t: f64) {
        let hev = match mode {
            DrivingMode::Hev => true,
            DrivingMode::Ev => false,
            DrivingMode::Recuperation => return,
        };
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(Sample { p_req, v, hev, t });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierResult {
    /// Separator normal in 1/kW and s/m.
    pub m: [f64; 2],
    /// Offset in the same scaled units.
    pub q: f64,
    pub slack_hev: f64,
    pub slack_ev: f64,
    pub p_crit: f64,
    pub separable: bool,
    /// The zero-costate rule fixed `p_crit`.
    pub zero_lambda: bool,
}

impl ClassifierResult {
    fn unchanged(p_crit: f64) -> Self {
        Self {
            m: [0.0; 2],
            q: 0.0,
            slack_hev: 0.0,
            slack_ev: 0.0,
            p_crit,
            separable: false,
            zero_lambda: false,
        }
    }
}

/// Whether the last [`ZERO_LAMBDA_SECONDS`] costate samples are all zero.
pub fn lambda_vanished(recent: &[f64]) -> bool {
    recent.len() >= ZERO_LAMBDA_SECONDS
        && recent[recent.len() - ZERO_LAMBDA_SECONDS..]
            .iter()
            .all(|l| l.abs() < ZERO_LAMBDA_TOL)
}

/// Fits the separator to `buffer` and extracts the critical power, clamped
/// to `[0, p1_max]`.
///
/// Returns `prev` unchanged (with `separable = false`) when a class is
/// empty or the solver fails.
pub fn fit(
    buffer: &ModeBuffer,
    gamma: f64,
    lambda_recent: &[f64],
    prev: f64,
    p1_max: f64,
    backend: &dyn ConicBackend,
) -> ClassifierResult {
    if lambda_vanished(lambda_recent) {
        return ClassifierResult {
            p_crit: p1_max,
            zero_lambda: true,
            ..ClassifierResult::unchanged(prev)
        };
    }
    let n_hev = buffer.iter().filter(|s| s.hev).count();
    if n_hev == 0 || n_hev == buffer.len() {
        return ClassifierResult::unchanged(prev);
    }
    const M1: usize = 0;
    const M2: usize = 1;
    const Q: usize = 2;
    const NORM: usize = 3;
    let mut pb = ConicProblem::new(4 + buffer.len());
    pb.q[NORM] = 1.0;
    for (i, s) in buffer.iter().enumerate() {
        let r = 4 + i;
        pb.q[r] = gamma;
        pb.ge(vec![(r, 1.0)], 0.0);
        let z = vec![(M1, s.p_req / KW), (M2, s.v), (Q, -1.0)];
        if s.hev {
            let mut row = z;
            row.push((r, 1.0));
            pb.ge(row, 1.0);
        } else {
            let mut row = z;
            row.push((r, -1.0));
            pb.le(row, -1.0);
        }
    }
    pb.ge(vec![(M1, 1.0)], 0.0);
    pb.ge(vec![(M2, 1.0)], 0.0);
    pb.ge(vec![(M1, 1.0), (M2, -SLOPE_RATIO)], 0.0);
    pb.ge(vec![(Q, 1.0)], 0.0);
    pb.le(vec![(Q, 1.0)], Q_MAX);
    pb.soc(vec![
        (vec![(NORM, 1.0)], 0.0),
        (vec![(M1, 1.0)], 0.0),
        (vec![(M2, 1.0)], 0.0),
    ]);
    let sol = match backend.solve(&pb) {
        Ok(s) => s,
        Err(e) => {
            warn!("classifier failed, keeping previous critical power: {e}");
            return ClassifierResult::unchanged(prev);
        }
    };
    let x = &sol.x;
    let (m1, m2, q) = (x[M1].max(0.0), x[M2].max(0.0), x[Q].clamp(0.0, Q_MAX));
    let (mut slack_hev, mut slack_ev) = (0.0, 0.0);
    for (i, s) in buffer.iter().enumerate() {
        let r = x[4 + i].max(0.0);
        if s.hev {
            slack_hev += r;
        } else {
            slack_ev += r;
        }
    }
    let p_crit = if m1 > 0.0 {
        (q / m1 * KW).clamp(0.0, p1_max)
    } else {
        p1_max
    };
    if !p_crit.is_finite() {
        warn!("classifier returned a degenerate separator");
        return ClassifierResult::unchanged(prev);
    }
    ClassifierResult {
        m: [m1, m2],
        q,
        slack_hev,
        slack_ev,
        p_crit,
        separable: slack_hev + slack_ev <= SLACK_TOL,
        zero_lambda: false,
    }
}

/// Buffer, costate history and current estimate, as used in closed loop.
#[derive(Debug, Clone)]
pub struct Learner {
    pub buffer: ModeBuffer,
    pub gamma: f64,
    pub p1_max: f64,
    pub p_crit: f64,
    recent: VecDeque<f64>,
}

impl Learner {
    pub fn new(n_b: usize, gamma: f64, p_crit: f64, p1_max: f64) -> Self {
        Self {
            buffer: ModeBuffer::new(n_b),
            gamma,
            p1_max,
            p_crit,
            recent: VecDeque::with_capacity(ZERO_LAMBDA_SECONDS),
        }
    }

    /// Records the costate in force during the last second.
    pub fn observe_lambda(&mut self, lambda: f64) {
        if self.recent.len() == ZERO_LAMBDA_SECONDS {
            self.recent.pop_front();
        }
        self.recent.push_back(lambda);
    }

    pub fn push(&mut self, p_req: f64, v: f64, mode: DrivingMode, t: f64) {
        self.buffer.push(p_req, v, mode, t);
    }

    pub fn fit(&mut self, backend: &dyn ConicBackend) -> ClassifierResult {
        let recent: Vec<f64> = self.recent.iter().copied().collect();
        let res = fit(&self.buffer, self.gamma, &recent, self.p_crit, self.p1_max, backend);
        self.p_crit = res.p_crit;
        res
    }
}

/// Settings of the open-loop learning experiment.
#[derive(Debug, Clone)]
pub struct ReplayConfig {
    pub v: f64,
    /// Request lattice the samples are drawn from (W).
    pub p_min: f64,
    pub p_max: f64,
    pub p_step: f64,
    pub n_b: usize,
    pub fit_period: usize,
    pub gamma: f64,
    /// Critical power before the first fit.
    pub p_crit_init: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            v: 50.0 / 3.6,
            p_min: 0.0,
            p_max: 20e3,
            p_step: 1e3,
            n_b: 100,
            fit_period: 10,
            gamma: 1.0,
            p_crit_init: 800.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplayPoint {
    pub t: usize,
    pub lambda: f64,
    pub p_req: f64,
    pub mode: u8,
    pub p_crit: f64,
    /// Threshold of a dense request scan at this costate; `None` when HEV
    /// never wins on the scanned range.
    pub p_crit_true: Option<f64>,
}

/// Request levels of the replay lattice, visited in a low-discrepancy
/// order: step `k` picks level `(k·g) mod n` with `g` the integer nearest
/// to `n/φ` that is coprime to `n`, so every `n` consecutive samples cover
/// all levels.
pub fn replay_requests(cfg: &ReplayConfig, len: usize) -> Vec<f64> {
    let n = ((cfg.p_max - cfg.p_min) / cfg.p_step).round() as usize + 1;
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let mut g = ((n as f64 / golden).round() as usize).max(1);
    while gcd(g, n) != 1 {
        g += 1;
    }
    (0..len)
        .map(|k| cfg.p_min + cfg.p_step * ((k * g) % n) as f64)
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Open-loop learning experiment: one sample per second at constant speed,
/// labelled by the Hamiltonian minimizer under the scripted costate, with
/// a fit every `fit_period` seconds. `truth_step` is the resolution (W) of
/// the reference threshold scan.
pub fn scripted_replay(
    lambda: &[f64],
    cfg: &ReplayConfig,
    truth_step: f64,
    model: &ConvexModel,
    params: &VehicleParams,
    backend: &dyn ConicBackend,
) -> Result<Vec<ReplayPoint>, crate::ham::HamError> {
    let requests = replay_requests(cfg, lambda.len());
    let scan_grid: Vec<f64> = {
        let n = ((cfg.p_max - cfg.p_min) / truth_step).round() as usize;
        (0..=n).map(|i| cfg.p_min + truth_step * i as f64).collect()
    };
    let mut truth: Vec<(f64, Option<f64>)> = Vec::new();
    let mut learner = Learner::new(cfg.n_b, cfg.gamma, cfg.p_crit_init, params.p1_max);
    let mut out = Vec::with_capacity(lambda.len());
    for (t, (&s, &p_req)) in lambda.iter().zip(&requests).enumerate() {
        let r = minimize_hamiltonian(&HamQuery::steady(p_req, cfg.v, s), model, params)?;
        learner.observe_lambda(s);
        learner.push(p_req, cfg.v, r.mode, t as f64);
        if (t + 1) % cfg.fit_period == 0 {
            learner.fit(backend);
        }
        let p_true = match truth.iter().find(|(l, _)| *l == s) {
            Some(&(_, p)) => p,
            None => {
                let p = mode_scan(cfg.v, s, &scan_grid, DEFAULT_DU, model, params)?.threshold();
                truth.push((s, p));
                p
            }
        };
        out.push(ReplayPoint {
            t,
            lambda: s,
            p_req,
            mode: r.mode.u3(),
            p_crit: learner.p_crit,
            p_crit_true: p_true,
        });
    }
    Ok(out)
}

/// First time at or after `from` from which the estimate stays within
/// `tol` of the truth until `until` (exclusive); `None` if it never does.
pub fn settling_time(trace: &[ReplayPoint], from: usize, until: usize, tol: f64) -> Option<usize> {
    let until = until.min(trace.len());
    let ok = |p: &ReplayPoint| p.p_crit_true.is_some_and(|pt| (p.p_crit - pt).abs() <= tol);
    let mut settled = None;
    for p in &trace[from..until] {
        match (ok(p), settled) {
            (true, None) => settled = Some(p.t),
            (false, Some(_)) => settled = None,
            _ => {}
        }
    }
    settled
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::Clarabel;

    #[test]
    fn recuperation_is_not_buffered() {
        let mut b = ModeBuffer::new(3);
        b.push(-5e3, 10.0, DrivingMode::Recuperation, 0.0);
        assert!(b.is_empty());
    }

    #[test]
    fn buffer_evicts_oldest() {
        let mut b = ModeBuffer::new(3);
        for i in 0..4 {
            b.push(i as f64, 10.0, DrivingMode::Hev, i as f64);
        }
        assert_eq!(b.len(), 3);
        let ts: Vec<f64> = b.iter().map(|s| s.t).collect();
        assert_eq!(ts, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn alternating_labels_keep_arrival_order() {
        let mut b = ModeBuffer::new(10);
        for i in 0..6 {
            let mode = if i % 2 == 0 { DrivingMode::Hev } else { DrivingMode::Ev };
            b.push(1e3 * i as f64, 10.0, mode, i as f64);
        }
        let labels: Vec<bool> = b.iter().map(|s| s.hev).collect();
        assert_eq!(labels, vec![true, false, true, false, true, false]);
    }

    #[test]
    fn zero_lambda_window() {
        assert!(!lambda_vanished(&[0.0; 8]));
        assert!(lambda_vanished(&[0.0; 9]));
        let mut l = vec![0.0; 9];
        l[4] = 2.0;
        assert!(!lambda_vanished(&l));
    }

    #[test]
    fn one_class_keeps_previous_estimate() {
        let mut b = ModeBuffer::new(10);
        b.push(5e3, 10.0, DrivingMode::Hev, 0.0);
        let r = fit(&b, 1.0, &[], 4321.0, 20e3, &Clarabel::default());
        assert_eq!(r.p_crit, 4321.0);
        assert!(!r.separable);
    }

    #[test]
    fn lattice_covers_every_level_each_period() {
        let cfg = ReplayConfig::default();
        let p = replay_requests(&cfg, 63);
        for w in p.windows(21) {
            let mut levels: Vec<i64> = w.iter().map(|x| (x / 1e3).round() as i64).collect();
            levels.sort();
            assert_eq!(levels, (0..=20).collect::<Vec<_>>());
        }
    }
}
