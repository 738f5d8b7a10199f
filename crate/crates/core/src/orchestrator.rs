//! Closed-loop mission simulation.
//!
//! Before departure the reference generator plans the battery trajectory.
//! Then, every second, the Hamiltonian minimizer acts on the measured speed
//! with the latest published costate and its decision is applied to the full
//! plant model. Every `t_s_mpc` seconds the MPC re-solves the convex program
//! on the predicted speed and publishes a new costate; in the learning
//! variant the mode decisions also feed the critical-power learner, which
//! refits every `t_s_la` seconds.
//!
//! MPC updates run synchronously inside the loop, which keeps runs
//! bit-for-bit reproducible; wall-clock times are reported separately.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::time::{Duration, Instant};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convex::ConvexModel;
use crate::cop::{build_and_solve, estimate_modes, solve_with_repair, CopError, CopStatus};
use crate::drivecycle::{DriveCycle, Signal};
use crate::ham::{minimize_hamiltonian, HamError, HamQuery, DEFAULT_DU};
use crate::learner::Learner;
use crate::powertrain::{BatteryState, DrivingMode, FullModel, ModelError};
use crate::rtg::generate_reference;
use crate::solver::ConicBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// MPC assumes HEV wherever the engine can run.
    Baseline,
    /// MPC uses the mode map with a fixed critical power.
    MapBased,
    /// MPC uses the mode map with the learned critical power.
    LbMpc,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::MapBased, Variant::LbMpc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MapBased => "map_based",
            Variant::LbMpc => "lb_mpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub variant: Variant,
    /// Prediction horizon (s).
    pub h_p: usize,
    pub t_s_mpc: usize,
    pub t_s_la: usize,
    pub n_b: usize,
    pub reiterate: bool,
    /// Critical power of the map-based variant and the learner's start (W).
    pub p_crit_init: f64,
    pub gamma: f64,
    pub du: f64,
    /// Seconds between an MPC solve and the moment its costate is used.
    pub lambda_delay: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LbMpc,
            h_p: 450,
            t_s_mpc: 2,
            t_s_la: 10,
            n_b: 100,
            reiterate: true,
            p_crit_init: 800.0,
            gamma: 1.0,
            du: DEFAULT_DU,
            lambda_delay: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Config(m.to_string()));
        if self.h_p == 0 || self.t_s_mpc == 0 || self.t_s_la == 0 {
            return bad("h_p, t_s_mpc and t_s_la must be positive");
        }
        if self.n_b == 0 {
            return bad("n_b must be positive");
        }
        if !(self.du > 0.0 && self.du <= 0.5) {
            return bad("du must lie in (0, 0.5]");
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be positive");
        }
        if !self.p_crit_init.is_finite() {
            return bad("p_crit_init must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("reference generation failed: {0}")]
    Reference(#[source] CopError),
    #[error("plant failure at t = {t} s: {source}")]
    Plant {
        t: usize,
        #[source]
        source: ModelError,
    },
    #[error("Hamiltonian minimization failed at t = {t} s: {source}")]
    Ham {
        t: usize,
        #[source]
        source: HamError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub v: f64,
    pub p_req: f64,
    pub mode: u8,
    pub u1: f64,
    pub u2: f64,
    pub p_m1: f64,
    pub p_m2: f64,
    pub p_me: f64,
    pub p_brk: f64,
    /// Battery energy at the start of the step (J).
    pub e_b: f64,
    pub soc: f64,
    pub fuel_kg: f64,
    pub fuel_cum_kg: f64,
    pub lambda: f64,
    /// Critical power of the mode map; none for the baseline.
    pub p_crit: Option<f64>,
    /// Hash of the mode estimates of the MPC solve in force.
    pub modes_hash: u64,
    /// The MPC update at this second needed engine slack.
    pub slack_event: bool,
    pub saturated: bool,
    pub deficit: f64,
    pub violations: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcRecord {
    pub t: usize,
    pub horizon: usize,
    pub target: f64,
    pub lambda: f64,
    pub status: String,
    pub slacked_steps: usize,
    pub iterations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLog {
    pub variant: Variant,
    pub steps: Vec<StepRecord>,
    pub mpc: Vec<MpcRecord>,
    pub e0: f64,
    pub e_final: f64,
    pub fuel_kg: f64,
    /// MPC updates whose first solve needed slack.
    pub slack_events: usize,
    /// MPC updates that failed and left the costate unchanged.
    pub held_updates: usize,
    pub saturated_steps: usize,
    pub violation_steps: usize,
}

impl RunLog {
    /// Costates published by successful MPC updates.
    pub fn lambda_samples(&self) -> Vec<f64> {
        self.mpc
            .iter()
            .filter(|r| r.status != "held")
            .map(|r| r.lambda)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for s in &self.steps {
            out.serialize(s)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Wall-clock statistics of a run; not part of the reproducible log.
#[derive(Debug, Clone, Default)]
pub struct RunTiming {
    pub ham_max: Duration,
    pub ham_total: Duration,
    pub mpc_max: Duration,
    pub mpc_total: Duration,
    pub mpc_updates: usize,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub timing: RunTiming,
}

fn modes_hash(modes: &[DrivingMode]) -> u64 {
    let mut h = DefaultHasher::new();
    for m in modes {
        m.u3().hash(&mut h);
    }
    h.finish()
}

pub fn run_mission(
    cycle: &DriveCycle,
    plant: &FullModel,
    model: &ConvexModel,
    config: &ControllerConfig,
    backend: &dyn ConicBackend,
) -> Result<RunOutput, RunError> {
    config.validate()?;
    let started = Instant::now();
    let params = &plant.params;
    let e0 = params.e_init();
    let reference =
        generate_reference(cycle, e0, model, params, backend).map_err(RunError::Reference)?;

    let mut learner = Learner::new(config.n_b, config.gamma, config.p_crit_init, params.p1_max);
    let mut timing = RunTiming::default();
    let mut steps = Vec::with_capacity(cycle.steps());
    let mut mpc = Vec::new();
    let mut lambda = reference.solution.lambda0();
    let mut pending: Option<(usize, f64)> = None;
    let mut hash = 0u64;
    let mut e_b = e0;
    let mut fuel_cum = 0.0;
    let (mut slack_events, mut held, mut saturated_steps, mut violation_steps) = (0, 0, 0, 0);

    for t in 0..cycle.steps() {
        let p_crit = match config.variant {
            Variant::Baseline => f64::NEG_INFINITY,
            Variant::MapBased => config.p_crit_init,
            Variant::LbMpc => learner.p_crit,
        };
        let mut slack_event = false;
        if t % config.t_s_mpc == 0 {
            let clock = Instant::now();
            let window = cycle
                .window(t, config.h_p, Signal::VHat)
                .expect("t lies inside the cycle")
                .cycle;
            if window.steps() > 0 {
                let modes = estimate_modes(&window, p_crit, params);
                let target = reference.target_at(cycle, t, config.h_p, Signal::VHat);
                let solved = if config.reiterate {
                    solve_with_repair(&window, &modes, e_b, target, model, params, backend)
                } else {
                    build_and_solve(&window, &modes, e_b, target, model, params, backend)
                };
                let mut record = MpcRecord {
                    t,
                    horizon: window.steps(),
                    target,
                    lambda,
                    status: "held".into(),
                    slacked_steps: 0,
                    iterations: 0,
                };
                match solved {
                    Ok(sol) => {
                        slack_event = sol.status == CopStatus::Reiterated || !sol.slacked_steps().is_empty();
                        record.lambda = sol.lambda0();
                        record.status = match sol.status {
                            CopStatus::Optimal => "optimal",
                            CopStatus::Reiterated => "reiterated",
                        }
                        .into();
                        record.slacked_steps = sol.slacked_steps().len();
                        record.iterations = sol.iterations;
                        hash = modes_hash(&sol.modes);
                        pending = Some((t + config.lambda_delay, sol.lambda0()));
                    }
                    Err(e) => {
                        if matches!(e, CopError::InfeasibleAfterSlack { .. }) {
                            slack_event = true;
                        }
                        warn!("MPC update at t = {t} s failed, holding costate: {e}");
                        held += 1;
                    }
                }
                slack_events += usize::from(slack_event);
                mpc.push(record);
            }
            let dt = clock.elapsed();
            timing.mpc_max = timing.mpc_max.max(dt);
            timing.mpc_total += dt;
            timing.mpc_updates += 1;
        }
        if let Some((at, l)) = pending {
            if at <= t {
                lambda = l;
                pending = None;
            }
        }

        let st = cycle.step(t);
        let clock = Instant::now();
        let query = HamQuery {
            du: config.du,
            ..HamQuery::new(st.v, st.a, st.grade, lambda, params).within_energy(e_b, params)
        };
        let ham = minimize_hamiltonian(&query, model, params).map_err(|source| RunError::Ham { t, source })?;
        let dt = clock.elapsed();
        timing.ham_max = timing.ham_max.max(dt);
        timing.ham_total += dt;

        let state = BatteryState::from_energy(e_b, params);
        let res = plant
            .simulate_step(&st, &ham.decision, &state)
            .map_err(|source| RunError::Plant { t, source })?;
        if ham.saturated {
            debug!("t = {t} s: saturated decision, {:.0} W short", ham.violation);
            saturated_steps += 1;
        }
        if !res.feasible() {
            debug!("t = {t} s: plant limits violated: {:?}", res.violations);
            violation_steps += 1;
        }
        fuel_cum += res.fuel_kg;
        let d = &ham.decision;
        steps.push(StepRecord {
            t,
            v: st.v,
            p_req: d.p_req,
            mode: ham.mode.u3(),
            u1: d.u1,
            u2: d.u2,
            p_m1: d.p_m1,
            p_m2: d.p_m2,
            p_me: d.p_me,
            p_brk: d.p_brk,
            e_b,
            soc: state.soc,
            fuel_kg: res.fuel_kg,
            fuel_cum_kg: fuel_cum,
            lambda,
            p_crit: (config.variant != Variant::Baseline).then_some(p_crit),
            modes_hash: hash,
            slack_event,
            saturated: ham.saturated,
            deficit: if ham.saturated { ham.violation } else { 0.0 },
            violations: res.violations.len() as u8,
        });
        e_b = res.e_next;

        if config.variant == Variant::LbMpc {
            learner.observe_lambda(lambda);
            learner.push(query.p_req, st.v, ham.mode, t as f64);
            if (t + 1) % config.t_s_la == 0 {
                learner.fit(backend);
            }
        }
    }
    timing.total = started.elapsed();
    Ok(RunOutput {
        log: RunLog {
            variant: config.variant,
            steps,
            mpc,
            e0,
            e_final: e_b,
            fuel_kg: fuel_cum,
            slack_events,
            held_updates: held,
            saturated_steps,
            violation_steps,
        },
        timing,
    })
}

/// Relative terminal battery deviation `|E_f − E_0| / E_0`.
pub fn charge_sustain_check(log: &RunLog) -> f64 {
    if log.steps.is_empty() || log.e0 == 0.0 {
        return 0.0;
    }
    (log.e_final - log.e0).abs() / log.e0
}
