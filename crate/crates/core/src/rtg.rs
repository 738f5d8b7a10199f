//! Reference trajectory generator: one full-mission convex solve before
//! departure, on the mean velocity profile and with the engine assumed on
//! wherever it can run. The resulting battery energy, indexed by route
//! position, gives the MPC its terminal targets.

use std::io::{self, Write};

use crate::convex::ConvexModel;
use crate::cop::{hev_possible, solve_with_repair, CopError, CopSolution};
use crate::drivecycle::{interp_clamped, DriveCycle, Signal};
use crate::powertrain::{DrivingMode, VehicleParams};
use crate::solver::ConicBackend;

#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    /// Route position (m) of each sample under the mean profile.
    pub s: Vec<f64>,
    pub e_b: Vec<f64>,
    pub e0: f64,
    pub solution: CopSolution,
}

pub fn generate_reference(
    cycle: &DriveCycle,
    e0: f64,
    model: &ConvexModel,
    params: &VehicleParams,
    backend: &dyn ConicBackend,
) -> Result<ReferenceTrajectory, CopError> {
    let mission = cycle
        .window(0, cycle.steps(), Signal::VBar)
        .map_err(|_| CopError::EmptyWindow)?
        .cycle;
    let modes: Vec<DrivingMode> = (0..mission.steps())
        .map(|k| {
            if hev_possible(mission.step(k).v, params) {
                DrivingMode::Hev
            } else {
                DrivingMode::Ev
            }
        })
        .collect();
    let solution = solve_with_repair(&mission, &modes, e0, e0, model, params, backend)?;
    Ok(ReferenceTrajectory {
        s: mission.s.clone(),
        e_b: solution.energy.clone(),
        e0,
        solution,
    })
}

impl ReferenceTrajectory {
    /// Reference energy at route position `x`, linear in distance.
    pub fn energy_at(&self, x: f64) -> f64 {
        interp_clamped(&self.s, &self.e_b, x)
    }

    /// Terminal target for the prediction window starting at `t0`: the
    /// reference at the window's predicted end position, or the initial
    /// energy once the window reaches the end of the mission.
    pub fn target_at(&self, cycle: &DriveCycle, t0: usize, horizon: usize, which: Signal) -> f64 {
        match cycle.window(t0, horizon, which) {
            Ok(w) if !w.clipped && !w.reaches_end => {
                self.energy_at(*w.cycle.s.last().expect("windows are non-empty"))
            }
            _ => self.e0,
        }
    }

    /// Writes `s_m,e_b_j` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "s_m,e_b_j")?;
        for (s, e) in self.s.iter().zip(&self.e_b) {
            writeln!(w, "{s},{e}")?;
        }
        Ok(())
    }
}
