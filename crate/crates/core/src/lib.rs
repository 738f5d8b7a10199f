//! Energy management for a P4/P0 parallel hybrid electric vehicle.
//!
//! The crate bundles a quasi-static full powertrain model (used as the plant
//! and inside a dynamic-programming benchmark), a convex surrogate of that
//! model, and a three-level controller:
//!
//! 1. [`ham`] minimizes the Hamiltonian every second on measured speed,
//! 2. [`cop`] solves a convex receding-horizon problem and hands its battery
//!    costate down to the Hamiltonian minimizer,
//! 3. [`rtg`] plans a full-mission battery reference before departure.
//!
//! [`learner`] closes the loop from the mode decisions back into the MPC's
//! mode map by learning the critical power request online, and
//! [`orchestrator`] wires everything into a closed-loop simulation.

pub mod convex;
pub mod cop;
pub mod dp;
pub mod drivecycle;
pub mod ham;
pub mod learner;
pub mod metrics;
pub mod orchestrator;
pub mod powertrain;
pub mod rtg;
pub mod solver;


pub use convex::ConvexModel;
pub use drivecycle::DriveCycle;
pub use powertrain::{ComponentMaps, DrivingMode, FullModel, VehicleParams};
