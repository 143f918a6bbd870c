//! Mean-field versus N-player experiments: coupled copies, gap metrics and
//! their empirical rate, plus a Riccati oracle for the deterministic
//! linear-quadratic case.

mod coupling;
mod experiment;
mod gaps;
mod ks;
mod rate;
mod riccati;

pub use coupling::{build_coupled_copies, couple_repetitions, CoupledCopies, CouplingPlan, Diagnostics};
pub use experiment::{run_convergence, ConvergenceConfig, ConvergenceReport, TRAINING_WORLD_OFFSET};
pub use gaps::{gap_metrics, path_gaps, GapReport};
pub use ks::{ks_two_sample, KsTest, KS_COEFF_1PCT};
pub use rate::{fit_power_law, rate_fit, GapSeries, RateFit};
pub use riccati::{riccati_oracle, RiccatiSolution};
