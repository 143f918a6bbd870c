//! Time grid and reproducible Brownian increments shared by every solver.

mod grid;
mod noise;

pub use grid::{make_time_grid, TimeGrid};
pub use noise::{restrict_players, sample_noise, sample_world, sample_worlds, stream_rng, InitialLaw, NoiseBundle, StreamRole};
