//! Energy-optimal walking over uneven terrain with a simple inverted-pendulum
//! walker: step dynamics, terrain profiles, push-off planners and tools for
//! comparing planned speed fluctuations against measured ones.

pub mod analysis;
pub mod cli;
pub mod planner;
pub mod terrain;
pub mod walker;

pub use terrain::{Catalog, TerrainProfile};
pub use walker::{GaitTrajectory, ModelParams};
