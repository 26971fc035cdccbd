pub mod diff;
pub mod epiattn;
pub mod error;
pub mod featvol;
pub mod formats;
pub mod geometry;
pub mod losses;
pub mod meshing;
mod meshing_tables;
pub mod model;
pub mod params;
pub mod renderer;
pub mod scenegen;
pub mod trainer;
pub mod verify;

pub use diff::{grad_check, grad_check_with, DualArray, Gradients, Stencil, Tape};
pub use error::{Error, Result};
