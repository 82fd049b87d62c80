//! Small-time kernel asymptotics of planar kinetic Brownian motion.

pub mod charfn;
pub mod cli;
pub mod density;
pub mod duhamel;
pub mod error;
pub mod ldp;
pub mod scaling;
pub mod simulator;
pub mod special;

pub use error::{Error, Result};
