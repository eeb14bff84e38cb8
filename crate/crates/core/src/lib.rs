pub mod error;
pub mod geodesic;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod optimize;
pub mod par;
pub mod segment;
pub mod synth;

pub use error::{Error, Result};
