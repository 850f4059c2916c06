//! Random-walk initialization for deep feedforward networks: the statistics
//! of back-propagated error norms, gain recommendations, simulators and a
//! small trainer for checking them on real data.

pub mod data;
pub mod error;
pub mod experiment;
pub mod net;
pub mod numeric;
pub mod theory;
pub mod trainer;
pub mod walk;

pub use error::{Error, Result};
