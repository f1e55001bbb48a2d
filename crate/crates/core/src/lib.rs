//! Federated training of a quantum classifier whose data lives in the
//! measured observable rather than in the prepared state.
//!
//! The server simulates a parameterized circuit and publishes classical
//! shadows of the circuit at θ and at every ±π/2 parameter shift. Clients
//! estimate expectation values and parameter-shift gradients from those
//! shadows, and the server aggregates the gradients and updates θ.

pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod pauli;
pub mod qnn;
pub mod rng;
pub mod shadows;
pub mod sim;
pub mod verify;
pub mod wire;

pub use error::{Error, Result};
