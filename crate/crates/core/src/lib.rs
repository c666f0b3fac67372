//! Van der Pol oscillator synchronization: classical shortcut design,
//! truncated-Fock Lindblad dynamics, quantum shortcut iteration and a
//! Wigner-function cross-check.

pub mod classical;
pub mod designer;
pub mod error;
pub mod fock;
pub mod lindblad;
pub mod ode;
pub mod runner;
pub mod wigner;

pub use error::{Error, ErrorKind, Result};

/// Formats a float with 17 significant digits.
pub(crate) fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}
