//! Demand-responsive heat-pump control: optimal scheduling, the
//! price/storage heuristic, an imitation-learned neural controller and a
//! closed-loop benchmark harness.

pub mod error;
pub mod experiment;
pub mod imitation;
pub mod model;
pub mod nn;
pub mod psc;
pub mod scenario;
pub mod scheduler;
pub mod sim;

pub use error::{Error, Result};

/// FNV-1a 64-bit hash, used for parameter and normalisation checksums.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
