//! Software twin of a free-space, entanglement-based (BBM92) quantum key
//! distribution link.
//!
//! The crate is organised the way data flows through a real link:
//!
//! - [`linkmodel`]: closed-form saturation, signal/accidental rates and QBER
//!   as a function of the ambient background.
//! - [`simulator`]: stochastic timestamp streams for both receivers, with
//!   polarization correlations, background, jitter, dead times and clock errors.
//! - [`timesync`]: tiered cross-correlation acquisition and a drift-tracking servo.
//! - [`sifter`]: coincidence identification, basis sifting and QBER sampling.
//! - [`postproc`]: CASCADE error correction and LFSR-matrix privacy amplification.
//! - [`sidechannel`]: detector correlation matrices, asymmetry and timing leakage.
//! - [`protocol`]: timing compression, framing and the two-endpoint session.
//! - [`pipeline`]: the whole chain in one process, on simulated or recorded data.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod linkmodel;
pub mod params;
pub mod pipeline;
pub mod postproc;
pub mod protocol;
pub mod seed;
pub mod sidechannel;
pub mod sifter;
pub mod simulator;
pub mod timesync;

/// Duration of one timestamp tick in seconds.
pub const TICK_SECONDS: f64 = 125e-12;

/// Converts seconds to (fractional) ticks.
#[inline]
pub fn secs_to_ticks(secs: f64) -> f64 {
    secs / TICK_SECONDS
}

/// Converts (fractional) ticks to seconds.
#[inline]
pub fn ticks_to_secs(ticks: f64) -> f64 {
    ticks * TICK_SECONDS
}
