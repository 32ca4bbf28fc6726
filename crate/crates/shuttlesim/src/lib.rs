//! Simulation toolkit for coupled nanomechanical electron shuttles.
//!
//! Two metallic islands on vibrating nanopillars sit between a grounded
//! source and an RF-driven drain. Electrons hop island to island by
//! single-electron tunneling while the pillars ring; the interplay rectifies
//! part of the RF drive into a DC current. This crate models that system
//! three ways and cross-validates them:
//!
//! * an ensemble kinetic Monte-Carlo sampler of the full stochastic model
//!   ([`monte_carlo`]),
//! * a truncated lattice solver for the marginal electron-number master
//!   equation ([`master`]), the high-accuracy reference away from mechanical
//!   resonance,
//! * deterministic moment equations under a Gaussian closure at three levels
//!   of fidelity ([`moments`]), fast enough for device design sweeps.
//!
//! [`device`] turns user-supplied capacitance blocks into junction
//! energetics and forces; [`analysis`] extracts DC currents, checks the
//! half-period antisymmetry of the current, and provides the small-signal
//! closed forms; [`cli`] wires everything to config files, CSV tables and
//! SVG plots.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod device;
pub mod drive;
pub mod linalg;
pub mod master;
pub mod mechanics;
pub mod moments;
pub mod monte_carlo;
pub mod output;
pub mod presets;
pub mod rng;
pub mod tunneling;

pub use device::{derive_constants, CapacitanceBlocks, CapacitanceInput, DeviceConstants, ShuttleParams};
pub use drive::DriveWaveform;
