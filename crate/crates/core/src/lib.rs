//! Nonlinear frequency response curves and phase resonance nonlinear modes
//! of harmonically forced mechanical systems.
//!
//! The crate stacks four layers:
//!
//! * [`model`] — mass/damping/stiffness matrices with polynomial nonlinear
//!   forces, plus the built-in benchmark systems;
//! * [`hbm`] / [`aft`] — harmonic balance on subharmonic Fourier grids with
//!   alternating frequency/time evaluation of the nonlinear forces;
//! * [`continuation`] — Newton correction, pseudo-arclength branch tracing
//!   and event detection;
//! * [`prnm`] — the velocity-feedback reformulation that continues phase
//!   resonance nonlinear modes directly, and [`oracle`] — an independent
//!   time-integration ground truth used for verification and for seeding
//!   isolated branches.

pub mod aft;
pub mod continuation;
pub mod error;
pub mod hbm;
pub mod model;
pub mod oracle;
pub mod prnm;
pub mod workflows;

pub use error::{CoreError, Result};
