//! Wiener-Hammerstein channel identification toolkit.
//!
//! A Wiener-Hammerstein (W-H) channel is the cascade of a linear FIR filter
//! `h`, a static nonlinearity (an amplifier), and a second linear FIR filter
//! `g`, with additive Gaussian noise at the output. This crate provides:
//!
//! - [`signals`] — pilot-signal generation: multisines, Schroeder phases,
//!   min-max PAR phase search, matched-power white noise, PAR and bandwidth
//!   measures.
//! - [`channel`] — the ground-truth channel: FIR filtering, Rapp and
//!   polynomial amplifiers, Hammerstein expansion, group/fractional delay.
//! - [`lsq`] — shared least-squares machinery (lagged design matrices,
//!   numerically stable solving with conditioning diagnostics).
//! - [`volterra`] — the reduced-kernel Volterra baseline for comparison.
//! - [`estimator`] — the three-step identification algorithm: estimate the
//!   composite filter `r = G·g*h` from a low-power wideband pilot, estimate
//!   the Hammerstein model `(γ·g)` from a band-limited high-power pilot, and
//!   recover `h` by deconvolution plus a scaling pilot.
//! - [`metrics`] — Q-values, NMSE, SNR budgets, and minimum pilot lengths.
//!
//! All randomness is seed-injected; every operation is deterministic given
//! its inputs and seed.

pub mod channel;
pub mod error;
pub mod estimator;
pub mod lsq;
pub mod metrics;
pub mod signals;
pub mod volterra;

pub use channel::{Amplifier, FirFilter, PolynomialAmplifier, RappAmplifier, WhModel};
pub use error::{Error, Result};
pub use estimator::{PilotPlan, WhEstimate};
pub use signals::{MultisineSpec, Signal};
pub use volterra::VolterraModel;
