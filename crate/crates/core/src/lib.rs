//! Numerical laboratory for a stochastic reaction-diffusion equation with
//! delayed feedback and additive noise,
//!
//! ```text
//! du/dt = A u - mu u - a u(t - tau) + f(u_t) + sum_j g_j dw_j/dt,
//! ```
//!
//! studied on the product space `H = L^2([-tau,0], X) x X` of history
//! segments plus current state. The noise is removed pathwise by subtracting
//! the stationary Ornstein-Uhlenbeck process, which turns the equation into a
//! random delay equation whose solution operator is a cocycle over the Wiener
//! shift. The crate provides:
//!
//! * reproducible two-sided Wiener increments and the stationary OU
//!   conjugation process ([`noise`]),
//! * a spectral Galerkin truncation of the spatial operator ([`space`]),
//! * the discretized product space with its inner product and delay
//!   semigroup ([`segment`]),
//! * the exponential-Euler integrator and the cocycles in both conjugated
//!   and original coordinates ([`dynamics`]),
//! * pullback sampling of the random attractor, absorbing-radius
//!   diagnostics and a box-counting estimator ([`attractor`]),
//! * the variational (tangent) cocycle, QR-based Lyapunov statistics, the
//!   trace functional and Hausdorff/fractal dimension bounds ([`tangent`]),
//! * configuration plus the full verification suite ([`config`], [`verify`]).
//!
//! All randomness flows through a counter-based generator keyed by absolute
//! grid cell, so every ensemble is deterministic regardless of thread count.
//! The data-parallel entry points use rayon when the default `parallel`
//! feature is enabled and fall back to sequential iteration without it.

pub mod attractor;
pub mod config;
pub mod dynamics;
mod error;
pub mod noise;
pub mod parallel;
pub mod segment;
pub mod space;
pub mod tangent;
pub(crate) mod util;
pub mod verify;

pub use error::{Error, Result};
pub use space::{ModalVector, SpectralDomain};
