//! Insensitizing controls for the one-dimensional fourth-order nonlinear
//! Schrödinger equation
//!
//! ```text
//! i u_t + u_xx − u_xxxx − ζ|u|²u = f + 1_ω h   on (0,L)×(0,T),
//! u = u_x = 0 at x = 0, L,
//! ```
//!
//! computed by a penalized Hilbert Uniqueness Method on the forward–backward
//! cascade system, together with numerical audits of the associated
//! Carleman and observability inequalities.
//!
//! Layers, bottom-up: [`grid`] (operators and masks), [`solver`]
//! (Crank–Nicolson propagation), [`weights`] (Carleman weights),
//! [`cascade`] (state/companion pair and the sentinel), [`control`] (HUM
//! synthesis), [`audit`] (weighted inequality reports).

pub mod audit;
pub mod banded;
pub mod cascade;
pub mod control;
pub mod error;
pub mod field;
pub mod grid;
pub mod manufactured;
pub mod sampling;
pub mod solver;
pub mod weights;

pub use error::{Error, Result};
pub use field::{
    l2_inner, l2_norm, ComplexField, HalfStepField, SourceSampler, Trajectory, ZeroSource,
};
pub use grid::{indicator_mask, BandedOperator, Grid, Mask};
pub use num_complex::Complex64;
pub use solver::{Direction, Propagator};
