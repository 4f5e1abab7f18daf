//! Probabilistic verification of linear stochastic closed loops against
//! discrete-time signal temporal logic.
//!
//! The closed loop is pushed forward into an exact Gaussian over stacked
//! trajectories ([`system`]). The probability mass of the formula's
//! satisfaction set is estimated by multilevel splitting ([`hdr`]) over
//! rejection-free elliptical slice sampling ([`ess`]), where the active
//! arcs of each ellipse come either from explicit unions of polytopes
//! ([`geometry`]) or from the roots of the robustness score ([`stl`]).

// `!(a >= b)` is used on purpose so that NaN falls on the rejecting side.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ess;
pub mod geometry;
pub mod hdr;
pub mod mc;
pub mod mixture;
pub mod stl;
pub mod system;
