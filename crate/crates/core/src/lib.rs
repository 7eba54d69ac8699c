//! Controlled-drifter Lagrangian data assimilation on the torus.
//!
//! A known jet-and-eddy flow is sampled by a drifter whose motion may be
//! forced by a control. Noisy drifter positions are assimilated with
//! preconditioned Crank-Nicolson MCMC over a truncated Fourier prior, and the
//! posterior variance of the horizontal velocity is measured as a function of
//! control magnitude.
pub mod analysis;
pub mod drifter;
pub mod experiment;
pub mod geom;
pub mod observation;
pub mod pcn;
pub mod seeds;
pub mod spectral;
pub mod torus_flow;

pub use geom::{Point2, Vec2};
