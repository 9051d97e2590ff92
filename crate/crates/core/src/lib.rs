//! Data-driven nonlinear optimal power flow for radial grids.

pub mod behavior;
pub mod cli;
pub mod error;
pub mod excitation;
pub mod grid;
pub mod microgrid;
pub mod opf;
pub mod opt;
pub mod physics;
