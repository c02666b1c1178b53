//! Finite-difference solver for `u_tt = u_xx + u^p` with a rescaling
//! algorithm that follows solutions up to their blow-up time.

pub mod analysis;
pub mod driver;
pub mod interp;
pub mod manifest;
pub mod output;
pub mod presets;
pub mod rescale;
pub mod solver;
