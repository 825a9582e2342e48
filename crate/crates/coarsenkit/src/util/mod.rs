//! Shared numerics: quadrature, monotone interpolation, special functions,
//! root finding and least-squares fitting.

pub mod fit;
pub mod interp;
pub mod quad;
pub mod root;
pub mod special;
