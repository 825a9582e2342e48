//! coarsenkit — numerical laboratory for a family of nonlocal coarsening
//! models: a transport equation on the unit interval whose advection field is
//! closed by a mass-conservation constraint.
//!
//! The crate provides
//! * coefficient pairs (the built-in cube-root pair, quadratic pairs, and
//!   custom tabulated pairs) with stable evaluation near the degenerate
//!   endpoint ([`coeffs`]),
//! * initial profiles with analytic auxiliary fields ([`profiles`]),
//! * self-similar solutions for any admissible rate constant
//!   ([`selfsimilar`]),
//! * a characteristics solver with a discretely mass-conserving closure
//!   ([`charsolve`]),
//! * the exactly solvable reduction available for quadratic pairs
//!   ([`quadmodel`]),
//! * the unbounded-domain change of variables ([`transformed`]),
//! * and a scenario/CSV front end used by the `expcli` binary ([`scenario`]).

pub mod charsolve;
pub mod coeffs;
pub mod error;
pub mod profiles;
pub mod quadmodel;
pub mod scenario;
pub mod selfsimilar;
pub mod transformed;
pub mod util;

pub use error::{CoarsenError, Result};
