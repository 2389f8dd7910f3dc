//! Tests of the sharp null of full mediation and bounds on its violation.
//!
//! A treatment `D` fully mediates its effect on `Y` through `M` when
//! `Y(d, m)` does not depend on `d`. The crate turns the arm-wise joint law of
//! `(Y, M)` into linear programs over the shares of mediator response types,
//! computes lower bounds on the fraction of always-takers with a direct
//! effect, and tests the null from finite samples.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the subscripts of the underlying formulas.
#![allow(clippy::needless_range_loop)]

pub mod bounds;
pub mod error;
pub mod ident;
pub mod inference;
pub mod linprog;
pub mod mc;
pub mod probtab;
pub mod sharpcons;
pub mod typeshares;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
