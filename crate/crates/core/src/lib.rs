//! Robust counterparts for constraints whose uncertain coefficients are modeled
//! by (warped) Gaussian processes.

// negated comparisons are deliberate: they treat NaN as failure
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod error;
pub mod exec;
pub mod gp;
pub mod innermax;
pub mod linalg;
pub mod neldermead;
pub mod nlp;
pub mod posterior;
pub mod reformulate;
pub mod smooth;
pub mod table;
pub mod uncertainty;
pub mod warping;

pub use error::{Error, Result};
pub use exec::Execution;
