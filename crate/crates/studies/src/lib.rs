//! Case studies built on `wgpro-core`: production planning under an uncertain
//! price-supply curve and drill scheduling under uncertain motor degradation.

// negated comparisons are deliberate: they treat NaN as failure
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod drilling;
pub mod planning;
