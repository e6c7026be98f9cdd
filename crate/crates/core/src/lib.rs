// Validation uses `!(x > 0.0)` so that NaN is rejected along with the bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod diffcore;
pub mod experiments;
pub mod koopman;
pub mod plant;
pub mod stl;
