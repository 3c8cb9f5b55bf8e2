// `!(x > 0.0)` is used on purpose so that NaN fails validation; indexed
// loops are kept where several arrays share the index.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod diffcore;
pub mod geo;
pub mod harness;
pub mod losses;
pub mod model;
pub mod softrank;
pub mod synthdata;
