// `!(x < y)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod billiard;
pub mod escape;
pub mod experiment;
pub mod geometry;
pub mod holes;
pub mod measures;
pub mod open_dynamics;
pub mod rng;
pub mod tower;
