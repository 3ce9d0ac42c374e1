// Validation uses negated comparisons so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod evaluator;
pub mod market_data;
pub mod model;
pub mod par;
pub mod seed;
pub mod trainer;
