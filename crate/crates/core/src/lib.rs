//! Continual-learning toolkit built around subspace distillation: keeping
//! the span of a network's features close to the span a previous model
//! produced on the same inputs.

pub mod bench;
pub mod data;
pub mod distill;
pub mod gradcheck;
pub mod grassmann;
pub mod linalg;
pub mod nn;
pub mod replay;
pub mod svd_backprop;
pub mod trainer_cl;
pub mod trainer_css;

mod binio;
