//! Segmentation losses: the class-agnostic loss and cross-entropy baselines.
//!
//! All gradients are taken with respect to the softmax output, not the
//! network weights; [`crate::nnet`] chains them into parameter gradients.

mod cas;
mod ce;

pub use cas::{
    cas_backward, cas_bounds, cas_forward, cas_terms, cas_value_and_grad, CasConfig, CasTerms,
    LossBounds,
};
pub use ce::{cace_backward, cace_forward, ce_backward, ce_forward, CaceOutcome, LOG_FLOOR};
