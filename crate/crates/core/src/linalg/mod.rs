//! Truncated SVD, sigmoid attention and gradient verification.

mod attention;
mod gradcheck;
mod svd;

pub use attention::{
    multi_head_concat, multi_head_graph, sigmoid_attention, sigmoid_attention_graph,
    AttentionVars, AttentionWeights,
};
pub use gradcheck::{grad_check, random_projection, GradCheckReport};
pub use svd::{truncated_svd, truncated_svd_of_product, SvdFactors};
