use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalization axis of the kernel-attention softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSoftmax {
    /// Softmax over input channels `b` for each `(a, c, d)`. The output-channel
    /// term is constant along `b` and cancels, so only the input-channel logits
    /// shape the attention.
    InputChannel,
    /// Softmax jointly over the `(a, b)` channel plane for each tap `(c, d)`;
    /// both logit terms contribute.
    ChannelPlane,
}

/// Model and optimisation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Representative prototypes per side (S).
    pub prototypes: usize,
    /// Entropy weight of the transport objective (μ).
    pub entropy_weight: f64,
    /// Weight of the prototype-enhancement loss (λ1).
    pub lambda_be: f64,
    /// Weight of the Dice loss (λ2).
    pub lambda_dc: f64,
    /// Attention heads (H).
    pub heads: usize,
    /// Encoder feature channels (D_l).
    pub feature_dim: usize,
    /// Per-head attention width (d); `head_dim * heads == feature_dim`.
    pub head_dim: usize,
    /// Output channels of the refined query kernel (D_u).
    pub out_channels: usize,
    /// Shared relation-space width (D_s).
    pub relation_dim: usize,
    /// Average pixels per superpixel (G).
    pub pixels_per_superpixel: usize,
    /// Upper bound on superpixels per support image (N_s^max).
    pub max_superpixels: usize,
    /// Centroids kept per class in memory (ν).
    pub memory_per_class: usize,
    /// Global query descriptors (N_q).
    pub query_descriptors: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub kernel_softmax: KernelSoftmax,
    pub slic_iters: usize,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Chunks per scan in volumetric evaluation (P).
    pub chunks: usize,
    /// Cosine-similarity multiplier of the prototype classifier (α).
    pub classifier_scale: f64,
    /// Local prototype window at feature resolution (L).
    pub pool_window: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            prototypes: 16,
            entropy_weight: 0.1,
            lambda_be: 0.5,
            lambda_dc: 1.0,
            heads: 1,
            feature_dim: 32,
            head_dim: 32,
            out_channels: 32,
            relation_dim: 64,
            pixels_per_superpixel: 80,
            max_superpixels: 10,
            memory_per_class: 5,
            query_descriptors: 16,
            kernel_h: 3,
            kernel_w: 3,
            kernel_softmax: KernelSoftmax::ChannelPlane,
            slic_iters: 5,
            sinkhorn_iters: 500,
            sinkhorn_tol: 1e-6,
            lr: 0.001,
            lr_decay: 0.95,
            lr_decay_every: 1000,
            chunks: 3,
            classifier_scale: 20.0,
            pool_window: 4,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("prototypes", self.prototypes),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("head_dim", self.head_dim),
            ("out_channels", self.out_channels),
            ("relation_dim", self.relation_dim),
            ("pixels_per_superpixel", self.pixels_per_superpixel),
            ("max_superpixels", self.max_superpixels),
            ("memory_per_class", self.memory_per_class),
            ("query_descriptors", self.query_descriptors),
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("slic_iters", self.slic_iters),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("lr_decay_every", self.lr_decay_every),
            ("chunks", self.chunks),
            ("pool_window", self.pool_window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.head_dim * self.heads != self.feature_dim {
            return Err(Error::Config(format!(
                "head_dim * heads = {} must equal feature_dim = {}",
                self.head_dim * self.heads,
                self.feature_dim
            )));
        }
        if !(self.entropy_weight > 0.0) {
            return Err(Error::Config("entropy_weight must be > 0".into()));
        }
        if !(self.lambda_be >= 0.0 && self.lambda_dc >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.sinkhorn_tol > 0.0) {
            return Err(Error::Config("lr, lr_decay and sinkhorn_tol must be > 0".into()));
        }
        if !(self.classifier_scale > 0.0) {
            return Err(Error::Config("classifier_scale must be > 0".into()));
        }
        Ok(())
    }

    /// Step size after `iteration` updates: `lr · decay^⌊iteration / every⌋`.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        self.lr * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
    }
}
