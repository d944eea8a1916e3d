//! Few-shot segmentation engine built on prototype correlation matching and
//! class-relation reasoning, with a synthetic episodic benchmark.

pub mod crr;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod graph;
pub mod harness;
pub mod hyper;
pub mod io;
pub(crate) mod kernels;
pub mod linalg;
pub mod loss_head;
pub mod mask;
pub mod pcm;
pub mod rng;
pub mod tensor;

pub use episode::{Episode, Shot};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use hyper::{Hyperparams, KernelSoftmax};
pub use mask::Mask;
pub use rng::Rng;
pub use tensor::Tensor;
