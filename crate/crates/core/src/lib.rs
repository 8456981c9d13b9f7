//! Decision backtracking for plain convolutional networks.
//!
//! A recorded forward pass ([`network::NetworkSpec::forward_with_trace`]) is
//! unrolled from a chosen output class down to the input pixels that drove
//! it ([`backtrack::backtrack_full`]). The resulting pixels feed saliency
//! rendering ([`saliency`]) and mask-based evaluation ([`eval`]).

pub mod backtrack;
pub mod eval;
pub mod fixtures;
pub mod model_io;
pub mod network;
pub mod pnm;
pub mod saliency;
pub mod selftest;
pub mod tensor;

pub use backtrack::{backtrack_full, BacktrackConfig, BacktrackOutcome, BiasMode, NodeLoc, PixelList, SpatialLoc};
pub use network::{ActivationTrace, Layer, NetworkSpec};
pub use saliency::{SaliencyConfig, SaliencyMap};
pub use tensor::{Shape3, Tensor1, Tensor3};
