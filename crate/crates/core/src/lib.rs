//! Encoder-decoder lane segmentation with hand-written backpropagation.
//!
//! The network follows the SegNet pattern: each encoder block runs
//! `conv → relu → 2×2 max-pool` and records where every pooled maximum came
//! from; each decoder block unpools with the indices of its mirrored
//! encoder block, so sparse upsampling puts activations back at their
//! original positions. A per-pixel softmax produces lane/background
//! probabilities that are trained against one-hot masks with a summed
//! squared-error loss and plain SGD.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: the dense `n × c × h × w` array, padding, arg-max, seeded RNG
//! - [`layers`]: forward/backward kernels
//! - [`model`]: network assembly, Xavier init, full passes
//! - [`persist`]: architecture JSON + LSEG weights
//! - [`training`]: loss, SGD, epoch loop, learning curves
//! - [`data`]: image IO, resizing, manifests, synthetic lanes, batching
//! - [`metrics`]: confusion counts and the precision/recall/F1 report
//! - [`render`]: mask and overlay images
//! - [`gradcheck`]: finite-difference verification suite
//!
//! With the default `parallel` feature the heavy kernels fan out over
//! rayon; without it they run sequentially. Both builds give bitwise
//! identical results.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod par;
pub mod persist;
pub mod render;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{build_network, DecoderOrder, Network, NetworkConfig};
pub use tensor::{Dims, Rng, Tensor4};
