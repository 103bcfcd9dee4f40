//! Graph-smoothed instance normalization for feed-forward style transfer,
//! with a small dependency-free tensor library, reverse-mode tape and
//! training loop.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod net;
pub mod normalize;
pub mod params;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{build_adjacency, gcn_layer, smooth_means, Activation, AdjacencyMatrix, AdjacencyVariant, GraphStack, Mode, ThetaForm};
pub use losses::{content_loss, style_loss, total_loss, LossReport, LossWeights, Reduction};
pub use model::{BatchFeatures, ModelConfig, StyleNet};
pub use normalize::{adain, grin, GrinConfig};
pub use params::{GradientSet, NamedTensor};
pub use rng::Rng;
pub use stats::{channel_means, compute_stats, whiten, ChannelStats};
pub use tensor::{Matrix, Shape4, Tensor4};
