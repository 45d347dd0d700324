//! Convolution, normalization, activation, pooling and dense primitives.

pub mod activation;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;
pub mod structural;

pub use activation::{leaky_relu, relu, sigmoid};
pub use conv::{conv2d, conv_transpose2d, Conv2DParams, Padding};
pub use dense::dense;
pub use norm::{batch_norm, layer_norm, BatchStats, NormState};
pub use pool::{global_avg_pool, global_max_pool};
pub use structural::{concat_channels, nearest_upsample, scale_channels};

/// LeakyReLU negative slope used by every block.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
