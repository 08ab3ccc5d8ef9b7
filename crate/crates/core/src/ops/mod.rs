//! Layer primitives. Each forward op is paired with a hand-written backward
//! pass (vector-Jacobian product) and, where it has weights or MACs, an
//! analytic cost.

pub mod activation;
pub mod conv;
pub mod cost;
pub mod kink;
pub mod linear;
pub mod norm;
pub mod pool;
pub mod resize;

pub use activation::{relu6, relu6_backward, sigmoid, sigmoid_backward};
pub use conv::{conv2d, conv2d_backward, ConvSpec};
pub use cost::{tally_macs, OpCost};
pub use kink::{track_kinks, KinkTrace};
pub use linear::{fully_connected, fully_connected_backward};
pub use norm::{batch_norm_backward, batch_norm_inference, BatchNorm, BN_EPS};
pub use pool::{channel_max_pool, directional_avg_pool, PoolAxis};
pub use resize::{resize_bilinear, resize_bilinear_backward, ResizeTarget};
