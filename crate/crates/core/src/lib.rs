//! Slice-wise attention for volumetric segmentation.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`tape`], [`ops`], [`conv`]), the attention blocks built on it
//! ([`attention`]), an analytical cost model for their attention maps
//! ([`cost`]), a toy 3-D U-Net with a class-weighted loss ([`network`]),
//! synthetic lesion phantoms and a checksummed volume format ([`data`],
//! [`volume`]), segmentation metrics ([`metrics`]) and the training loop
//! ([`train`]).

pub mod attention;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;

pub use attention::{
    nonlocal_forward, rsa_forward, rsa_forward_stepwise, sa_attention_map, sa_forward,
    sa_forward_naive, AttentionMap, Embedding, RSAParams, SAParams, SliceAxis,
};
pub use cost::{attention_cost, cost_ratio, BlockKind, CostRatio, CostReport, FeatureShape};
pub use data::{GeneratorParams, VolumeSample};
pub use error::{Error, Result};
pub use gradcheck::{gradcheck, GradTarget, GradcheckReport};
pub use metrics::{Confusion, MetricsReport};
pub use network::{
    build_network, network_forward, weighted_ce_loss, AttentionKind, EmbeddingMode, LossWeights,
    Network, Placement, UNetConfig,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Element, Tensor};
pub use train::{run_training, RunConfig, TrainConfig, TrainHistory};
