//! Layers and the residual network they compose into.

mod checkpoint;
mod graph;
mod layers;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{
    build_tiny_resnet, BlockSpec, Bottleneck, GraphSpec, LayerId, NetConfig, NetworkGraph,
    ResidualStage, StageSpec,
};
pub use layers::{BatchNorm2d, Conv2d, Linear};
