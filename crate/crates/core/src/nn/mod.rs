//! Configurable residual backbone and detector heads.

pub mod config;
pub mod model;
pub mod params;

pub use config::{BlockVariant, DropoutConfig, DropoutPlacement, NetworkConfig, StageSpec, StemSpec};
pub use model::{
    bind_params, forward_backbone, forward_block, forward_detector, rpn_head, score_map_heads, DetectorOutputs,
    ForwardCtx,
};
pub use params::{build_network, ParamStore};
