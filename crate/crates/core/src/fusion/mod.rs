//! The fusion projector (multi-block fusion then spatial fusion) and the
//! average-pooling and token-concatenation baselines.

mod config;
mod params;
mod projector;

pub use config::{select_block_indices, Activation, FusionConfig, ProjectorKind};
pub use params::{init_params, layer_shapes, LayerId, LayerShape, ModuleParams};
pub use projector::{
    avgpool_projector, check_stack, mbtf_forward, projector_forward, record_layer, record_mbtf,
    record_projector, record_stf, run_projector, stf_forward, tokenconcat_projector, FeatureStack,
    Provenance, TokenSequence,
};
