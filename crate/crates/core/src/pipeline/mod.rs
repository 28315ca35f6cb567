//! Decoder stacking, detection heads, the synthetic scene harness, metrics and
//! gradient checks.

mod config;
mod decoder;
mod gradcheck;
mod metrics;
mod scene;

pub use config::{PipelineConfig, RunConfig};
pub use decoder::{
    decoder_layer, refine_state, reg_cls_head, run_decoder, run_frame, DetectorWeights,
    FrameOutput, FramePrediction, HeadWeights, LayerOutput, LayerWeights, Prediction, QueryCounts,
    StreamState,
};
pub use gradcheck::{
    central_difference, check_gradients, relative_error, GradReport, KernelId, GRAD_TOLERANCE,
};
pub use metrics::{evaluate, Metrics};
pub use scene::{gen_scene, small_scene_config, GtBox, SceneConfig, SceneFrame, SyntheticScene};
