//! Synthetic scenes, the multi-frame-sampling baseline, the toy training
//! loop, metrics and benchmark orchestration.

pub mod bench;
pub mod eval;
pub mod render;
pub mod scene;
pub mod train;
pub mod verify;

pub use bench::{
    bench_recurrent, records_to_csv, run_multiframe_baseline, BenchConfig, BenchReport,
    FrameBenchRecord,
};
pub use eval::{evaluate_scene, score_frame, EvalMetrics, MATCH_RADIUS_M};
pub use render::render_features;
pub use scene::{Scene, SceneConfig};
pub use train::{
    focal_loss_with_logit, frame_loss, greedy_match, train_toy, TrainConfig, TrainLog,
    TrainStepLog,
};
pub use verify::{run_property_suite, FaultInjection, PropertyResult};
