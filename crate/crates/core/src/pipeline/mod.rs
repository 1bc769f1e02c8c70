//! End-to-end orchestration: configuration, feature extraction, training,
//! evaluation, streaming and the persisted model bundle.

mod bundle;
mod config;
mod features;
mod run;
mod stream;

pub use bundle::{ModelBundle, Provenance, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use config::{AblationConfig, AeConfig, FeatureConfig, PipelineConfig, CONFIG_VERSION};
pub use features::{fused_input, input_matrix, BlockBalance, EpisodeFeatures, FeatureExtractor, Normalizer, TickFeatures};
pub use run::{
    cmd_ablate, cmd_eval, cmd_generate, cmd_train, condition_reports, evaluate_masks, grouped_reports, par_map,
    run_ablation, score_split, train_detector, write_grouped, write_table, AblationResult, FeatureSet,
    GenerateSummary, ScoredTick, TrainOutcome,
};
pub use stream::{cmd_score_stream, summarize, LatencySummary, StageTiming, StreamRecord, StreamScorer, StreamStats};
