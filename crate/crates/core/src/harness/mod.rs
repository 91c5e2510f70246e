//! Training loop, data, checkpoints, metrics and retrieval evaluation.

pub mod attn;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod retrieval;
pub mod train;

pub use attn::{attention_maps, AttentionMaps};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{load_samples, prep_dataset, synth_dataset, write_dataset, write_synth, PrepSummary, Sample, SynthSample};
pub use losses::{composite_loss, LossBundle, LossFlags, COMPONENTS};
pub use metrics::MetricsLog;
pub use model::VelvetModel;
pub use retrieval::{eval_retrieval, recall_from_similarity, RetrievalReport};
pub use train::Trainer;
