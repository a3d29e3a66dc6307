//! Run configuration, training, decoding and scoring.

pub mod config;
pub mod evaluate;
pub mod metrics;
pub mod train;

pub use config::{corpus_config, env_name, load_with_env, KeyValues, RunConfig, TrainConfig};
pub use evaluate::{
    decode_utterances, evaluate, load_model, read_hypotheses, references, run_decode, score,
    write_hypotheses, Hypothesis,
};
pub use metrics::{edit_distance, EditCounts, ScoreReport, UtteranceScore};
pub use train::{run_train, train_model, EpochLog, TrainOutcome, CHECKPOINT, TRAIN_LOG};
