//! Case-control matching, pair-atomic fold assignment and the training
//! loop.

mod folds;
mod manifest;
mod matching;
mod train;

pub use folds::{split_six_folds, FoldSplit};
pub use manifest::{load_manifest, load_volume_pairs, save_manifest};
pub use matching::{
    admissible, match_case_controls, match_distance, Label, MatchResult, MatchedPair, Sex, Subject, AGE_CALIPER,
    BMI_CALIPER,
};
pub use train::{
    cross_validate, cross_validate_with, fold_seed, score_pairs, thread_count, train, train_with, AdamW, EpochStats,
    FoldOutcome, TrainConfig, VolumePair, THREADS_ENV,
};
