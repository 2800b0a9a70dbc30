//! AdamW, early stopping, the training loop, seeds, ensembles and search.

mod early_stopping;
mod ensemble;
mod eval;
mod optim;
pub mod search;
mod trainer;

pub use early_stopping::{Decision, EarlyStopping};
pub use ensemble::{class_probabilities, ensemble_predict, make_groups, EnsembleOutput};
pub use eval::{evaluate, outputs_to_labels, score_outputs};
pub use optim::{AdamW, ADAM_EPS, BETA1, BETA2};
pub use search::{random_search, sample_config, Dist, HyperSpace, Sample, SearchResult, Trial};
pub use trainer::{fit, mean_std, run_seeds, train, train_new, EpochRecord, SeedRuns, TrainConfig, TrainReport, DEFAULT_MAX_EPOCHS, DEFAULT_PATIENCE};
