//! Synthetic confounded-domain benchmark.
//!
//! Each domain mixes class content with a confounder pattern whose value
//! agrees with the label at a configurable rate, plus noise. A source domain
//! with strong agreement and a target domain where the confounder is
//! independent of the label expose models that learned the shortcut. Both
//! models share one mean-pooled linear head; the CBB model runs the block
//! first.

mod data;
mod experiment;
mod model;
mod sweep;

pub use data::{generate_domain, patterns, DomainSpec, LabeledBatch, Patterns};
pub use experiment::{
    describe, run_experiment, seed_domains, AccuracyRow, Aggregate, CheckSummary, ExperimentConfig,
    ExperimentOutput, ModelRun, RunReport, SeedChecks, SeedRun, RANK_REL_TOL, TRAIN_INFER_TOL,
};
pub use model::{evaluate, train, Classifier, ModelKind, TrainConfig, TrainLog};
pub use sweep::{run_sweep, RatioSummary, SweepOutput, SweepRow, SweepSummary, DEFAULT_RATIO_GRID};
