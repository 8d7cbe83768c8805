//! Multi-scenario conversion-rate prediction with scenario-conditioned
//! weighting of a shared backbone, regularised by a mutual-information term.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape, the
//! model, training, evaluation and experiment drivers.

pub mod analysis;
pub mod data;
pub mod error;
pub mod experiment;
pub mod init;
pub mod metrics;
pub mod mir;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{
    generate_synthetic, load_csv, split, write_csv, Dataset, Field, FieldKind, Sample, Schema, SyntheticData,
    SyntheticSpec, Vocab,
};
pub use error::{Error, Result};
pub use metrics::{auc, logloss, paired_t_test, TTest};
pub use model::{DwmConfig, DwmVariant, LowRank, Model, ModelConfig, ParamCounts, Weighting};
pub use rng::Rng;
pub use tape::{RepeatMode, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
pub use train::{cvr_loss, evaluate, fit, RunReport, TrainConfig};
