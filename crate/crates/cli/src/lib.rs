//! Library half of the `fgl` binary: experiment orchestration, report
//! writers and the verification suite. The binary is a thin argument parser
//! over these functions, and the acceptance tests drive them directly.

pub mod experiment;
pub mod report;
pub mod verify;

pub use experiment::{
    attack_transcripts, prepare_dataset, train_federation, AttackOptions, AuxSource,
    DatasetSource, PrepareOptions, TrainOptions,
};
