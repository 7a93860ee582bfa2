//! Trains small residual CNNs, prunes coupled channel groups, and recovers
//! accuracy on limited data via two-step distillation.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense n-d tensors with reverse-mode autodiff and SGD
//! * [`nn`]: conv/BN layers and the residual network container
//! * [`data`]: IDX files, synthetic datasets, proxy sampling
//! * [`augment`]: mixup and the rotate/cutout/shuffle dataset expansion
//! * [`train`]: the mixup + warmup/cosine training loop and metrics logs
//! * [`prune`]: channel groups, importance criteria, plans, surgery
//! * [`distill`]: distillation losses, stored-logit refinement, fine-tuning
//! * [`config`]: the flat-key run configuration shared by all subcommands
//! * [`report`]: run-directory layout and result tables
//! * [`cli`]: the `resprune` command line entry points

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod nn;
pub mod prune;
pub mod report;
pub mod seeds;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Entry point for the `resprune` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    cli::main()
}
