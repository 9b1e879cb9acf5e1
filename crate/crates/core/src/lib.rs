//! Example-tied ("fair") dropout and memorization localization on
//! synthetic data with spurious correlations.
//!
//! The crate covers a small dense-network core with manual backprop
//! ([`nn`]), the fair dropout layer ([`fairdropout`]), a group-structured
//! data generator ([`data`]), group-level metrics and SGD training
//! ([`metrics`], [`trainer`], [`sweep`]), and the greedy critical-neuron
//! probe ([`memprobe`]). The `fairdrop` binary wires them into experiments.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fairdropout;
pub mod memprobe;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use arch::{DropoutPosition, FairDropoutSpec, ModelSpec};
pub use data::{Group, GroupSpec, GroupedDataset, GroupedExample, Split, SyntheticSpec};
pub use error::{Error, Result};
pub use fairdropout::{FairDropoutConfig, MaskAllocation};
pub use memprobe::{LocalizationResult, NeuronMaskSet, NeuronRef};
pub use metrics::{evaluate, Metrics};
pub use nn::{Layer, Mode, Model, Pass};
pub use tensor::Tensor;
pub use trainer::{train, History, TrainConfig};
