//! Deterministic simulator for federated fine-tuning with entropy-based
//! client data selection, its baselines (FedAvg, FedProx, random data
//! selection) and the accompanying analysis tools.

pub mod analysis;
mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod seed;
pub mod selection;

pub use analysis::{
    entropy_histogram, learning_efficiency, linear_cka, pairwise_cka, CkaMatrix, LayerLevel,
};
pub use data::{
    dirichlet_partition, generate_synthetic, ClientPartition, Dataset, PartitionSpec, SyntheticSpec,
};
pub use error::{FedError, Result};
pub use federation::{run_federation, Clock, Federation, FederationConfig, RoundReport, Strategy};
pub use nn::{
    cross_entropy_loss, softmax_rows, softmax_with_temperature, Dense, ForwardPass, Gradients,
    Layer, Model, Sgd, Tensor2,
};
pub use selection::{compute_entropy, select_by_entropy, select_random, SelectionResult};
