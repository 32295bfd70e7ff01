//! Minimal feed-forward network stack around ACLs.

pub mod layers;
pub mod loss;
pub mod models;
pub mod network;
pub mod train;

pub use layers::{Linear, LinearGrads};
pub use network::{LayerGrads, NetError, NetGradients, Network, Node, Trace};
pub use train::{evaluate, sgd_epoch, Dataset, EpochMetrics, TrainConfig};
