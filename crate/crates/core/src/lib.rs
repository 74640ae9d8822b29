//! Graph-based pseudo-label correction for clustering-driven self-training.
//!
//! Given unit-normalized embeddings, optional classification scores and a
//! noisy labeling (with `-1` outliers), [`correction::correct`] builds a joint
//! similarity kNN graph, trains a one-layer residual GCN link predictor on the
//! non-outlier edges under a fixed early-stop budget, prunes low-confidence and
//! low-connectivity edges, and relabels every node by connected components.
//!
//! [`selftrain::run_loop`] wraps the correction step in a small clustering /
//! extractor-training loop on synthetic data with per-camera shift.

pub mod clustering;
pub mod cli;
pub mod config;
pub mod correction;
pub mod dataset;
pub mod error;
pub mod glc_net;
pub mod knn_graph;
pub mod metrics;
pub mod selftrain;

mod rng;

pub use config::{LoopConfig, RunConfig};
pub use dataset::{EmbeddingSet, Labeling, RawDataset, SynthSpec};
pub use error::{Error, Result};
