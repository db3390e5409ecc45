//! Feature-level voice anonymization with pools of k-means quantizers.
//!
//! Frames are quantized by a codebook drawn at random from a pool trained on
//! speaker subsets, which replaces speaker detail by the centroids of other
//! speakers. The crate also carries a kNN frame-matching baseline and an
//! attacker-simulation harness (EER, content error, emotion recall) over a
//! synthetic corpus with planted content, speaker, and emotion structure.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod knn;
pub mod matrix;
pub mod pool;

pub use corpus::{generate_corpus, load_corpus, save_corpus, AnchorSet, Corpus, SyntheticSpec, Utterance};
pub use error::{Error, Result};
pub use kmeans::{assign, centers, fit, kmeanspp_init, quantize, Assignments, KMeansMode, KMeansModel, KMeansParams};
pub use matrix::FeatureMatrix;
pub use pool::{
    anonymize_corpus, anonymize_utterance, load_pool, partition_speakers, save_pool, select_model, train_pool,
    Granularity, KMeansPool, PartitionStrategy, SelectionPolicy,
};
