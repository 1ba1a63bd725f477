//! Cross-modal zero-shot retrieval engine.
//!
//! Sketch and image feature vectors are embedded into one shared space by two
//! visual encoders, with the image branch modulated by a sigmoid attention
//! gate computed from the paired sketch. Class word vectors, propagated over a
//! minimum-spanning-tree class graph by one graph-convolution layer, anchor the
//! space semantically. Training minimises a weighted sum of a cross-modal
//! latent loss, cross-modal decoder loss, cross-triplet loss and a
//! classification loss on relaxed ternary hash codes. Retrieval is exact k-NN
//! under Euclidean distance or generalised Hamming distance over trits.

pub mod config;
pub mod datamodel;
pub mod diffmath;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod retrieval;
pub mod semantics;
pub mod trainer;

pub use error::{Error, Result};
