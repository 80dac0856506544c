//! Discrete "strings of motion" from wearable accelerometer streams.
//!
//! A strided convolutional encoder maps sensor windows to latent frames, a
//! grouped K-means vector quantizer turns every frame into a composite
//! codeword, and a causal convolutional aggregator is trained with a
//! multi-step contrastive objective. The resulting token streams (or SAX
//! baselines) are classified with a recurrent network, optionally on top of
//! embeddings from a small masked-token language model.

pub mod checkpoint;
pub mod classifier;
pub mod cpc;
pub mod datapipe;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod lm;
pub mod nn;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod pretrainer;
pub mod quantizer;
pub mod repro;
pub mod sax;
pub mod tokens;

pub use error::{Error, Result};
