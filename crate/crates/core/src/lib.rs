//! Caption-guided visual relationship graph captioning, end to end on one
//! CPU: a weakly supervised multi-instance predicate detector over region
//! pairs, a graph encoder producing context-aware node features, and a
//! two-layer attention decoder that jointly generates word and tag
//! sequences, trained by cross-entropy and then by self-critical reward
//! optimization.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff tape,
//! Adam optimizer, caption metrics (BLEU, ROUGE-L, CIDEr-D), and a synthetic
//! corpus generator that stands in for an object detector.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod mil;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod toygen;
pub mod train;
pub mod vocab;

pub use config::PipelineConfig;
pub use corpus::{ImageRecord, Region};
pub use decoder::{Captioner, GenerationOutput, MtBlock};
pub use error::{Error, Result};
pub use graph::CgvrgGraph;
pub use mil::MilModel;
pub use params::{AdamConfig, Binder, Parameters};
pub use pipeline::Pipeline;
pub use tensor::{Primitive, Scalar, Tape, Tensor};
pub use vocab::{Tag, Triple, Vocabularies};
