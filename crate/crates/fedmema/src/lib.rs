//! Desk-scale federated multimodal segmentation.
//!
//! Four imaging modalities, one modality per client site, a server holding a
//! small full-modal dataset. Clients train modality-specific encoders plus
//! personal decoders; the server aggregates encoders per modality, fuses all
//! modalities, and maintains multi-anchor class prototypes that are broadcast
//! back and used by clients for cross-attention calibration of their skip
//! features.
//!
//! Everything is deterministic by construction: ChaCha streams keyed by
//! `(seed, tag)`, fixed accumulation order in every kernel, canonical
//! ordering for aggregation. Two runs with the same config produce
//! byte-identical logs and checkpoints regardless of the parallelism level.

pub mod ablate;
pub mod anchors;
pub mod cli;
pub mod config;
pub mod error;
pub mod fed;
pub mod gradcheck;
pub mod kmeans;
pub mod lacca;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod wire;
