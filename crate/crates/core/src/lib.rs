//! Toolkit for building an aspect-aware multi-modal knowledge graph and
//! using it for entity aspect linking (EAL) and aspect-related image
//! retrieval (AIR).
//!
//! The pipeline, end to end:
//!
//! * [`ingest`] turns rendered pages into section trees, aspect paths, query
//!   sentences and aspect-image links (local section images plus results from
//!   a pluggable [`ingest::SearchClient`]).
//! * [`kg`] holds the validated [`kg::AspectKg`] and its JSONL persistence.
//! * [`encoder`] supplies text/image embeddings and the vector math.
//! * [`features`] computes the seven text similarity features and the image
//!   feature for EAL; [`ltr`] combines them with a coordinate-ascent ranker.
//! * [`air`] builds retrieval triples, trains the contrastive projection and
//!   uses it to correct and expand the graph.
//! * [`metrics`], [`manifest`] and [`cli`] cover evaluation and the
//!   `aspectkg` binary.
//!
//! [`synth`] generates seeded synthetic worlds for experiments and tests.

pub mod air;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod features;
pub mod ingest;
pub mod jsonl;
pub mod kg;
pub mod ltr;
pub mod manifest;
pub mod metrics;
pub mod synth;

pub use error::{Error, Result};
