//! Instruction-guided multimodal dense retrieval.
//!
//! The crate covers the whole pipeline at desk scale: the unified
//! query/candidate data model ([`data`]), toy trainable encoders
//! ([`encoders`]), score- and feature-level fusion ([`fusion`]), exact and
//! IVF-style maximum-inner-product search ([`index`]), contrastive training
//! ([`train`]), recall@k evaluation and error analysis ([`eval`]), seeded
//! synthetic corpora ([`synthgen`]), experiment orchestration
//! ([`experiments`]) and a read-only HTTP search service ([`server`]).

pub mod data;
pub mod encoders;
pub mod eval;
pub mod experiments;
pub mod fusion;
pub mod index;
pub mod linalg;
pub mod model;
pub mod server;
pub mod synthgen;
pub mod train;
