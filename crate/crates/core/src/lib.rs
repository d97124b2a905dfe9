//! Archive-based open-ended self-improvement loops.
//!
//! The crate keeps a rooted tree of agent variants ([`archive`]), samples
//! parents from it ([`selection`]), turns parents into children through a
//! pluggable backend ([`generation`]), scores children with staged, gated
//! evaluation ([`evaluation`]) and drives the loop in one of five modes
//! ([`engine`]). [`metrics`] computes run analytics from the event log and
//! the archive.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod config;
pub mod engine;
pub mod evaluation;
pub mod generation;
pub mod metrics;
pub mod mode;
pub mod par;
pub mod rng;
pub mod selection;

pub use config::RunConfig;
pub use engine::{Engine, EngineError};
pub use archive::{AgentNode, Archive, ArchiveError, DomainScores, NodeId};
pub use mode::Mode;
pub use par::Exec;
pub use selection::{SelectionBreakdown, SelectionPolicy};
