//! Semi-supervised few-shot class-incremental learning.
//!
//! A base session with plenty of labels is followed by N-way K-shot sessions
//! that each also bring an unlabeled pool. Novel classes are learned with
//! class-balanced self-training on that pool; old classes are protected by
//! distilling a frozen reference model on an exemplar memory that is first
//! pruned of its most uncertain members. Evaluation uses nearest-mean-of-
//! exemplars classification.
//!
//! Modules map onto the pipeline:
//!
//! * [`protocol`] builds the session curriculum;
//! * [`model`] holds the backbone/head contract, freezing and NME;
//! * [`exemplar`] maintains the herding-selected rehearsal memory;
//! * [`equilibrium`] performs class-balanced pseudo-label selection;
//! * [`distill`] estimates uncertainty, refines the memory and composes
//!   the session loss;
//! * [`harness`] runs whole experiments and produces metrics and reports.

pub mod distill;
pub mod equilibrium;
pub mod error;
pub mod exec;
pub mod exemplar;
pub mod harness;
pub mod loss;
pub mod model;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};

pub type ClassId = usize;
pub type SampleId = usize;
