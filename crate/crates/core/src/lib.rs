//! Contrastive language-action post-pre-training on synthetic untrimmed
//! videos, with temporal action localization, few-shot localization and
//! natural-language grounding evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod experiment;
pub mod language;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod provenance;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
