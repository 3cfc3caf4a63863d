//! Auditing feature-importance disparity over rich subgroups.
//!
//! A subgroup is a linear threshold function of the sensitive attributes. The
//! audit searches for a subgroup of bounded size whose mean importance for a
//! feature differs most from the population's (AVG-FID), or, for linear
//! models, whose weighted regression coefficient differs most (LIN-FID).

pub mod compas;
pub mod csc;
pub mod dataset;
pub mod error;
pub mod fairness;
pub mod importance;
pub mod linfid;
pub mod models;
pub mod pipeline;
pub mod search;
pub mod subgroup;

pub use error::{AuditError, Result};
