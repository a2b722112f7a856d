//! Relevance and helpfulness metrics for heatmap explanations.
//!
//! A heatmap explanation (an attention map or an error map) is judged by how
//! well its rank correlation with a reference map separates the cases where a
//! model answered correctly from the cases where it failed. The crate covers
//! the whole pipeline at desk scale:
//!
//! - [`data`]: heatmaps, attention stacks, records and datasets
//! - [`stats`]: Spearman rank correlation and the two-sample z-test
//! - [`metrics`]: per-record relevance and set-level helpfulness scores
//! - [`attnselect`]: head/layer map extraction and helpfulness-driven selection
//! - [`justifier`]: a small failure predictor with GradCAM error maps
//! - [`baselines`]: gameable reference explanations and a synthetic generator
//! - [`usersim`]: simulated users that read explanations with a threshold rule
//! - [`io`]: record files, binary stack and parameter files, reports

pub mod attnselect;
pub mod baselines;
pub mod data;
pub mod error;
pub mod exec;
pub mod io;
pub mod justifier;
pub mod metrics;
pub mod stats;
pub mod usersim;

mod seed;

pub use data::{AttentionStack, Dataset, Heatmap49, HeatmapKind, Record, Split};
pub use error::{Error, Result};
pub use exec::Execution;
pub use metrics::{HelpReport, Mode};
pub use stats::VarianceMode;
