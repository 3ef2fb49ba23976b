//! Video question answering over multi-object event graphs.
//!
//! The crate turns per-clip object observations into a spatio-temporal
//! graph, pools it through a stack of GNN cluster layers, fuses the scales
//! with self-attention, and trains the whole stack against a language
//! encoder with adversarial and contrastive regularizers. Everything runs
//! on a small reverse-mode tape; no external tensor runtime is involved.

pub mod adversarial;
pub mod autodiff;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod model;
pub mod pool;
pub mod text;
pub mod train;

pub use error::{Error, Result};
