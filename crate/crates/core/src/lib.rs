//! Trimodal person identification from face, gesture and voice embeddings.
//!
//! Three modality pathways feed a cross-modal attention stage, a gated
//! fusion head, a confidence-weighted ensemble and a small mistake
//! correction network. Everything runs on a tape-based reverse-mode
//! autodiff engine over `f64` matrices.

pub mod augment;
pub mod cli;
pub mod config;
pub mod crossattn;
pub mod data;
pub mod decision;
pub mod error;
pub mod eval;
pub mod gradients;
pub mod losses;
pub mod modality;
pub mod model;
pub mod numcore;
pub mod pathways;
pub mod trainer;

pub use config::Config;
pub use data::{Dataset, EmbeddingTriplet, SplitData, SyntheticConfig};
pub use decision::FusionState;
pub use error::{Error, Result};
pub use modality::{ModalityId, ModalityMask};
pub use model::{AblationFlags, ModelConfig, TrimodalModel};
