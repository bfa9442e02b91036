//! Training-free language-guided image retrieval.
//!
//! Text-to-image, composed and chat-based queries are adapted to one
//! `(instruction, reference description)` pair and run through three
//! stages: description synthesis with dual-path embedding retrieval,
//! proposition verification of the top-k candidates, and pairwise
//! evaluation of the top-α against the reference image.

pub mod adapters;
pub mod cache;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod images;
pub mod index;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod stage1;
pub mod stage2;
pub mod stage3;

pub use adapters::{run_query, run_session_round, Session, SessionStore};
pub use config::PipelineConfig;
pub use engine::Engine;
pub use error::{Error, Result};
pub use gateway::{BackendRole, Gateway};
pub use index::EmbeddingIndex;
pub use model::{ImageRecord, QueryKind, RankedList, RetrievalQuery, Stage};
pub use pipeline::{run_pipeline, PipelineInput, PipelineOutput};
