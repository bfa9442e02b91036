//! HTTP service and operator CLI around the retrieval engine.

pub mod api;
pub mod cli;
pub mod state;

pub use api::router;
pub use state::AppState;
