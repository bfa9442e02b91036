//! Process state shared by request handlers: the engine, the current index
//! and the session store.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use lgir_core::adapters::SessionStore;
use lgir_core::{EmbeddingIndex, Engine};

pub struct AppState {
    pub engine: Arc<Engine>,
    pub sessions: SessionStore,
    /// Where a fresh ingest is written before it replaces the live index.
    pub index_path: Option<PathBuf>,
    index: RwLock<Option<Arc<EmbeddingIndex>>>,
    ingesting: AtomicBool,
}

/// Clears the ingest flag when dropped, including on error paths.
pub struct IngestGuard<'a>(&'a AtomicBool);

impl Drop for IngestGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::Release);
    }
}

impl AppState {
    pub fn new(engine: Engine, sessions: SessionStore, index: Option<EmbeddingIndex>, index_path: Option<PathBuf>) -> Self {
        Self {
            engine: Arc::new(engine),
            sessions,
            index_path,
            index: RwLock::new(index.map(Arc::new)),
            ingesting: AtomicBool::new(false),
        }
    }

    /// Snapshot of the live index. Readers keep their snapshot for the
    /// whole request, so a concurrent swap never shows them a mix.
    pub fn index(&self) -> Option<Arc<EmbeddingIndex>> {
        self.index.read().expect("index lock poisoned").clone()
    }

    pub fn swap_index(&self, index: EmbeddingIndex) {
        *self.index.write().expect("index lock poisoned") = Some(Arc::new(index));
    }

    /// `None` when another ingest is already running.
    pub fn begin_ingest(&self) -> Option<IngestGuard<'_>> {
        self.ingesting
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| IngestGuard(&self.ingesting))
    }
}
