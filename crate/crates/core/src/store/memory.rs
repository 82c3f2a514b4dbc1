use std::sync::{Arc, Mutex};

use super::{decode_journal, Backend, Record, Snapshot, StoreError};

/// The bytes a [`MemoryBackend`] has written. Shared so a test can drop a
/// store and reopen another one over the same media.
#[derive(Debug, Default)]
pub struct MemoryMedia {
    pub journal: Vec<u8>,
    pub snapshot: Option<Vec<u8>>,
}

/// In-memory backend using the same encoding as the file journal.
#[derive(Debug, Clone, Default)]
pub struct MemoryBackend {
    media: Arc<Mutex<MemoryMedia>>,
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn media(&self) -> Arc<Mutex<MemoryMedia>> {
        Arc::clone(&self.media)
    }
}

impl Backend for MemoryBackend {
    fn append(&mut self, encoded: &[u8]) -> Result<(), StoreError> {
        self.media
            .lock()
            .unwrap()
            .journal
            .extend_from_slice(encoded);
        Ok(())
    }

    fn load(&mut self) -> Result<(Option<Snapshot>, Vec<Record>), StoreError> {
        let mut media = self.media.lock().unwrap();
        let snapshot = match &media.snapshot {
            Some(bytes) => Some(serde_json::from_slice(bytes)?),
            None => None,
        };
        let decoded = decode_journal(&media.journal)?;
        media.journal.truncate(decoded.valid_len);
        Ok((snapshot, decoded.records))
    }

    fn compact(&mut self, snapshot: &Snapshot) -> Result<(), StoreError> {
        let bytes = serde_json::to_vec(snapshot)?;
        let mut media = self.media.lock().unwrap();
        media.snapshot = Some(bytes);
        media.journal.clear();
        Ok(())
    }
}
