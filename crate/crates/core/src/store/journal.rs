use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use super::{decode_journal, Backend, Record, Snapshot, StoreError};

const JOURNAL_FILE: &str = "journal.bin";
const SNAPSHOT_FILE: &str = "snapshot.json";

/// File-backed journal with snapshot compaction, rooted at a directory.
#[derive(Debug)]
pub struct JournalBackend {
    dir: PathBuf,
    journal: File,
    sync: bool,
}

impl JournalBackend {
    /// Opens (creating if needed) the journal under `dir`. With `sync` set,
    /// every append is followed by `fdatasync`.
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let journal = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(dir.join(JOURNAL_FILE))?;
        Ok(JournalBackend { dir, journal, sync })
    }

    pub fn journal_path(&self) -> PathBuf {
        self.dir.join(JOURNAL_FILE)
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join(SNAPSHOT_FILE)
    }
}

impl Backend for JournalBackend {
    fn append(&mut self, encoded: &[u8]) -> Result<(), StoreError> {
        self.journal.write_all(encoded)?;
        self.journal.flush()?;
        if self.sync {
            self.journal.sync_data()?;
        }
        Ok(())
    }

    fn load(&mut self) -> Result<(Option<Snapshot>, Vec<Record>), StoreError> {
        let snapshot = match fs::read(self.snapshot_path()) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes)?),
            Err(err) if err.kind() == std::io::ErrorKind::NotFound => None,
            Err(err) => return Err(err.into()),
        };
        let mut bytes = Vec::new();
        File::open(self.journal_path())?.read_to_end(&mut bytes)?;
        let decoded = decode_journal(&bytes)?;
        if decoded.valid_len < bytes.len() {
            log::warn!(
                "dropping {} bytes of torn journal tail",
                bytes.len() - decoded.valid_len
            );
            self.journal.set_len(decoded.valid_len as u64)?;
            self.journal.sync_data()?;
        }
        Ok((snapshot, decoded.records))
    }

    fn compact(&mut self, snapshot: &Snapshot) -> Result<(), StoreError> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut file = File::create(&tmp)?;
            serde_json::to_writer(&mut file, snapshot)?;
            file.sync_all()?;
        }
        fs::rename(&tmp, self.snapshot_path())?;
        // A crash before the truncation leaves records the snapshot already
        // covers; replay skips them by sequence number.
        self.journal.set_len(0)?;
        self.journal.sync_data()?;
        Ok(())
    }
}
