//! Agent-local storage: the device id and the artifacts handlers produce.

use std::path::PathBuf;
use std::sync::Arc;

use crate::deploy::SimHost;

pub trait Workspace: Send + Sync {
    fn read(&self, path: &str) -> Option<Vec<u8>>;
    fn write(&self, path: &str, bytes: &[u8]) -> Result<(), String>;
    /// Files directly under `dir`, as `dir/name`, sorted.
    fn list(&self, dir: &str) -> Vec<String>;
}

/// A directory on the local file system.
#[derive(Debug, Clone)]
pub struct DirWorkspace {
    root: PathBuf,
}

impl DirWorkspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirWorkspace { root: root.into() }
    }
}

impl Workspace for DirWorkspace {
    fn read(&self, path: &str) -> Option<Vec<u8>> {
        std::fs::read(self.root.join(path)).ok()
    }

    fn write(&self, path: &str, bytes: &[u8]) -> Result<(), String> {
        let full = self.root.join(path);
        if let Some(parent) = full.parent() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
        std::fs::write(&full, bytes).map_err(|e| format!("{}: {e}", full.display()))
    }

    fn list(&self, dir: &str) -> Vec<String> {
        let Ok(entries) = std::fs::read_dir(self.root.join(dir)) else {
            return Vec::new();
        };
        let mut names: Vec<String> = entries
            .filter_map(Result::ok)
            .filter(|e| e.path().is_file())
            .map(|e| format!("{dir}/{}", e.file_name().to_string_lossy()))
            .collect();
        names.sort();
        names
    }
}

/// A directory in a simulated host's file table.
#[derive(Clone)]
pub struct HostWorkspace {
    host: Arc<SimHost>,
    root: String,
}

impl HostWorkspace {
    pub fn new(host: Arc<SimHost>, root: &str) -> Self {
        HostWorkspace {
            host,
            root: root.trim_end_matches('/').to_owned(),
        }
    }

    fn full(&self, path: &str) -> String {
        format!("{}/{path}", self.root)
    }
}

impl Workspace for HostWorkspace {
    fn read(&self, path: &str) -> Option<Vec<u8>> {
        self.host.read(&self.full(path))
    }

    fn write(&self, path: &str, bytes: &[u8]) -> Result<(), String> {
        self.host.write(&self.full(path), bytes);
        Ok(())
    }

    fn list(&self, dir: &str) -> Vec<String> {
        let prefix = self.full(&format!("{dir}/"));
        self.host
            .list(&prefix)
            .into_iter()
            .filter_map(|p| {
                let name = p.strip_prefix(&prefix)?;
                (!name.contains('/')).then(|| format!("{dir}/{name}"))
            })
            .collect()
    }
}
