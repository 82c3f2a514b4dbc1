use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connect to {peer} failed: {reason}")]
    Connect { peer: String, reason: String },
    #[error("authentication to {peer} failed: {reason}")]
    Auth { peer: String, reason: String },
    #[error("file transfer failed: {0}")]
    Transfer(String),
    #[error("remote command failed: {0}")]
    Exec(String),
    #[error("session closed")]
    SessionClosed,
}

impl TransportError {
    /// True when the session could not be opened at all.
    pub fn is_open_failure(&self) -> bool {
        matches!(
            self,
            TransportError::Connect { .. } | TransportError::Auth { .. }
        )
    }
}

/// Result of starting a detached process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launch {
    Started {
        handle: String,
    },
    /// The process exited right away with a nonzero status.
    Exited {
        code: i32,
        detail: String,
    },
}

/// An open connect/transfer/exec channel to one device.
pub trait TransportSession: Send {
    fn peer(&self) -> &str;

    /// Writes `bytes` to `path`, replacing any existing file.
    fn write_file(&mut self, path: &str, bytes: &[u8]) -> Result<(), TransportError>;

    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, TransportError>;

    /// Starts `command` detached from the session.
    fn launch(&mut self, command: &str) -> Result<Launch, TransportError>;

    fn is_alive(&mut self, handle: &str) -> Result<bool, TransportError>;

    fn terminate(&mut self, handle: &str) -> Result<(), TransportError>;

    fn close(&mut self);
}

/// Opens sessions to device addresses.
pub trait Connector: Send + Sync {
    fn connect(
        &self,
        peer: &str,
        credentials: &str,
    ) -> Result<Box<dyn TransportSession>, TransportError>;
}
