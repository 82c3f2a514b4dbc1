//! SSH-2 transport: key-based authentication, SFTP for file transfer and exec
//! channels for commands.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use ssh2::Session;

use super::transport::{Connector, Launch, TransportError, TransportSession};

/// Device address to private-key path, loaded from a JSON object.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CredentialStore {
    keys: BTreeMap<String, PathBuf>,
}

impl CredentialStore {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let keys: BTreeMap<String, PathBuf> = serde_json::from_str(text)?;
        Ok(CredentialStore { keys })
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn insert(&mut self, address: &str, key: impl Into<PathBuf>) {
        self.keys.insert(address.to_owned(), key.into());
    }

    pub fn key_for(&self, reference: &str) -> Option<&Path> {
        self.keys.get(reference).map(PathBuf::as_path)
    }
}

#[derive(Debug, Clone)]
pub struct SshConnector {
    credentials: CredentialStore,
    user: String,
    port: u16,
    timeout: Duration,
}

impl SshConnector {
    pub fn new(credentials: CredentialStore, user: &str, port: u16) -> Self {
        SshConnector {
            credentials,
            user: user.to_owned(),
            port,
            timeout: Duration::from_secs(10),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

/// The host part of a `host:port` device address.
fn host_of(address: &str) -> &str {
    let host = address.rsplit_once(':').map_or(address, |(host, _)| host);
    host.trim_start_matches('[').trim_end_matches(']')
}

/// Quotes `text` for a POSIX shell.
fn shell_quote(text: &str) -> String {
    format!("'{}'", text.replace('\'', r"'\''"))
}

impl Connector for SshConnector {
    fn connect(
        &self,
        peer: &str,
        credentials: &str,
    ) -> Result<Box<dyn TransportSession>, TransportError> {
        let connect_err = |reason: String| TransportError::Connect {
            peer: peer.to_owned(),
            reason,
        };
        let auth_err = |reason: String| TransportError::Auth {
            peer: peer.to_owned(),
            reason,
        };
        let key = self
            .credentials
            .key_for(credentials)
            .ok_or_else(|| auth_err(format!("no key configured for {credentials}")))?;
        let target = (host_of(peer), self.port)
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .next()
            .ok_or_else(|| connect_err("address did not resolve".into()))?;
        let tcp = TcpStream::connect_timeout(&target, self.timeout)
            .map_err(|e| connect_err(e.to_string()))?;
        let mut session = Session::new().map_err(|e| connect_err(e.to_string()))?;
        session.set_timeout(self.timeout.as_millis() as u32);
        session.set_tcp_stream(tcp);
        session
            .handshake()
            .map_err(|e| connect_err(e.to_string()))?;
        session
            .userauth_pubkey_file(&self.user, None, key, None)
            .map_err(|e| auth_err(e.to_string()))?;
        if !session.authenticated() {
            return Err(auth_err("key rejected".into()));
        }
        Ok(Box::new(SshSession {
            peer: peer.to_owned(),
            session: Some(session),
        }))
    }
}

pub struct SshSession {
    peer: String,
    session: Option<Session>,
}

impl SshSession {
    fn session(&self) -> Result<&Session, TransportError> {
        self.session.as_ref().ok_or(TransportError::SessionClosed)
    }

    /// Runs `command` over an exec channel, returning status, stdout, stderr.
    fn run(&self, command: &str) -> Result<(i32, String, String), TransportError> {
        let exec = |e: ssh2::Error| TransportError::Exec(e.to_string());
        let mut channel = self.session()?.channel_session().map_err(exec)?;
        channel.exec(command).map_err(exec)?;
        let mut stdout = String::new();
        channel
            .read_to_string(&mut stdout)
            .map_err(|e| TransportError::Exec(e.to_string()))?;
        let mut stderr = String::new();
        channel
            .stderr()
            .read_to_string(&mut stderr)
            .map_err(|e| TransportError::Exec(e.to_string()))?;
        channel.wait_close().map_err(exec)?;
        let status = channel.exit_status().map_err(exec)?;
        Ok((status, stdout, stderr))
    }
}

fn pid_of(handle: &str) -> Result<u32, TransportError> {
    handle
        .strip_prefix("pid:")
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| TransportError::Exec(format!("malformed process handle {handle:?}")))
}

impl TransportSession for SshSession {
    fn peer(&self) -> &str {
        &self.peer
    }

    fn write_file(&mut self, path: &str, bytes: &[u8]) -> Result<(), TransportError> {
        let transfer = |e: ssh2::Error| TransportError::Transfer(e.to_string());
        if let Some(dir) = Path::new(path).parent().and_then(Path::to_str) {
            if !dir.is_empty() {
                self.run(&format!("mkdir -p {}", shell_quote(dir)))?;
            }
        }
        let sftp = self.session()?.sftp().map_err(transfer)?;
        let mut file = sftp.create(Path::new(path)).map_err(transfer)?;
        file.write_all(bytes)
            .map_err(|e| TransportError::Transfer(e.to_string()))?;
        Ok(())
    }

    fn read_file(&mut self, path: &str) -> Result<Vec<u8>, TransportError> {
        let transfer = |e: ssh2::Error| TransportError::Transfer(e.to_string());
        let sftp = self.session()?.sftp().map_err(transfer)?;
        let mut file = sftp.open(Path::new(path)).map_err(transfer)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| TransportError::Transfer(e.to_string()))?;
        Ok(bytes)
    }

    fn launch(&mut self, command: &str) -> Result<Launch, TransportError> {
        // Start detached, then give the process a moment: an immediate exit is
        // reported with its status instead of a pid.
        let script = format!(
            "nohup {command} >/dev/null 2>&1 & pid=$!; sleep 1; \
             if kill -0 $pid 2>/dev/null; then echo $pid; else wait $pid; exit $?; fi"
        );
        let (status, stdout, stderr) = self.run(&format!("sh -c {}", shell_quote(&script)))?;
        if status != 0 {
            return Ok(Launch::Exited {
                code: status,
                detail: stderr.trim().to_owned(),
            });
        }
        let pid: u32 = stdout
            .trim()
            .parse()
            .map_err(|_| TransportError::Exec(format!("unexpected launch output {stdout:?}")))?;
        Ok(Launch::Started {
            handle: format!("pid:{pid}"),
        })
    }

    fn is_alive(&mut self, handle: &str) -> Result<bool, TransportError> {
        let pid = pid_of(handle)?;
        let (status, _, _) = self.run(&format!("kill -0 {pid}"))?;
        Ok(status == 0)
    }

    fn terminate(&mut self, handle: &str) -> Result<(), TransportError> {
        let pid = pid_of(handle)?;
        let (status, _, stderr) = self.run(&format!("kill {pid}"))?;
        if status != 0 {
            return Err(TransportError::Exec(format!(
                "kill {pid}: {}",
                stderr.trim()
            )));
        }
        Ok(())
    }

    fn close(&mut self) {
        if let Some(session) = self.session.take() {
            let _ = session.disconnect(None, "closing", None);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn credentials_file_format() {
        let store =
            CredentialStore::from_json(r#"{"10.0.0.7:9000": "/etc/fnfleet/keys/rb1"}"#).unwrap();
        assert_eq!(
            store.key_for("10.0.0.7:9000"),
            Some(Path::new("/etc/fnfleet/keys/rb1"))
        );
        assert!(store.key_for("10.0.0.8:9000").is_none());
        assert!(CredentialStore::from_json("[1]").is_err());
    }

    #[test]
    fn quoting() {
        assert_eq!(shell_quote("a b"), "'a b'");
        assert_eq!(shell_quote("it's"), r"'it'\''s'");
        assert_eq!(host_of("10.0.0.7:9000"), "10.0.0.7");
        assert_eq!(host_of("[::1]:22"), "::1");
    }

    #[test]
    fn missing_key_is_auth_failure() {
        let connector = SshConnector::new(CredentialStore::default(), "pi", 22);
        let err = connector
            .connect("10.0.0.7:9000", "10.0.0.7:9000")
            .err()
            .unwrap();
        assert!(matches!(err, TransportError::Auth { .. }));
        assert!(err.is_open_failure());
    }

    #[test]
    fn refused_connection_is_open_failure() {
        // Bind then drop a listener to get a local port with nothing on it.
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let mut creds = CredentialStore::default();
        creds.insert("127.0.0.1:9100", "/nonexistent/key");
        let connector = SshConnector::new(creds, "pi", port).with_timeout(Duration::from_secs(2));
        let err = connector
            .connect("127.0.0.1:9100", "127.0.0.1:9100")
            .err()
            .unwrap();
        assert!(matches!(err, TransportError::Connect { .. }), "{err}");
    }

    #[test]
    fn malformed_handle() {
        assert!(pid_of("sim-1").is_err());
        assert_eq!(pid_of("pid:42").unwrap(), 42);
    }
}
