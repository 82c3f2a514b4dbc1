//! Persistence for every control-plane entity.
//!
//! All mutations go through [`Store::apply`], which appends one record to the
//! backend before updating the in-memory [`StoreState`]. Backends keep an
//! append-only journal of records plus an occasional snapshot:
//!
//! * record: `len: u32 LE | seq: u64 LE | kind: u8 | JSON body`, where `len`
//!   counts the bytes after itself. Deletions set the high bit of `kind` and
//!   carry `{"id": ...}` as body.
//! * snapshot: a JSON document `{"last_seq": n, "state": {...}}` holding every
//!   live entity. Records with `seq <= last_seq` are skipped on replay.

mod journal;
mod memory;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AutoDeployRule, Deployment, Device, FunctionDefinition, Id};
use crate::telemetry::{ActionOutcome, InteropRule, TelemetryBatch};

pub use journal::JournalBackend;
pub use memory::{MemoryBackend, MemoryMedia};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt record at offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error("encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[repr(u8)]
pub enum EntityKind {
    Function = 1,
    Device = 2,
    Deployment = 3,
    AutoDeployRule = 4,
    InteropRule = 5,
    TelemetryBatch = 6,
    ActionOutcome = 7,
}

const DELETE_FLAG: u8 = 0x80;

impl EntityKind {
    fn from_byte(byte: u8) -> Option<Self> {
        Some(match byte {
            1 => EntityKind::Function,
            2 => EntityKind::Device,
            3 => EntityKind::Deployment,
            4 => EntityKind::AutoDeployRule,
            5 => EntityKind::InteropRule,
            6 => EntityKind::TelemetryBatch,
            7 => EntityKind::ActionOutcome,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mutation {
    PutFunction(FunctionDefinition),
    PutDevice(Device),
    PutDeployment(Deployment),
    PutAutoDeployRule(AutoDeployRule),
    PutInteropRule(InteropRule),
    PutTelemetryBatch(TelemetryBatch),
    PutActionOutcome(ActionOutcome),
    Delete(EntityKind, Id),
}

#[derive(Serialize, Deserialize)]
struct DeleteBody {
    id: Id,
}

impl Mutation {
    fn kind_byte(&self) -> u8 {
        match self {
            Mutation::PutFunction(_) => EntityKind::Function as u8,
            Mutation::PutDevice(_) => EntityKind::Device as u8,
            Mutation::PutDeployment(_) => EntityKind::Deployment as u8,
            Mutation::PutAutoDeployRule(_) => EntityKind::AutoDeployRule as u8,
            Mutation::PutInteropRule(_) => EntityKind::InteropRule as u8,
            Mutation::PutTelemetryBatch(_) => EntityKind::TelemetryBatch as u8,
            Mutation::PutActionOutcome(_) => EntityKind::ActionOutcome as u8,
            Mutation::Delete(kind, _) => *kind as u8 | DELETE_FLAG,
        }
    }

    fn body(&self) -> Result<Vec<u8>, serde_json::Error> {
        match self {
            Mutation::PutFunction(e) => serde_json::to_vec(e),
            Mutation::PutDevice(e) => serde_json::to_vec(e),
            Mutation::PutDeployment(e) => serde_json::to_vec(e),
            Mutation::PutAutoDeployRule(e) => serde_json::to_vec(e),
            Mutation::PutInteropRule(e) => serde_json::to_vec(e),
            Mutation::PutTelemetryBatch(e) => serde_json::to_vec(e),
            Mutation::PutActionOutcome(e) => serde_json::to_vec(e),
            Mutation::Delete(_, id) => serde_json::to_vec(&DeleteBody { id: id.clone() }),
        }
    }

    fn decode(kind: u8, body: &[u8]) -> Result<Self, String> {
        let entity = EntityKind::from_byte(kind & !DELETE_FLAG)
            .ok_or_else(|| format!("unknown entity kind {kind:#04x}"))?;
        let err = |e: serde_json::Error| e.to_string();
        if kind & DELETE_FLAG != 0 {
            let DeleteBody { id } = serde_json::from_slice(body).map_err(err)?;
            return Ok(Mutation::Delete(entity, id));
        }
        Ok(match entity {
            EntityKind::Function => {
                Mutation::PutFunction(serde_json::from_slice(body).map_err(err)?)
            }
            EntityKind::Device => Mutation::PutDevice(serde_json::from_slice(body).map_err(err)?),
            EntityKind::Deployment => {
                Mutation::PutDeployment(serde_json::from_slice(body).map_err(err)?)
            }
            EntityKind::AutoDeployRule => {
                Mutation::PutAutoDeployRule(serde_json::from_slice(body).map_err(err)?)
            }
            EntityKind::InteropRule => {
                Mutation::PutInteropRule(serde_json::from_slice(body).map_err(err)?)
            }
            EntityKind::TelemetryBatch => {
                Mutation::PutTelemetryBatch(serde_json::from_slice(body).map_err(err)?)
            }
            EntityKind::ActionOutcome => {
                Mutation::PutActionOutcome(serde_json::from_slice(body).map_err(err)?)
            }
        })
    }
}

/// A sequenced mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub seq: u64,
    pub mutation: Mutation,
}

impl Record {
    pub fn encode(&self) -> Result<Vec<u8>, serde_json::Error> {
        let body = self.mutation.body()?;
        let len = u32::try_from(8 + 1 + body.len()).expect("record larger than 4 GiB");
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.push(self.mutation.kind_byte());
        out.extend_from_slice(&body);
        Ok(out)
    }
}

/// Result of decoding a journal byte stream.
#[derive(Debug)]
pub struct DecodedJournal {
    pub records: Vec<Record>,
    /// Length of the prefix made of complete records. A shorter value than the
    /// input length means the tail holds a torn write.
    pub valid_len: usize,
}

pub fn decode_journal(bytes: &[u8]) -> Result<DecodedJournal, StoreError> {
    let mut records = Vec::new();
    let mut offset = 0usize;
    while bytes.len() - offset >= 4 {
        let len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
        if len < 9 {
            return Err(StoreError::Corrupt {
                offset: offset as u64,
                reason: format!("record length {len} below header size"),
            });
        }
        let start = offset + 4;
        if bytes.len() - start < len {
            break;
        }
        let seq = u64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        let kind = bytes[start + 8];
        let mutation =
            Mutation::decode(kind, &bytes[start + 9..start + len]).map_err(|reason| {
                StoreError::Corrupt {
                    offset: offset as u64,
                    reason,
                }
            })?;
        records.push(Record { seq, mutation });
        offset = start + len;
    }
    Ok(DecodedJournal {
        records,
        valid_len: offset,
    })
}

/// Every live entity, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub functions: BTreeMap<Id, FunctionDefinition>,
    /// Every committed version of every live function, for pinned deployments.
    pub function_versions: BTreeMap<Id, BTreeMap<u32, FunctionDefinition>>,
    pub devices: BTreeMap<Id, Device>,
    pub deployments: BTreeMap<Id, Deployment>,
    pub autodeploy_rules: BTreeMap<Id, AutoDeployRule>,
    pub interop_rules: BTreeMap<Id, InteropRule>,
    pub telemetry: BTreeMap<Id, TelemetryBatch>,
    pub outcomes: BTreeMap<Id, ActionOutcome>,
    /// Highest counter seen per id prefix, including deleted entities.
    pub counters: BTreeMap<String, u64>,
}

impl StoreState {
    /// The id the next entity with `prefix` will receive.
    pub fn next_id(&self, prefix: &str) -> Id {
        Id::allocated(prefix, self.counters.get(prefix).copied().unwrap_or(0) + 1)
    }

    fn observe(&mut self, id: &Id) {
        if let Some((prefix, counter)) = id.parts() {
            let slot = self.counters.entry(prefix.to_owned()).or_insert(0);
            *slot = (*slot).max(counter);
        }
    }

    pub fn apply(&mut self, mutation: Mutation) {
        match mutation {
            Mutation::PutFunction(f) => {
                self.observe(&f.id);
                self.function_versions
                    .entry(f.id.clone())
                    .or_default()
                    .insert(f.version, f.clone());
                self.functions.insert(f.id.clone(), f);
            }
            Mutation::PutDevice(d) => {
                self.observe(&d.id);
                self.devices.insert(d.id.clone(), d);
            }
            Mutation::PutDeployment(d) => {
                self.observe(&d.id);
                self.deployments.insert(d.id.clone(), d);
            }
            Mutation::PutAutoDeployRule(r) => {
                self.observe(&r.id);
                self.autodeploy_rules.insert(r.id.clone(), r);
            }
            Mutation::PutInteropRule(r) => {
                self.observe(&r.id);
                self.interop_rules.insert(r.id.clone(), r);
            }
            Mutation::PutTelemetryBatch(b) => {
                self.observe(&b.id);
                self.telemetry.insert(b.id.clone(), b);
            }
            Mutation::PutActionOutcome(o) => {
                self.observe(&o.id);
                self.outcomes.insert(o.id.clone(), o);
            }
            Mutation::Delete(kind, id) => {
                self.observe(&id);
                match kind {
                    EntityKind::Function => {
                        self.functions.remove(&id);
                        self.function_versions.remove(&id);
                    }
                    EntityKind::Device => {
                        self.devices.remove(&id);
                    }
                    EntityKind::Deployment => {
                        self.deployments.remove(&id);
                    }
                    EntityKind::AutoDeployRule => {
                        self.autodeploy_rules.remove(&id);
                    }
                    EntityKind::InteropRule => {
                        self.interop_rules.remove(&id);
                    }
                    EntityKind::TelemetryBatch => {
                        self.telemetry.remove(&id);
                    }
                    EntityKind::ActionOutcome => {
                        self.outcomes.remove(&id);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_seq: u64,
    pub state: StoreState,
}

/// Durable media for records and snapshots.
pub trait Backend: Send {
    fn append(&mut self, encoded: &[u8]) -> Result<(), StoreError>;

    /// Reads the latest snapshot (if any) and every journal record, dropping a
    /// torn tail.
    fn load(&mut self) -> Result<(Option<Snapshot>, Vec<Record>), StoreError>;

    /// Replaces the snapshot and empties the journal.
    fn compact(&mut self, snapshot: &Snapshot) -> Result<(), StoreError>;
}

pub struct Store {
    backend: Box<dyn Backend>,
    state: StoreState,
    seq: u64,
    since_compaction: usize,
    compact_every: usize,
}

pub const DEFAULT_COMPACT_EVERY: usize = 4096;

impl Store {
    pub fn open(mut backend: Box<dyn Backend>) -> Result<Self, StoreError> {
        let (snapshot, records) = backend.load()?;
        let (mut seq, mut state) = match snapshot {
            Some(snapshot) => (snapshot.last_seq, snapshot.state),
            None => (0, StoreState::default()),
        };
        let mut replayed = 0;
        for record in records {
            if record.seq <= seq {
                continue;
            }
            seq = record.seq;
            state.apply(record.mutation);
            replayed += 1;
        }
        log::debug!("store opened at seq {seq}, {replayed} journal records replayed");
        Ok(Store {
            backend,
            state,
            seq,
            since_compaction: replayed,
            compact_every: DEFAULT_COMPACT_EVERY,
        })
    }

    pub fn in_memory() -> Self {
        Store::open(Box::new(MemoryBackend::new())).expect("memory backend cannot fail")
    }

    /// Compacts after this many journal records. Zero disables compaction.
    pub fn set_compact_every(&mut self, records: usize) {
        self.compact_every = records;
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    pub fn last_seq(&self) -> u64 {
        self.seq
    }

    pub fn apply(&mut self, mutation: Mutation) -> Result<(), StoreError> {
        let record = Record {
            seq: self.seq + 1,
            mutation,
        };
        self.backend.append(&record.encode()?)?;
        self.seq = record.seq;
        self.state.apply(record.mutation);
        self.since_compaction += 1;
        if self.compact_every > 0 && self.since_compaction >= self.compact_every {
            self.compact()?;
        }
        Ok(())
    }

    pub fn compact(&mut self) -> Result<(), StoreError> {
        let snapshot = Snapshot {
            last_seq: self.seq,
            state: self.state.clone(),
        };
        self.backend.compact(&snapshot)?;
        self.since_compaction = 0;
        Ok(())
    }
}
