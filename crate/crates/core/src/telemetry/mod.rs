//! Telemetry ingestion, storage and the interoperability rule engine.

mod dispatch;
mod rules;
mod types;

pub use dispatch::*;
pub use rules::*;
pub use types::*;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::clock::Clock;
use crate::deploy::DeviceLocks;
use crate::model::{prefix, Id, Timestamp};
use crate::registry::{Registry, SharedStore};
use crate::store::{Mutation, StoreError};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("unknown device {0}")]
    UnknownDevice(Id),
    #[error("malformed batch: {0}")]
    MalformedBatch(String),
    #[error("invalid rule: {0}")]
    Validation(String),
    #[error("{kind} {id} not found")]
    NotFound { kind: &'static str, id: String },
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error(transparent)]
    Storage(#[from] StoreError),
}

/// Samples per (device, metric), kept in timestamp order. Samples with equal
/// timestamps keep their arrival order.
#[derive(Debug, Clone, Default)]
pub struct TelemetryIndex {
    series: HashMap<(Id, String), Vec<Sample>>,
}

impl TelemetryIndex {
    pub fn insert(&mut self, device: &Id, metric: &str, samples: &[Sample]) {
        let series = self
            .series
            .entry((device.clone(), metric.to_owned()))
            .or_default();
        for sample in samples {
            let at = series.partition_point(|s| s.timestamp <= sample.timestamp);
            series.insert(at, sample.clone());
        }
    }

    /// Samples with `from <= timestamp < to`; an open bound is unbounded.
    pub fn query(
        &self,
        device: &Id,
        metric: &str,
        from: Option<Timestamp>,
        to: Option<Timestamp>,
    ) -> Vec<Sample> {
        let Some(series) = self.series.get(&(device.clone(), metric.to_owned())) else {
            return Vec::new();
        };
        let start = from.map_or(0, |f| series.partition_point(|s| s.timestamp < f));
        let end = to.map_or(series.len(), |t| {
            series.partition_point(|s| s.timestamp < t)
        });
        series[start..end.max(start)].to_vec()
    }
}

/// One delivered or failed rule action.
#[derive(Debug, Clone, PartialEq)]
pub struct FiredAction {
    pub rule_id: Id,
    pub action_index: usize,
    pub action: Action,
    pub event: Event,
    pub outcome: ActionOutcome,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub batch_id: Option<Id>,
    pub stored: usize,
    pub fired: Vec<FiredAction>,
    /// Suppressed (rule, event time) pairs, in evaluation order.
    pub suppressed: Vec<(Id, Timestamp)>,
}

struct Inner {
    engine: RuleEngine,
    index: TelemetryIndex,
}

pub struct TelemetryService {
    store: SharedStore,
    registry: Arc<Registry>,
    clock: Arc<dyn Clock>,
    actions: Arc<dyn ActionClient>,
    notifier: Arc<dyn Notifier>,
    inner: Mutex<Inner>,
    device_locks: DeviceLocks,
}

impl TelemetryService {
    /// Builds the service over the persisted rules and telemetry.
    pub fn open(
        store: SharedStore,
        registry: Arc<Registry>,
        clock: Arc<dyn Clock>,
        actions: Arc<dyn ActionClient>,
        notifier: Arc<dyn Notifier>,
    ) -> Self {
        let (engine, index) = {
            let store = store.lock().unwrap();
            let state = store.state();
            let engine = RuleEngine::new(state.interop_rules.values().cloned());
            let mut index = TelemetryIndex::default();
            for batch in state.telemetry.values() {
                index.insert(&batch.device_id, &batch.metric, &batch.samples);
            }
            (engine, index)
        };
        TelemetryService {
            store,
            registry,
            clock,
            actions,
            notifier,
            inner: Mutex::new(Inner { engine, index }),
            device_locks: DeviceLocks::default(),
        }
    }

    /// Stores a batch, evaluates every sample against the rules in order and
    /// dispatches the resulting actions. Action failures are recorded as
    /// outcomes and never fail the ingest.
    pub fn ingest(&self, upload: TelemetryUpload) -> Result<IngestReport, TelemetryError> {
        upload.validate().map_err(TelemetryError::MalformedBatch)?;
        if !self.registry.device_exists(&upload.device_id) {
            return Err(TelemetryError::UnknownDevice(upload.device_id));
        }
        if upload.samples.is_empty() {
            return Ok(IngestReport::default());
        }
        let device_lock = self.device_locks.get(&upload.device_id);
        let _serial = device_lock.lock().unwrap();

        let mut report = IngestReport {
            stored: upload.samples.len(),
            ..IngestReport::default()
        };
        let mut firings = Vec::new();
        {
            let mut inner = self.inner.lock().unwrap();
            let batch_id = {
                let mut store = self.store.lock().unwrap();
                let batch = TelemetryBatch {
                    id: store.state().next_id(prefix::TELEMETRY_BATCH),
                    device_id: upload.device_id.clone(),
                    metric: upload.metric.clone(),
                    samples: upload.samples.clone(),
                    received_at: self.clock.now(),
                };
                let id = batch.id.clone();
                store.apply(Mutation::PutTelemetryBatch(batch))?;
                id
            };
            report.batch_id = Some(batch_id);
            inner
                .index
                .insert(&upload.device_id, &upload.metric, &upload.samples);

            let mut touched = Vec::new();
            for sample in &upload.samples {
                let event = Event {
                    device_id: upload.device_id.clone(),
                    metric: upload.metric.clone(),
                    value: sample.value,
                    timestamp: sample.timestamp,
                };
                let evaluation = inner.engine.evaluate(&event);
                for firing in &evaluation.fired {
                    if !touched.contains(&firing.rule_id) {
                        touched.push(firing.rule_id.clone());
                    }
                }
                report.suppressed.extend(
                    evaluation
                        .suppressed
                        .into_iter()
                        .map(|id| (id, event.timestamp)),
                );
                firings.extend(evaluation.fired);
            }
            let mut store = self.store.lock().unwrap();
            for id in touched {
                if let Some(rule) = inner.engine.get(&id) {
                    store.apply(Mutation::PutInteropRule(rule.clone()))?;
                }
            }
        }
        for firing in &firings {
            report.fired.extend(self.dispatch(firing)?);
        }
        Ok(report)
    }

    /// Evaluates one event against the rules and dispatches what fires,
    /// without storing the value.
    pub fn evaluate_rules(&self, event: &Event) -> Result<Vec<FiredAction>, TelemetryError> {
        let firings = {
            let mut inner = self.inner.lock().unwrap();
            let evaluation = inner.engine.evaluate(event);
            let mut store = self.store.lock().unwrap();
            for firing in &evaluation.fired {
                if let Some(rule) = inner.engine.get(&firing.rule_id) {
                    store.apply(Mutation::PutInteropRule(rule.clone()))?;
                }
            }
            evaluation.fired
        };
        let mut fired = Vec::new();
        for firing in &firings {
            fired.extend(self.dispatch(firing)?);
        }
        Ok(fired)
    }

    fn dispatch(&self, firing: &Firing) -> Result<Vec<FiredAction>, TelemetryError> {
        let mut fired = Vec::with_capacity(firing.actions.len());
        for (index, action) in firing.actions.iter().enumerate() {
            let result = match action {
                Action::DeviceInvoke {
                    target_device_id,
                    action_name,
                    params,
                } => match self.registry.get_device(target_device_id) {
                    Err(_) => Err(format!("target device {target_device_id} no longer exists")),
                    Ok(target) => {
                        let request = ActionRequest {
                            action: action_name.clone(),
                            params: params.clone(),
                        };
                        match self.actions.invoke(&target.address, &request) {
                            Ok(reply) if reply.is_ok() => Ok(reply.detail),
                            Ok(reply) => Err(reply.detail),
                            Err(err) => Err(err),
                        }
                    }
                },
                Action::Notify { message_template } => {
                    let notification = Notification {
                        text: render_message(message_template, &firing.event),
                        fired_at: firing.event.timestamp,
                        rule_id: firing.rule_id.to_string(),
                    };
                    self.notifier
                        .notify(&notification)
                        .map(|_| notification.text)
                }
            };
            let (status, detail) = match result {
                Ok(detail) => (OutcomeStatus::Delivered, detail),
                Err(detail) => {
                    log::warn!("rule {} action {index} failed: {detail}", firing.rule_id);
                    (OutcomeStatus::Failed, detail)
                }
            };
            let outcome = {
                let mut store = self.store.lock().unwrap();
                let outcome = ActionOutcome {
                    id: store.state().next_id(prefix::ACTION_OUTCOME),
                    rule_id: firing.rule_id.clone(),
                    action_index: index,
                    status,
                    detail,
                    fired_at: firing.event.timestamp,
                };
                store.apply(Mutation::PutActionOutcome(outcome.clone()))?;
                outcome
            };
            fired.push(FiredAction {
                rule_id: firing.rule_id.clone(),
                action_index: index,
                action: action.clone(),
                event: firing.event.clone(),
                outcome,
            });
        }
        Ok(fired)
    }

    pub fn query_telemetry(
        &self,
        device: &Id,
        metric: &str,
        from: Option<Timestamp>,
        to: Option<Timestamp>,
    ) -> Result<Vec<Sample>, TelemetryError> {
        if let (Some(f), Some(t)) = (from, to) {
            if t < f {
                return Err(TelemetryError::InvalidRange(format!("{t} is before {f}")));
            }
        }
        if !self.registry.device_exists(device) {
            return Err(TelemetryError::UnknownDevice(device.clone()));
        }
        Ok(self
            .inner
            .lock()
            .unwrap()
            .index
            .query(device, metric, from, to))
    }

    pub fn create_rule(&self, spec: InteropRuleSpec) -> Result<InteropRule, TelemetryError> {
        spec.validate().map_err(TelemetryError::Validation)?;
        for action in &spec.actions {
            if let Action::DeviceInvoke {
                target_device_id, ..
            } = action
            {
                if !self.registry.device_exists(target_device_id) {
                    return Err(TelemetryError::Validation(format!(
                        "target device {target_device_id} is not registered"
                    )));
                }
            }
        }
        let mut inner = self.inner.lock().unwrap();
        let mut store = self.store.lock().unwrap();
        let rule = InteropRule {
            id: store.state().next_id(prefix::INTEROP_RULE),
            condition: spec.condition,
            actions: spec.actions,
            cooldown_ms: spec.cooldown_ms,
            last_fired: None,
        };
        store.apply(Mutation::PutInteropRule(rule.clone()))?;
        inner.engine.insert(rule.clone());
        Ok(rule)
    }

    pub fn get_rule(&self, id: &Id) -> Result<InteropRule, TelemetryError> {
        self.inner
            .lock()
            .unwrap()
            .engine
            .get(id)
            .cloned()
            .ok_or_else(|| TelemetryError::NotFound {
                kind: "rule",
                id: id.to_string(),
            })
    }

    pub fn list_rules(&self) -> Vec<InteropRule> {
        self.inner.lock().unwrap().engine.rules().cloned().collect()
    }

    /// Removes a rule; it no longer takes part in any later evaluation.
    pub fn delete_rule(&self, id: &Id) -> Result<(), TelemetryError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.engine.get(id).is_none() {
            return Err(TelemetryError::NotFound {
                kind: "rule",
                id: id.to_string(),
            });
        }
        self.store.lock().unwrap().apply(Mutation::Delete(
            crate::store::EntityKind::InteropRule,
            id.clone(),
        ))?;
        inner.engine.remove(id);
        Ok(())
    }

    pub fn outcomes(&self) -> Vec<ActionOutcome> {
        self.store
            .lock()
            .unwrap()
            .state()
            .outcomes
            .values()
            .cloned()
            .collect()
    }

    /// Stored batches grouped per device, in arrival order.
    pub fn batches(&self) -> BTreeMap<Id, Vec<TelemetryBatch>> {
        let store = self.store.lock().unwrap();
        let mut grouped: BTreeMap<Id, Vec<TelemetryBatch>> = BTreeMap::new();
        for batch in store.state().telemetry.values() {
            grouped
                .entry(batch.device_id.clone())
                .or_default()
                .push(batch.clone());
        }
        grouped
    }
}
