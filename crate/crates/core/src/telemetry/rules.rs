//! Condition-action rule evaluation.

use std::collections::BTreeMap;

use crate::model::{Id, Timestamp};

use super::types::{Action, Event, InteropRule};

/// A rule that fired on one event.
#[derive(Debug, Clone, PartialEq)]
pub struct Firing {
    pub rule_id: Id,
    pub actions: Vec<Action>,
    pub event: Event,
}

/// The result of evaluating one event against every rule.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    /// Fired rules in rule-creation order.
    pub fired: Vec<Firing>,
    /// Rules whose condition held but whose cooldown had not elapsed.
    pub suppressed: Vec<Id>,
}

/// The ordered rule set plus the per-rule time of last firing.
#[derive(Debug, Clone, Default)]
pub struct RuleEngine {
    rules: BTreeMap<Id, InteropRule>,
}

impl RuleEngine {
    pub fn new(rules: impl IntoIterator<Item = InteropRule>) -> Self {
        RuleEngine {
            rules: rules.into_iter().map(|r| (r.id.clone(), r)).collect(),
        }
    }

    pub fn insert(&mut self, rule: InteropRule) {
        self.rules.insert(rule.id.clone(), rule);
    }

    pub fn remove(&mut self, id: &Id) -> Option<InteropRule> {
        self.rules.remove(id)
    }

    pub fn get(&self, id: &Id) -> Option<&InteropRule> {
        self.rules.get(id)
    }

    pub fn rules(&self) -> impl Iterator<Item = &InteropRule> {
        self.rules.values()
    }

    /// Evaluates `event` against every rule, in creation order. A matching
    /// rule fires unless it fired less than its cooldown ago (in event time);
    /// firing records the event time as the rule's last firing.
    pub fn evaluate(&mut self, event: &Event) -> Evaluation {
        let mut evaluation = Evaluation::default();
        for rule in self.rules.values_mut() {
            let condition = &rule.condition;
            if condition.source_device_id != event.device_id
                || condition.metric != event.metric
                || !condition.comparator.holds(event.value, condition.threshold)
            {
                continue;
            }
            if !cooled_down(rule.last_fired, rule.cooldown_ms, event.timestamp) {
                evaluation.suppressed.push(rule.id.clone());
                continue;
            }
            rule.last_fired = Some(event.timestamp);
            evaluation.fired.push(Firing {
                rule_id: rule.id.clone(),
                actions: rule.actions.clone(),
                event: event.clone(),
            });
        }
        evaluation
    }
}

fn cooled_down(last_fired: Option<Timestamp>, cooldown_ms: i64, now: Timestamp) -> bool {
    match last_fired {
        None => true,
        Some(_) if cooldown_ms == 0 => true,
        Some(last) => (now - last).num_milliseconds() >= cooldown_ms,
    }
}
