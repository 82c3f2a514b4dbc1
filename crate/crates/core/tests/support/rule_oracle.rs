//! Brute-force reference for rule evaluation, written without the engine:
//! each rule is walked over the whole event list on its own, comparing by
//! comparator symbol and tracking its last firing in milliseconds.

use std::collections::BTreeMap;

use chrono::{Duration, TimeZone, Utc};
use fnfleet_core::model::Id;
use fnfleet_core::telemetry::{Action, Comparator, Condition, Event, InteropRule, RuleEngine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fired (rule, event, action) triples and suppressed (rule, event) pairs,
/// both sorted.
pub type Outcome = (Vec<(usize, usize, usize)>, Vec<(usize, usize)>);

pub const SYMBOLS: [&str; 6] = ["<", "<=", ">", ">=", "=", "!="];
const DEVICES: [&str; 2] = ["dev-00000001", "dev-00000002"];
const METRICS: [&str; 2] = ["motion", "temperature"];

#[derive(Debug, Clone)]
pub struct OracleRule {
    pub device: &'static str,
    pub metric: &'static str,
    pub symbol: &'static str,
    pub threshold: i64,
    pub cooldown_ms: i64,
    pub actions: usize,
}

#[derive(Debug, Clone)]
pub struct OracleEvent {
    pub device: &'static str,
    pub metric: &'static str,
    pub value: i64,
    pub at_ms: i64,
}

fn holds(symbol: &str, value: i64, threshold: i64) -> bool {
    match symbol {
        "<" => value < threshold,
        "<=" => value <= threshold,
        ">" => value > threshold,
        ">=" => value >= threshold,
        "=" => value == threshold,
        "!=" => value != threshold,
        other => panic!("unknown symbol {other}"),
    }
}

/// Per-rule scan. Returns (rule index, event index) pairs that fire, one per
/// action, and the pairs suppressed by cooldown.
pub fn brute_force(rules: &[OracleRule], events: &[OracleEvent]) -> Outcome {
    let mut fired = Vec::new();
    let mut suppressed = Vec::new();
    for (r, rule) in rules.iter().enumerate() {
        let mut last: Option<i64> = None;
        for (e, event) in events.iter().enumerate() {
            let matches = rule.device == event.device
                && rule.metric == event.metric
                && holds(rule.symbol, event.value, rule.threshold);
            if !matches {
                continue;
            }
            let ready = match last {
                None => true,
                Some(t) => rule.cooldown_ms == 0 || event.at_ms - t >= rule.cooldown_ms,
            };
            if ready {
                last = Some(event.at_ms);
                for a in 0..rule.actions {
                    fired.push((r, e, a));
                }
            } else {
                suppressed.push((r, e));
            }
        }
    }
    fired.sort();
    suppressed.sort();
    (fired, suppressed)
}

fn rule_id(index: usize) -> Id {
    Id::new(format!("rule-{:08}", index + 1))
}

/// Runs the engine over the same case and maps its output back to indices.
pub fn engine(rules: &[OracleRule], events: &[OracleEvent]) -> Outcome {
    let origin = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
    let mut engine = RuleEngine::new(rules.iter().enumerate().map(|(i, r)| {
        InteropRule {
            id: rule_id(i),
            condition: Condition {
                source_device_id: Id::new(r.device),
                metric: r.metric.to_owned(),
                comparator: r.symbol.parse::<Comparator>().unwrap(),
                threshold: r.threshold as f64,
            },
            actions: (0..r.actions)
                .map(|a| Action::notify(&format!("action {a}")))
                .collect(),
            cooldown_ms: r.cooldown_ms,
            last_fired: None,
        }
    }));
    let index: BTreeMap<Id, usize> = (0..rules.len()).map(|i| (rule_id(i), i)).collect();
    let mut fired = Vec::new();
    let mut suppressed = Vec::new();
    for (e, event) in events.iter().enumerate() {
        let evaluation = engine.evaluate(&Event {
            device_id: Id::new(event.device),
            metric: event.metric.to_owned(),
            value: event.value as f64,
            timestamp: origin + Duration::milliseconds(event.at_ms),
        });
        for firing in evaluation.fired {
            for (a, _) in firing.actions.iter().enumerate() {
                fired.push((index[&firing.rule_id], e, a));
            }
        }
        for id in evaluation.suppressed {
            suppressed.push((index[&id], e));
        }
    }
    fired.sort();
    suppressed.sort();
    (fired, suppressed)
}

/// A random case with the given comparators, one rule per entry.
pub fn case(
    symbols: &[&'static str],
    events: usize,
    seed: u64,
) -> (Vec<OracleRule>, Vec<OracleEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rules = symbols
        .iter()
        .map(|&symbol| OracleRule {
            device: DEVICES[rng.gen_range(0..DEVICES.len())],
            metric: METRICS[rng.gen_range(0..METRICS.len())],
            symbol,
            threshold: rng.gen_range(0..3),
            cooldown_ms: [0, 1000, 2500, 5000][rng.gen_range(0..4)],
            actions: rng.gen_range(1..4),
        })
        .collect();
    let mut at_ms = 0;
    let events = (0..events)
        .map(|_| {
            // Gaps of zero exercise equal timestamps.
            at_ms += [0, 500, 1000, 2500][rng.gen_range(0..4)];
            OracleEvent {
                device: DEVICES[rng.gen_range(0..DEVICES.len())],
                metric: METRICS[rng.gen_range(0..METRICS.len())],
                value: rng.gen_range(0..3),
                at_ms,
            }
        })
        .collect();
    (rules, events)
}

/// Every comparator assignment for 1 to 5 rules, each against a seeded event
/// stream of 1 to 50 events. Returns the number of cases checked.
pub fn exhaustive() -> Result<usize, String> {
    let mut cases = 0;
    for count in 1..=5u32 {
        for combo in 0..6usize.pow(count) {
            let symbols: Vec<&'static str> = (0..count)
                .map(|i| SYMBOLS[combo / 6usize.pow(i) % 6])
                .collect();
            let events = 1 + (cases * 7 + combo) % 50;
            let (rules, events) = case(&symbols, events, cases as u64);
            let expected = brute_force(&rules, &events);
            let actual = engine(&rules, &events);
            if expected != actual {
                return Err(format!(
                    "case {cases} ({symbols:?}, {} events): oracle {expected:?}, engine {actual:?}",
                    events.len()
                ));
            }
            cases += 1;
        }
    }
    Ok(cases)
}
