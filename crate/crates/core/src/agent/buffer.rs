//! Bounded FIFO of telemetry samples awaiting upload.

use std::collections::VecDeque;

use crate::telemetry::Sample;

#[derive(Debug, Clone)]
pub struct TelemetryBuffer {
    capacity: usize,
    entries: VecDeque<(String, Sample)>,
    dropped: u64,
}

impl TelemetryBuffer {
    pub fn new(capacity: usize) -> Self {
        TelemetryBuffer {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Samples dropped since the buffer was created.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    /// Appends a sample, dropping the oldest one when full. Returns how many
    /// samples were dropped to make room.
    pub fn push(&mut self, metric: &str, sample: Sample) -> usize {
        self.entries.push_back((metric.to_owned(), sample));
        self.trim()
    }

    fn trim(&mut self) -> usize {
        let excess = self.entries.len().saturating_sub(self.capacity);
        self.entries.drain(..excess);
        self.dropped += excess as u64;
        excess
    }

    pub fn drain(&mut self) -> Vec<(String, Sample)> {
        self.entries.drain(..).collect()
    }

    /// Puts back samples taken by [`drain`](Self::drain) that could not be
    /// sent, ahead of anything buffered since.
    pub fn restore(&mut self, unsent: Vec<(String, Sample)>) -> usize {
        for entry in unsent.into_iter().rev() {
            self.entries.push_front(entry);
        }
        self.trim()
    }
}

/// Splits buffered samples into one batch per metric, metrics in order of
/// first appearance, each batch sorted by timestamp.
pub fn batches(entries: &[(String, Sample)]) -> Vec<(String, Vec<Sample>)> {
    let mut out: Vec<(String, Vec<Sample>)> = Vec::new();
    for (metric, sample) in entries {
        match out.iter_mut().find(|(m, _)| m == metric) {
            Some((_, samples)) => samples.push(sample.clone()),
            None => out.push((metric.clone(), vec![sample.clone()])),
        }
    }
    for (_, samples) in &mut out {
        samples.sort_by_key(|s| s.timestamp);
    }
    out
}
