//! Long-term event memory shared along a worker chain.
//!
//! The store is append-only. Workers are told to emit only events missing
//! from their memory window; [`MemoryStore::append_events`] additionally
//! drops exact repeats after normalizing case and whitespace.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// Lowercases and collapses whitespace runs to single spaces.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEvent {
    /// Timestamp text exactly as the agent emitted it.
    pub timestamp: String,
    pub event: String,
    pub source_chunk: usize,
}

impl MemoryEvent {
    pub fn new(
        timestamp: impl Into<String>,
        event: impl Into<String>,
        source_chunk: usize,
    ) -> Self {
        MemoryEvent {
            timestamp: timestamp.into(),
            event: event.into(),
            source_chunk,
        }
    }

    pub fn normalized_key(&self) -> (String, String) {
        (normalize(&self.timestamp), normalize(&self.event))
    }

    /// Timeline line `[timestamp] event`.
    pub fn render(&self) -> String {
        format!("[{}] {}", self.timestamp, self.event)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryStore {
    events: Vec<MemoryEvent>,
    keys: HashSet<(String, String)>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[MemoryEvent] {
        &self.events
    }

    pub fn contains(&self, event: &MemoryEvent) -> bool {
        self.keys.contains(&event.normalized_key())
    }

    /// Appends in order, skipping events with empty text or a key already
    /// stored (including earlier events of the same batch). Returns how many
    /// were stored.
    pub fn append_events<I>(&mut self, events: I) -> usize
    where
        I: IntoIterator<Item = MemoryEvent>,
    {
        let mut added = 0;
        for event in events {
            if event.event.trim().is_empty() {
                continue;
            }
            if self.keys.insert(event.normalized_key()) {
                self.events.push(event);
                added += 1;
            }
        }
        added
    }

    /// The last `min(k, len)` events in insertion order.
    pub fn window(&self, k: usize) -> &[MemoryEvent] {
        &self.events[self.events.len().saturating_sub(k)..]
    }

    /// One `[timestamp] event` line per event, newline separated.
    pub fn render_timeline(&self) -> String {
        render_events(&self.events)
    }

    /// JSONL dump, one `{"timestamp","event","source_chunk"}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for event in &self.events {
            out.push_str(&serde_json::to_string(event).expect("memory events serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn render_events(events: &[MemoryEvent]) -> String {
    events
        .iter()
        .map(MemoryEvent::render)
        .collect::<Vec<_>>()
        .join("\n")
}
