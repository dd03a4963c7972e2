use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tag: String,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagUsage {
    pub calls: usize,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

impl TagUsage {
    fn add(&mut self, other: &TagUsage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub per_tag: BTreeMap<String, TagUsage>,
    pub total: TagUsage,
}

impl UsageReport {
    pub fn merge(&mut self, other: &UsageReport) {
        for (tag, usage) in &other.per_tag {
            self.per_tag.entry(tag.clone()).or_default().add(usage);
        }
        self.total.add(&other.total);
    }

    pub fn tag(&self, tag: &str) -> TagUsage {
        self.per_tag.get(tag).copied().unwrap_or_default()
    }
}

/// Append-only sink of per-call token usage, safe for concurrent writers.
#[derive(Debug, Default)]
pub struct UsageLedger {
    calls: Mutex<Vec<CallRecord>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, tag: &str, prompt_tokens: usize, output_tokens: usize) {
        self.calls.lock().expect("ledger lock").push(CallRecord {
            tag: tag.to_string(),
            prompt_tokens,
            output_tokens,
        });
    }

    pub fn records(&self) -> Vec<CallRecord> {
        self.calls.lock().expect("ledger lock").clone()
    }

    pub fn extend(&self, records: impl IntoIterator<Item = CallRecord>) {
        self.calls.lock().expect("ledger lock").extend(records);
    }

    pub fn report(&self) -> UsageReport {
        report_from(&self.records())
    }
}

pub fn report_from(records: &[CallRecord]) -> UsageReport {
    let mut report = UsageReport::default();
    for r in records {
        let usage = TagUsage {
            calls: 1,
            prompt_tokens: r.prompt_tokens,
            output_tokens: r.output_tokens,
        };
        report.per_tag.entry(r.tag.clone()).or_default().add(&usage);
        report.total.add(&usage);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn empty_ledger_reports_zero() {
        assert_eq!(UsageLedger::new().report(), UsageReport::default());
    }

    #[test]
    fn totals_are_additive() {
        let ledger = UsageLedger::new();
        ledger.record("worker", 100, 10);
        ledger.record("worker", 50, 5);
        let report = ledger.report();
        assert_eq!(report.tag("worker").prompt_tokens, 150);
        assert_eq!(report.tag("worker").output_tokens, 15);
        assert_eq!(report.total.calls, 2);

        let mut merged = report.clone();
        merged.merge(&report);
        assert_eq!(merged.total.prompt_tokens, 300);
        assert_eq!(merged.tag("worker").calls, 4);
    }

    #[test]
    fn concurrent_writers_conserve_totals() {
        let ledger = Arc::new(UsageLedger::new());
        std::thread::scope(|s| {
            for t in 0..8 {
                let ledger = ledger.clone();
                s.spawn(move || {
                    for _ in 0..1000 {
                        ledger.record(if t % 2 == 0 { "a" } else { "b" }, 3, 1);
                    }
                });
            }
        });
        let report = ledger.report();
        assert_eq!(report.total.prompt_tokens, 24_000);
        assert_eq!(report.tag("a").calls + report.tag("b").calls, 8000);
    }
}
