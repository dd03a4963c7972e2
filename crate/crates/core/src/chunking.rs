//! Time-aware chunking and truncation of unified XML documents.
//!
//! Chunks are built by greedy in-order packing of whole `<record>` blocks.
//! A block that cannot fit even in an empty chunk is split, first between
//! its items and then between lines of a single item, and every piece is
//! re-wrapped in a `<record>` element carrying the original date. Split
//! fragments of one item are numbered `<item part="1">`, `<item part="2">`,
//! and so on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{render_block, Modality, XmlDocument};
use crate::tokens::TokenCounter;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub token_count: usize,
    /// First and last timestamp covered; `None` for a chunk holding only
    /// demographics.
    pub time_span: Option<(String, String)>,
    #[serde(rename = "flag")]
    pub carried_timestamp_split: bool,
    pub text: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemographicsPlacement {
    /// Demographics open chunk 0 only.
    #[default]
    FirstChunk,
    /// Every chunk is prefixed with the demographics block.
    EveryChunk,
    Omit,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ChunkOptions {
    pub demographics: DemographicsPlacement,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkError {
    #[error("chunk budget must be at least 1 token")]
    ZeroBudget,
    #[error("budget of {budget} tokens cannot hold an indivisible line of {needed} tokens")]
    BudgetTooSmall { budget: usize, needed: usize },
}

struct Builder {
    text: String,
    span: Option<(String, String)>,
    has_units: bool,
}

impl Builder {
    fn new(prefix: &str) -> Self {
        Builder {
            text: prefix.to_string(),
            span: None,
            has_units: false,
        }
    }

    fn push(&mut self, text: &str, timestamp: Option<&str>) {
        self.text.push_str(text);
        self.has_units = true;
        if let Some(ts) = timestamp {
            match &mut self.span {
                Some((_, last)) => *last = ts.to_string(),
                None => self.span = Some((ts.to_string(), ts.to_string())),
            }
        }
    }

    fn finish(self, index: usize, counter: &dyn TokenCounter) -> Chunk {
        Chunk {
            index,
            token_count: counter.count(&self.text),
            time_span: self.span,
            carried_timestamp_split: false,
            text: self.text,
        }
    }
}

enum Unit {
    Demographics,
    Segment(usize),
}

/// Splits `doc` into chunks of at most `k` tokens with demographics in the
/// first chunk.
pub fn chunk_time_aware(
    doc: &XmlDocument,
    k: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<Chunk>, ChunkError> {
    chunk_time_aware_with(doc, k, counter, ChunkOptions::default())
}

pub fn chunk_time_aware_with(
    doc: &XmlDocument,
    k: usize,
    counter: &dyn TokenCounter,
    options: ChunkOptions,
) -> Result<Vec<Chunk>, ChunkError> {
    if k == 0 {
        return Err(ChunkError::ZeroBudget);
    }
    let prefix = match options.demographics {
        DemographicsPlacement::EveryChunk => doc.demographics_text(),
        _ => "",
    };
    let mut units = Vec::with_capacity(doc.segments().len() + 1);
    if options.demographics == DemographicsPlacement::FirstChunk
        && !doc.demographics_text().is_empty()
    {
        units.push(Unit::Demographics);
    }
    units.extend((0..doc.segments().len()).map(Unit::Segment));

    let mut chunks: Vec<Chunk> = Vec::new();
    let mut builder = Builder::new(prefix);
    for unit in units {
        let (text, timestamp) = match unit {
            Unit::Demographics => (doc.demographics_text(), None),
            Unit::Segment(i) => (
                doc.segment_text(i),
                Some(doc.segments()[i].timestamp.as_str()),
            ),
        };
        let mut candidate = builder.text.clone();
        candidate.push_str(text);
        if counter.count(&candidate) <= k {
            builder.push(text, timestamp);
            continue;
        }
        if builder.has_units {
            let done = std::mem::replace(&mut builder, Builder::new(prefix));
            chunks.push(done.finish(chunks.len(), counter));
            let candidate = format!("{prefix}{text}");
            if counter.count(&candidate) <= k {
                builder.push(text, timestamp);
                continue;
            }
        }
        let pieces = match unit {
            Unit::Demographics => split_lines(text, "", "", prefix, k, counter)?,
            Unit::Segment(i) => split_segment(doc, i, prefix, k, counter)?,
        };
        for piece in pieces {
            chunks.push(Chunk {
                index: chunks.len(),
                token_count: counter.count(&piece),
                time_span: timestamp.map(|ts| (ts.to_string(), ts.to_string())),
                carried_timestamp_split: true,
                text: piece,
            });
        }
    }
    if builder.has_units {
        chunks.push(builder.finish(chunks.len(), counter));
    }
    Ok(chunks)
}

/// Breaks a block of text at line boundaries into pieces that fit `k` once
/// wrapped as `prefix + open + lines + close`.
fn split_lines(
    text: &str,
    open: &str,
    close: &str,
    prefix: &str,
    k: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<String>, ChunkError> {
    let wrap = |body: &str| format!("{prefix}{open}{body}{close}");
    let mut pieces = Vec::new();
    let mut current = String::new();
    for line in text.split_inclusive('\n') {
        let mut candidate = current.clone();
        candidate.push_str(line);
        if counter.count(&wrap(&candidate)) <= k {
            current = candidate;
            continue;
        }
        if !current.is_empty() {
            pieces.push(wrap(&current));
        }
        let alone = wrap(line);
        let needed = counter.count(&alone);
        if needed > k {
            return Err(ChunkError::BudgetTooSmall { budget: k, needed });
        }
        current = line.to_string();
    }
    if !current.is_empty() {
        pieces.push(wrap(&current));
    }
    Ok(pieces)
}

fn split_segment(
    doc: &XmlDocument,
    index: usize,
    prefix: &str,
    k: usize,
    counter: &dyn TokenCounter,
) -> Result<Vec<String>, ChunkError> {
    let segment = &doc.segments()[index];
    if segment.entries.is_empty() {
        return split_lines(doc.segment_text(index), "", "", prefix, k, counter);
    }
    let ts = segment.timestamp.as_str();
    let fits = |items: &[(Modality, &str, Option<usize>)]| {
        let text = format!("{prefix}{}", render_block(ts, items));
        let n = counter.count(&text);
        (n <= k, n)
    };

    // Items become units; an item too large on its own is cut into line
    // fragments numbered from 1.
    let mut units: Vec<(Modality, String, Option<usize>)> = Vec::new();
    for entry in &segment.entries {
        let content = doc.slice(entry.content.clone());
        if fits(&[(entry.modality, content, None)]).0 {
            units.push((entry.modality, content.to_string(), None));
            continue;
        }
        let lines: Vec<&str> = content.split('\n').collect();
        let mut part = 1;
        let mut start = 0;
        while start < lines.len() {
            let mut end = start + 1;
            let single = lines[start];
            let (ok, needed) = fits(&[(entry.modality, single, Some(part))]);
            if !ok {
                return Err(ChunkError::BudgetTooSmall { budget: k, needed });
            }
            while end < lines.len() {
                let joined = lines[start..=end].join("\n");
                if !fits(&[(entry.modality, &joined, Some(part))]).0 {
                    break;
                }
                end += 1;
            }
            units.push((entry.modality, lines[start..end].join("\n"), Some(part)));
            part += 1;
            start = end;
        }
    }

    let mut pieces = Vec::new();
    let mut start = 0;
    while start < units.len() {
        let mut end = start + 1;
        while end < units.len() {
            let view: Vec<_> = units[start..=end]
                .iter()
                .map(|(m, c, p)| (*m, c.as_str(), *p))
                .collect();
            if !fits(&view).0 {
                break;
            }
            end += 1;
        }
        let view: Vec<_> = units[start..end]
            .iter()
            .map(|(m, c, p)| (*m, c.as_str(), *p))
            .collect();
        pieces.push(format!("{prefix}{}", render_block(ts, &view)));
        start = end;
    }
    Ok(pieces)
}

/// Indices chosen by alternating front/back selection (front first) under a
/// budget, returned in ascending order. Selection stops at the first pick
/// that would overflow.
pub fn middle_selection(costs: &[usize], budget: usize) -> Vec<usize> {
    let mut front = Vec::new();
    let mut back = Vec::new();
    let (mut lo, mut hi) = (0usize, costs.len());
    let mut used = 0usize;
    let mut take_front = true;
    while lo < hi {
        let i = if take_front { lo } else { hi - 1 };
        if used + costs[i] > budget {
            break;
        }
        used += costs[i];
        if take_front {
            front.push(i);
            lo += 1;
        } else {
            back.push(i);
            hi -= 1;
        }
        take_front = !take_front;
    }
    front.extend(back.into_iter().rev());
    front
}

/// Longest suffix of indices whose total cost stays within the budget.
pub fn suffix_selection(costs: &[usize], budget: usize) -> Vec<usize> {
    let mut used = 0usize;
    let mut start = costs.len();
    while start > 0 && used + costs[start - 1] <= budget {
        used += costs[start - 1];
        start -= 1;
    }
    (start..costs.len()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationStrategy {
    Left,
    Middle,
}

/// Result of truncating a document: the emitted text and which timestamp
/// segments survived.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Truncation {
    pub text: String,
    pub segments: Vec<usize>,
    /// Sum of the per-part counts charged against the budget.
    pub tokens: usize,
}

/// Truncates a document body to `budget` tokens. The demographics block is
/// charged first and always kept when it fits; timestamp segments are then
/// selected by `strategy` and emitted in chronological order.
pub fn truncate(
    doc: &XmlDocument,
    budget: usize,
    counter: &dyn TokenCounter,
    strategy: TruncationStrategy,
) -> Truncation {
    let demographics = doc.demographics_text();
    let head = counter.count(demographics);
    if head > budget {
        return Truncation {
            text: String::new(),
            segments: Vec::new(),
            tokens: 0,
        };
    }
    let costs: Vec<usize> = (0..doc.segments().len())
        .map(|i| counter.count(doc.segment_text(i)))
        .collect();
    let remaining = budget - head;
    let selected = match strategy {
        TruncationStrategy::Middle => middle_selection(&costs, remaining),
        TruncationStrategy::Left => suffix_selection(&costs, remaining),
    };
    let mut text = demographics.to_string();
    let mut tokens = head;
    for &i in &selected {
        text.push_str(doc.segment_text(i));
        tokens += costs[i];
    }
    Truncation {
        text,
        segments: selected,
        tokens,
    }
}

pub fn truncate_middle(doc: &XmlDocument, budget: usize, counter: &dyn TokenCounter) -> String {
    truncate(doc, budget, counter, TruncationStrategy::Middle).text
}

pub fn truncate_left(doc: &XmlDocument, budget: usize, counter: &dyn TokenCounter) -> String {
    truncate(doc, budget, counter, TruncationStrategy::Left).text
}

/// Caps a chunk list at `max_chunks` by alternating front/back selection
/// over whole chunks. Retained chunks are renumbered from 0; the second
/// value lists their original indices.
pub fn cap_chunks(chunks: Vec<Chunk>, max_chunks: usize) -> (Vec<Chunk>, Vec<usize>) {
    if chunks.len() <= max_chunks {
        let kept = (0..chunks.len()).collect();
        return (chunks, kept);
    }
    let kept = middle_selection(&vec![1; chunks.len()], max_chunks);
    let mut slots: Vec<Option<Chunk>> = chunks.into_iter().map(Some).collect();
    let capped = kept
        .iter()
        .enumerate()
        .map(|(new_index, &old)| {
            let mut chunk = slots[old].take().expect("selection indices are unique");
            chunk.index = new_index;
            chunk
        })
        .collect();
    (capped, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{unify_to_xml, Observation, PatientRecord};
    use crate::tokens::HeuristicCounter;
    use std::collections::BTreeMap;

    /// Counts occurrences of the word `tok`; markup is free.
    #[derive(Debug)]
    struct TokWords;

    impl TokenCounter for TokWords {
        fn count(&self, text: &str) -> usize {
            text.split(|c: char| !c.is_ascii_alphanumeric())
                .filter(|w| *w == "tok")
                .count()
        }
    }

    fn toks(n: usize) -> String {
        vec!["tok"; n].join(" ")
    }

    fn record_with(blocks: &[(&str, Vec<(Modality, String)>)]) -> PatientRecord {
        let mut observations = Vec::new();
        for (ts, items) in blocks {
            for (m, p) in items {
                observations.push(Observation::new(*ts, *m, p.clone()));
            }
        }
        PatientRecord {
            subject_id: "S".into(),
            demographics: BTreeMap::new(),
            index_date: "2021-01-01".into(),
            label: None,
            observations,
        }
    }

    #[test]
    fn greedy_packing_hand_trace() {
        let r = record_with(&[
            ("2020-01-01", vec![(Modality::Note, toks(3))]),
            ("2020-02-01", vec![(Modality::Note, toks(4))]),
            ("2020-03-01", vec![(Modality::Note, toks(5))]),
            ("2020-04-01", vec![(Modality::Note, toks(2))]),
        ]);
        let doc = unify_to_xml(&r);
        let chunks = chunk_time_aware(&doc, 7, &TokWords).unwrap();
        let counts: Vec<_> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(counts, [7, 7]);
        assert_eq!(
            chunks[0].time_span,
            Some(("2020-01-01".into(), "2020-02-01".into()))
        );
        assert_eq!(
            chunks[1].time_span,
            Some(("2020-03-01".into(), "2020-04-01".into()))
        );
        assert!(chunks[0].text.starts_with("  <demographics>"));
        assert!(!chunks[1].text.contains("demographics"));
        assert!(chunks.iter().all(|c| !c.carried_timestamp_split));
    }

    #[test]
    fn oversized_segment_is_split_under_same_date() {
        let r = record_with(&[(
            "2020-01-01",
            vec![(Modality::Lab, toks(5)), (Modality::Note, toks(5))],
        )]);
        let doc = unify_to_xml(&r);
        let chunks = chunk_time_aware_with(
            &doc,
            7,
            &TokWords,
            ChunkOptions {
                demographics: DemographicsPlacement::Omit,
            },
        )
        .unwrap();
        assert_eq!(chunks.len(), 2);
        for c in &chunks {
            assert!(c.carried_timestamp_split);
            assert!(c.text.starts_with("  <record date=\"2020-01-01\">"));
            assert_eq!(c.token_count, 5);
        }
        assert!(chunks[0].text.contains("<lab>") && chunks[1].text.contains("<note>"));
    }

    #[test]
    fn oversized_item_is_split_at_lines() {
        let payload = format!("{}\n{}\n{}", toks(3), toks(3), toks(3));
        let r = record_with(&[("2020-01-01", vec![(Modality::Note, payload)])]);
        let doc = unify_to_xml(&r);
        let opts = ChunkOptions {
            demographics: DemographicsPlacement::Omit,
        };
        let chunks = chunk_time_aware_with(&doc, 7, &TokWords, opts).unwrap();
        let counts: Vec<_> = chunks.iter().map(|c| c.token_count).collect();
        assert_eq!(counts, [6, 3]);
        assert!(chunks[0].text.contains("<item part=\"1\">"));
        assert!(chunks[1].text.contains("<item part=\"2\">"));

        let err = chunk_time_aware_with(&doc, 2, &TokWords, opts).unwrap_err();
        assert_eq!(
            err,
            ChunkError::BudgetTooSmall {
                budget: 2,
                needed: 3
            }
        );
    }

    #[test]
    fn small_document_is_one_chunk_equal_to_body() {
        let r = record_with(&[
            (
                "2020-01-01",
                vec![(Modality::Note, "chest x-ray normal".into())],
            ),
            ("2020-02-01", vec![(Modality::Lab, "hgb 13.1".into())]),
        ]);
        let doc = unify_to_xml(&r);
        let chunks = chunk_time_aware(&doc, 10_000, &HeuristicCounter::default()).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, doc.body());
    }

    #[test]
    fn every_chunk_placement_repeats_demographics() {
        let mut r = record_with(&[
            ("2020-01-01", vec![(Modality::Note, toks(3))]),
            ("2020-02-01", vec![(Modality::Note, toks(3))]),
        ]);
        r.demographics.insert("smoking".into(), "tok".into());
        let doc = unify_to_xml(&r);
        let opts = ChunkOptions {
            demographics: DemographicsPlacement::EveryChunk,
        };
        let chunks = chunk_time_aware_with(&doc, 4, &TokWords, opts).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks
            .iter()
            .all(|c| c.text.starts_with("  <demographics>") && c.token_count == 4));
    }

    #[test]
    fn zero_budget_is_rejected() {
        let doc = unify_to_xml(&record_with(&[]));
        assert_eq!(
            chunk_time_aware(&doc, 0, &TokWords),
            Err(ChunkError::ZeroBudget)
        );
    }

    fn unit_doc(n: usize) -> XmlDocument {
        let segs: Vec<(String, String)> = (1..=n)
            .map(|i| (format!("t{i}"), format!("t{i}\n")))
            .collect();
        XmlDocument::from_parts("", "", &segs, "")
    }

    #[test]
    fn middle_truncation_hand_trace() {
        let doc = unify_to_xml(&record_with(&[]));
        assert_eq!(
            truncate_middle(&doc, 100, &HeuristicCounter::default()),
            doc.body()
        );

        let doc = unit_doc(6);
        let c = HeuristicCounter::default();
        assert_eq!(middle_selection(&[1; 6], 4), [0, 1, 4, 5]);
        assert_eq!(truncate_middle(&doc, 4, &c), "t1\nt2\nt5\nt6\n");
        assert_eq!(truncate_middle(&doc, 6, &c), doc.body());
        assert_eq!(truncate_middle(&doc, 0, &c), "");
    }

    #[test]
    fn left_truncation_hand_trace() {
        let doc = unit_doc(6);
        let c = HeuristicCounter::default();
        assert_eq!(truncate_left(&doc, 4, &c), "t3\nt4\nt5\nt6\n");
        assert_eq!(truncate_left(&doc, 60, &c), doc.body());
        assert_eq!(truncate_left(&doc, 0, &c), "");
    }

    #[test]
    fn middle_selection_stops_at_first_overflow() {
        // front 5 fits, back 9 does not: selection stops even though 1 would fit
        assert_eq!(middle_selection(&[5, 1, 9], 10), [0]);
        assert_eq!(suffix_selection(&[1, 1, 9], 10), [1, 2]);
    }

    #[test]
    fn chunk_cap_keeps_ends_in_order() {
        let chunks: Vec<Chunk> = (0..20)
            .map(|i| Chunk {
                index: i,
                token_count: 1,
                time_span: None,
                carried_timestamp_split: false,
                text: format!("c{i}"),
            })
            .collect();
        let (capped, kept) = cap_chunks(chunks, 15);
        assert_eq!(kept, [0, 1, 2, 3, 4, 5, 6, 7, 13, 14, 15, 16, 17, 18, 19]);
        assert_eq!(
            capped.iter().map(|c| c.index).collect::<Vec<_>>(),
            (0..15).collect::<Vec<_>>()
        );
        assert_eq!(capped[8].text, "c13");
    }
}
