//! Longitudinal record model and its unified XML serialization.
//!
//! A [`PatientRecord`] is an ordered list of timestamped observations plus
//! demographics. [`unify_to_xml`] turns it into a single nested XML document
//! with one `<record date="...">` block per distinct timestamp. The document
//! keeps byte ranges for every block so the chunker can cut it without
//! re-parsing.
//!
//! Tag vocabulary (fixed, not negotiable by callers):
//!
//! ```text
//! <patient id="...">
//!   <demographics>
//!     <field name="sex">F</field>
//!   </demographics>
//!   <record date="2019-04-02">
//!     <diagnosis>
//!       <item>J44.9 chronic obstructive pulmonary disease</item>
//!     </diagnosis>
//!     <note>
//!       <item>free text ...</item>
//!     </note>
//!   </record>
//! </patient>
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::ops::Range;

use chrono::{Months, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Data modality of one observation. Declaration order is the fixed order of
/// child elements inside a `<record>` block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Diagnosis,
    Medication,
    Procedure,
    Lab,
    Vital,
    Note,
    RadiologyReport,
    Other,
}

impl Modality {
    pub const ALL: [Modality; 8] = [
        Modality::Diagnosis,
        Modality::Medication,
        Modality::Procedure,
        Modality::Lab,
        Modality::Vital,
        Modality::Note,
        Modality::RadiologyReport,
        Modality::Other,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Diagnosis => "diagnosis",
            Modality::Medication => "medication",
            Modality::Procedure => "procedure",
            Modality::Lab => "lab",
            Modality::Vital => "vital",
            Modality::Note => "note",
            Modality::RadiologyReport => "radiology_report",
            Modality::Other => "other",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Modality> {
        Modality::ALL.into_iter().find(|m| m.tag() == tag)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: String,
    pub modality: Modality,
    pub payload: String,
}

impl Observation {
    pub fn new(
        timestamp: impl Into<String>,
        modality: Modality,
        payload: impl Into<String>,
    ) -> Self {
        Observation {
            timestamp: timestamp.into(),
            modality,
            payload: payload.into(),
        }
    }
}

/// One subject's longitudinal history. `label` is 1 for a case, 0 for a
/// control, absent when unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub subject_id: String,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
    pub index_date: String,
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub observations: Vec<Observation>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("index_date: cannot parse {0:?} as YYYY-MM-DD")]
    UnparseableIndexDate(String),
    #[error("observations[{index}].timestamp: cannot parse {value:?}")]
    UnparseableTimestamp { index: usize, value: String },
    #[error("observations[{index}].timestamp: {timestamp} is after index_date {index_date}")]
    ObservationAfterIndex {
        index: usize,
        timestamp: String,
        index_date: String,
    },
    #[error(
        "observations[{index}].timestamp: {timestamp} is more than {years} years before index_date"
    )]
    ObservationBeyondHorizon {
        index: usize,
        timestamp: String,
        years: u32,
    },
    #[error("observations[{index}].payload: empty after trimming")]
    EmptyPayload { index: usize },
    #[error("observations: record has no observations")]
    EmptyObservations,
    #[error("label: expected 0, 1 or null, got {0}")]
    InvalidLabel(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Maximum look-back from the index date; `None` disables the check.
    pub horizon_years: Option<u32>,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            horizon_years: Some(5),
        }
    }
}

/// Parses the date part of an ISO-8601 timestamp. Day resolution is the
/// minimum; a trailing time component is accepted when well formed.
pub fn parse_timestamp(value: &str) -> Option<NaiveDate> {
    let date = NaiveDate::parse_from_str(value.get(..10)?, "%Y-%m-%d").ok()?;
    let rest = &value[10..];
    if rest.is_empty() {
        return Some(date);
    }
    let trimmed = value.strip_suffix('Z').unwrap_or(value);
    const FORMATS: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
    ];
    FORMATS
        .iter()
        .any(|fmt| NaiveDateTime::parse_from_str(trimmed, fmt).is_ok())
        .then_some(date)
}

/// Checks every record invariant and returns the record with observations
/// stably sorted by timestamp.
pub fn validate_record(raw: PatientRecord) -> Result<PatientRecord, RecordError> {
    validate_record_with(raw, ValidationOptions::default())
}

pub fn validate_record_with(
    mut raw: PatientRecord,
    options: ValidationOptions,
) -> Result<PatientRecord, RecordError> {
    let index_date = NaiveDate::parse_from_str(&raw.index_date, "%Y-%m-%d")
        .map_err(|_| RecordError::UnparseableIndexDate(raw.index_date.clone()))?;
    if let Some(label) = raw.label {
        if label > 1 {
            return Err(RecordError::InvalidLabel(label));
        }
    }
    if raw.observations.is_empty() {
        return Err(RecordError::EmptyObservations);
    }
    let earliest = options
        .horizon_years
        .and_then(|years| index_date.checked_sub_months(Months::new(years * 12)));
    for (index, obs) in raw.observations.iter().enumerate() {
        let date =
            parse_timestamp(&obs.timestamp).ok_or_else(|| RecordError::UnparseableTimestamp {
                index,
                value: obs.timestamp.clone(),
            })?;
        if date > index_date {
            return Err(RecordError::ObservationAfterIndex {
                index,
                timestamp: obs.timestamp.clone(),
                index_date: raw.index_date.clone(),
            });
        }
        if let (Some(earliest), Some(years)) = (earliest, options.horizon_years) {
            if date < earliest {
                return Err(RecordError::ObservationBeyondHorizon {
                    index,
                    timestamp: obs.timestamp.clone(),
                    years,
                });
            }
        }
        if obs.payload.trim().is_empty() {
            return Err(RecordError::EmptyPayload { index });
        }
    }
    // Vec::sort_by is stable: ties keep input order.
    raw.observations
        .sort_by(|a, b| a.timestamp.cmp(&b.timestamp));
    Ok(raw)
}

/// Escapes text for use in XML character data and attribute values.
///
/// Characters that XML 1.0 cannot carry at all are replaced with U+FFFD;
/// carriage returns are written as a character reference so parsers do not
/// normalize them away.
pub fn escape_xml(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            '\r' => out.push_str("&#13;"),
            '\t' | '\n' => out.push(c),
            c if (c as u32) < 0x20 || c == '\u{FFFE}' || c == '\u{FFFF}' => out.push('\u{FFFD}'),
            c => out.push(c),
        }
    }
    out
}

/// One entry inside a `<record>` block: the byte range of its escaped
/// payload within the document text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentEntry {
    pub modality: Modality,
    pub content: Range<usize>,
}

/// A timestamp block within an [`XmlDocument`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub timestamp: String,
    pub range: Range<usize>,
    /// Empty for segments built from raw text with [`XmlDocument::from_parts`].
    pub entries: Vec<SegmentEntry>,
}

/// Serialized record plus the markers needed to cut it at timestamp
/// boundaries. `text == header + demographics + segments... + footer`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XmlDocument {
    text: String,
    header: Range<usize>,
    demographics: Range<usize>,
    segments: Vec<Segment>,
    footer: Range<usize>,
}

impl XmlDocument {
    /// Assembles a document from pre-rendered pieces. Segment texts are used
    /// verbatim; oversized ones can only be split at line boundaries.
    pub fn from_parts<S: AsRef<str>>(
        header: &str,
        demographics: &str,
        segments: &[(S, S)],
        footer: &str,
    ) -> XmlDocument {
        let mut text = String::new();
        text.push_str(header);
        let header_range = 0..text.len();
        text.push_str(demographics);
        let demographics_range = header_range.end..text.len();
        let mut out = Vec::with_capacity(segments.len());
        for (timestamp, body) in segments {
            let start = text.len();
            text.push_str(body.as_ref());
            out.push(Segment {
                timestamp: timestamp.as_ref().to_string(),
                range: start..text.len(),
                entries: Vec::new(),
            });
        }
        let footer_start = text.len();
        text.push_str(footer);
        XmlDocument {
            footer: footer_start..text.len(),
            text,
            header: header_range,
            demographics: demographics_range,
            segments: out,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn header_text(&self) -> &str {
        &self.text[self.header.clone()]
    }

    pub fn demographics_text(&self) -> &str {
        &self.text[self.demographics.clone()]
    }

    pub fn footer_text(&self) -> &str {
        &self.text[self.footer.clone()]
    }

    /// Everything between the root open and close tags: demographics block
    /// followed by every timestamp block.
    pub fn body(&self) -> &str {
        &self.text[self.demographics.start..self.footer.start]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_text(&self, index: usize) -> &str {
        &self.text[self.segments[index].range.clone()]
    }

    pub fn slice(&self, range: Range<usize>) -> &str {
        &self.text[range]
    }
}

pub(crate) const INDENT_RECORD: &str = "  ";
pub(crate) const INDENT_MODALITY: &str = "    ";
pub(crate) const INDENT_ITEM: &str = "      ";

pub(crate) fn record_open(timestamp: &str) -> String {
    format!(
        "{INDENT_RECORD}<record date=\"{}\">\n",
        escape_xml(timestamp)
    )
}

pub(crate) fn record_close() -> &'static str {
    "  </record>\n"
}

/// Renders a `<record>` block from already-escaped item contents. Items are
/// grouped into one element per modality in the order given.
pub(crate) fn render_block(timestamp: &str, items: &[(Modality, &str, Option<usize>)]) -> String {
    let mut out = record_open(timestamp);
    let mut i = 0;
    while i < items.len() {
        let modality = items[i].0;
        out.push_str(&format!("{INDENT_MODALITY}<{}>\n", modality.tag()));
        while i < items.len() && items[i].0 == modality {
            match items[i].2 {
                Some(part) => out.push_str(&format!("{INDENT_ITEM}<item part=\"{part}\">")),
                None => {
                    out.push_str(INDENT_ITEM);
                    out.push_str("<item>");
                }
            }
            out.push_str(items[i].1);
            out.push_str("</item>\n");
            i += 1;
        }
        out.push_str(&format!("{INDENT_MODALITY}</{}>\n", modality.tag()));
    }
    out.push_str(record_close());
    out
}

/// Serializes a record into the unified XML layout. Pure: identical input
/// yields byte-identical output.
pub fn unify_to_xml(record: &PatientRecord) -> XmlDocument {
    let mut text = format!("<patient id=\"{}\">\n", escape_xml(&record.subject_id));
    let header = 0..text.len();

    text.push_str("  <demographics>\n");
    for (key, value) in &record.demographics {
        text.push_str(&format!(
            "    <field name=\"{}\">{}</field>\n",
            escape_xml(key),
            escape_xml(value)
        ));
    }
    text.push_str("  </demographics>\n");
    let demographics = header.end..text.len();

    let mut segments = Vec::new();
    let observations = &record.observations;
    let mut start = 0;
    while start < observations.len() {
        let timestamp = &observations[start].timestamp;
        let mut end = start + 1;
        while end < observations.len() && &observations[end].timestamp == timestamp {
            end += 1;
        }
        let mut group: Vec<&Observation> = observations[start..end].iter().collect();
        group.sort_by_key(|o| o.modality);

        let seg_start = text.len();
        text.push_str(&record_open(timestamp));
        let mut entries = Vec::with_capacity(group.len());
        let mut i = 0;
        while i < group.len() {
            let modality = group[i].modality;
            text.push_str(&format!("{INDENT_MODALITY}<{}>\n", modality.tag()));
            while i < group.len() && group[i].modality == modality {
                text.push_str(INDENT_ITEM);
                text.push_str("<item>");
                let content_start = text.len();
                text.push_str(&escape_xml(&group[i].payload));
                entries.push(SegmentEntry {
                    modality,
                    content: content_start..text.len(),
                });
                text.push_str("</item>\n");
                i += 1;
            }
            text.push_str(&format!("{INDENT_MODALITY}</{}>\n", modality.tag()));
        }
        text.push_str(record_close());
        segments.push(Segment {
            timestamp: timestamp.clone(),
            range: seg_start..text.len(),
            entries,
        });
        start = end;
    }

    let footer_start = text.len();
    text.push_str("</patient>\n");
    XmlDocument {
        footer: footer_start..text.len(),
        text,
        header,
        demographics,
        segments,
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: malformed JSON: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("line {line}: duplicate subject_id {subject_id:?}")]
    DuplicateSubject { line: usize, subject_id: String },
    #[error("reading dataset: {0}")]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    /// 1-based line number of the offending record, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            DatasetError::Malformed { line, .. }
            | DatasetError::Invalid { line, .. }
            | DatasetError::DuplicateSubject { line, .. } => Some(*line),
            DatasetError::Io(_) => None,
        }
    }
}

/// Reads a JSONL dataset, validating every record. Fails on the first bad
/// line; blank lines are skipped.
pub fn parse_dataset<R: BufRead>(reader: R) -> Result<Vec<PatientRecord>, DatasetError> {
    parse_dataset_with(reader, ValidationOptions::default())
}

pub fn parse_dataset_with<R: BufRead>(
    reader: R,
    options: ValidationOptions,
) -> Result<Vec<PatientRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: PatientRecord =
            serde_json::from_str(&line).map_err(|source| DatasetError::Malformed {
                line: line_no,
                source,
            })?;
        let record =
            validate_record_with(raw, options).map_err(|source| DatasetError::Invalid {
                line: line_no,
                source,
            })?;
        if !seen.insert(record.subject_id.clone()) {
            return Err(DatasetError::DuplicateSubject {
                line: line_no,
                subject_id: record.subject_id,
            });
        }
        records.push(record);
    }
    Ok(records)
}
