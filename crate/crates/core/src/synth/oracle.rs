//! Deterministic scripted backend that honors the agent prompt contracts.
//!
//! Workers report every `SIGNAL_...` marker in their chunk that is not
//! already in their memory window, and keep a summary holding only the
//! most recent `summary_capacity` markers. The manager and the single-shot
//! prompt score the number of distinct markers they can see through a
//! fixed monotone table.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{
    Backend, BackendError, CompletionRequest, RawCompletion, Role, CORRECTIVE_MESSAGE,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Markers a worker summary can hold; older ones are forgotten.
    pub summary_capacity: usize,
    /// Score for 0, 1, 2, ... visible markers; the last entry covers any
    /// larger count.
    pub score_table: Vec<u8>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            summary_capacity: 2,
            score_table: vec![1, 3, 5, 8],
        }
    }
}

impl OracleConfig {
    pub fn score_for(&self, markers: usize) -> u8 {
        let table = &self.score_table;
        table[markers.min(table.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateShape {
    InitialWorker,
    SubsequentWorker,
    Manager,
    ManagerNoMemory,
    SingleShot,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("oracle template mismatch: {0}")]
    TemplateMismatch(String),
}

fn marker_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\bSIGNAL(?:_[A-Z0-9]+)+\b").expect("valid marker regex"))
}

/// Distinct markers in order of first appearance.
pub fn find_markers(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    marker_pattern()
        .find_iter(text)
        .map(|m| m.as_str().to_string())
        .filter(|m| seen.insert(m.clone()))
        .collect()
}

/// Text between the first `<tag>` and the last `</tag>`.
fn block<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let end = text.rfind(&close)?;
    (start <= end).then(|| &text[start..end])
}

/// Date of the `<record date="...">` element enclosing `pos`.
fn enclosing_date(xml: &str, pos: usize) -> String {
    const OPEN: &str = "<record date=\"";
    xml[..pos]
        .rfind(OPEN)
        .and_then(|at| {
            let rest = &xml[at + OPEN.len()..];
            rest.find('"').map(|end| rest[..end].to_string())
        })
        .unwrap_or_default()
}

fn summary_markers(previous: &str) -> Vec<String> {
    match serde_json::from_str::<Value>(previous.trim()) {
        Ok(v) => {
            let summary = v
                .get("updated_summary")
                .or_else(|| v.get("summary"))
                .and_then(Value::as_str)
                .unwrap_or("");
            find_markers(summary)
        }
        Err(_) => find_markers(previous),
    }
}

fn summary_text(markers: &[String]) -> String {
    if markers.is_empty() {
        "No planted findings so far.".into()
    } else {
        format!("Planted findings so far: {}.", markers.join("; "))
    }
}

fn level_for(count: usize) -> &'static str {
    match count {
        0 => "Low",
        1 | 2 => "Moderate",
        _ => "High",
    }
}

#[derive(Clone, Debug, Default)]
pub struct OracleBackend {
    pub config: OracleConfig,
}

impl OracleBackend {
    pub fn new(config: OracleConfig) -> Self {
        OracleBackend { config }
    }

    pub fn shape(request: &CompletionRequest) -> Result<(TemplateShape, &str), OracleError> {
        let user = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| OracleError::TemplateMismatch("no user message".into()))?;
        let has =
            |tag: &str| user.contains(&format!("<{tag}>")) && user.contains(&format!("</{tag}>"));
        let shape = if has("chunk_xml") {
            TemplateShape::InitialWorker
        } else if has("previous_summary") && has("memory_events") && has("new_chunk_xml") {
            TemplateShape::SubsequentWorker
        } else if has("final_worker_outputs") && has("universal_memory_events") {
            TemplateShape::Manager
        } else if has("final_worker_outputs") {
            TemplateShape::ManagerNoMemory
        } else if has("patient_record_xml") {
            TemplateShape::SingleShot
        } else {
            return Err(OracleError::TemplateMismatch(
                "no known prompt tags in user message".into(),
            ));
        };
        Ok((shape, user))
    }

    /// The reply text for `request`.
    pub fn respond(&self, request: &CompletionRequest) -> Result<String, OracleError> {
        let (shape, user) = Self::shape(request)?;
        let missing = |tag: &str| OracleError::TemplateMismatch(format!("missing <{tag}> block"));
        let value = match shape {
            TemplateShape::InitialWorker => {
                let chunk = block(user, "chunk_xml").ok_or_else(|| missing("chunk_xml"))?;
                self.worker(true, &[], &[], chunk)
            }
            TemplateShape::SubsequentWorker => {
                let previous =
                    block(user, "previous_summary").ok_or_else(|| missing("previous_summary"))?;
                let memory =
                    block(user, "memory_events").ok_or_else(|| missing("memory_events"))?;
                let chunk = block(user, "new_chunk_xml").ok_or_else(|| missing("new_chunk_xml"))?;
                self.worker(
                    false,
                    &summary_markers(previous),
                    &find_markers(memory),
                    chunk,
                )
            }
            TemplateShape::Manager | TemplateShape::ManagerNoMemory => {
                let last = block(user, "final_worker_outputs")
                    .ok_or_else(|| missing("final_worker_outputs"))?;
                let mut visible = summary_markers(last);
                if shape == TemplateShape::Manager {
                    let memory = block(user, "universal_memory_events")
                        .ok_or_else(|| missing("universal_memory_events"))?;
                    for m in find_markers(memory) {
                        if !visible.contains(&m) {
                            visible.push(m);
                        }
                    }
                }
                let score = self.config.score_for(visible.len());
                json!({
                    "risk_evolution_summary": format!("{} planted findings surfaced across the record.", visible.len()),
                    "final_lung_cancer_related_events": visible,
                    "final_risk_assessment": {
                        "risk_level": score,
                        "reasoning": format!("Score {score} from {} distinct planted findings.", visible.len()),
                    },
                })
            }
            TemplateShape::SingleShot => {
                let xml = block(user, "patient_record_xml")
                    .ok_or_else(|| missing("patient_record_xml"))?;
                let visible = find_markers(xml);
                let score = self.config.score_for(visible.len());
                json!({
                    "final_risk_assessment": {
                        "risk_level": score,
                        "reasoning": format!("Score {score} from {} distinct planted findings.", visible.len()),
                    },
                })
            }
        };
        Ok(value.to_string())
    }

    fn worker(&self, initial: bool, carried: &[String], window: &[String], chunk: &str) -> Value {
        let mut events = Vec::new();
        let mut seen: Vec<String> = carried.to_vec();
        let mut reported = HashSet::new();
        for m in marker_pattern().find_iter(chunk) {
            let marker = m.as_str().to_string();
            if !window.contains(&marker) && reported.insert(marker.clone()) {
                events.push(json!({
                    "timestamp": enclosing_date(chunk, m.start()),
                    "event": format!("Planted finding {marker}"),
                }));
            }
            if let Some(at) = seen.iter().position(|s| *s == marker) {
                seen.remove(at);
            }
            seen.push(marker);
        }
        let kept = &seen[seen.len().saturating_sub(self.config.summary_capacity)..];
        let assessment = json!({
            "risk_level": level_for(kept.len()),
            "reasoning": format!("{} planted findings held in summary.", kept.len()),
        });
        if initial {
            json!({
                "summary": summary_text(kept),
                "risk_factors_or_clinical_events": events,
                "risk_assessment": assessment,
            })
        } else {
            json!({
                "updated_summary": summary_text(kept),
                "new_risk_factors_or_clinical_events": events,
                "temporal_analysis": format!("{} new planted findings in this chunk.", events.len()),
                "updated_risk_assessment": assessment,
            })
        }
    }
}

impl Backend for OracleBackend {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let text = self
            .respond(request)
            .map_err(|e| BackendError::Rejected(e.to_string()))?;
        Ok(RawCompletion {
            text,
            prompt_tokens: None,
            output_tokens: None,
        })
    }
}

/// Replies with non-JSON text unless the request ends with the corrective
/// message, in which case the wrapped oracle answers.
#[derive(Clone, Debug, Default)]
pub struct TwoPhaseOracle {
    pub inner: OracleBackend,
}

impl Backend for TwoPhaseOracle {
    fn id(&self) -> String {
        "oracle-two-phase".into()
    }

    fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
        let corrected = request
            .messages
            .last()
            .is_some_and(|m| m.role == Role::User && m.content == CORRECTIVE_MESSAGE);
        if corrected {
            self.inner.send(request)
        } else {
            Ok(RawCompletion {
                text: "Here is my assessment: the patient appears stable.".into(),
                prompt_tokens: None,
                output_tokens: None,
            })
        }
    }
}
