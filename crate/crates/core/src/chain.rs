//! Sequential worker chain with event memory, followed by a manager.
//!
//! Each worker sees one chunk, the previous worker's JSON output and the
//! last `mem_window` memory events; its new events are appended to the
//! memory store. The manager reads the last worker output together with the
//! full memory timeline and returns a 1-10 risk score. In ablation mode the
//! memory is neither filled nor shown.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chunking::{
    cap_chunks, chunk_time_aware_with, Chunk, ChunkError, ChunkOptions, DemographicsPlacement,
};
use crate::llm::{
    CompletionRequest, DecodingParams, Field, FieldKind, Gateway, GatewayError, Message, Schema,
    Structured, DEFAULT_STRUCTURED_ATTEMPTS,
};
use crate::memory::{render_events, MemoryEvent, MemoryStore};
use crate::prompts::{TemplateError, TemplateSet};
use crate::record::{unify_to_xml, PatientRecord};
use crate::tokens::apply_margin;

/// Sent after a manager reply whose risk level lies outside 1-10.
pub const RANGE_CORRECTIVE_MESSAGE: &str =
    "The risk_level must be an integer from 1 to 10. Reply with only the JSON object.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RiskLevel {
    Low,
    Moderate,
    High,
}

impl RiskLevel {
    pub fn parse(text: &str) -> Option<RiskLevel> {
        match text.trim().to_ascii_lowercase().as_str() {
            "low" => Some(RiskLevel::Low),
            "moderate" => Some(RiskLevel::Moderate),
            "high" => Some(RiskLevel::High),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RiskLevel::Low => "Low",
            RiskLevel::Moderate => "Moderate",
            RiskLevel::High => "High",
        }
    }
}

fn levels() -> FieldKind {
    FieldKind::Enum(vec!["Low".into(), "Moderate".into(), "High".into()])
}

fn events_kind() -> FieldKind {
    FieldKind::List(Box::new(FieldKind::Object(vec![
        Field::new("timestamp", FieldKind::Any),
        Field::new("event", FieldKind::String),
    ])))
}

fn assessment(levels: FieldKind) -> FieldKind {
    FieldKind::Object(vec![
        Field::new("risk_level", levels),
        Field::new("reasoning", FieldKind::String),
    ])
}

pub fn initial_worker_schema() -> Schema {
    Schema::new(vec![
        Field::new("summary", FieldKind::String),
        Field::new("risk_factors_or_clinical_events", events_kind()),
        Field::new("risk_assessment", assessment(levels())),
    ])
}

pub fn subsequent_worker_schema() -> Schema {
    Schema::new(vec![
        Field::new("updated_summary", FieldKind::String),
        Field::new("new_risk_factors_or_clinical_events", events_kind()),
        Field::new("temporal_analysis", FieldKind::String),
        Field::new("updated_risk_assessment", assessment(levels())),
    ])
}

pub fn manager_schema() -> Schema {
    Schema::new(vec![
        Field::new("risk_evolution_summary", FieldKind::String),
        Field::new(
            "final_lung_cancer_related_events",
            FieldKind::List(Box::new(FieldKind::Any)),
        ),
        Field::new("final_risk_assessment", assessment(FieldKind::Integer)),
    ])
}

/// Schema of the single-shot prompt used by the baselines.
pub fn single_shot_schema() -> Schema {
    Schema::new(vec![Field::new(
        "final_risk_assessment",
        assessment(FieldKind::Integer),
    )])
}

fn text_of(value: &Value) -> String {
    match value {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerOutput {
    pub updated_summary: String,
    pub new_events: Vec<MemoryEvent>,
    /// Empty for the initial worker.
    pub temporal_analysis: String,
    pub risk_level: RiskLevel,
    pub reasoning: String,
    /// The parsed JSON object, passed verbatim to the next agent.
    pub value: Value,
    /// Set when lenient mode replaced an unparseable reply.
    #[serde(default)]
    pub degraded: bool,
}

impl WorkerOutput {
    /// Reads a schema-valid reply of the initial (`step == 0`) or subsequent
    /// worker.
    pub fn from_value(step: usize, value: Value) -> WorkerOutput {
        let (summary, events, assessment) = if step == 0 {
            (
                "summary",
                "risk_factors_or_clinical_events",
                "risk_assessment",
            )
        } else {
            (
                "updated_summary",
                "new_risk_factors_or_clinical_events",
                "updated_risk_assessment",
            )
        };
        let new_events = value[events]
            .as_array()
            .map(|items| {
                items
                    .iter()
                    .map(|e| MemoryEvent::new(text_of(&e["timestamp"]), text_of(&e["event"]), step))
                    .collect()
            })
            .unwrap_or_default();
        WorkerOutput {
            updated_summary: text_of(&value[summary]),
            new_events,
            temporal_analysis: if step == 0 {
                String::new()
            } else {
                text_of(&value["temporal_analysis"])
            },
            risk_level: value[assessment]["risk_level"]
                .as_str()
                .and_then(RiskLevel::parse)
                .unwrap_or(RiskLevel::Low),
            reasoning: text_of(&value[assessment]["reasoning"]),
            value,
            degraded: false,
        }
    }

    /// Lenient-mode stand-in: previous summary carried forward, no events,
    /// risk Low.
    pub fn degraded(prev: Option<&WorkerOutput>) -> WorkerOutput {
        let summary = prev
            .map(|p| p.updated_summary.clone())
            .filter(|s| !s.trim().is_empty())
            .unwrap_or_else(|| "No summary available.".into());
        let reasoning =
            "Agent output could not be parsed; previous summary carried forward.".to_string();
        let value = json!({
            "updated_summary": summary,
            "new_risk_factors_or_clinical_events": [],
            "temporal_analysis": "",
            "updated_risk_assessment": {"risk_level": "Low", "reasoning": reasoning},
        });
        WorkerOutput {
            updated_summary: summary,
            new_events: Vec::new(),
            temporal_analysis: String::new(),
            risk_level: RiskLevel::Low,
            reasoning,
            value,
            degraded: true,
        }
    }

    /// Compact JSON of the parsed reply.
    pub fn serialized(&self) -> String {
        self.value.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManagerOutput {
    pub risk_evolution_summary: String,
    pub final_events: Vec<String>,
    pub risk_level: u8,
    pub reasoning: String,
    pub value: Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Worker,
    Manager,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentStep {
    pub kind: AgentKind,
    /// Worker position in the chain; `None` for the manager.
    pub chunk_index: Option<usize>,
    /// The request as first sent, without corrective messages.
    pub messages: Vec<Message>,
    /// Accepted reply text (the last reply for degraded steps).
    pub raw_completion: String,
    pub parsed: Value,
    pub attempts: u32,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTrajectory {
    pub subject_id: String,
    pub steps: Vec<AgentStep>,
    /// Original indices of the chunks kept by the chunk cap.
    pub kept_chunks: Vec<usize>,
    pub memory: Vec<MemoryEvent>,
    pub score: u8,
}

impl RunTrajectory {
    pub fn workers(&self) -> impl Iterator<Item = &AgentStep> {
        self.steps.iter().filter(|s| s.kind == AgentKind::Worker)
    }

    pub fn manager(&self) -> Option<&AgentStep> {
        self.steps.last().filter(|s| s.kind == AgentKind::Manager)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub risk_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub model: String,
    pub config_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Chunk budget k in tokens.
    pub chunk_tokens: usize,
    pub max_chunks: usize,
    /// Memory window k_mem shown to workers.
    pub mem_window: usize,
    /// Run without memory (vanilla chain-of-agents).
    pub ablation: bool,
    /// Replace unparseable worker replies instead of failing.
    pub lenient: bool,
    /// Fraction of `chunk_tokens` held back for tokenizer mismatch.
    pub token_margin: f64,
    pub max_attempts: u32,
    pub demographics: DemographicsPlacement,
    pub decoding: DecodingParams,
    pub seed: Option<u64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            chunk_tokens: 8192,
            max_chunks: 15,
            mem_window: 10,
            ablation: false,
            lenient: false,
            token_margin: 0.0,
            max_attempts: DEFAULT_STRUCTURED_ATTEMPTS,
            demographics: DemographicsPlacement::FirstChunk,
            decoding: DecodingParams::default(),
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error(transparent)]
    Chunk(#[from] ChunkError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("record produced no chunks")]
    EmptyRecord,
    #[error("worker {chunk}: {source}")]
    Worker {
        chunk: usize,
        #[source]
        source: GatewayError,
    },
    #[error("manager: {0}")]
    Manager(#[source] GatewayError),
    #[error("manager risk_level {value} outside 1-10 after {attempts} attempts")]
    OutOfRangeScore { value: f64, attempts: u32 },
}

impl ChainError {
    pub fn gateway(&self) -> Option<&GatewayError> {
        match self {
            ChainError::Worker { source, .. } | ChainError::Manager(source) => Some(source),
            _ => None,
        }
    }

    pub fn is_backend_failure(&self) -> bool {
        self.gateway().is_some_and(GatewayError::is_backend_failure)
    }
}

/// A reply carrying `final_risk_assessment.risk_level` within 1-10.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub value: Value,
    pub raw: String,
    pub level: u8,
    pub attempts: u32,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("risk_level {value} outside 1-10 after {attempts} attempts")]
    OutOfRange { value: f64, attempts: u32 },
}

/// Structured completion whose `final_risk_assessment.risk_level` must lie
/// in 1-10. An out-of-range level gets one corrective retry if attempts
/// remain; the total never exceeds `max_attempts`.
pub fn complete_scored(
    gateway: &Gateway,
    tag: &str,
    request: &CompletionRequest,
    schema: &Schema,
    max_attempts: u32,
) -> Result<Scored, ScoreError> {
    let level_of = |v: &Value| {
        v["final_risk_assessment"]["risk_level"]
            .as_f64()
            .unwrap_or(f64::NAN)
    };
    let mut reply = gateway.complete_structured(tag, request, schema, max_attempts)?;
    let mut attempts = reply.attempts;
    let mut prompt_tokens = reply.prompt_tokens;
    let mut output_tokens = reply.output_tokens;
    let mut level = level_of(&reply.value);
    if !(1.0..=10.0).contains(&level) {
        // the corrective retry shares the attempt budget
        let remaining = max_attempts.max(1).saturating_sub(attempts);
        if remaining == 0 {
            return Err(ScoreError::OutOfRange {
                value: level,
                attempts,
            });
        }
        let mut retry = request.clone();
        retry.messages.push(Message::user(RANGE_CORRECTIVE_MESSAGE));
        reply = gateway.complete_structured(tag, &retry, schema, remaining)?;
        attempts += reply.attempts;
        prompt_tokens += reply.prompt_tokens;
        output_tokens += reply.output_tokens;
        level = level_of(&reply.value);
        if !(1.0..=10.0).contains(&level) {
            return Err(ScoreError::OutOfRange {
                value: level,
                attempts,
            });
        }
    }
    Ok(Scored {
        value: reply.value,
        raw: reply.raw,
        level: level as u8,
        attempts,
        prompt_tokens,
        output_tokens,
    })
}

/// Per-call seed derived from the run seed and the step position.
fn step_seed(seed: Option<u64>, step: usize) -> Option<u64> {
    seed.map(|s| s ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A configured chain: backend gateway, prompt templates and settings.
#[derive(Clone, Debug)]
pub struct TrajCoa {
    pub gateway: Gateway,
    pub templates: TemplateSet,
    pub config: ChainConfig,
}

impl TrajCoa {
    pub fn new(gateway: Gateway, templates: TemplateSet, config: ChainConfig) -> Self {
        TrajCoa {
            gateway,
            templates,
            config,
        }
    }

    /// Effective chunk budget after the token margin.
    pub fn chunk_budget(&self) -> usize {
        apply_margin(self.config.chunk_tokens, self.config.token_margin)
    }

    /// Renders the initial worker prompt for step 0 and the subsequent
    /// worker prompt otherwise. Step 0 ignores `prev` and `window`.
    pub fn render_worker_prompt(
        &self,
        step: usize,
        prev: Option<&WorkerOutput>,
        chunk: &Chunk,
        window: &[MemoryEvent],
    ) -> Result<CompletionRequest, TemplateError> {
        let t = &self.templates;
        let (system, user) = if step == 0 {
            (
                t.initial_worker_system.render(&[])?,
                t.initial_worker_user
                    .render(&[("chunk_1_xml", &chunk.text)])?,
            )
        } else {
            let prev_text = prev.map(WorkerOutput::serialized);
            let memory = render_events(window);
            let mut slots = vec![
                ("memory_events", memory.as_str()),
                ("new_chunk_xml", chunk.text.as_str()),
            ];
            if let Some(p) = &prev_text {
                slots.push(("previous_agent_output", p));
            }
            (
                t.subsequent_worker_system.render(&[])?,
                t.subsequent_worker_user.render(&slots)?,
            )
        };
        Ok(CompletionRequest::new(
            vec![Message::system(system), Message::user(user)],
            &self.config.decoding,
            step_seed(self.config.seed, step),
        ))
    }

    pub fn render_manager_prompt(
        &self,
        last: &WorkerOutput,
        memory: &MemoryStore,
    ) -> Result<CompletionRequest, TemplateError> {
        let t = &self.templates;
        let last = last.serialized();
        let user = if self.config.ablation {
            t.manager_user_no_memory
                .render(&[("final_worker_outputs", &last)])?
        } else {
            let timeline = memory.render_timeline();
            t.manager_user.render(&[
                ("final_worker_outputs", &last),
                ("universal_memory_events", &timeline),
            ])?
        };
        Ok(CompletionRequest::new(
            vec![
                Message::system(t.manager_system.render(&[])?),
                Message::user(user),
            ],
            &self.config.decoding,
            step_seed(self.config.seed, usize::MAX - 1),
        ))
    }

    /// Runs worker `step` on `chunk` and appends its events to `memory`
    /// (skipped in ablation mode).
    pub fn run_worker_step(
        &self,
        step: usize,
        prev: Option<&WorkerOutput>,
        memory: &mut MemoryStore,
        chunk: &Chunk,
    ) -> Result<(WorkerOutput, AgentStep), ChainError> {
        let window = if self.config.ablation {
            &[][..]
        } else {
            memory.window(self.config.mem_window)
        };
        let request = self.render_worker_prompt(step, prev, chunk, window)?;
        let schema = if step == 0 {
            initial_worker_schema()
        } else {
            subsequent_worker_schema()
        };
        let tag = if step == 0 {
            "worker_initial"
        } else {
            "worker"
        };
        let reply =
            self.gateway
                .complete_structured(tag, &request, &schema, self.config.max_attempts);
        let (output, step_record) = match reply {
            Ok(Structured {
                value,
                raw,
                attempts,
                prompt_tokens,
                output_tokens,
                ..
            }) => {
                let output = WorkerOutput::from_value(step, value.clone());
                let record = AgentStep {
                    kind: AgentKind::Worker,
                    chunk_index: Some(step),
                    messages: request.messages,
                    raw_completion: raw,
                    parsed: value,
                    attempts,
                    prompt_tokens,
                    output_tokens,
                    degraded: false,
                };
                (output, record)
            }
            Err(GatewayError::UnparseableAgentOutput { attempts, .. }) if self.config.lenient => {
                let output = WorkerOutput::degraded(prev);
                let record = AgentStep {
                    kind: AgentKind::Worker,
                    chunk_index: Some(step),
                    messages: request.messages,
                    raw_completion: attempts.last().cloned().unwrap_or_default(),
                    parsed: output.value.clone(),
                    attempts: attempts.len() as u32,
                    prompt_tokens: 0,
                    output_tokens: 0,
                    degraded: true,
                };
                (output, record)
            }
            Err(source) => {
                return Err(ChainError::Worker {
                    chunk: step,
                    source,
                })
            }
        };
        if !self.config.ablation {
            memory.append_events(output.new_events.iter().cloned());
        }
        Ok((output, step_record))
    }

    /// Runs the manager. A risk level outside 1-10 gets one corrective
    /// retry before failing.
    pub fn run_manager(
        &self,
        last: &WorkerOutput,
        memory: &MemoryStore,
    ) -> Result<(ManagerOutput, AgentStep), ChainError> {
        let request = self.render_manager_prompt(last, memory)?;
        let scored = complete_scored(
            &self.gateway,
            "manager",
            &request,
            &manager_schema(),
            self.config.max_attempts,
        )
        .map_err(|e| match e {
            ScoreError::Gateway(e) => ChainError::Manager(e),
            ScoreError::OutOfRange { value, attempts } => {
                ChainError::OutOfRangeScore { value, attempts }
            }
        })?;
        let Scored {
            value,
            raw,
            level,
            attempts,
            prompt_tokens,
            output_tokens,
        } = scored;
        let output = ManagerOutput {
            risk_evolution_summary: text_of(&value["risk_evolution_summary"]),
            final_events: value["final_lung_cancer_related_events"]
                .as_array()
                .map(|xs| xs.iter().map(text_of).collect())
                .unwrap_or_default(),
            risk_level: level,
            reasoning: text_of(&value["final_risk_assessment"]["reasoning"]),
            value: value.clone(),
        };
        let step = AgentStep {
            kind: AgentKind::Manager,
            chunk_index: None,
            messages: request.messages,
            raw_completion: raw,
            parsed: value,
            attempts,
            prompt_tokens,
            output_tokens,
            degraded: false,
        };
        Ok((output, step))
    }

    /// Time-aware chunks of `record`, capped at `max_chunks`, with the
    /// original indices of the kept chunks.
    pub fn chunks(&self, record: &PatientRecord) -> Result<(Vec<Chunk>, Vec<usize>), ChainError> {
        let doc = unify_to_xml(record);
        let options = ChunkOptions {
            demographics: self.config.demographics,
        };
        let chunks =
            chunk_time_aware_with(&doc, self.chunk_budget(), self.gateway.counter(), options)?;
        if chunks.is_empty() {
            return Err(ChainError::EmptyRecord);
        }
        Ok(cap_chunks(chunks, self.config.max_chunks))
    }

    /// Full pipeline for one subject.
    pub fn predict(
        &self,
        record: &PatientRecord,
        fingerprint: &str,
    ) -> Result<(Prediction, RunTrajectory), ChainError> {
        let (chunks, kept_chunks) = self.chunks(record)?;
        let mut memory = MemoryStore::new();
        let mut steps = Vec::with_capacity(chunks.len() + 1);
        let mut prev: Option<WorkerOutput> = None;
        for (i, chunk) in chunks.iter().enumerate() {
            let (output, step) = self.run_worker_step(i, prev.as_ref(), &mut memory, chunk)?;
            steps.push(step);
            prev = Some(output);
        }
        let last = prev.expect("at least one chunk");
        let (manager, step) = self.run_manager(&last, &memory)?;
        steps.push(step);
        let prediction = Prediction {
            subject_id: record.subject_id.clone(),
            risk_score: f64::from(manager.risk_level),
            label: record.label,
            model: self.gateway.backend_id(),
            config_fingerprint: fingerprint.to_string(),
        };
        let trajectory = RunTrajectory {
            subject_id: record.subject_id.clone(),
            steps,
            kept_chunks,
            memory: memory.events().to_vec(),
            score: manager.risk_level,
        };
        Ok((prediction, trajectory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Backend, BackendError, RawCompletion, RetryPolicy};
    use crate::record::{Modality, Observation};
    use crate::tokens::HeuristicCounter;
    use std::collections::BTreeMap;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::{Arc, Mutex};

    /// Answers with valid replies; the manager returns the scripted levels
    /// in order.
    #[derive(Debug, Default)]
    struct Script {
        manager_levels: Mutex<Vec<i64>>,
        worker_events: Vec<(&'static str, &'static str)>,
        calls: AtomicU32,
    }

    impl Backend for Script {
        fn id(&self) -> String {
            "script".into()
        }
        fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let user = request.user_text();
            let events: Vec<_> = self
                .worker_events
                .iter()
                .map(|(t, e)| json!({"timestamp": t, "event": e}))
                .collect();
            let text = if user.contains("<chunk_xml>") {
                json!({"summary": "s0", "risk_factors_or_clinical_events": events,
                       "risk_assessment": {"risk_level": "Low", "reasoning": "r"}})
            } else if user.contains("<new_chunk_xml>") {
                json!({"updated_summary": "s", "new_risk_factors_or_clinical_events": events,
                       "temporal_analysis": "t", "updated_risk_assessment": {"risk_level": "moderate", "reasoning": "r"}})
            } else {
                let mut levels = self.manager_levels.lock().unwrap();
                let level = if levels.len() > 1 {
                    levels.remove(0)
                } else {
                    levels[0]
                };
                json!({"risk_evolution_summary": "e", "final_lung_cancer_related_events": ["a"],
                       "final_risk_assessment": {"risk_level": level, "reasoning": "r"}})
            };
            Ok(RawCompletion {
                text: text.to_string(),
                prompt_tokens: None,
                output_tokens: None,
            })
        }
    }

    fn chain(backend: Arc<Script>, config: ChainConfig) -> TrajCoa {
        let gw = Gateway::new(backend, Arc::new(HeuristicCounter::default()))
            .with_retry(RetryPolicy::no_delay(1));
        TrajCoa::new(gw, TemplateSet::builtin(), config)
    }

    fn script(levels: Vec<i64>) -> Arc<Script> {
        Arc::new(Script {
            manager_levels: Mutex::new(levels),
            ..Default::default()
        })
    }

    fn record(days: usize, words: usize) -> PatientRecord {
        PatientRecord {
            subject_id: "p1".into(),
            demographics: BTreeMap::from([("sex".to_string(), "F".to_string())]),
            index_date: "2020-01-01".into(),
            label: Some(1),
            observations: (0..days)
                .map(|d| {
                    Observation::new(
                        format!("2019-{:02}-{:02}", d / 28 + 1, d % 28 + 1),
                        Modality::Note,
                        vec!["word"; words].join(" "),
                    )
                })
                .collect(),
        }
    }

    fn chunk(text: &str) -> Chunk {
        Chunk {
            index: 0,
            token_count: 0,
            time_span: None,
            carried_timestamp_split: false,
            text: text.into(),
        }
    }

    #[test]
    fn initial_prompt_wraps_chunk() {
        let c = chain(script(vec![5]), ChainConfig::default());
        let req = c
            .render_worker_prompt(0, None, &chunk("T-TEXT"), &[])
            .unwrap();
        assert!(req.messages[1]
            .content
            .contains("<chunk_xml>\nT-TEXT\n</chunk_xml>"));
        assert_eq!(
            req.messages[0].content,
            c.templates.initial_worker_system.text
        );
    }

    #[test]
    fn empty_memory_renders_empty_block() {
        let c = chain(script(vec![5]), ChainConfig::default());
        let prev = WorkerOutput::degraded(None);
        let req = c
            .render_worker_prompt(3, Some(&prev), &chunk("X"), &[])
            .unwrap();
        assert!(req.messages[1]
            .content
            .contains("<memory_events>\n\n</memory_events>"));
        assert!(req.messages[1].content.contains(&prev.serialized()));
    }

    #[test]
    fn missing_previous_output_is_underfilled() {
        let c = chain(script(vec![5]), ChainConfig::default());
        let err = c
            .render_worker_prompt(1, None, &chunk("X"), &[])
            .unwrap_err();
        assert!(
            matches!(err, TemplateError::TemplateUnderfilled { slot, .. } if slot == "previous_agent_output")
        );
    }

    #[test]
    fn single_chunk_record_makes_two_calls() {
        let backend = script(vec![7]);
        let c = chain(backend.clone(), ChainConfig::default());
        let (pred, traj) = c.predict(&record(3, 5), "fp").unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 2);
        assert_eq!(pred.risk_score, 7.0);
        assert_eq!(traj.steps.len(), 2);
        assert_eq!(traj.manager().unwrap().kind, AgentKind::Manager);
    }

    #[test]
    fn chain_is_capped_and_sequential() {
        let c = chain(
            script(vec![4]),
            ChainConfig {
                chunk_tokens: 80,
                max_chunks: 5,
                ..Default::default()
            },
        );
        let (_, traj) = c.predict(&record(30, 20), "fp").unwrap();
        let workers: Vec<_> = traj.workers().collect();
        assert_eq!(workers.len(), 5);
        let kept = &traj.kept_chunks;
        assert_eq!(kept[..3], [0, 1, 2]);
        assert!(kept[3] > 5 && kept[4] == kept[3] + 1);
        for (i, w) in workers.iter().enumerate() {
            assert_eq!(w.chunk_index, Some(i));
        }
        for pair in workers.windows(2) {
            let prev = pair[0].parsed.to_string();
            assert!(pair[1].messages[1].content.contains(&prev));
        }
    }

    #[test]
    fn out_of_range_manager_score_is_retried_once() {
        let c = chain(script(vec![0, 5]), ChainConfig::default());
        let (pred, traj) = c.predict(&record(2, 3), "fp").unwrap();
        assert_eq!(pred.risk_score, 5.0);
        assert_eq!(traj.manager().unwrap().attempts, 2);

        let c = chain(script(vec![11, 0]), ChainConfig::default());
        assert!(matches!(
            c.predict(&record(2, 3), "fp"),
            Err(ChainError::OutOfRangeScore { attempts: 2, .. })
        ));
    }

    #[test]
    fn memory_flows_to_manager_and_dedups() {
        let backend = Arc::new(Script {
            manager_levels: Mutex::new(vec![3]),
            worker_events: vec![("2019-01-01", "nodule 8mm")],
            ..Default::default()
        });
        let c = chain(
            backend,
            ChainConfig {
                chunk_tokens: 80,
                ..Default::default()
            },
        );
        let (_, traj) = c.predict(&record(6, 20), "fp").unwrap();
        assert!(traj.workers().count() > 2);
        assert_eq!(traj.memory.len(), 1);
        assert_eq!(traj.memory[0].source_chunk, 0);
        let manager = &traj.manager().unwrap().messages[1].content;
        assert!(manager.contains(
            "<universal_memory_events>\n[2019-01-01] nodule 8mm\n</universal_memory_events>"
        ));
    }

    #[test]
    fn ablation_hides_memory() {
        let backend = Arc::new(Script {
            manager_levels: Mutex::new(vec![3]),
            worker_events: vec![("2019-01-01", "nodule 8mm")],
            ..Default::default()
        });
        let c = chain(
            backend,
            ChainConfig {
                chunk_tokens: 80,
                ablation: true,
                ..Default::default()
            },
        );
        let (_, traj) = c.predict(&record(6, 20), "fp").unwrap();
        assert!(traj.memory.is_empty());
        let manager = &traj.manager().unwrap().messages[1].content;
        assert!(!manager.contains("<universal_memory_events>"));
        for w in traj.workers().skip(1) {
            assert!(w.messages[1]
                .content
                .contains("<memory_events>\n\n</memory_events>"));
        }
    }

    #[test]
    fn worker_output_parsing() {
        let v = json!({"updated_summary": "s", "new_risk_factors_or_clinical_events": [{"timestamp": 2019, "event": "e"}],
                       "temporal_analysis": "t", "updated_risk_assessment": {"risk_level": "HIGH", "reasoning": "r"}});
        assert!(subsequent_worker_schema().validate(&v).is_ok());
        let out = WorkerOutput::from_value(2, v);
        assert_eq!(out.risk_level, RiskLevel::High);
        assert_eq!(out.new_events, vec![MemoryEvent::new("2019", "e", 2)]);
    }
}
