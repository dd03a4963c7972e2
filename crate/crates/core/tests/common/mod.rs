#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use trajcoa::chain::WorkerOutput;
use trajcoa::chunking::Chunk;
use trajcoa::llm::CompletionRequest;
use trajcoa::{
    ChainConfig, Gateway, HeuristicCounter, MemoryEvent, MemoryStore, OracleBackend, OracleConfig,
    SingleShot, TemplateSet, TrajCoa,
};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(golden_dir().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn slots() -> BTreeMap<String, String> {
    serde_json::from_str(&golden("slots.json")).unwrap()
}

pub fn oracle_gateway() -> Gateway {
    Gateway::new(
        Arc::new(OracleBackend::new(OracleConfig::default())),
        Arc::new(HeuristicCounter::default()),
    )
}

fn chunk(text: &str) -> Chunk {
    Chunk {
        index: 0,
        token_count: 0,
        time_span: None,
        carried_timestamp_split: false,
        text: text.to_string(),
    }
}

/// `[timestamp] event` lines back into events.
fn events(timeline: &str) -> Vec<MemoryEvent> {
    timeline
        .lines()
        .map(|l| {
            let (ts, ev) = l.trim_start_matches('[').split_once("] ").unwrap();
            MemoryEvent::new(ts, ev, 0)
        })
        .collect()
}

/// The five prompt shapes rendered through the pipeline with the golden
/// slot values: (shape name, request).
pub fn rendered_shapes() -> Vec<(&'static str, CompletionRequest)> {
    let s = slots();
    let chain = |ablation| {
        TrajCoa::new(
            oracle_gateway(),
            TemplateSet::builtin(),
            ChainConfig {
                ablation,
                ..ChainConfig::default()
            },
        )
    };
    let worker =
        |key: &str, step| WorkerOutput::from_value(step, serde_json::from_str(&s[key]).unwrap());
    let mut memory = MemoryStore::new();
    memory.append_events(events(&s["universal_memory_events"]));
    vec![
        (
            "initial_worker",
            chain(false)
                .render_worker_prompt(0, None, &chunk(&s["chunk_1_xml"]), &[])
                .unwrap(),
        ),
        (
            "subsequent_worker",
            chain(false)
                .render_worker_prompt(
                    1,
                    Some(&worker("previous_agent_output", 1)),
                    &chunk(&s["new_chunk_xml"]),
                    &events(&s["memory_events"]),
                )
                .unwrap(),
        ),
        (
            "manager",
            chain(false)
                .render_manager_prompt(&worker("final_worker_outputs", 1), &memory)
                .unwrap(),
        ),
        (
            "manager_no_memory",
            chain(true)
                .render_manager_prompt(&worker("final_worker_outputs", 1), &memory)
                .unwrap(),
        ),
        (
            "single_shot",
            SingleShot::new(oracle_gateway(), TemplateSet::builtin())
                .render(&s["patient_record_xml"])
                .unwrap(),
        ),
    ]
}

/// Shapes whose system or user message differs from the snapshot.
pub fn prompt_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for (name, request) in rendered_shapes() {
        let want = [
            golden(&format!("{name}.system.txt")),
            golden(&format!("{name}.user.txt")),
        ];
        let got: Vec<&str> = request
            .messages
            .iter()
            .map(|m| m.content.as_str())
            .collect();
        if got != want {
            bad.push(name.to_string());
        }
    }
    bad
}
