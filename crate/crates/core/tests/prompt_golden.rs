mod common;

use common::{golden, prompt_mismatches, rendered_shapes, slots};
use trajcoa::llm::Role;
use trajcoa::TemplateSet;

#[test]
fn pipeline_prompts_match_snapshots() {
    assert!(prompt_mismatches().is_empty(), "{:?}", prompt_mismatches());
}

#[test]
fn every_shape_is_system_then_user() {
    for (name, request) in rendered_shapes() {
        let roles: Vec<Role> = request.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, vec![Role::System, Role::User], "{name}");
    }
}

#[test]
fn templates_substitute_slots_only() {
    let t = TemplateSet::builtin();
    let s = slots();
    let user = t
        .initial_worker_user
        .render(&[("chunk_1_xml", &s["chunk_1_xml"])])
        .unwrap();
    assert_eq!(user, golden("initial_worker.user.txt"));
    assert_eq!(t.rag_query, golden("rag_query.txt"));
    for text in [
        &t.initial_worker_system,
        &t.subsequent_worker_system,
        &t.manager_system,
    ] {
        assert!(text.render(&[]).unwrap().ends_with(
            "ONLY output the JSON object without any additional text or formatting. Ensure that the JSON is valid and can be parsed easily."
        ));
    }
}

#[test]
fn slot_values_are_inserted_verbatim() {
    let s = slots();
    let (_, request) = rendered_shapes()
        .into_iter()
        .find(|(n, _)| *n == "subsequent_worker")
        .unwrap();
    let user = &request.messages[1].content;
    for key in ["previous_agent_output", "memory_events", "new_chunk_xml"] {
        assert!(user.contains(&s[key]), "{key}");
    }
}
