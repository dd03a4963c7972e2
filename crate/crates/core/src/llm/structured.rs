//! JSON-object replies with schema checks and corrective retries.

use serde_json::Value;

use super::{CompletionRequest, Gateway, GatewayError, Message};

/// Appended as a user message after a reply that fails to parse or
/// validate. Wording is fixed (v1).
pub const CORRECTIVE_MESSAGE: &str =
    "Your previous reply was not a single valid JSON object. Reply with only the JSON object.";

#[derive(Clone, Debug, PartialEq)]
pub enum FieldKind {
    String,
    /// A JSON number with no fractional part.
    Integer,
    Number,
    Bool,
    /// One of the listed strings, compared case-insensitively.
    Enum(Vec<String>),
    List(Box<FieldKind>),
    Object(Vec<Field>),
    Any,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

impl Field {
    pub fn new(name: &str, kind: FieldKind) -> Self {
        Field {
            name: name.to_string(),
            kind,
        }
    }
}

/// Required fields of a JSON object reply. Extra fields are allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new(fields: Vec<Field>) -> Self {
        Schema { fields }
    }

    pub fn validate(&self, value: &Value) -> Result<(), String> {
        check_object(&self.fields, value, "")
    }
}

fn check_object(fields: &[Field], value: &Value, path: &str) -> Result<(), String> {
    let object = value
        .as_object()
        .ok_or_else(|| format!("{}: expected a JSON object", display_path(path)))?;
    for field in fields {
        let child = format!("{path}.{}", field.name);
        let v = object
            .get(&field.name)
            .ok_or_else(|| format!("{}: missing", display_path(&child)))?;
        check_kind(&field.kind, v, &child)?;
    }
    Ok(())
}

fn display_path(path: &str) -> &str {
    if path.is_empty() {
        "$"
    } else {
        path.trim_start_matches('.')
    }
}

fn check_kind(kind: &FieldKind, value: &Value, path: &str) -> Result<(), String> {
    let fail = |want: &str| Err(format!("{}: expected {want}", display_path(path)));
    match kind {
        FieldKind::Any => Ok(()),
        FieldKind::String if value.is_string() => Ok(()),
        FieldKind::String => fail("a string"),
        FieldKind::Bool if value.is_boolean() => Ok(()),
        FieldKind::Bool => fail("a boolean"),
        FieldKind::Number if value.is_number() => Ok(()),
        FieldKind::Number => fail("a number"),
        FieldKind::Integer => match value.as_f64() {
            Some(x) if x.fract() == 0.0 => Ok(()),
            _ => fail("an integer"),
        },
        FieldKind::Enum(options) => match value.as_str() {
            Some(s) if options.iter().any(|o| o.eq_ignore_ascii_case(s.trim())) => Ok(()),
            _ => fail(&format!("one of {options:?}")),
        },
        FieldKind::List(inner) => {
            let items = match value.as_array() {
                Some(items) => items,
                None => return fail("a list"),
            };
            for (i, item) in items.iter().enumerate() {
                check_kind(inner, item, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        FieldKind::Object(fields) => check_object(fields, value, path),
    }
}

/// Removes one surrounding Markdown code fence (with optional language tag)
/// and surrounding whitespace.
pub fn strip_code_fences(text: &str) -> &str {
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    let body = match rest.find('\n') {
        Some(newline) => &rest[newline + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// A parsed reply together with everything the model produced on the way.
#[derive(Clone, Debug, PartialEq)]
pub struct Structured {
    pub value: Value,
    /// Raw text of the accepted reply.
    pub raw: String,
    /// Raw text of every reply, accepted one last.
    pub raw_attempts: Vec<String>,
    pub attempts: u32,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

fn parse_reply(text: &str, schema: &Schema) -> Result<Value, String> {
    let value: Value =
        serde_json::from_str(strip_code_fences(text)).map_err(|e| format!("invalid JSON: {e}"))?;
    schema.validate(&value)?;
    Ok(value)
}

impl Gateway {
    /// Requests a JSON object matching `schema`. A failed parse or schema
    /// check re-sends the request with [`CORRECTIVE_MESSAGE`] appended, up to
    /// `max_attempts` sends in total.
    pub fn complete_structured(
        &self,
        tag: &str,
        request: &CompletionRequest,
        schema: &Schema,
        max_attempts: u32,
    ) -> Result<Structured, GatewayError> {
        let max_attempts = max_attempts.max(1);
        let mut corrected = request.clone();
        corrected.messages.push(Message::user(CORRECTIVE_MESSAGE));

        let mut raw_attempts = Vec::new();
        let mut prompt_tokens = 0;
        let mut output_tokens = 0;
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            let req = if attempt == 1 { request } else { &corrected };
            let completion = self.complete(tag, req)?;
            prompt_tokens += completion.prompt_tokens;
            output_tokens += completion.output_tokens;
            raw_attempts.push(completion.text.clone());
            match parse_reply(&completion.text, schema) {
                Ok(value) => {
                    return Ok(Structured {
                        value,
                        raw: completion.text,
                        raw_attempts,
                        attempts: attempt,
                        prompt_tokens,
                        output_tokens,
                    })
                }
                Err(e) => last_error = e,
            }
        }
        Err(GatewayError::UnparseableAgentOutput {
            attempts: raw_attempts,
            last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Backend, BackendError, DecodingParams, RawCompletion, RetryPolicy};
    use crate::tokens::HeuristicCounter;
    use serde_json::json;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    /// Replies with the scripted texts in order, repeating the last one.
    #[derive(Debug)]
    struct Scripted {
        replies: Vec<&'static str>,
        calls: AtomicU32,
    }

    impl Backend for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }
        fn send(&self, request: &CompletionRequest) -> Result<RawCompletion, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            if n > 0 {
                assert_eq!(request.messages.last().unwrap().content, CORRECTIVE_MESSAGE);
            }
            Ok(RawCompletion {
                text: self.replies[n.min(self.replies.len() - 1)].to_string(),
                prompt_tokens: Some(10),
                output_tokens: Some(1),
            })
        }
    }

    fn run(
        replies: Vec<&'static str>,
        max_attempts: u32,
    ) -> (Result<Structured, GatewayError>, u32) {
        let backend = Arc::new(Scripted {
            replies,
            calls: AtomicU32::new(0),
        });
        let gw = Gateway::new(backend.clone(), Arc::new(HeuristicCounter::default()))
            .with_retry(RetryPolicy::no_delay(1));
        let req =
            CompletionRequest::new(vec![Message::user("q")], &DecodingParams::default(), None);
        let out = gw.complete_structured("t", &req, &schema(), max_attempts);
        (out, backend.calls.load(Ordering::SeqCst))
    }

    fn schema() -> Schema {
        Schema::new(vec![
            Field::new("summary", FieldKind::String),
            Field::new(
                "risk",
                FieldKind::Object(vec![
                    Field::new("level", FieldKind::Enum(vec!["Low".into(), "High".into()])),
                    Field::new("score", FieldKind::Integer),
                ]),
            ),
        ])
    }

    #[test]
    fn valid_first_reply() {
        let (out, calls) = run(
            vec![r#"{"summary":"s","risk":{"level":"low","score":3}}"#],
            3,
        );
        let out = out.unwrap();
        assert_eq!(out.attempts, 1);
        assert_eq!(calls, 1);
        assert_eq!(out.value["risk"]["score"], json!(3));
    }

    #[test]
    fn fenced_reply_is_unwrapped() {
        let (out, _) = run(
            vec!["```json\n{\"summary\":\"s\",\"risk\":{\"level\":\"High\",\"score\":8.0}}\n```"],
            3,
        );
        assert_eq!(out.unwrap().attempts, 1);
        assert_eq!(strip_code_fences("```\n{}\n```"), "{}");
        assert_eq!(strip_code_fences("  {} "), "{}");
    }

    #[test]
    fn second_attempt_after_bad_reply() {
        let (out, calls) = run(
            vec![
                "Sure! Here it is",
                r#"{"summary":"s","risk":{"level":"Low","score":1}}"#,
            ],
            3,
        );
        let out = out.unwrap();
        assert_eq!(out.attempts, 2);
        assert_eq!(calls, 2);
        assert_eq!(out.raw_attempts.len(), 2);
        assert_eq!(out.prompt_tokens, 20);
    }

    #[test]
    fn gives_up_after_max_attempts() {
        let (out, calls) = run(
            vec![r#"{"summary":"s","risk":{"level":"Medium","score":1}}"#],
            3,
        );
        match out {
            Err(GatewayError::UnparseableAgentOutput {
                attempts,
                last_error,
            }) => {
                assert_eq!(attempts.len(), 3);
                assert!(last_error.contains("risk.level"), "{last_error}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls, 3);
    }

    #[test]
    fn schema_kinds() {
        let s = Schema::new(vec![Field::new(
            "xs",
            FieldKind::List(Box::new(FieldKind::String)),
        )]);
        assert!(s.validate(&json!({"xs": ["a"]})).is_ok());
        assert!(s.validate(&json!({"xs": ["a", 1]})).is_err());
        assert!(s.validate(&json!([])).is_err());
        let s = Schema::new(vec![Field::new("n", FieldKind::Integer)]);
        assert!(s.validate(&json!({"n": 2.5})).is_err());
        assert!(s.validate(&json!({"n": "2"})).is_err());
    }
}
