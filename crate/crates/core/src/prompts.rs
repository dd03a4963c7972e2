//! Prompt templates with named `{slot}` placeholders.
//!
//! The built-in set (version `v1`) is compiled in from `templates/v1/`; an
//! alternative set can be loaded from a directory with the same file names.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {template:?}: slot {{{slot}}} has no value")]
    TemplateUnderfilled { template: String, slot: String },
    #[error("template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub text: String,
}

fn slot_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\{([a-z0-9_]+)\}").expect("valid slot regex"))
}

impl Template {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        Template {
            name: name.into(),
            text: text.into(),
        }
    }

    pub fn slots(&self) -> Vec<String> {
        slot_pattern()
            .captures_iter(&self.text)
            .map(|c| c[1].to_string())
            .collect()
    }

    /// Single-pass substitution: inserted values are never rescanned for
    /// slots.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(
            self.text.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>(),
        );
        let mut last = 0;
        for caps in slot_pattern().captures_iter(&self.text) {
            let whole = caps.get(0).expect("group 0");
            let slot = &caps[1];
            let value = values
                .iter()
                .find(|(name, _)| *name == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| TemplateError::TemplateUnderfilled {
                    template: self.name.clone(),
                    slot: slot.to_string(),
                })?;
            out.push_str(&self.text[last..whole.start()]);
            out.push_str(value);
            last = whole.end();
        }
        out.push_str(&self.text[last..]);
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    pub initial_worker_system: Template,
    pub initial_worker_user: Template,
    pub subsequent_worker_system: Template,
    pub subsequent_worker_user: Template,
    pub manager_system: Template,
    pub manager_user: Template,
    pub manager_user_no_memory: Template,
    pub single_shot_system: Template,
    pub single_shot_user: Template,
    /// Retrieval query for the RAG baseline.
    pub rag_query: String,
}

const FILES: [&str; 10] = [
    "initial_worker_system",
    "initial_worker_user",
    "subsequent_worker_system",
    "subsequent_worker_user",
    "manager_system",
    "manager_user",
    "manager_user_no_memory",
    "single_shot_system",
    "single_shot_user",
    "rag_query",
];

fn strip_final_newline(text: &str) -> &str {
    text.strip_suffix('\n').unwrap_or(text)
}

impl TemplateSet {
    fn from_map(version: &str, mut map: BTreeMap<&'static str, String>) -> Self {
        let mut take =
            |name: &'static str| Template::new(name, map.remove(name).unwrap_or_default());
        let set = TemplateSet {
            version: version.to_string(),
            initial_worker_system: take("initial_worker_system"),
            initial_worker_user: take("initial_worker_user"),
            subsequent_worker_system: take("subsequent_worker_system"),
            subsequent_worker_user: take("subsequent_worker_user"),
            manager_system: take("manager_system"),
            manager_user: take("manager_user"),
            manager_user_no_memory: take("manager_user_no_memory"),
            single_shot_system: take("single_shot_system"),
            single_shot_user: take("single_shot_user"),
            rag_query: String::new(),
        };
        TemplateSet {
            rag_query: map.remove("rag_query").unwrap_or_default(),
            ..set
        }
    }

    /// The compiled-in `v1` templates.
    pub fn builtin() -> Self {
        let sources: [(&'static str, &'static str); 10] = [
            (
                "initial_worker_system",
                include_str!("../templates/v1/initial_worker_system.txt"),
            ),
            (
                "initial_worker_user",
                include_str!("../templates/v1/initial_worker_user.txt"),
            ),
            (
                "subsequent_worker_system",
                include_str!("../templates/v1/subsequent_worker_system.txt"),
            ),
            (
                "subsequent_worker_user",
                include_str!("../templates/v1/subsequent_worker_user.txt"),
            ),
            (
                "manager_system",
                include_str!("../templates/v1/manager_system.txt"),
            ),
            (
                "manager_user",
                include_str!("../templates/v1/manager_user.txt"),
            ),
            (
                "manager_user_no_memory",
                include_str!("../templates/v1/manager_user_no_memory.txt"),
            ),
            (
                "single_shot_system",
                include_str!("../templates/v1/single_shot_system.txt"),
            ),
            (
                "single_shot_user",
                include_str!("../templates/v1/single_shot_user.txt"),
            ),
            ("rag_query", include_str!("../templates/v1/rag_query.txt")),
        ];
        let map = sources
            .into_iter()
            .map(|(name, text)| (name, strip_final_newline(text).to_string()))
            .collect();
        Self::from_map("v1", map)
    }

    /// Loads `<name>.txt` for every template from `dir`; the directory name
    /// becomes the version string.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut map = BTreeMap::new();
        for name in FILES {
            let path = dir.join(format!("{name}.txt"));
            let text = std::fs::read_to_string(&path).map_err(|source| TemplateError::Io {
                path: path.display().to_string(),
                source,
            })?;
            map.insert(name, strip_final_newline(&text).to_string());
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self::from_map(&version, map))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
