//! Prompt rendering for the four chain prompts.
//!
//! Templates are plain UTF-8 text assets with `{name}` placeholders. The
//! default set is compiled in from `assets/templates/`, and
//! [`PromptTemplates::load_dir`] reads an on-disk copy at startup. Rendering
//! is a single pass over pre-parsed segments, so user text that happens to
//! contain `{query}` is never re-substituted.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::Document;

/// Rendered in place of the history block when no steps exist yet.
pub const EMPTY_HISTORY: &str = "(none)";

/// Rendered in place of the documents block when retrieval came back empty.
pub const NO_DOCUMENTS: &str = "(no documents retrieved)";

const SUBQUERY_ASSET: &str = include_str!("../assets/templates/subquery.txt");
const SUBANSWER_ASSET: &str = include_str!("../assets/templates/subanswer.txt");
const FINAL_ASSET: &str = include_str!("../assets/templates/final.txt");
const STOP_ASSET: &str = include_str!("../assets/templates/stop.txt");
const TASKS_ASSET: &str = include_str!("../assets/task_descriptions.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no documents to ground answer")]
    NoDocuments,
    #[error("template {template}: unknown placeholder {{{name}}}")]
    UnknownPlaceholder { template: String, name: String },
    #[error("template {template}: unterminated placeholder")]
    Unterminated { template: String },
    #[error("template {template}: missing placeholder {{{name}}}")]
    MissingPlaceholder { template: String, name: String },
    #[error("task description for {0:?} is empty")]
    EmptyDescription(String),
    #[error("unknown dataset id {0:?}")]
    UnknownDataset(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed task table: {0}")]
    TaskTable(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescription {
    pub dataset_id: String,
    pub description: String,
}

impl TaskDescription {
    pub fn new(
        dataset_id: impl Into<String>,
        description: impl Into<String>,
    ) -> Result<Self, PromptError> {
        let dataset_id = dataset_id.into();
        let description = description.into();
        if description.trim().is_empty() {
            return Err(PromptError::EmptyDescription(dataset_id));
        }
        Ok(Self {
            dataset_id,
            description,
        })
    }
}

/// Dataset id → task description lookup, loaded from a JSON object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTable {
    entries: BTreeMap<String, String>,
}

impl TaskTable {
    pub fn builtin() -> Self {
        Self::from_json(TASKS_ASSET).expect("bundled task table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let entries: BTreeMap<String, String> = serde_json::from_str(text)?;
        for (id, desc) in &entries {
            if desc.trim().is_empty() {
                return Err(PromptError::EmptyDescription(id.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Dataset ids are matched case-insensitively.
    pub fn resolve(&self, dataset_id: &str) -> Result<TaskDescription, PromptError> {
        let key = dataset_id.to_lowercase();
        self.entries
            .get(&key)
            .or_else(|| self.entries.get(dataset_id))
            .map(|d| TaskDescription {
                dataset_id: dataset_id.to_string(),
                description: d.clone(),
            })
            .ok_or_else(|| PromptError::UnknownDataset(dataset_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One (sub-query, sub-answer) pair of the history block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryStep<'a> {
    pub sub_query: &'a str,
    pub sub_answer: &'a str,
}

pub fn render_history(steps: &[HistoryStep<'_>]) -> String {
    if steps.is_empty() {
        return EMPTY_HISTORY.to_string();
    }
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let n = i + 1;
        let _ = write!(
            out,
            "Intermediate query {n}: {}\nIntermediate answer {n}: {}",
            step.sub_query, step.sub_answer
        );
    }
    out
}

pub fn render_documents(docs: &[&Document]) -> String {
    if docs.is_empty() {
        return NO_DOCUMENTS.to_string();
    }
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("Doc {}: {}\n{}", i + 1, d.title, d.text))
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Query,
    History,
    TaskDescription,
    Documents,
    SubQuery,
}

impl Slot {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "query" => Slot::Query,
            "history" => Slot::History,
            "task_description" => Slot::TaskDescription,
            "documents" => Slot::Documents,
            "sub_query" => Slot::SubQuery,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Slot::Query => "query",
            Slot::History => "history",
            Slot::TaskDescription => "task_description",
            Slot::Documents => "documents",
            Slot::SubQuery => "sub_query",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Slot(Slot),
}

/// A parsed template: literal text interleaved with named slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    segments: Vec<Segment>,
}

impl Template {
    fn parse(name: &str, source: &str, required: &[Slot]) -> Result<Self, PromptError> {
        let source = source.strip_suffix('\n').unwrap_or(source);
        let source = source.strip_suffix('\r').unwrap_or(source);
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            if open > 0 {
                segments.push(Segment::Text(rest[..open].to_string()));
            }
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| PromptError::Unterminated {
                template: name.to_string(),
            })?;
            let key = &after[..close];
            let slot = Slot::parse(key).ok_or_else(|| PromptError::UnknownPlaceholder {
                template: name.to_string(),
                name: key.to_string(),
            })?;
            segments.push(Segment::Slot(slot));
            rest = &after[close + 1..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Text(rest.to_string()));
        }
        for slot in required {
            if !segments.contains(&Segment::Slot(*slot)) {
                return Err(PromptError::MissingPlaceholder {
                    template: name.to_string(),
                    name: slot.name().to_string(),
                });
            }
        }
        Ok(Self {
            name: name.to_string(),
            segments,
        })
    }

    fn render(&self, fill: impl Fn(Slot) -> String) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.push_str(t),
                Segment::Slot(s) => out.push_str(&fill(*s)),
            }
        }
        out
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// The four chain prompts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    subquery: Template,
    subanswer: Template,
    final_answer: Template,
    stop: Template,
}

static BUILTIN: OnceLock<PromptTemplates> = OnceLock::new();

impl PromptTemplates {
    /// Templates compiled in from the bundled assets.
    pub fn builtin() -> &'static PromptTemplates {
        BUILTIN.get_or_init(|| {
            Self::from_sources(SUBQUERY_ASSET, SUBANSWER_ASSET, FINAL_ASSET, STOP_ASSET)
                .expect("bundled templates are valid")
        })
    }

    pub fn from_sources(
        subquery: &str,
        subanswer: &str,
        final_answer: &str,
        stop: &str,
    ) -> Result<Self, PromptError> {
        use Slot::*;
        Ok(Self {
            subquery: Template::parse("subquery", subquery, &[History, TaskDescription, Query])?,
            subanswer: Template::parse("subanswer", subanswer, &[Documents, SubQuery])?,
            final_answer: Template::parse(
                "final",
                final_answer,
                &[Documents, History, TaskDescription, Query],
            )?,
            stop: Template::parse("stop", stop, &[History, Query])?,
        })
    }

    /// Reads `subquery.txt`, `subanswer.txt`, `final.txt` and `stop.txt` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let read = |file: &str| {
            let path = dir.join(file);
            std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::from_sources(
            &read("subquery.txt")?,
            &read("subanswer.txt")?,
            &read("final.txt")?,
            &read("stop.txt")?,
        )
    }

    pub fn render_subquery_prompt(
        &self,
        query: &str,
        history: &[HistoryStep<'_>],
        task: &TaskDescription,
    ) -> String {
        let history = render_history(history);
        self.subquery.render(|slot| match slot {
            Slot::Query => query.to_string(),
            Slot::History => history.clone(),
            Slot::TaskDescription => task.description.clone(),
            _ => unreachable!("validated at parse time"),
        })
    }

    /// Fails on an empty document list; see [`Self::render_subanswer_prompt_lenient`].
    pub fn render_subanswer_prompt(
        &self,
        sub_query: &str,
        docs: &[&Document],
    ) -> Result<String, PromptError> {
        if docs.is_empty() {
            return Err(PromptError::NoDocuments);
        }
        Ok(self.render_subanswer_prompt_lenient(sub_query, docs))
    }

    /// Like [`Self::render_subanswer_prompt`] but renders [`NO_DOCUMENTS`]
    /// for an empty list. This is the variant the chain engine uses.
    pub fn render_subanswer_prompt_lenient(&self, sub_query: &str, docs: &[&Document]) -> String {
        let documents = render_documents(docs);
        self.subanswer.render(|slot| match slot {
            Slot::Documents => documents.clone(),
            Slot::SubQuery => sub_query.to_string(),
            _ => unreachable!("validated at parse time"),
        })
    }

    pub fn render_final_prompt(
        &self,
        query: &str,
        history: &[HistoryStep<'_>],
        docs: &[&Document],
        task: &TaskDescription,
    ) -> String {
        let history = render_history(history);
        let documents = render_documents(docs);
        self.final_answer.render(|slot| match slot {
            Slot::Query => query.to_string(),
            Slot::History => history.clone(),
            Slot::TaskDescription => task.description.clone(),
            Slot::Documents => documents.clone(),
            Slot::SubQuery => unreachable!("validated at parse time"),
        })
    }

    pub fn render_stop_prompt(&self, query: &str, history: &[HistoryStep<'_>]) -> String {
        let history = render_history(history);
        self.stop.render(|slot| match slot {
            Slot::Query => query.to_string(),
            Slot::History => history.clone(),
            _ => unreachable!("validated at parse time"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskDescription {
        TaskDescription::new("hotpotqa", "answer multi-hop questions").unwrap()
    }

    fn doc(id: &str, title: &str, text: &str) -> Document {
        Document::new(id, title, text)
    }

    #[test]
    fn empty_history_uses_sentinel() {
        let p = PromptTemplates::builtin().render_subquery_prompt("Q", &[], &task());
        assert!(p.contains("## Previous intermediate queries and answers\n(none)\n"));
        assert!(p.contains("## Main query to answer\nQ\n"));
    }

    #[test]
    fn history_is_numbered_from_one() {
        let steps = [
            HistoryStep {
                sub_query: "a?",
                sub_answer: "x",
            },
            HistoryStep {
                sub_query: "b?",
                sub_answer: "y",
            },
        ];
        assert_eq!(
            render_history(&steps),
            "Intermediate query 1: a?\nIntermediate answer 1: x\nIntermediate query 2: b?\nIntermediate answer 2: y"
        );
    }

    #[test]
    fn subanswer_rejects_empty_docs() {
        let err = PromptTemplates::builtin()
            .render_subanswer_prompt("q", &[])
            .unwrap_err();
        assert_eq!(err.to_string(), "no documents to ground answer");
        let lenient = PromptTemplates::builtin().render_subanswer_prompt_lenient("q", &[]);
        assert!(lenient.contains(NO_DOCUMENTS));
    }

    #[test]
    fn doc_order_matters() {
        let a = doc("a", "A", "alpha");
        let b = doc("b", "B", "beta");
        let t = PromptTemplates::builtin();
        let ab = t.render_subanswer_prompt("q", &[&a, &b]).unwrap();
        let ba = t.render_subanswer_prompt("q", &[&b, &a]).unwrap();
        assert_ne!(ab, ba);
        assert!(ab.contains("Doc 1: A\nalpha\n\nDoc 2: B\nbeta"));
    }

    #[test]
    fn placeholder_text_in_input_is_not_resubstituted() {
        let p = PromptTemplates::builtin().render_stop_prompt("what is {history}?", &[]);
        assert!(p.contains("what is {history}?"));
        assert!(p.contains("(none)"));
    }

    #[test]
    fn bad_templates_are_rejected() {
        let ok = "{history} {task_description} {query}";
        assert!(matches!(
            PromptTemplates::from_sources(
                "{bogus}",
                "{documents}{sub_query}",
                ok,
                "{history}{query}"
            ),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplates::from_sources(
                ok,
                "{documents}",
                "{documents}{history}{task_description}{query}",
                "{history}{query}"
            ),
            Err(PromptError::MissingPlaceholder { .. })
        ));
        assert!(matches!(
            PromptTemplates::from_sources("{history", "", "", ""),
            Err(PromptError::Unterminated { .. })
        ));
    }

    #[test]
    fn task_table_resolves_every_bundled_dataset() {
        let table = TaskTable::builtin();
        assert_eq!(
            table.resolve("HotpotQA").unwrap().description,
            "answer multi-hop questions"
        );
        assert!(matches!(
            table.resolve("nope"),
            Err(PromptError::UnknownDataset(_))
        ));
        assert!(TaskDescription::new("x", "  ").is_err());
        assert!(TaskTable::from_json(r#"{"x": ""}"#).is_err());
    }
}
