//! Benchmark tasks, prompt templates and the on-disk corpus format.
//!
//! A corpus is a directory of `*.task.json` files, one task per file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Prompt;

pub const TASK_FILE_SUFFIX: &str = ".task.json";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("malformed task in {file}: {reason}")]
    MalformedTask { file: String, reason: String },
    #[error("duplicate task id `{0}`")]
    DuplicateId(String),
    #[error("template `{template_id}` has unresolved placeholder `{placeholder}`")]
    UnresolvedPlaceholder {
        template_id: String,
        placeholder: String,
    },
    #[error("corpus i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One benchmark task: natural-language description plus its formal contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub title: String,
    pub description_oneline: String,
    pub description_detailed: String,
    pub signature: String,
    pub requires: Vec<String>,
    pub ensures: Vec<String>,
    #[serde(default)]
    pub reference_source: Option<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("`id` is empty".into());
        }
        if self.signature.trim().is_empty() {
            return Err("`signature` is empty".into());
        }
        if self.ensures.is_empty() {
            return Err("`ensures` must contain at least one clause".into());
        }
        Ok(())
    }
}

/// Loads every `*.task.json` file in `dir`, sorted by task id.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<TaskSpec>, TaskError> {
    let dir = dir.as_ref();
    let io_err = |source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(TASK_FILE_SUFFIX))
        })
        .collect();
    files.sort();

    let mut tasks = Vec::with_capacity(files.len());
    let mut seen = BTreeSet::new();
    for path in files {
        let file = path.display().to_string();
        let text = fs::read_to_string(&path).map_err(|source| TaskError::Io {
            path: path.clone(),
            source,
        })?;
        let task: TaskSpec =
            serde_json::from_str(&text).map_err(|e| TaskError::MalformedTask {
                file: file.clone(),
                reason: e.to_string(),
            })?;
        task.validate()
            .map_err(|reason| TaskError::MalformedTask { file, reason })?;
        if !seen.insert(task.id.clone()) {
            return Err(TaskError::DuplicateId(task.id));
        }
        tasks.push(task);
    }
    tasks.sort_by(|a, b| a.id.cmp(&b.id));
    log::info!("loaded {} tasks from {}", tasks.len(), dir.display());
    Ok(tasks)
}

/// Writes each task as `<id>.task.json` under `dir`.
pub fn save_corpus(dir: impl AsRef<Path>, tasks: &[TaskSpec]) -> Result<(), TaskError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| TaskError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for task in tasks {
        let path = dir.join(format!("{}{TASK_FILE_SUFFIX}", task.id));
        let body = serde_json::to_string_pretty(task).expect("task serializes");
        fs::write(&path, body + "\n").map_err(|source| TaskError::Io { path, source })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    OnelineAndDetailed,
    OnelineOnly,
}

const PLACEHOLDERS: [&str; 5] = [
    "description_oneline",
    "description_detailed",
    "signature",
    "requires",
    "ensures",
];

/// Prompt template with `{placeholder}` slots filled from a [`TaskSpec`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub mode: PromptMode,
    pub body: String,
}

fn placeholder_re() -> Regex {
    Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex")
}

impl PromptTemplate {
    /// Builds a template, rejecting any placeholder outside the known set.
    pub fn new(
        template_id: impl Into<String>,
        mode: PromptMode,
        body: impl Into<String>,
    ) -> Result<Self, TaskError> {
        let template = Self {
            template_id: template_id.into(),
            mode,
            body: body.into(),
        };
        template.check()?;
        Ok(template)
    }

    pub fn check(&self) -> Result<(), TaskError> {
        for cap in placeholder_re().captures_iter(&self.body) {
            let name = &cap[1];
            if !PLACEHOLDERS.contains(&name) {
                return Err(TaskError::UnresolvedPlaceholder {
                    template_id: self.template_id.clone(),
                    placeholder: name.to_string(),
                });
            }
        }
        Ok(())
    }

    pub fn oneline_and_detailed() -> Self {
        Self {
            template_id: "oneline-detailed-v1".into(),
            mode: PromptMode::OnelineAndDetailed,
            body: DETAILED_BODY.into(),
        }
    }

    pub fn oneline_only() -> Self {
        Self {
            template_id: "oneline-v1".into(),
            mode: PromptMode::OnelineOnly,
            body: ONELINE_BODY.into(),
        }
    }

    pub fn render(&self, task: &TaskSpec) -> Result<String, TaskError> {
        self.check()?;
        let detailed = match self.mode {
            PromptMode::OnelineAndDetailed => task.description_detailed.as_str(),
            PromptMode::OnelineOnly => "",
        };
        let requires = clause_block("requires", &task.requires);
        let ensures = clause_block("ensures", &task.ensures);
        let out = placeholder_re().replace_all(&self.body, |cap: &regex::Captures| {
            match &cap[1] {
                "description_oneline" => task.description_oneline.clone(),
                "description_detailed" => detailed.to_string(),
                "signature" => task.signature.clone(),
                "requires" => requires.clone(),
                "ensures" => ensures.clone(),
                _ => unreachable!("checked above"),
            }
        });
        Ok(out.into_owned())
    }
}

fn clause_block(keyword: &str, clauses: &[String]) -> String {
    if clauses.is_empty() {
        return "  (none)".to_string();
    }
    clauses
        .iter()
        .map(|c| format!("  {keyword} {c}"))
        .collect::<Vec<_>>()
        .join("\n")
}

const DETAILED_BODY: &str = "\
You are writing a Dafny program that must pass the Dafny verifier.

Task: {description_oneline}

Details:
{description_detailed}

Implement exactly this signature:
{signature}

Preconditions:
{requires}

Postconditions:
{ensures}

Return only the complete Dafny program in a single ```dafny code block. Include every
loop invariant and decreases clause needed for verification.
";

const ONELINE_BODY: &str = "\
You are writing a Dafny program that must pass the Dafny verifier.

Task: {description_oneline}

Implement exactly this signature:
{signature}

Preconditions:
{requires}

Postconditions:
{ensures}

Return only the complete Dafny program in a single ```dafny code block.
";

/// Builds p_0 for a task.
pub fn initial_prompt(task: &TaskSpec, template: &PromptTemplate) -> Result<Prompt, TaskError> {
    let text = template.render(task)?;
    let mut prompt = Prompt::new(text);
    prompt.meta.insert("task_id".into(), task.id.clone());
    prompt.meta.insert("template_id".into(), template.template_id.clone());
    Ok(prompt)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cube() -> TaskSpec {
        TaskSpec {
            id: "t_cube".into(),
            title: "Cube".into(),
            description_oneline: "Compute the cube of an integer.".into(),
            description_detailed: "Given n, return c such that c equals n multiplied by itself three times.".into(),
            signature: "method Cube(n: int) returns (c: int)".into(),
            requires: vec![],
            ensures: vec!["c == n * n * n".into()],
            reference_source: None,
        }
    }

    #[test]
    fn detailed_prompt_contains_both_descriptions_and_ensures() {
        let task = cube();
        let p = initial_prompt(&task, &PromptTemplate::oneline_and_detailed()).unwrap();
        assert!(p.text.contains(&task.description_oneline));
        assert!(p.text.contains(&task.description_detailed));
        assert!(p.text.contains("ensures c == n * n * n"));
        assert!(!p.text.contains('{') || !placeholder_re().is_match(&p.text));
    }

    #[test]
    fn prompt_is_deterministic() {
        let task = cube();
        let t = PromptTemplate::oneline_and_detailed();
        assert_eq!(
            initial_prompt(&task, &t).unwrap().text.as_bytes(),
            initial_prompt(&task, &t).unwrap().text.as_bytes()
        );
    }

    #[test]
    fn oneline_mode_omits_detailed_description() {
        let task = cube();
        let p = initial_prompt(&task, &PromptTemplate::oneline_only()).unwrap();
        assert!(p.text.contains(&task.description_oneline));
        assert!(!p.text.contains(&task.description_detailed));
    }

    #[test]
    fn oneline_mode_blanks_detailed_placeholder_if_present() {
        let t = PromptTemplate::new("x", PromptMode::OnelineOnly, "{description_oneline}|{description_detailed}").unwrap();
        assert_eq!(t.render(&cube()).unwrap(), "Compute the cube of an integer.|");
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let err = PromptTemplate::new("bad", PromptMode::OnelineOnly, "{description_oneline} {nope}")
            .unwrap_err();
        assert!(matches!(err, TaskError::UnresolvedPlaceholder { placeholder, .. } if placeholder == "nope"));
    }

    #[test]
    fn task_without_ensures_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = cube();
        save_corpus(dir.path(), &[t.clone()]).unwrap();
        t.id = "t_bad".into();
        t.ensures.clear();
        let body = serde_json::to_string(&t).unwrap();
        fs::write(dir.path().join("t_bad.task.json"), body).unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        match err {
            TaskError::MalformedTask { file, .. } => assert!(file.ends_with("t_bad.task.json")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_ensures_field_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("x.task.json"),
            r#"{"id":"x","title":"x","description_oneline":"","description_detailed":"","signature":"method X()","requires":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_corpus(dir.path()),
            Err(TaskError::MalformedTask { .. })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = cube();
        save_corpus(dir.path(), &[t.clone()]).unwrap();
        fs::write(
            dir.path().join("copy.task.json"),
            serde_json::to_string(&t).unwrap(),
        )
        .unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(TaskError::DuplicateId(id)) if id == "t_cube"));
    }

    #[test]
    fn loads_sorted_and_ignores_other_files() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |id: &str| TaskSpec { id: id.into(), ..cube() };
        save_corpus(dir.path(), &[mk("c"), mk("a"), mk("b")]).unwrap();
        fs::write(dir.path().join("README.md"), "not a task").unwrap();
        let ids: Vec<_> = load_corpus(dir.path()).unwrap().into_iter().map(|t| t.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }
}
