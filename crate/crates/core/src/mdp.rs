//! Prompt-repair MDP: the edit-action catalog, state features, shaped reward
//! and the prompt composition operator.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::Prompt;
use crate::verifier::{CandidateSource, VerifierReport, VerifyStatus};

pub const NUM_ACTIONS: usize = 12;
pub const STATE_DIM: usize = 24;
pub const HINT_DELIMITER: &str = "\n--- REPAIR HINT ---\n";
/// At most this many diagnostics are quoted by APPEND_VERIFIER_ERRORS.
pub const MAX_QUOTED_DIAGNOSTICS: usize = 5;
const MAX_MESSAGE_CHARS: usize = 160;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("action catalog: {0}")]
    Catalog(String),
    #[error("invalid reward config: {0}")]
    Reward(String),
    #[error("action id {0} out of range")]
    BadActionId(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditAction {
    AppendVerifierErrors,
    RequestLoopInvariants,
    RequestDecreasesClause,
    RestatePostconditions,
    AddWorkedExample,
    SimplifyAndRetry,
    RequestAssertions,
    ForbidRecursionAndWhile,
    EmphasizeContractVerbatim,
    StepByStepReasoning,
    ResetToInitial,
    NoChange,
}

impl EditAction {
    pub const ALL: [EditAction; NUM_ACTIONS] = [
        EditAction::AppendVerifierErrors,
        EditAction::RequestLoopInvariants,
        EditAction::RequestDecreasesClause,
        EditAction::RestatePostconditions,
        EditAction::AddWorkedExample,
        EditAction::SimplifyAndRetry,
        EditAction::RequestAssertions,
        EditAction::ForbidRecursionAndWhile,
        EditAction::EmphasizeContractVerbatim,
        EditAction::StepByStepReasoning,
        EditAction::ResetToInitial,
        EditAction::NoChange,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self, MdpError> {
        Self::ALL.get(id).copied().ok_or(MdpError::BadActionId(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            EditAction::AppendVerifierErrors => "APPEND_VERIFIER_ERRORS",
            EditAction::RequestLoopInvariants => "REQUEST_LOOP_INVARIANTS",
            EditAction::RequestDecreasesClause => "REQUEST_DECREASES_CLAUSE",
            EditAction::RestatePostconditions => "RESTATE_POSTCONDITIONS",
            EditAction::AddWorkedExample => "ADD_WORKED_EXAMPLE",
            EditAction::SimplifyAndRetry => "SIMPLIFY_AND_RETRY",
            EditAction::RequestAssertions => "REQUEST_ASSERTIONS",
            EditAction::ForbidRecursionAndWhile => "FORBID_RECURSION_AND_WHILE",
            EditAction::EmphasizeContractVerbatim => "EMPHASIZE_CONTRACT_VERBATIM",
            EditAction::StepByStepReasoning => "STEP_BY_STEP_REASONING",
            EditAction::ResetToInitial => "RESET_TO_INITIAL",
            EditAction::NoChange => "NO_CHANGE",
        }
    }
}

impl fmt::Display for EditAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    action: Vec<CatalogEntry>,
}

#[derive(Debug, Deserialize)]
struct CatalogEntry {
    name: EditAction,
    snippet: String,
}

/// Snippet text for every action, indexed by action id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionCatalog {
    snippets: Vec<String>,
}

const DEFAULT_ACTIONS: &str = include_str!("../assets/actions.toml");

impl Default for ActionCatalog {
    fn default() -> Self {
        Self::from_toml(DEFAULT_ACTIONS).expect("bundled catalog is valid")
    }
}

impl ActionCatalog {
    pub fn from_toml(text: &str) -> Result<Self, MdpError> {
        let file: CatalogFile = toml::from_str(text).map_err(|e| MdpError::Catalog(e.to_string()))?;
        if file.action.len() != NUM_ACTIONS {
            return Err(MdpError::Catalog(format!(
                "expected {NUM_ACTIONS} actions, found {}",
                file.action.len()
            )));
        }
        for (i, entry) in file.action.iter().enumerate() {
            if entry.name.id() != i {
                return Err(MdpError::Catalog(format!(
                    "entry {i} is {} but position {i} belongs to {}",
                    entry.name,
                    EditAction::ALL[i]
                )));
            }
            let needs_text = !matches!(entry.name, EditAction::ResetToInitial | EditAction::NoChange);
            if needs_text && entry.snippet.trim().is_empty() {
                return Err(MdpError::Catalog(format!("{} has an empty snippet", entry.name)));
            }
        }
        Ok(Self {
            snippets: file.action.into_iter().map(|e| e.snippet).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MdpError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| MdpError::Catalog(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn snippet(&self, action: EditAction) -> &str {
        &self.snippets[action.id()]
    }

    pub fn max_snippet_len(&self) -> usize {
        self.snippets.iter().map(String::len).max().unwrap_or(0)
    }
}

/// Fixed-length, [0,1]-bounded features of one loop state.
///
/// Layout: `[0]` t/T_max, `[1]` min(e,10)/10, `[2..10]` per-category counts
/// (min(count,5)/5, in [`Category::ALL`] order), `[10]` empty-output flag,
/// `[11]` prompt length/4096 clipped, `[12..24]` one-hot previous action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub Vec<f64>);

impl StateVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn encode_state(
    prompt: &Prompt,
    code: &CandidateSource,
    report: &VerifierReport,
    t: usize,
    t_max: usize,
    prev_action: Option<EditAction>,
) -> StateVector {
    let mut f = vec![0.0; STATE_DIM];
    let t_max = t_max.max(1);
    f[0] = (t.min(t_max) as f64) / t_max as f64;
    f[1] = f64::from(report.error_count.min(10)) / 10.0;
    let mut counts = [0u32; 8];
    for d in &report.diagnostics {
        counts[d.category.index()] += 1;
    }
    for (i, c) in counts.iter().enumerate() {
        f[2 + i] = f64::from((*c).min(5)) / 5.0;
    }
    f[10] = if code.is_empty || report.status == VerifyStatus::EmptyInput {
        1.0
    } else {
        0.0
    };
    f[11] = (prompt.text.len() as f64 / 4096.0).min(1.0);
    if let Some(a) = prev_action {
        f[12 + a.id()] = 1.0;
    }
    StateVector(f)
}

fn default_r_succ() -> f64 {
    10.0
}
fn default_alpha() -> f64 {
    0.2
}
fn default_beta() -> f64 {
    0.5
}
fn default_empty_penalty() -> f64 {
    -5.0
}
fn default_gamma() -> f64 {
    0.99
}

/// `[reward]` section of the global config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    #[serde(default = "default_r_succ")]
    pub r_succ: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_empty_penalty")]
    pub empty_penalty: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_succ: default_r_succ(),
            alpha: default_alpha(),
            beta: default_beta(),
            empty_penalty: default_empty_penalty(),
            gamma: default_gamma(),
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), MdpError> {
        let bad = |m: &str| Err(MdpError::Reward(m.into()));
        if !(self.r_succ > 0.0) {
            return bad("r_succ must be positive");
        }
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        let worst_failed = -(self.alpha * f64::from(REWARD_ERROR_CLIP) + self.beta);
        if !(self.empty_penalty < worst_failed) {
            return bad("empty_penalty must be below every FAILED reward");
        }
        Ok(())
    }
}

/// Error counts above this are treated as this many by the reward, which keeps
/// every FAILED reward above the empty-output penalty.
pub const REWARD_ERROR_CLIP: u32 = 10;

/// Shaped reward for the verification outcome that follows an action.
pub fn reward(report_next: &VerifierReport, code_next: &CandidateSource, cfg: &RewardConfig) -> f64 {
    if report_next.status == VerifyStatus::EmptyInput || code_next.is_empty {
        return cfg.empty_penalty;
    }
    if report_next.status == VerifyStatus::Verified {
        return cfg.r_succ;
    }
    -(cfg.alpha * f64::from(report_next.error_count.min(REWARD_ERROR_CLIP)) + cfg.beta)
}

fn shorten(s: &str) -> String {
    let one_line = s.split_whitespace().collect::<Vec<_>>().join(" ");
    match one_line.char_indices().nth(MAX_MESSAGE_CHARS) {
        Some((i, _)) => format!("{}...", &one_line[..i]),
        None => one_line,
    }
}

fn diagnostics_block(report: &VerifierReport) -> String {
    let mut lines = Vec::new();
    if report.status == VerifyStatus::EmptyInput {
        lines.push("- the previous answer contained no program text".to_string());
    } else if report.diagnostics.is_empty() {
        lines.push(format!(
            "- {} verification error(s) were reported without details",
            report.error_count
        ));
    }
    for d in report.diagnostics.iter().take(MAX_QUOTED_DIAGNOSTICS) {
        let line = d.line.map_or_else(|| "?".to_string(), |l| l.to_string());
        lines.push(format!("- [{}] line {line}: {}", d.category, shorten(&d.message)));
    }
    if report.diagnostics.len() > MAX_QUOTED_DIAGNOSTICS {
        lines.push(format!(
            "- ... and {} more",
            report.diagnostics.len() - MAX_QUOTED_DIAGNOSTICS
        ));
    }
    lines.join("\n")
}

/// Text of the hint block an action would append, or `None` for actions that
/// do not append.
pub fn hint_block(catalog: &ActionCatalog, action: EditAction, report: &VerifierReport) -> Option<String> {
    match action {
        EditAction::ResetToInitial | EditAction::NoChange => None,
        EditAction::AppendVerifierErrors => Some(format!(
            "{HINT_DELIMITER}{}\n{}",
            catalog.snippet(action),
            diagnostics_block(report)
        )),
        _ => Some(format!("{HINT_DELIMITER}{}", catalog.snippet(action))),
    }
}

/// `p ⊕ Δp`: appends the action's hint block unless the identical block is
/// already present. RESET_TO_INITIAL returns `initial`; NO_CHANGE returns `p`.
pub fn compose_prompt(
    p: &Prompt,
    action: EditAction,
    report: &VerifierReport,
    initial: &Prompt,
    catalog: &ActionCatalog,
) -> Prompt {
    match action {
        EditAction::ResetToInitial => initial.clone(),
        _ => match hint_block(catalog, action, report) {
            Some(block) if !p.text.contains(&block) => {
                let mut next = p.clone();
                next.text.push_str(&block);
                next
            }
            _ => p.clone(),
        },
    }
}
