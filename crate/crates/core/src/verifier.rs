//! Dafny verifier wrapper, diagnostic parsing, and a marker-driven simulated
//! verifier used for offline training and tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::process::{find_tool, run_with_timeout};

pub const DAFNY_BIN_ENV: &str = "P2S_DAFNY_BIN";

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("dafny executable not found (set {DAFNY_BIN_ENV} or add `dafny` to PATH)")]
    ToolNotFound,
    #[error("verifier i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid simulation rules: {0}")]
    Rules(String),
}

/// Candidate program text extracted from a completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSource {
    pub text: String,
    pub is_empty: bool,
}

impl CandidateSource {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let is_empty = text.trim().is_empty();
        Self { text, is_empty }
    }

    pub fn empty() -> Self {
        Self::new("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Postcondition,
    Precondition,
    Invariant,
    Termination,
    Assertion,
    ParseOrType,
    Timeout,
    Other,
}

impl Category {
    /// Fixed order used by the state encoder's histogram.
    pub const ALL: [Category; 8] = [
        Category::Postcondition,
        Category::Precondition,
        Category::Invariant,
        Category::Termination,
        Category::Assertion,
        Category::ParseOrType,
        Category::Timeout,
        Category::Other,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("listed")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Postcondition => "POSTCONDITION",
            Category::Precondition => "PRECONDITION",
            Category::Invariant => "INVARIANT",
            Category::Termination => "TERMINATION",
            Category::Assertion => "ASSERTION",
            Category::ParseOrType => "PARSE_OR_TYPE",
            Category::Timeout => "TIMEOUT",
            Category::Other => "OTHER",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub category: Category,
    pub line: Option<u32>,
    pub column: Option<u32>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerifyStatus {
    Verified,
    Failed,
    ToolError,
    Timeout,
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierReport {
    pub error_count: u32,
    pub diagnostics: Vec<Diagnostic>,
    pub status: VerifyStatus,
    pub wall_time_ms: u64,
}

impl VerifierReport {
    pub fn empty_input() -> Self {
        Self {
            error_count: 1,
            diagnostics: Vec::new(),
            status: VerifyStatus::EmptyInput,
            wall_time_ms: 0,
        }
    }

    pub fn is_verified(&self) -> bool {
        self.status == VerifyStatus::Verified
    }
}

pub trait Verifier: Send + Sync {
    fn verify(&self, source: &CandidateSource) -> Result<VerifierReport, VerifierError>;
}

// ---------------------------------------------------------------------------
// Output parsing

struct Patterns {
    located: Regex,
    bare: Regex,
    summary: Regex,
    frontend: Regex,
    timed_out: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        located: Regex::new(r"^(.*?)\((\d+),(\d+)\): Error(?: [A-Z]+[0-9]+)?: (.*)$").unwrap(),
        bare: Regex::new(r"^Error(?: [A-Z]+[0-9]+)?: (.*)$").unwrap(),
        summary: Regex::new(
            r"Dafny program verifier finished with (\d+) verified, (\d+) errors?(?:, (\d+) time outs?)?",
        )
        .unwrap(),
        frontend: Regex::new(r"(\d+) (?:parse|resolution/type) errors? detected in").unwrap(),
        timed_out: Regex::new(r"(?i)^verification of '.*' timed out").unwrap(),
    })
}

fn categorize(message: &str, frontend_failure: bool) -> Category {
    let m = message.to_ascii_lowercase();
    if m.contains("postcondition") {
        Category::Postcondition
    } else if m.contains("precondition") {
        Category::Precondition
    } else if m.contains("invariant") {
        Category::Invariant
    } else if m.contains("decreases") || m.contains("termination") {
        Category::Termination
    } else if m.contains("assertion") {
        Category::Assertion
    } else if m.contains("timed out") || m.contains("time out") || m.contains("timeout") {
        Category::Timeout
    } else if frontend_failure
        || [
            "parse",
            "resolution",
            "unresolved identifier",
            "type mismatch",
            "invalid",
            "expected",
            "undeclared",
            "does not exist",
        ]
        .iter()
        .any(|k| m.contains(k))
    {
        Category::ParseOrType
    } else {
        Category::Other
    }
}

/// Parsed view of one verifier run's text output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedOutput {
    pub error_count: u32,
    pub diagnostics: Vec<Diagnostic>,
    /// False when nothing in the output was recognized.
    pub recognized: bool,
}

fn raw_tail(s: &str, n: usize) -> String {
    let start = s.char_indices().rev().nth(n).map_or(0, |(i, _)| i);
    s[start..].trim().to_string()
}

pub fn parse_output(tool_output: &str) -> ParsedOutput {
    let p = patterns();
    let frontend_count: Option<u32> = p
        .frontend
        .captures_iter(tool_output)
        .filter_map(|c| c[1].parse::<u32>().ok())
        .reduce(|a, b| a.saturating_add(b));
    let frontend_failure = frontend_count.is_some();

    let mut diagnostics = Vec::new();
    for line in tool_output.lines() {
        let line = line.trim_end();
        if let Some(c) = p.located.captures(line) {
            let msg = c[4].trim().to_string();
            diagnostics.push(Diagnostic {
                category: categorize(&msg, frontend_failure),
                line: c[2].parse().ok().filter(|&v: &u32| v > 0),
                column: c[3].parse().ok().filter(|&v: &u32| v > 0),
                message: msg,
            });
        } else if let Some(c) = p.bare.captures(line.trim_start()) {
            let msg = c[1].trim().to_string();
            diagnostics.push(Diagnostic {
                category: categorize(&msg, frontend_failure),
                line: None,
                column: None,
                message: msg,
            });
        } else if p.timed_out.is_match(line.trim_start()) {
            diagnostics.push(Diagnostic {
                category: Category::Timeout,
                line: None,
                column: None,
                message: line.trim().to_string(),
            });
        }
    }

    let summary = p.summary.captures(tool_output).map(|c| {
        let errors: u32 = c[2].parse().unwrap_or(u32::MAX);
        let timeouts: u32 = c.get(3).and_then(|m| m.as_str().parse().ok()).unwrap_or(0);
        errors.saturating_add(timeouts)
    });

    if summary.is_none() && frontend_count.is_none() && diagnostics.is_empty() {
        return ParsedOutput {
            error_count: 1,
            diagnostics: vec![Diagnostic {
                category: Category::Other,
                line: None,
                column: None,
                message: raw_tail(tool_output, 500),
            }],
            recognized: false,
        };
    }
    let error_count = summary
        .or(frontend_count)
        .unwrap_or(diagnostics.len() as u32);
    ParsedOutput {
        error_count,
        diagnostics,
        recognized: true,
    }
}

/// `(error_count, diagnostics)` from verifier text output. Total: output
/// with nothing recognizable yields one OTHER diagnostic carrying the tail.
pub fn parse_diagnostics(tool_output: &str) -> (u32, Vec<Diagnostic>) {
    let parsed = parse_output(tool_output);
    (parsed.error_count, parsed.diagnostics)
}

// ---------------------------------------------------------------------------
// Real verifier

#[derive(Debug, Clone)]
pub struct DafnyVerifier {
    binary: PathBuf,
    timeout_s: u64,
    /// Extra wall-clock allowance on top of the per-VC time limit.
    grace: Duration,
}

impl DafnyVerifier {
    /// Finds `dafny` via `P2S_DAFNY_BIN` or `PATH`.
    pub fn discover(timeout_s: u64) -> Result<Self, VerifierError> {
        let binary = find_tool(Some(DAFNY_BIN_ENV), &["dafny"]).ok_or(VerifierError::ToolNotFound)?;
        Ok(Self::with_binary(binary, timeout_s))
    }

    pub fn with_binary(binary: impl Into<PathBuf>, timeout_s: u64) -> Self {
        Self {
            binary: binary.into(),
            timeout_s: timeout_s.max(1),
            grace: Duration::from_secs(30),
        }
    }

    pub fn args(&self, file: &Path) -> Vec<String> {
        vec![
            "verify".into(),
            file.display().to_string(),
            format!("--verification-time-limit:{}", self.timeout_s),
        ]
    }
}

fn report_from_output(output: &str, wall_time_ms: u64) -> VerifierReport {
    let parsed = parse_output(output);
    let status = if !parsed.recognized {
        VerifyStatus::ToolError
    } else if parsed.error_count == 0 {
        VerifyStatus::Verified
    } else {
        VerifyStatus::Failed
    };
    VerifierReport {
        error_count: parsed.error_count,
        diagnostics: parsed.diagnostics,
        status,
        wall_time_ms,
    }
}

impl Verifier for DafnyVerifier {
    fn verify(&self, source: &CandidateSource) -> Result<VerifierReport, VerifierError> {
        if source.is_empty {
            return Ok(VerifierReport::empty_input());
        }
        if !self.binary.is_file() {
            return Err(VerifierError::ToolNotFound);
        }
        let dir = tempfile::tempdir()?;
        let file = dir.path().join("candidate.dfy");
        std::fs::write(&file, &source.text)?;
        let start = Instant::now();
        let deadline = Duration::from_secs(self.timeout_s) + self.grace;
        let out = run_with_timeout(&self.binary, &self.args(&file), Some(dir.path()), deadline)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => VerifierError::ToolNotFound,
                _ => VerifierError::Io(e),
            })?;
        let wall_time_ms = start.elapsed().as_millis() as u64;
        if out.timed_out {
            return Ok(VerifierReport {
                error_count: 1,
                diagnostics: vec![Diagnostic {
                    category: Category::Timeout,
                    line: None,
                    column: None,
                    message: format!("verifier exceeded {} s wall-clock limit", deadline.as_secs()),
                }],
                status: VerifyStatus::Timeout,
                wall_time_ms,
            });
        }
        Ok(report_from_output(&out.combined(), wall_time_ms))
    }
}

// ---------------------------------------------------------------------------
// Simulated verifier

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimRule {
    pub marker: String,
    pub error_count: u32,
    pub category: Category,
}

/// Marker rules for [`SimulatedVerifier`]. Serialized as a JSON list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimRuleSet {
    pub rules: Vec<SimRule>,
}

impl SimRuleSet {
    /// `//BUG:1` .. `//BUG:10` (INVARIANT), `//POSTFAIL:1` .. `//POSTFAIL:10`
    /// (POSTCONDITION), `//SYNTAX` (PARSE_OR_TYPE) and `//TIMEOUT`.
    pub fn standard() -> Self {
        let mut rules = Vec::new();
        for k in 1..=10 {
            rules.push(SimRule {
                marker: format!("//BUG:{k}"),
                error_count: k,
                category: Category::Invariant,
            });
            rules.push(SimRule {
                marker: format!("//POSTFAIL:{k}"),
                error_count: k,
                category: Category::Postcondition,
            });
        }
        rules.push(SimRule {
            marker: "//SYNTAX".into(),
            error_count: 1,
            category: Category::ParseOrType,
        });
        rules.push(SimRule {
            marker: "//TIMEOUT".into(),
            error_count: 1,
            category: Category::Timeout,
        });
        Self { rules }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VerifierError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let set: Self = serde_json::from_str(&text).map_err(|e| VerifierError::Rules(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), VerifierError> {
        for r in &self.rules {
            if r.marker.is_empty() {
                return Err(VerifierError::Rules("empty marker".into()));
            }
            if r.error_count == 0 {
                return Err(VerifierError::Rules(format!("rule `{}` has zero errors", r.marker)));
            }
        }
        Ok(())
    }
}

/// First occurrence of `marker` not followed by an ASCII digit, so that
/// `//BUG:1` does not fire on `//BUG:12`.
fn find_marker(text: &str, marker: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(rel) = text[from..].find(marker) {
        let at = from + rel;
        let end = at + marker.len();
        if !text[end..].starts_with(|c: char| c.is_ascii_digit()) {
            return Some(at);
        }
        from = end;
    }
    None
}

/// Pure marker-driven verifier.
pub fn simulate_verify(source: &CandidateSource, rules: &SimRuleSet) -> VerifierReport {
    if source.is_empty {
        return VerifierReport::empty_input();
    }
    let mut error_count = 0u32;
    let mut diagnostics = Vec::new();
    let mut timed_out = false;
    for rule in &rules.rules {
        let Some(at) = find_marker(&source.text, &rule.marker) else {
            continue;
        };
        let line = source.text[..at].matches('\n').count() as u32 + 1;
        error_count = error_count.saturating_add(rule.error_count);
        timed_out |= rule.category == Category::Timeout;
        for i in 1..=rule.error_count {
            diagnostics.push(Diagnostic {
                category: rule.category,
                line: Some(line),
                column: Some(1),
                message: format!(
                    "simulated {} failure {i} of {}",
                    rule.category.as_str().to_ascii_lowercase(),
                    rule.error_count
                ),
            });
        }
    }
    let status = if error_count == 0 {
        VerifyStatus::Verified
    } else if timed_out {
        VerifyStatus::Timeout
    } else {
        VerifyStatus::Failed
    };
    VerifierReport {
        error_count,
        diagnostics,
        status,
        wall_time_ms: 0,
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedVerifier {
    pub rules: SimRuleSet,
}

impl SimulatedVerifier {
    pub fn new(rules: SimRuleSet) -> Self {
        Self { rules }
    }
}

impl Default for SimulatedVerifier {
    fn default() -> Self {
        Self::new(SimRuleSet::standard())
    }
}

impl Verifier for SimulatedVerifier {
    fn verify(&self, source: &CandidateSource) -> Result<VerifierReport, VerifierError> {
        Ok(simulate_verify(source, &self.rules))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifierMode {
    Real,
    Simulated,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn garbage_is_one_other() {
        let (n, d) = parse_diagnostics("\u{1}\u{2}garbage \u{fffd} bytes");
        assert_eq!(n, 1);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].category, Category::Other);
        assert!(d[0].message.contains("garbage"));
    }

    #[test]
    fn clean_summary() {
        let (n, d) = parse_diagnostics("\nDafny program verifier finished with 3 verified, 0 errors\n");
        assert_eq!((n, d), (0, vec![]));
    }

    #[test]
    fn summary_beats_line_count() {
        let out = "a.dfy(1,1): Error: assertion might not hold\n\
                   Dafny program verifier finished with 1 verified, 4 errors\n";
        assert_eq!(parse_diagnostics(out).0, 4);
    }

    #[test]
    fn line_count_without_summary() {
        let out = "a.dfy(1,1): Error: assertion might not hold\nb.dfy(2,3): Error: decreases expression might not decrease\n";
        let (n, d) = parse_diagnostics(out);
        assert_eq!(n, 2);
        assert_eq!(d[1].category, Category::Termination);
        assert_eq!((d[1].line, d[1].column), (Some(2), Some(3)));
    }

    #[test]
    fn legacy_error_codes_parse() {
        let out = "f.dfy(4,2): Error BP5003: A postcondition might not hold on this return path.\n";
        let (_, d) = parse_diagnostics(out);
        assert_eq!(d[0].category, Category::Postcondition);
    }

    #[test]
    fn timeouts_count_as_errors() {
        let out = "Verification of 'M' timed out after 10 seconds\n\
                   Dafny program verifier finished with 2 verified, 0 errors, 1 time out\n";
        let (n, d) = parse_diagnostics(out);
        assert_eq!(n, 1);
        assert_eq!(d[0].category, Category::Timeout);
    }

    #[test]
    fn keyword_table() {
        for (msg, cat) in [
            ("a postcondition could not be proved on this return path", Category::Postcondition),
            ("a precondition for this call could not be proved", Category::Precondition),
            ("this loop invariant could not be proved on entry", Category::Invariant),
            ("cannot prove termination; try supplying a decreases clause", Category::Termination),
            ("assertion might not hold", Category::Assertion),
            ("unresolved identifier: x", Category::ParseOrType),
            ("something odd", Category::Other),
        ] {
            assert_eq!(categorize(msg, false), cat, "{msg}");
        }
        assert_eq!(categorize("something odd", true), Category::ParseOrType);
    }

    #[test]
    fn simulated_markers() {
        let rules = SimRuleSet::standard();
        let r = simulate_verify(&CandidateSource::new("method M() {}\n//BUG:3"), &rules);
        assert_eq!(r.error_count, 3);
        assert_eq!(r.status, VerifyStatus::Failed);
        assert_eq!(r.diagnostics.len(), 3);
        assert!(r.diagnostics.iter().all(|d| d.category == Category::Invariant && d.line == Some(2)));

        let r = simulate_verify(&CandidateSource::new("method M() {}"), &rules);
        assert_eq!((r.error_count, r.status), (0, VerifyStatus::Verified));

        let r = simulate_verify(&CandidateSource::empty(), &rules);
        assert_eq!(r.status, VerifyStatus::EmptyInput);

        let r = simulate_verify(&CandidateSource::new("x //BUG:10"), &rules);
        assert_eq!(r.error_count, 10);

        let r = simulate_verify(&CandidateSource::new("x //TIMEOUT"), &rules);
        assert_eq!(r.status, VerifyStatus::Timeout);
    }

    #[test]
    fn rules_json_shape() {
        let set: SimRuleSet =
            serde_json::from_str(r#"[{"marker":"XX","error_count":2,"category":"ASSERTION"}]"#).unwrap();
        let r = simulate_verify(&CandidateSource::new("XX"), &set);
        assert_eq!(r.error_count, 2);
        assert_eq!(r.diagnostics[0].category, Category::Assertion);
    }

    #[test]
    fn empty_input_never_launches_tool() {
        let v = DafnyVerifier::with_binary("/nonexistent/dafny", 5);
        let r = v.verify(&CandidateSource::new(" \n ")).unwrap();
        assert_eq!(r.status, VerifyStatus::EmptyInput);
        assert_eq!(r.error_count, 1);
        assert!(matches!(
            v.verify(&CandidateSource::new("method M() {}")),
            Err(VerifierError::ToolNotFound)
        ));
    }

    #[test]
    fn invocation_flags() {
        let v = DafnyVerifier::with_binary("dafny", 60);
        assert_eq!(
            v.args(Path::new("/tmp/x.dfy")),
            ["verify", "/tmp/x.dfy", "--verification-time-limit:60"]
        );
    }

    #[cfg(unix)]
    #[test]
    fn stub_tool_report_is_parsed() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let stub = dir.path().join("dafny");
        std::fs::write(
            &stub,
            "#!/bin/sh\necho \"$2(3,7): Error: a postcondition could not be proved on this return path\"\n\
             echo\necho 'Dafny program verifier finished with 0 verified, 1 error'\nexit 4\n",
        )
        .unwrap();
        std::fs::set_permissions(&stub, std::fs::Permissions::from_mode(0o755)).unwrap();
        let r = DafnyVerifier::with_binary(&stub, 5)
            .verify(&CandidateSource::new("method M() {}"))
            .unwrap();
        assert_eq!(r.status, VerifyStatus::Failed);
        assert_eq!(r.error_count, 1);
        assert_eq!(r.diagnostics[0].line, Some(3));
    }

    proptest! {
        #[test]
        fn parsing_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let text = String::from_utf8_lossy(&bytes);
            let (n, _) = parse_diagnostics(&text);
            prop_assert!(n > 0 || text.contains("finished with") || text.contains("detected in"));
        }

        #[test]
        fn simulate_is_pure_and_consistent(src in "[a-z /:0-9BUG\n]{0,60}") {
            let rules = SimRuleSet::standard();
            let s = CandidateSource::new(src);
            let a = simulate_verify(&s, &rules);
            prop_assert_eq!(&a, &simulate_verify(&s, &rules));
            prop_assert_eq!(a.status == VerifyStatus::Verified, a.error_count == 0 && !s.is_empty);
        }
    }
}
