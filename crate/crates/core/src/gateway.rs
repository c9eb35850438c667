//! Uniform access to the frozen code model.
//!
//! Three backends implement [`Generator`]: a rule-driven scripted model for
//! tests and training, a content-addressed replay store, and an
//! OpenAI-style chat-completions endpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::verifier::CandidateSource;

pub const API_KEY_ENV: &str = "P2S_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("replay store has no entry for {0}")]
    ReplayMiss(String),
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("replay store i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Text sent to the model, plus bookkeeping metadata that is never sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Prompt {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            meta: BTreeMap::new(),
        }
    }

    /// Hex SHA-256 of the prompt text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub raw_text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Replay,
    Remote,
}

fn default_max_tokens() -> u32 {
    2048
}
fn default_temperature() -> f64 {
    0.2
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}

/// `[backend]` section of the global config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Rules file for the scripted backend.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Replay store directory; REMOTE records into it when set.
    #[serde(default)]
    pub replay_dir: Option<PathBuf>,
}

impl BackendConfig {
    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            script: Some(script.into()),
            ..Self::base(BackendKind::Scripted)
        }
    }

    pub fn base(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model_name: None,
            max_tokens: default_max_tokens(),
            temperature: default_temperature(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            script: None,
            replay_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::Config("max_tokens must be positive".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::Config("temperature must be non-negative".into()));
        }
        if self.timeout_s == 0 {
            return Err(GatewayError::Config("timeout_s must be positive".into()));
        }
        match self.kind {
            BackendKind::Remote if self.endpoint.is_none() || self.model_name.is_none() => Err(
                GatewayError::Config("remote backend requires endpoint and model_name".into()),
            ),
            BackendKind::Scripted if self.script.is_none() => {
                Err(GatewayError::Config("scripted backend requires `script`".into()))
            }
            BackendKind::Replay if self.replay_dir.is_none() => {
                Err(GatewayError::Config("replay backend requires `replay_dir`".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Anything that turns a prompt into a completion.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &Prompt) -> Result<Completion, GatewayError>;
}

// ---------------------------------------------------------------------------
// Scripted backend

/// One rule of a scripted model. Rules are tried in order; first match wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum ScriptRule {
    /// Emit `emit` when the prompt contains every string in `all` and none in `none`.
    Contains {
        #[serde(default)]
        all: Vec<String>,
        #[serde(default)]
        none: Vec<String>,
        emit: String,
    },
    /// Error-count environment: the prompt carries `<initial_marker><k>`, and
    /// every occurrence of `fix_marker` in the prompt removes one error.
    /// Remaining errors are emitted as a `//BUG:<n>` marker in `template`
    /// (`{bugs}` placeholder); zero remaining emits `template` with `{bugs}`
    /// blanked.
    RepairCounter {
        initial_marker: String,
        fix_marker: String,
        template: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRules {
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default: String,
}

impl ScriptRules {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path.as_ref())?;
        serde_json::from_str(&text).map_err(|e| {
            GatewayError::Config(format!("{}: {e}", path.as_ref().display()))
        })
    }

    /// Pure function from prompt text to completion text.
    pub fn respond(&self, prompt: &str) -> String {
        for rule in &self.rules {
            match rule {
                ScriptRule::Contains { all, none, emit } => {
                    if all.iter().all(|s| prompt.contains(s.as_str()))
                        && !none.iter().any(|s| prompt.contains(s.as_str()))
                    {
                        return emit.clone();
                    }
                }
                ScriptRule::RepairCounter {
                    initial_marker,
                    fix_marker,
                    template,
                } => {
                    let Some(initial) = read_counter(prompt, initial_marker) else {
                        continue;
                    };
                    let fixes = prompt.matches(fix_marker.as_str()).count() as u64;
                    let left = initial.saturating_sub(fixes);
                    let bugs = if left == 0 {
                        String::new()
                    } else {
                        format!("//BUG:{left}")
                    };
                    return template.replace("{bugs}", &bugs);
                }
            }
        }
        self.default.clone()
    }
}

fn read_counter(text: &str, marker: &str) -> Option<u64> {
    let start = text.find(marker)? + marker.len();
    let digits: String = text[start..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

pub struct ScriptedBackend {
    rules: ScriptRules,
}

impl ScriptedBackend {
    pub fn new(rules: ScriptRules) -> Self {
        Self { rules }
    }
}

impl Generator for ScriptedBackend {
    fn generate(&self, prompt: &Prompt) -> Result<Completion, GatewayError> {
        if prompt.text.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        Ok(Completion {
            raw_text: self.rules.respond(&prompt.text),
            backend_id: "scripted".into(),
            latency_ms: 0,
            truncated: false,
        })
    }
}

// ---------------------------------------------------------------------------
// Replay backend

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayEntry {
    prompt_sha: String,
    completion: String,
}

/// Content-addressed store of recorded completions: `<dir>/<sha256>.json`.
#[derive(Debug, Clone)]
pub struct ReplayStore {
    dir: PathBuf,
    model_name: String,
}

impl ReplayStore {
    pub fn new(dir: impl Into<PathBuf>, model_name: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            model_name: model_name.into(),
        }
    }

    /// SHA-256 over `prompt text || 0x00 || model name`.
    pub fn key(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update([0u8]);
        h.update(self.model_name.as_bytes());
        hex::encode(h.finalize())
    }

    pub fn lookup(&self, prompt: &str) -> Result<String, GatewayError> {
        let key = self.key(prompt);
        let path = self.dir.join(format!("{key}.json"));
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(GatewayError::ReplayMiss(key))
            }
            Err(e) => return Err(e.into()),
        };
        let entry: ReplayEntry = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Ok(entry.completion)
    }

    pub fn record(&self, prompt: &str, completion: &str) -> Result<(), GatewayError> {
        fs::create_dir_all(&self.dir)?;
        let key = self.key(prompt);
        let entry = ReplayEntry {
            prompt_sha: key.clone(),
            completion: completion.to_string(),
        };
        let body = serde_json::to_string_pretty(&entry).expect("entry serializes");
        fs::write(self.dir.join(format!("{key}.json")), body)?;
        Ok(())
    }
}

impl Generator for ReplayStore {
    fn generate(&self, prompt: &Prompt) -> Result<Completion, GatewayError> {
        if prompt.text.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        Ok(Completion {
            raw_text: self.lookup(&prompt.text)?,
            backend_id: format!("replay:{}", self.model_name),
            latency_ms: 0,
            truncated: false,
        })
    }
}

// ---------------------------------------------------------------------------
// Remote backend

/// Counting semaphore bounding in-flight requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
}

/// Request body for an OpenAI-style chat-completions endpoint.
pub fn chat_request_body(model: &str, prompt: &str, max_tokens: u32, temperature: f64) -> String {
    serde_json::to_string(&ChatRequest {
        model,
        messages: [ChatMessage {
            role: "user",
            content: prompt,
        }],
        max_tokens,
        temperature,
    })
    .expect("request serializes")
}

/// Pulls `choices[0].message.content` and whether generation hit the token limit.
pub fn parse_chat_response(body: &str) -> Option<(String, bool)> {
    let v: serde_json::Value = serde_json::from_str(body).ok()?;
    let choice = v.get("choices")?.get(0)?;
    let content = choice.get("message")?.get("content")?.as_str()?.to_string();
    let truncated = choice.get("finish_reason").and_then(|f| f.as_str()) == Some("length");
    Some((content, truncated))
}

pub struct RemoteBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
    permits: Permits,
    recorder: Option<ReplayStore>,
}

enum Attempt {
    Transient(String),
    TimedOut,
}

impl RemoteBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        let recorder = cfg
            .replay_dir
            .as_ref()
            .map(|d| ReplayStore::new(d, cfg.model_name.clone().unwrap_or_default()));
        Ok(Self {
            permits: Permits::new(cfg.max_in_flight),
            cfg,
            client,
            recorder,
        })
    }

    fn attempt(&self, body: &str) -> Result<(String, bool), Attempt> {
        let endpoint = self.cfg.endpoint.as_deref().expect("validated");
        let mut req = self
            .client
            .post(endpoint)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::TimedOut
            } else {
                Attempt::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(Attempt::Transient(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        parse_chat_response(&text)
            .ok_or_else(|| Attempt::Transient("response lacks choices[0].message.content".into()))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl Generator for RemoteBackend {
    fn generate(&self, prompt: &Prompt) -> Result<Completion, GatewayError> {
        if prompt.text.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let model = self.cfg.model_name.as_deref().expect("validated");
        let body = chat_request_body(model, &prompt.text, self.cfg.max_tokens, self.cfg.temperature);
        let _permit = self.permits.acquire();
        let attempts = self.cfg.max_retries + 1;
        let mut last = Attempt::TimedOut;
        let start = Instant::now();
        for i in 0..attempts {
            if i > 0 {
                let wait = self.cfg.backoff_ms.saturating_mul(1 << (i - 1).min(16));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Ok((raw_text, truncated)) => {
                    if let Some(rec) = &self.recorder {
                        rec.record(&prompt.text, &raw_text)?;
                    }
                    return Ok(Completion {
                        raw_text,
                        backend_id: format!("remote:{model}"),
                        latency_ms: start.elapsed().as_millis() as u64,
                        truncated,
                    });
                }
                Err(a) => {
                    if let Attempt::Transient(msg) = &a {
                        log::warn!("remote attempt {} of {attempts} failed: {msg}", i + 1);
                    }
                    last = a;
                }
            }
        }
        Err(match last {
            Attempt::TimedOut => GatewayError::Timeout { attempts },
            Attempt::Transient(last_error) => GatewayError::BackendUnavailable {
                attempts,
                last_error,
            },
        })
    }
}

/// Builds the backend described by `cfg`.
pub fn build_gateway(cfg: &BackendConfig) -> Result<Box<dyn Generator>, GatewayError> {
    cfg.validate()?;
    Ok(match cfg.kind {
        BackendKind::Scripted => Box::new(ScriptedBackend::new(ScriptRules::load(
            cfg.script.as_ref().expect("validated"),
        )?)),
        BackendKind::Replay => Box::new(ReplayStore::new(
            cfg.replay_dir.clone().expect("validated"),
            cfg.model_name.clone().unwrap_or_default(),
        )),
        BackendKind::Remote => Box::new(RemoteBackend::new(cfg.clone())?),
    })
}

// ---------------------------------------------------------------------------
// Code extraction

const FENCE: &str = "```";

/// Returns the first fenced block's content, or the whole trimmed text when
/// there are no fences. An unterminated fence runs to the end of the text.
pub fn extract_code(completion: &Completion) -> CandidateSource {
    extract_code_text(&completion.raw_text)
}

pub fn extract_code_text(raw: &str) -> CandidateSource {
    let body = match raw.find(FENCE) {
        None => raw,
        Some(open) => {
            let after = &raw[open + FENCE.len()..];
            // skip the info string (e.g. `dafny`) up to the end of the fence line
            let content = match after.find('\n') {
                Some(nl) => &after[nl + 1..],
                None => "",
            };
            match content.find(FENCE) {
                Some(close) => &content[..close],
                None => content,
            }
        }
    };
    CandidateSource::new(body.trim())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn completion(text: &str) -> Completion {
        Completion {
            raw_text: text.into(),
            backend_id: "t".into(),
            latency_ms: 0,
            truncated: false,
        }
    }

    #[test]
    fn strips_fence() {
        let c = extract_code(&completion("Here you go:\n```dafny\nmethod M() {}\n```"));
        assert_eq!(c.text, "method M() {}");
        assert!(!c.is_empty);
    }

    #[test]
    fn whitespace_only_is_empty() {
        let c = extract_code(&completion("   \n\n"));
        assert!(c.is_empty);
    }

    #[test]
    fn first_block_wins() {
        let c = extract_code(&completion(
            "a\n```dafny\nmethod A() {}\n```\nthen\n```\nmethod B() {}\n```\n",
        ));
        assert_eq!(c.text, "method A() {}");
    }

    #[test]
    fn unfenced_text_is_trimmed() {
        let c = extract_code(&completion("\n  method M() {}  \n"));
        assert_eq!(c.text, "method M() {}");
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        let c = extract_code(&completion("```dafny\nmethod M() {}\n"));
        assert_eq!(c.text, "method M() {}");
    }

    proptest! {
        #[test]
        fn never_returns_fences(s in ".{0,80}", t in "(```[a-z]*\n)?[a-z ]{0,20}(```)?[a-z\n`]{0,20}") {
            let joined = format!("{s}{t}");
            let c = extract_code_text(&joined);
            prop_assert!(!c.text.contains(FENCE));
            prop_assert_eq!(c.is_empty, c.text.trim().is_empty());
        }
    }

    fn fix_all_rules() -> ScriptRules {
        ScriptRules {
            rules: vec![ScriptRule::Contains {
                all: vec!["FIX_ALL".into()],
                none: vec![],
                emit: "method Good() {}".into(),
            }],
            default: "method Bad() {}\n//BUG:1".into(),
        }
    }

    #[test]
    fn scripted_follows_rules() {
        let b = ScriptedBackend::new(fix_all_rules());
        assert_eq!(b.generate(&Prompt::new("please FIX_ALL")).unwrap().raw_text, "method Good() {}");
        assert_eq!(b.generate(&Prompt::new("please")).unwrap().raw_text, "method Bad() {}\n//BUG:1");
        assert!(matches!(b.generate(&Prompt::new("")), Err(GatewayError::EmptyPrompt)));
    }

    #[test]
    fn repair_counter_counts_fix_markers() {
        let rules = ScriptRules {
            rules: vec![ScriptRule::RepairCounter {
                initial_marker: "INITIAL_ERRORS=".into(),
                fix_marker: "FIXME-BLOCK".into(),
                template: "method R() {}\n{bugs}".into(),
            }],
            default: String::new(),
        };
        assert_eq!(rules.respond("x INITIAL_ERRORS=2"), "method R() {}\n//BUG:2");
        assert_eq!(rules.respond("x INITIAL_ERRORS=2 FIXME-BLOCK"), "method R() {}\n//BUG:1");
        assert_eq!(rules.respond("INITIAL_ERRORS=2 FIXME-BLOCK FIXME-BLOCK FIXME-BLOCK"), "method R() {}\n");
        assert_eq!(rules.respond("no marker"), "");
    }

    #[test]
    fn replay_roundtrip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::new(dir.path(), "m1");
        let p = Prompt::new("prompt one");
        assert!(matches!(store.generate(&p), Err(GatewayError::ReplayMiss(_))));
        store.record(&p.text, "completion ```bytes```\n").unwrap();
        let c = store.generate(&p).unwrap();
        assert_eq!(c.raw_text, "completion ```bytes```\n");
        let file = dir.path().join(format!("{}.json", store.key(&p.text)));
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap();
        assert_eq!(v["prompt_sha"], store.key(&p.text));
        // model name participates in the key
        assert_ne!(store.key("x"), ReplayStore::new(dir.path(), "m2").key("x"));
    }

    #[test]
    fn request_body_is_bit_exact() {
        assert_eq!(
            chat_request_body("m", "hi \"there\"", 16, 0.2),
            r#"{"model":"m","messages":[{"role":"user","content":"hi \"there\""}],"max_tokens":16,"temperature":0.2}"#
        );
    }

    #[test]
    fn response_parsing() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"abc"},"finish_reason":"length"}]}"#;
        assert_eq!(parse_chat_response(body), Some(("abc".into(), true)));
        assert_eq!(parse_chat_response("{}"), None);
    }

    #[test]
    fn remote_requires_endpoint_and_model() {
        let cfg = BackendConfig::base(BackendKind::Remote);
        assert!(matches!(cfg.validate(), Err(GatewayError::Config(_))));
    }

    #[test]
    fn remote_unreachable_gives_up_after_retries() {
        // bind then drop to get a port that refuses connections
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let cfg = BackendConfig {
            endpoint: Some(format!("http://127.0.0.1:{port}/v1/chat/completions")),
            model_name: Some("m".into()),
            max_retries: 2,
            backoff_ms: 1,
            timeout_s: 5,
            ..BackendConfig::base(BackendKind::Remote)
        };
        let backend = RemoteBackend::new(cfg).unwrap();
        match backend.generate(&Prompt::new("hello")) {
            Err(GatewayError::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
