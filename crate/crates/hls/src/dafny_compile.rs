//! Compilation of verified Dafny to Python, either by running
//! `dafny build --target:py` or by reading previously captured output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use p2s_core::process::{find_tool, run_with_timeout};
use p2s_core::verifier::DAFNY_BIN_ENV;

use crate::ir::IrType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompileMode {
    Real,
    Fixture,
}

#[derive(Debug, Error)]
pub enum CompileError {
    #[error("dafny not found (set {DAFNY_BIN_ENV} or put dafny on PATH)")]
    ToolNotFound,
    #[error("dafny build failed: {0}")]
    Failed(String),
    #[error("dafny build timed out")]
    Timeout,
    #[error("no compiled fixture for `{0}`")]
    NoFixture(String),
    #[error("fixture mode needs a fixture directory")]
    NoFixtureDir,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DafnyCompiler {
    pub mode: CompileMode,
    pub fixture_dir: Option<PathBuf>,
    pub timeout_s: u64,
}

/// Name of the module file the Python backend writes.
pub const MODULE_FILE: &str = "module_.py";

impl DafnyCompiler {
    pub fn fixture(dir: impl Into<PathBuf>) -> Self {
        DafnyCompiler {
            mode: CompileMode::Fixture,
            fixture_dir: Some(dir.into()),
            timeout_s: 600,
        }
    }

    pub fn real(timeout_s: u64) -> Self {
        DafnyCompiler {
            mode: CompileMode::Real,
            fixture_dir: None,
            timeout_s,
        }
    }

    /// Python source for a verified program. Fixture mode looks up
    /// `<key>.py` for each key in order (typically task id, then method).
    pub fn compile(&self, keys: &[&str], dafny_source: &str) -> Result<String, CompileError> {
        match self.mode {
            CompileMode::Fixture => {
                let dir = self.fixture_dir.as_ref().ok_or(CompileError::NoFixtureDir)?;
                for k in keys {
                    let p = dir.join(format!("{k}.py"));
                    if p.is_file() {
                        return Ok(std::fs::read_to_string(p)?);
                    }
                }
                Err(CompileError::NoFixture(keys.join(" / ")))
            }
            CompileMode::Real => self.compile_real(dafny_source),
        }
    }

    fn compile_real(&self, dafny_source: &str) -> Result<String, CompileError> {
        let bin = find_tool(Some(DAFNY_BIN_ENV), &["dafny"]).ok_or(CompileError::ToolNotFound)?;
        let dir = tempfile::tempdir()?;
        let file = dir.path().join("verified.dfy");
        std::fs::write(&file, dafny_source)?;
        let args = vec!["build".to_string(), "--target:py".to_string(), "verified.dfy".to_string()];
        let out = run_with_timeout(&bin, &args, Some(dir.path()), Duration::from_secs(self.timeout_s)).map_err(|e| {
            match e.kind() {
                std::io::ErrorKind::NotFound => CompileError::ToolNotFound,
                _ => CompileError::Io(e),
            }
        })?;
        if out.timed_out {
            return Err(CompileError::Timeout);
        }
        if !out.success() {
            let text = out.combined();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("no output");
            return Err(CompileError::Failed(first.to_string()));
        }
        Ok(std::fs::read_to_string(find_module(dir.path())?)?)
    }
}

fn find_module(dir: &Path) -> Result<PathBuf, CompileError> {
    for cand in [dir.join("verified-py").join(MODULE_FILE), dir.join(MODULE_FILE)] {
        if cand.is_file() {
            return Ok(cand);
        }
    }
    Err(CompileError::Failed(format!("{MODULE_FILE} not produced")))
}

fn signature_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?:method|function|lemma|predicate)\s+(?:\{[^}]*\}\s*)*([A-Za-z_][A-Za-z0-9_']*)\s*(?:<[^>]*>)?\s*\(([^)]*)\)")
            .expect("valid regex")
    })
}

/// Method name and parameter type hints from a Dafny signature such as
/// `method Cube(n: int) returns (c: int)`. Only scalar types are hinted;
/// other parameters are left for lowering to judge.
pub fn signature_hints(signature: &str) -> Option<(String, BTreeMap<String, IrType>)> {
    let caps = signature_re().captures(signature)?;
    let name = caps[1].to_string();
    let mut hints = BTreeMap::new();
    for param in caps[2].split(',') {
        let Some((pname, ty)) = param.split_once(':') else {
            continue;
        };
        let pname = pname.trim().trim_start_matches("ghost ").trim();
        let ty = match ty.trim() {
            "int" | "nat" | "bool" | "int32" => IrType::INT32,
            "real" => IrType::FLOAT32,
            _ => continue,
        };
        hints.insert(pname.to_string(), ty);
    }
    Some((name, hints))
}
