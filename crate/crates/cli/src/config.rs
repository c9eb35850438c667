//! Global TOML configuration with `[backend] [reward] [ppo] [loop] [synth]`
//! sections plus the `[suite]` and `[train]` run settings.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use p2s_core::episode::{EpisodeMode, LoopConfig};
use p2s_core::gateway::{build_gateway, BackendConfig, Generator};
use p2s_core::mdp::{ActionCatalog, RewardConfig};
use p2s_core::ppo::PpoConfig;
use p2s_core::task::{PromptMode, PromptTemplate};
use p2s_core::verifier::{DafnyVerifier, SimRuleSet, SimulatedVerifier, Verifier, VerifierMode};
use p2s_hls::dafny_compile::{CompileMode, DafnyCompiler};
use p2s_hls::synth::{MockTable, SynthConfig, ToolMode};
use p2s_hls::DirectivePolicy;

use crate::suite::SuiteConfig;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub t_max: usize,
    pub prompt_mode: PromptMode,
    pub verifier_mode: VerifierMode,
    pub verifier_timeout_s: u64,
    /// Marker rules for the simulated verifier; the built-in set when absent.
    pub sim_rules: Option<PathBuf>,
    /// Edit-action snippet catalog; the built-in catalog when absent.
    pub catalog: Option<PathBuf>,
}

impl Default for LoopSection {
    fn default() -> Self {
        LoopSection {
            t_max: 7,
            prompt_mode: PromptMode::OnelineAndDetailed,
            verifier_mode: VerifierMode::Simulated,
            verifier_timeout_s: 300,
            sim_rules: None,
            catalog: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSection {
    pub corpus: PathBuf,
    #[serde(default = "default_mode")]
    pub mode: EpisodeMode,
    #[serde(default)]
    pub policy_checkpoint: Option<PathBuf>,
    #[serde(default = "default_runs_dir")]
    pub output_dir: PathBuf,
    /// Run directory name; derived from mode and seed when absent.
    #[serde(default)]
    pub run_id: Option<String>,
    /// Model label used in rate tables; the backend's model name when absent.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_compile_mode")]
    pub compile_mode: CompileMode,
    /// Captured compiler output (`<task id>.py` or `<Method>.py`).
    #[serde(default)]
    pub compiled_dir: Option<PathBuf>,
    #[serde(default = "default_compile_timeout")]
    pub compile_timeout_s: u64,
    /// Test vectors (`<kernel>.vectors.json`) embedded in testbenches.
    #[serde(default)]
    pub vectors_dir: Option<PathBuf>,
    #[serde(default)]
    pub directives: DirectivePolicy,
}

fn default_mode() -> EpisodeMode {
    EpisodeMode::BaselineWithFeedback
}
fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_jobs() -> usize {
    1
}
fn default_compile_mode() -> CompileMode {
    CompileMode::Fixture
}
fn default_compile_timeout() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: PathBuf,
    /// Held-out tasks for the post-training evaluation.
    #[serde(default)]
    pub eval_corpus: Option<PathBuf>,
    #[serde(default = "default_episodes")]
    pub episodes: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: u64,
    #[serde(default = "default_eval_seed")]
    pub eval_seed: u64,
    #[serde(default = "default_train_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

fn default_episodes() -> u64 {
    5000
}
fn default_eval_episodes() -> u64 {
    100
}
fn default_eval_seed() -> u64 {
    9001
}
fn default_train_dir() -> PathBuf {
    PathBuf::from("train_out")
}
fn default_checkpoint_every() -> u64 {
    100
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default, rename = "loop")]
    pub loop_section: LoopSection,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub suite: Option<SuiteSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

impl HarnessConfig {
    /// Parses a config; relative paths are taken against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, HarnessError> {
        let mut cfg: HarnessConfig = toml::from_str(text).map_err(HarnessError::config)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths are taken against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve_opt(base, &mut self.backend.script);
        resolve_opt(base, &mut self.backend.replay_dir);
        resolve_opt(base, &mut self.loop_section.sim_rules);
        resolve_opt(base, &mut self.loop_section.catalog);
        resolve_opt(base, &mut self.synth.mock_table);
        if let Some(s) = &mut self.suite {
            resolve(base, &mut s.corpus);
            resolve(base, &mut s.output_dir);
            resolve_opt(base, &mut s.policy_checkpoint);
            resolve_opt(base, &mut s.compiled_dir);
            resolve_opt(base, &mut s.vectors_dir);
        }
        if let Some(t) = &mut self.train {
            resolve(base, &mut t.corpus);
            resolve(base, &mut t.output_dir);
            resolve_opt(base, &mut t.eval_corpus);
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.backend.validate().map_err(HarnessError::config)?;
        self.reward.validate().map_err(HarnessError::config)?;
        self.ppo.validate().map_err(HarnessError::config)?;
        self.synth.validate().map_err(HarnessError::config)?;
        if self.loop_section.t_max == 0 {
            return Err(HarnessError::Config("loop.t_max must be at least 1".into()));
        }
        if let Some(s) = &self.suite {
            if s.jobs == 0 {
                return Err(HarnessError::Config("suite.jobs must be positive".into()));
            }
            if s.mode == EpisodeMode::RlPolicy && s.policy_checkpoint.is_none() {
                return Err(HarnessError::Config("RL_POLICY mode requires suite.policy_checkpoint".into()));
            }
        }
        Ok(())
    }

    pub fn loop_config(&self) -> Result<LoopConfig, HarnessError> {
        let template = match self.loop_section.prompt_mode {
            PromptMode::OnelineAndDetailed => PromptTemplate::oneline_and_detailed(),
            PromptMode::OnelineOnly => PromptTemplate::oneline_only(),
        };
        let catalog = match &self.loop_section.catalog {
            Some(p) => ActionCatalog::load(p).map_err(HarnessError::config)?,
            None => ActionCatalog::default(),
        };
        let cfg = LoopConfig {
            t_max: self.loop_section.t_max,
            template,
            verifier_mode: self.loop_section.verifier_mode,
            collect_for_training: false,
            reward: self.reward.clone(),
            catalog,
        };
        cfg.validate().map_err(HarnessError::config)?;
        Ok(cfg)
    }

    pub fn gateway(&self) -> Result<Box<dyn Generator>, HarnessError> {
        build_gateway(&self.backend).map_err(HarnessError::config)
    }

    pub fn verifier(&self) -> Result<Box<dyn Verifier>, HarnessError> {
        match self.loop_section.verifier_mode {
            VerifierMode::Simulated => {
                let rules = match &self.loop_section.sim_rules {
                    Some(p) => SimRuleSet::load(p).map_err(HarnessError::config)?,
                    None => SimRuleSet::standard(),
                };
                Ok(Box::new(SimulatedVerifier::new(rules)))
            }
            VerifierMode::Real => Ok(Box::new(
                DafnyVerifier::discover(self.loop_section.verifier_timeout_s).map_err(HarnessError::config)?,
            )),
        }
    }

    pub fn mock_table(&self) -> Result<Option<MockTable>, HarnessError> {
        match (self.synth.tool_mode, &self.synth.mock_table) {
            (ToolMode::Mock, Some(p)) => MockTable::load(p).map(Some).map_err(HarnessError::config),
            (ToolMode::Mock, None) => Err(HarnessError::Config("synth.tool_mode = \"mock\" needs synth.mock_table".into())),
            (ToolMode::Real, _) => Ok(None),
        }
    }

    /// Label for rate tables: the backend's model name, else its kind.
    pub fn model_label(&self) -> String {
        self.backend
            .model_name
            .clone()
            .unwrap_or_else(|| format!("{:?}", self.backend.kind).to_lowercase())
    }

    pub fn suite_config(&self) -> Result<SuiteConfig, HarnessError> {
        let s = self
            .suite
            .as_ref()
            .ok_or_else(|| HarnessError::Config("missing [suite] section".into()))?;
        let compiler = match s.compile_mode {
            CompileMode::Fixture => {
                let dir = s
                    .compiled_dir
                    .clone()
                    .ok_or_else(|| HarnessError::Config("compile_mode = \"fixture\" needs suite.compiled_dir".into()))?;
                DafnyCompiler {
                    timeout_s: s.compile_timeout_s,
                    ..DafnyCompiler::fixture(dir)
                }
            }
            CompileMode::Real => DafnyCompiler::real(s.compile_timeout_s),
        };
        let run_id = s.run_id.clone().unwrap_or_else(|| default_run_id(s.mode, s.seed));
        let cfg = SuiteConfig {
            corpus_path: s.corpus.clone(),
            mode: s.mode,
            policy_checkpoint: s.policy_checkpoint.clone(),
            loop_cfg: self.loop_config()?,
            synth: self.synth.clone(),
            compiler,
            vectors_dir: s.vectors_dir.clone(),
            directives: s.directives.clone(),
            output_dir: s.output_dir.clone(),
            run_id,
            label: s.label.clone().unwrap_or_else(|| self.model_label()),
            seed: s.seed,
            jobs: s.jobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `<mode>-seed<seed>`, e.g. `baseline_with_feedback-seed0`.
pub fn default_run_id(mode: EpisodeMode, seed: u64) -> String {
    let mode = serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_lowercase))
        .unwrap_or_default();
    format!("{mode}-seed{seed}")
}
