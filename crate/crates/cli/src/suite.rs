//! End-to-end suite runs: episode, compile, transpile and synthesize for
//! every task, with the stage each task reached.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use p2s_core::episode::{episode_rng, run_baseline, run_episode, Env, EpisodeMode, EpisodeRecord, LoopConfig};
use p2s_core::gateway::Generator;
use p2s_core::ppo::Checkpoint;
use p2s_core::task::{load_corpus, TaskSpec};
use p2s_core::verifier::Verifier;
use p2s_hls::dafny_compile::{signature_hints, DafnyCompiler};
use p2s_hls::synth::{synthesize, MockTable, SynthConfig, SynthStatus, SynthesisReport};
use p2s_hls::{transpile, DirectivePolicy, LowerOptions, TestVectors, TranspileOptions};

use crate::table::{verification_rate_table, RateRow};
use crate::HarnessError;

pub const FUNNEL_FILE: &str = "funnel.json";
pub const TABLE_FILE: &str = "table2.csv";
pub const RUN_FILE: &str = "run.json";
pub const EPISODES_DIR: &str = "episodes";
pub const KERNELS_DIR: &str = "kernels";
pub const REPORTS_DIR: &str = "reports";

/// Furthest pipeline stage a task reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stage {
    NotVerified,
    Verified,
    CompiledToHls,
    Synthesized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFunnel {
    pub task_id: String,
    pub stage_reached: Stage,
    /// Why the task went no further; `None` for synthesized tasks.
    pub failure_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub total_tasks: usize,
    pub verified: usize,
    pub compiled_to_hls: usize,
    pub hls_synthesized: usize,
    pub synth_rate_pct: f64,
    /// Mean tool time over successful synthesis runs.
    pub avg_elapsed_s: f64,
    /// Mean peak memory over successful runs that reported it.
    pub avg_peak_memory_mb: Option<f64>,
    pub per_task: Vec<TaskFunnel>,
}

/// `100 · synthesized / verified`, or 0 when nothing verified.
pub fn synth_rate_pct(hls_synthesized: usize, verified: usize) -> f64 {
    if verified == 0 {
        0.0
    } else {
        100.0 * hls_synthesized as f64 / verified as f64
    }
}

impl FunnelStats {
    /// Aggregates per-task stages; `synth_runs` holds every synthesis report
    /// and only the successful ones enter the averages.
    pub fn from_tasks(per_task: Vec<TaskFunnel>, synth_runs: &[SynthesisReport]) -> Self {
        let ok: Vec<&SynthesisReport> = synth_runs.iter().filter(|r| r.status == SynthStatus::Synthesized).collect();
        let reached = |s: Stage| per_task.iter().filter(|t| t.stage_reached >= s).count();
        let verified = reached(Stage::Verified);
        let hls_synthesized = reached(Stage::Synthesized);
        let avg_elapsed_s = if ok.is_empty() {
            0.0
        } else {
            ok.iter().map(|r| r.elapsed_s).sum::<f64>() / ok.len() as f64
        };
        let mems: Vec<f64> = ok.iter().filter_map(|r| r.peak_memory_mb).collect();
        let avg_peak_memory_mb = (!mems.is_empty()).then(|| mems.iter().sum::<f64>() / mems.len() as f64);
        FunnelStats {
            total_tasks: per_task.len(),
            verified,
            compiled_to_hls: reached(Stage::CompiledToHls),
            hls_synthesized,
            synth_rate_pct: synth_rate_pct(hls_synthesized, verified),
            avg_elapsed_s,
            avg_peak_memory_mb,
            per_task,
        }
    }

    pub fn counts(&self) -> (usize, usize, usize, usize) {
        (self.total_tasks, self.verified, self.compiled_to_hls, self.hls_synthesized)
    }

    /// Checks `synthesized ≤ compiled ≤ verified ≤ total` and that every
    /// task appears once.
    pub fn check_monotone(&self) -> Result<(), String> {
        let (n, v, c, s) = self.counts();
        if !(s <= c && c <= v && v <= n) {
            return Err(format!("funnel not monotone: {n} → {v} → {c} → {s}"));
        }
        if self.per_task.len() != n {
            return Err(format!("{} per-task entries for {n} tasks", self.per_task.len()));
        }
        let mut ids: Vec<&str> = self.per_task.iter().map(|t| t.task_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(format!("task {} appears twice", w[0]));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("funnel stats serialize");
        s.push('\n');
        s
    }
}

/// One published funnel row (model, feedback setting and stage counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedFunnelRow {
    pub model: String,
    pub feedback: String,
    pub verified: usize,
    pub compiled_to_hls: usize,
    pub hls_synthesized: usize,
    /// Rate as printed in the source table.
    pub published_rate_pct: f64,
    pub avg_elapsed_s: f64,
    pub avg_peak_memory_mb: f64,
}

impl PublishedFunnelRow {
    pub fn synth_rate_pct(&self) -> f64 {
        synth_rate_pct(self.hls_synthesized, self.verified)
    }

    pub fn is_monotone(&self) -> bool {
        self.hls_synthesized <= self.compiled_to_hls && self.compiled_to_hls <= self.verified
    }
}

pub fn load_published_rows(path: &Path) -> Result<Vec<PublishedFunnelRow>, HarnessError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<PublishedFunnelRow>, _>>()
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub corpus_path: PathBuf,
    pub mode: EpisodeMode,
    pub policy_checkpoint: Option<PathBuf>,
    /// Loop settings, including the verifier mode.
    pub loop_cfg: LoopConfig,
    pub synth: SynthConfig,
    pub compiler: DafnyCompiler,
    pub vectors_dir: Option<PathBuf>,
    pub directives: DirectivePolicy,
    pub output_dir: PathBuf,
    pub run_id: String,
    /// Model label written to the rate table.
    pub label: String,
    pub seed: u64,
    pub jobs: usize,
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.mode == EpisodeMode::RlPolicy && self.policy_checkpoint.is_none() {
            return Err(HarnessError::Config("RL_POLICY mode requires a policy checkpoint".into()));
        }
        if self.jobs == 0 {
            return Err(HarnessError::Config("jobs must be positive".into()));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id == "." || self.run_id == ".." {
            return Err(HarnessError::Config(format!("invalid run id {:?}", self.run_id)));
        }
        self.loop_cfg.validate().map_err(HarnessError::config)?;
        self.synth.validate().map_err(HarnessError::config)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

/// Collaborators shared by every task of a suite.
pub struct SuiteEnv<'a> {
    pub gateway: &'a dyn Generator,
    pub verifier: &'a dyn Verifier,
    pub mock: Option<&'a MockTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub label: String,
    pub mode: EpisodeMode,
    pub seed: u64,
    pub tasks: usize,
}

#[derive(Debug)]
pub struct SuiteRun {
    pub dir: PathBuf,
    pub stats: FunnelStats,
    pub records: Vec<EpisodeRecord>,
    pub table: Vec<RateRow>,
}

struct TaskResult {
    funnel: TaskFunnel,
    record: Option<EpisodeRecord>,
    synth: Option<SynthesisReport>,
}

/// Runs every task of the corpus through the pipeline and writes the run
/// directory `<output_dir>/<run_id>/`.
pub fn run_suite(cfg: &SuiteConfig, env: &SuiteEnv<'_>) -> Result<SuiteRun, HarnessError> {
    cfg.validate()?;
    let tasks = load_corpus(&cfg.corpus_path).map_err(HarnessError::suite)?;
    log::info!("loaded {} tasks from {}", tasks.len(), cfg.corpus_path.display());
    let policy = match (&cfg.mode, &cfg.policy_checkpoint) {
        (EpisodeMode::RlPolicy, Some(p)) => Some(Checkpoint::load(p).map_err(HarnessError::config)?.params),
        _ => None,
    };
    let dir = cfg.run_dir();
    prepare_run_dir(&dir)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(HarnessError::suite)?;
    let results: Vec<TaskResult> = pool.install(|| {
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| run_task(i as u64, task, cfg, env, policy.as_ref(), &dir))
            .collect()
    });

    let mut per_task = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    let mut synth_runs = Vec::new();
    for r in results {
        per_task.push(r.funnel);
        records.extend(r.record);
        synth_runs.extend(r.synth);
    }
    let stats = FunnelStats::from_tasks(per_task, &synth_runs);
    stats.check_monotone().map_err(HarnessError::Suite)?;

    let labelled: Vec<(String, EpisodeRecord)> = records.iter().map(|r| (cfg.label.clone(), r.clone())).collect();
    let table = verification_rate_table(&labelled, None).map_err(HarnessError::suite)?;

    let io = |e: std::io::Error| HarnessError::Suite(format!("writing {}: {e}", dir.display()));
    std::fs::write(dir.join(FUNNEL_FILE), stats.to_json()).map_err(io)?;
    std::fs::write(dir.join(TABLE_FILE), crate::table::to_csv(&table)).map_err(io)?;
    let info = RunInfo {
        run_id: cfg.run_id.clone(),
        label: cfg.label.clone(),
        mode: cfg.mode,
        seed: cfg.seed,
        tasks: tasks.len(),
    };
    let info_json = serde_json::to_string_pretty(&info).map_err(HarnessError::suite)? + "\n";
    std::fs::write(dir.join(RUN_FILE), info_json).map_err(io)?;
    let mut f = std::fs::File::create(dir.join(EPISODES_DIR).join(format!("{}.jsonl", cfg.run_id))).map_err(io)?;
    for r in &records {
        let line = serde_json::to_string(r).map_err(HarnessError::suite)?;
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(SuiteRun {
        dir,
        stats,
        records,
        table,
    })
}

/// Creates the run directory. A previous run's directory (one holding a
/// funnel file) is cleared; any other non-empty directory is refused.
fn prepare_run_dir(dir: &Path) -> Result<(), HarnessError> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(HarnessError::suite)?.next().is_some();
        if non_empty && !dir.join(FUNNEL_FILE).is_file() {
            return Err(HarnessError::Config(format!(
                "{} exists and is not a previous run directory",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(HarnessError::suite)?;
    }
    for sub in [EPISODES_DIR, KERNELS_DIR, REPORTS_DIR] {
        std::fs::create_dir_all(dir.join(sub)).map_err(HarnessError::suite)?;
    }
    Ok(())
}

fn stop(task: &TaskSpec, stage: Stage, reason: String) -> TaskFunnel {
    TaskFunnel {
        task_id: task.id.clone(),
        stage_reached: stage,
        failure_reason: Some(reason),
    }
}

fn run_task(
    index: u64,
    task: &TaskSpec,
    cfg: &SuiteConfig,
    env: &SuiteEnv<'_>,
    policy: Option<&p2s_core::ppo::PolicyParams>,
    run_dir: &Path,
) -> TaskResult {
    let loop_env = Env {
        gateway: env.gateway,
        verifier: env.verifier,
    };
    let episode = match (cfg.mode, policy) {
        (EpisodeMode::RlPolicy, Some(p)) => {
            let mut rng = episode_rng(cfg.seed, index);
            run_episode(task, p, loop_env, &cfg.loop_cfg, &mut rng).map(|(r, _)| r)
        }
        (EpisodeMode::BaselineWithFeedback, _) => run_baseline(task, loop_env, true, &cfg.loop_cfg),
        _ => run_baseline(task, loop_env, false, &cfg.loop_cfg),
    };
    let record = match episode {
        Ok(r) => r,
        Err(e) => {
            return TaskResult {
                funnel: stop(task, Stage::NotVerified, format!("episode error: {e}")),
                record: None,
                synth: None,
            }
        }
    };
    if !record.verified() {
        let reason = record.failure.clone().unwrap_or_else(|| {
            let last = record.steps.last().map(|s| s.error_count).unwrap_or(0);
            format!(
                "not verified after {} iteration(s); last error count {last}",
                record.iterations_used
            )
        });
        return TaskResult {
            funnel: stop(task, Stage::NotVerified, reason),
            record: Some(record),
            synth: None,
        };
    }
    let (funnel, synth) = hardware_stages(task, &record, cfg, env, run_dir);
    TaskResult {
        funnel,
        record: Some(record),
        synth,
    }
}

/// Compile, transpile and synthesize a verified program.
fn hardware_stages(
    task: &TaskSpec,
    record: &EpisodeRecord,
    cfg: &SuiteConfig,
    env: &SuiteEnv<'_>,
    run_dir: &Path,
) -> (TaskFunnel, Option<SynthesisReport>) {
    let (method, param_types) = signature_hints(&task.signature).unwrap_or_default();
    let mut keys = vec![task.id.as_str()];
    if !method.is_empty() {
        keys.push(method.as_str());
    }
    let python = match cfg.compiler.compile(&keys, &record.final_source.text) {
        Ok(p) => p,
        Err(e) => return (stop(task, Stage::Verified, format!("compile: {e}")), None),
    };
    let opts = TranspileOptions {
        lower: LowerOptions {
            top: (!method.is_empty()).then(|| method.clone()),
            param_types,
        },
        directives: cfg.directives.clone(),
    };
    let kernel_dir = run_dir.join(KERNELS_DIR).join(&task.id);
    let vectors = match load_vectors(cfg.vectors_dir.as_deref(), &python, &opts) {
        Ok(v) => v,
        Err(e) => return (stop(task, Stage::Verified, format!("transpile: {e}")), None),
    };
    let out = match transpile(&python, &opts, vectors.as_ref()) {
        Ok(o) => o,
        Err(e) => return (stop(task, Stage::Verified, format!("transpile: {e}")), None),
    };
    if let Err(e) = out.write_to(&kernel_dir) {
        return (stop(task, Stage::Verified, format!("writing kernel: {e}")), None);
    }
    let work = run_dir.join(REPORTS_DIR).join(&task.id);
    let (report, bundle) = match synthesize(&out.kernel.name, &out.c_source, &out.testbench, &cfg.synth, env.mock, &work) {
        Ok(r) => r,
        Err(e) => return (stop(task, Stage::CompiledToHls, format!("synth: {e}")), None),
    };
    if let Some(b) = &bundle {
        if let Err(e) = b.write_to(&work) {
            log::warn!("{}: could not store report bundle: {e}", task.id);
        }
    }
    if let Ok(json) = serde_json::to_string_pretty(&report) {
        if let Err(e) = std::fs::write(work.join("synthesis.json"), json + "\n") {
            log::warn!("{}: could not store synthesis report: {e}", task.id);
        }
    }
    let funnel = if report.status == SynthStatus::Synthesized {
        TaskFunnel {
            task_id: task.id.clone(),
            stage_reached: Stage::Synthesized,
            failure_reason: None,
        }
    } else {
        let status = serde_json::to_value(report.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        let detail = report.failure_detail.clone().unwrap_or_default();
        stop(task, Stage::CompiledToHls, format!("{status}: {detail}"))
    };
    (funnel, Some(report))
}

/// Vectors for the kernel the program lowers to, when a file exists.
fn load_vectors(dir: Option<&Path>, python: &str, opts: &TranspileOptions) -> Result<Option<TestVectors>, HarnessError> {
    let Some(dir) = dir else {
        return Ok(None);
    };
    // name the kernel first; lowering errors surface from transpile itself
    let Ok(kernel) = p2s_hls::to_kernel(python, &opts.lower) else {
        return Ok(None);
    };
    let path = dir.join(format!("{}.vectors.json", kernel.name));
    if !path.is_file() {
        return Ok(None);
    }
    TestVectors::load(&path).map(Some).map_err(HarnessError::suite)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tf(id: &str, stage: Stage) -> TaskFunnel {
        TaskFunnel {
            task_id: id.into(),
            stage_reached: stage,
            failure_reason: None,
        }
    }

    #[test]
    fn counts_are_cumulative() {
        let per = vec![
            tf("a", Stage::Synthesized),
            tf("b", Stage::CompiledToHls),
            tf("c", Stage::Verified),
            tf("d", Stage::NotVerified),
        ];
        let s = FunnelStats::from_tasks(per, &[]);
        assert_eq!(s.counts(), (4, 3, 2, 1));
        assert!((s.synth_rate_pct - 100.0 / 3.0).abs() < 1e-12);
        s.check_monotone().unwrap();
    }

    #[test]
    fn empty_funnel_has_zero_rate() {
        let s = FunnelStats::from_tasks(vec![tf("a", Stage::NotVerified)], &[]);
        assert_eq!(s.counts(), (1, 0, 0, 0));
        assert_eq!(s.synth_rate_pct, 0.0);
        assert_eq!(s.avg_elapsed_s, 0.0);
        assert_eq!(s.avg_peak_memory_mb, None);
    }

    #[test]
    fn averages_over_successful_runs() {
        let run = |status, t, m| SynthesisReport {
            status,
            ..SynthesisReport::failed(status, "", t, m)
        };
        let runs = [
            run(SynthStatus::Synthesized, 30.0, Some(600.0)),
            run(SynthStatus::Synthesized, 36.0, None),
            run(SynthStatus::SynthFail, 3.0, Some(100.0)),
        ];
        let s = FunnelStats::from_tasks(vec![], &runs);
        assert_eq!(s.avg_elapsed_s, 33.0);
        assert_eq!(s.avg_peak_memory_mb, Some(600.0));
    }

    #[test]
    fn monotone_check_catches_violations() {
        let mut s = FunnelStats::from_tasks(vec![tf("a", Stage::Verified)], &[]);
        s.hls_synthesized = 2;
        assert!(s.check_monotone().is_err());
        let s = FunnelStats::from_tasks(vec![tf("a", Stage::Verified), tf("a", Stage::Verified)], &[]);
        assert!(s.check_monotone().is_err());
    }

    #[test]
    fn published_row_rate() {
        // Gemini-2-Flash with feedback: 55 verified, 38 synthesized
        assert_eq!(crate::format_pct(synth_rate_pct(38, 55)), "69.1");
    }
}
