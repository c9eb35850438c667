//! The generate → verify → encode → edit loop, the two static-prompting
//! baselines, and the PPO training driver.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{extract_code, Generator};
use crate::mdp::{
    compose_prompt, encode_state, reward, ActionCatalog, EditAction, RewardConfig, StateVector, NUM_ACTIONS, STATE_DIM,
};
use crate::ppo::{
    ppo_update, sample_action, AdamState, Checkpoint, LossStats, NetShape, PolicyParams, PpoConfig, PpoError, Rng, Transition,
};
use crate::task::{initial_prompt, PromptTemplate, TaskError, TaskSpec};
use crate::verifier::{CandidateSource, Verifier, VerifierMode, VerifyStatus};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PpoError),
    #[error("invalid loop config: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training log i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EpisodeMode {
    RlPolicy,
    BaselineNoFeedback,
    BaselineWithFeedback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Verified,
    Exhausted,
}

/// One generate + verify iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// sha256 of the prompt sent at this step.
    pub prompt_hash: String,
    /// Edit chosen after this step's report; `None` when the loop stopped here.
    pub action: Option<EditAction>,
    pub error_count: u32,
    /// Shaped reward of this step's verification outcome.
    pub reward: f64,
    pub status: VerifyStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: String,
    pub mode: EpisodeMode,
    pub steps: Vec<StepRecord>,
    pub outcome: Outcome,
    pub iterations_used: usize,
    pub final_source: CandidateSource,
    /// Set when a backend or tool failure ended the episode early.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EpisodeRecord {
    pub fn verified(&self) -> bool {
        self.outcome == Outcome::Verified
    }

    /// Number of edits drawn from the policy (or forced by the baseline).
    pub fn actions_taken(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }

    /// Undiscounted sum of the rewards that enter the trajectory.
    pub fn trajectory_return(&self) -> f64 {
        match self.steps.first() {
            Some(first) if self.steps.len() == 1 && first.status == VerifyStatus::Verified => first.reward,
            _ => self.steps.iter().skip(1).map(|s| s.reward).sum(),
        }
    }
}

/// Training data from one episode.
///
/// `transitions[i]` holds the edit chosen after step `i` and the reward of
/// the outcome at step `i+1`. An edit chosen after the final step of an
/// exhausted episode has no observed outcome and is not included.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Reward of a first-shot success; it has no action to credit.
    pub initial_reward: Option<f64>,
}

impl Trajectory {
    /// Rewards aligned with the verification outcomes that produced them.
    pub fn rewards(&self) -> Vec<f64> {
        self.initial_reward
            .into_iter()
            .chain(self.transitions.iter().map(|t| t.reward))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoopConfig {
    pub t_max: usize,
    pub template: PromptTemplate,
    pub verifier_mode: VerifierMode,
    pub collect_for_training: bool,
    pub reward: RewardConfig,
    pub catalog: ActionCatalog,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            t_max: 7,
            template: PromptTemplate::oneline_and_detailed(),
            verifier_mode: VerifierMode::Simulated,
            collect_for_training: false,
            reward: RewardConfig::default(),
            catalog: ActionCatalog::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.t_max == 0 {
            return Err(EpisodeError::Config("t_max must be at least 1".into()));
        }
        self.reward
            .validate()
            .map_err(|e| EpisodeError::Config(e.to_string()))
    }
}

/// An edit choice with the quantities PPO needs later.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: EditAction,
    pub log_prob: f64,
    pub value: f64,
}

pub trait Policy: Sync {
    fn decide(&self, state: &StateVector, rng: &mut Rng) -> Result<Decision, PpoError>;
}

impl Policy for PolicyParams {
    fn decide(&self, state: &StateVector, rng: &mut Rng) -> Result<Decision, PpoError> {
        let dist = self.actor_forward(state)?;
        let (action, log_prob) = sample_action(&dist, rng);
        Ok(Decision {
            action,
            log_prob,
            value: self.value(state)?,
        })
    }
}

/// Always picks the same edit.
#[derive(Debug, Clone, Copy)]
pub struct FixedPolicy(pub EditAction);

impl Policy for FixedPolicy {
    fn decide(&self, _state: &StateVector, _rng: &mut Rng) -> Result<Decision, PpoError> {
        Ok(Decision {
            action: self.0,
            log_prob: 0.0,
            value: 0.0,
        })
    }
}

/// Picks the most probable action of a parameterized policy.
pub struct GreedyPolicy<'a>(pub &'a PolicyParams);

impl Policy for GreedyPolicy<'_> {
    fn decide(&self, state: &StateVector, _rng: &mut Rng) -> Result<Decision, PpoError> {
        let dist = self.0.actor_forward(state)?;
        let mut best = 0;
        for (i, p) in dist.iter().enumerate() {
            if *p > dist[best] {
                best = i;
            }
        }
        Ok(Decision {
            action: EditAction::ALL[best],
            log_prob: dist[best].ln(),
            value: self.0.value(state)?,
        })
    }
}

/// Generator and verifier an episode talks to.
#[derive(Clone, Copy)]
pub struct Env<'a> {
    pub gateway: &'a dyn Generator,
    pub verifier: &'a dyn Verifier,
}

fn run_loop(
    task: &TaskSpec,
    mode: EpisodeMode,
    policy: &dyn Policy,
    env: Env<'_>,
    cfg: &LoopConfig,
    max_iters: usize,
    rng: &mut Rng,
) -> Result<(EpisodeRecord, Trajectory), EpisodeError> {
    cfg.validate()?;
    let p0 = initial_prompt(task, &cfg.template)?;
    let mut prompt = p0.clone();
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut traj = Trajectory::default();
    let mut pending: Option<Transition> = None;
    let mut prev_action = None;
    let mut final_source = CandidateSource::empty();
    let mut failure = None;
    let mut outcome = Outcome::Exhausted;

    for t in 0..max_iters {
        let completion = match env.gateway.generate(&prompt) {
            Ok(c) => c,
            Err(e) => {
                failure = Some(format!("generate failed at t={t}: {e}"));
                break;
            }
        };
        let code = extract_code(&completion);
        let report = match env.verifier.verify(&code) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(format!("verify failed at t={t}: {e}"));
                break;
            }
        };
        let r = reward(&report, &code, &cfg.reward);
        if let Some(mut tr) = pending.take() {
            tr.reward = r;
            traj.transitions.push(tr);
        }
        let verified = report.is_verified();
        steps.push(StepRecord {
            t,
            prompt_hash: prompt.digest(),
            action: None,
            error_count: report.error_count,
            reward: r,
            status: report.status,
        });
        final_source = code.clone();
        if verified {
            if t == 0 {
                traj.initial_reward = Some(r);
            }
            outcome = Outcome::Verified;
            break;
        }
        if t + 1 == max_iters && mode == EpisodeMode::BaselineNoFeedback {
            break;
        }
        let state = encode_state(&prompt, &code, &report, t, cfg.t_max, prev_action);
        let d = policy.decide(&state, rng)?;
        steps.last_mut().expect("pushed above").action = Some(d.action);
        pending = Some(Transition {
            state,
            action: d.action,
            log_prob_old: d.log_prob,
            reward: 0.0,
            value_old: d.value,
            done: false,
        });
        prompt = compose_prompt(&prompt, d.action, &report, &p0, &cfg.catalog);
        prev_action = Some(d.action);
    }
    if let Some(last) = traj.transitions.last_mut() {
        last.done = true;
    }
    let record = EpisodeRecord {
        task_id: task.id.clone(),
        mode,
        iterations_used: steps.len(),
        steps,
        outcome,
        final_source,
        failure,
    };
    Ok((record, traj))
}

/// Runs one policy-driven episode. The trajectory is returned when
/// `cfg.collect_for_training` is set.
pub fn run_episode(
    task: &TaskSpec,
    policy: &dyn Policy,
    env: Env<'_>,
    cfg: &LoopConfig,
    rng: &mut Rng,
) -> Result<(EpisodeRecord, Option<Trajectory>), EpisodeError> {
    let (rec, traj) = run_loop(task, EpisodeMode::RlPolicy, policy, env, cfg, cfg.t_max, rng)?;
    Ok((rec, cfg.collect_for_training.then_some(traj)))
}

/// Static prompting: one shot without feedback, or the full loop with every
/// edit fixed to APPEND_VERIFIER_ERRORS.
pub fn run_baseline(task: &TaskSpec, env: Env<'_>, feedback: bool, cfg: &LoopConfig) -> Result<EpisodeRecord, EpisodeError> {
    let policy = FixedPolicy(EditAction::AppendVerifierErrors);
    // the fixed policy never draws from the stream
    let mut rng = Rng::seed_from_u64(0);
    let (mode, iters) = if feedback {
        (EpisodeMode::BaselineWithFeedback, cfg.t_max)
    } else {
        (EpisodeMode::BaselineNoFeedback, 1)
    };
    run_loop(task, mode, &policy, env, cfg, iters, &mut rng).map(|(rec, _)| rec)
}

/// Random stream for episode `index` of a run seeded with `seed`.
pub fn episode_rng(seed: u64, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

// ---------------------------------------------------------------------------
// Training

pub const CURVE_HEADER: &str = "episode,reward,policy_loss,value_loss,entropy,success";

/// One row of the training-curve log. Loss columns carry the final-epoch
/// statistics of the batch the episode was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub episode: u64,
    pub reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub success: bool,
}

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.episode,
            self.reward,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            u8::from(self.success)
        )
    }
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub episodes: u64,
    /// Where `checkpoint.json` is written; `None` disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: u64,
    /// Resume from these parameters instead of a fresh init.
    pub init: Option<Checkpoint>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            episodes: 0,
            checkpoint_dir: None,
            checkpoint_every: 100,
            init: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub adam: AdamState,
    pub rows: Vec<CurveRow>,
    pub episodes_done: u64,
    /// Set when an update produced a non-finite loss; `params` are then the
    /// last good ones.
    pub aborted: Option<PpoError>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Trains a fresh (or resumed) policy with PPO on tasks drawn uniformly from
/// `corpus`. Episodes are collected in parallel against an immutable
/// snapshot; each episode's random stream depends only on the seed and the
/// episode index, so runs are reproducible.
pub fn train_policy(
    corpus: &[TaskSpec],
    env: Env<'_>,
    ppo_cfg: &PpoConfig,
    loop_cfg: &LoopConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome, EpisodeError> {
    ppo_cfg.validate()?;
    loop_cfg.validate()?;
    let (mut params, mut adam, mut done) = match &opts.init {
        Some(c) => (c.params.clone(), c.adam.clone(), c.episode),
        None => {
            let mut rng = Rng::seed_from_u64(ppo_cfg.seed);
            let p = PolicyParams::init(NetShape::new(STATE_DIM, ppo_cfg.hidden, NUM_ACTIONS), &mut rng);
            let n = p.theta.len();
            (p, AdamState::new(n), 0)
        }
    };
    let mut rows = Vec::new();
    if opts.episodes == 0 {
        return Ok(TrainOutcome {
            params,
            adam,
            rows,
            episodes_done: done,
            aborted: None,
        });
    }
    if corpus.is_empty() {
        return Err(EpisodeError::EmptyCorpus);
    }
    let collect_cfg = LoopConfig {
        collect_for_training: true,
        ..loop_cfg.clone()
    };
    let target = done + opts.episodes;
    let batch_size = ppo_cfg.batch_episodes.max(1) as u64;
    let mut batch_id = 0u64;
    while done < target {
        let n = batch_size.min(target - done);
        let snapshot = &params;
        let results: Vec<Result<(EpisodeRecord, Trajectory), EpisodeError>> = (done..done + n)
            .into_par_iter()
            .map(|idx| {
                let mut rng = episode_rng(ppo_cfg.seed, idx);
                let task = &corpus[rng.gen_range(0..corpus.len())];
                let (rec, traj) = run_episode(task, snapshot, env, &collect_cfg, &mut rng)?;
                Ok((rec, traj.unwrap_or_default()))
            })
            .collect();
        let mut episodes = Vec::with_capacity(results.len());
        for r in results {
            episodes.push(r?);
        }
        let batch: Vec<Transition> = episodes
            .iter()
            .flat_map(|(_, t)| t.transitions.iter().cloned())
            .collect();
        let last = if batch.is_empty() {
            LossStats::default()
        } else {
            match ppo_update(&params, &batch, ppo_cfg, &adam, batch_id) {
                Ok((p, a, stats)) => {
                    params = p;
                    adam = a;
                    stats.last().cloned().unwrap_or_default()
                }
                Err(e @ PpoError::NonFiniteLoss { .. }) => {
                    log::error!("aborting training: {e}");
                    return Ok(TrainOutcome {
                        params,
                        adam,
                        rows,
                        episodes_done: done,
                        aborted: Some(e),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        };
        for (i, (rec, traj)) in episodes.iter().enumerate() {
            rows.push(CurveRow {
                episode: done + i as u64 + 1,
                reward: traj.rewards().iter().sum(),
                policy_loss: last.policy_loss,
                value_loss: last.value_loss,
                entropy: last.entropy,
                success: rec.verified(),
            });
        }
        let before = done;
        done += n;
        batch_id += 1;
        if let Some(dir) = &opts.checkpoint_dir {
            let every = opts.checkpoint_every.max(1);
            if done / every > before / every || done == target {
                Checkpoint {
                    version: Checkpoint::VERSION,
                    params: params.clone(),
                    adam: adam.clone(),
                    episode: done,
                    seed: ppo_cfg.seed,
                }
                .save(checkpoint_path(dir))?;
            }
        }
    }
    Ok(TrainOutcome {
        params,
        adam,
        rows,
        episodes_done: done,
        aborted: None,
    })
}

/// Fraction of `episodes` evaluation episodes that verify. Episode `i` uses
/// task `i mod |tasks|` and the stream `episode_rng(seed, i)`.
pub fn evaluate(
    tasks: &[TaskSpec],
    policy: &dyn Policy,
    env: Env<'_>,
    cfg: &LoopConfig,
    episodes: u64,
    seed: u64,
) -> Result<f64, EpisodeError> {
    if tasks.is_empty() || episodes == 0 {
        return Err(EpisodeError::EmptyCorpus);
    }
    let cfg = LoopConfig {
        collect_for_training: false,
        ..cfg.clone()
    };
    let wins: Result<Vec<bool>, EpisodeError> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i);
            let task = &tasks[(i % tasks.len() as u64) as usize];
            run_episode(task, policy, env, &cfg, &mut rng).map(|(r, _)| r.verified())
        })
        .collect();
    let wins = wins?;
    Ok(wins.iter().filter(|&&w| w).count() as f64 / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Completion, GatewayError, Prompt, ScriptRule, ScriptRules, ScriptedBackend};
    use crate::ppo::seeded_rng;
    use crate::verifier::{SimRuleSet, SimulatedVerifier, VerifierError, VerifierReport};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting<G> {
        inner: G,
        calls: AtomicUsize,
    }

    impl<G> Counting<G> {
        fn new(inner: G) -> Self {
            Self {
                inner,
                calls: AtomicUsize::new(0),
            }
        }
        fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<G: Generator> Generator for Counting<G> {
        fn generate(&self, p: &Prompt) -> Result<Completion, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.generate(p)
        }
    }

    impl<V: Verifier> Verifier for Counting<V> {
        fn verify(&self, s: &CandidateSource) -> Result<VerifierReport, VerifierError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.verify(s)
        }
    }

    struct Down;
    impl Generator for Down {
        fn generate(&self, _: &Prompt) -> Result<Completion, GatewayError> {
            Err(GatewayError::BackendUnavailable {
                attempts: 3,
                last_error: "connection refused".into(),
            })
        }
    }

    fn task(id: &str, detail: &str) -> TaskSpec {
        TaskSpec {
            id: id.into(),
            title: id.into(),
            description_oneline: format!("Task {id}."),
            description_detailed: detail.into(),
            signature: "method M(x: int) returns (y: int)".into(),
            requires: vec![],
            ensures: vec!["y == x".into()],
            reference_source: None,
        }
    }

    fn fenced(body: &str) -> String {
        format!("```dafny\n{body}\n```")
    }

    fn fix_on_hint() -> ScriptedBackend {
        ScriptedBackend::new(ScriptRules {
            rules: vec![ScriptRule::Contains {
                all: vec!["Fix the following verifier errors".into()],
                none: vec![],
                emit: fenced("method M(x: int) returns (y: int) { y := x; }"),
            }],
            default: fenced("method M(x: int) returns (y: int) { y := 0; } //BUG:1"),
        })
    }

    fn constant(body: &str) -> ScriptedBackend {
        ScriptedBackend::new(ScriptRules {
            rules: vec![],
            default: fenced(body),
        })
    }

    fn counter_env() -> ScriptedBackend {
        ScriptedBackend::new(ScriptRules {
            rules: vec![ScriptRule::RepairCounter {
                initial_marker: "INITIAL_ERRORS=".into(),
                fix_marker: "Fix the following verifier errors".into(),
                template: fenced("method M(x: int) returns (y: int) { y := x; } {bugs}"),
            }],
            default: String::new(),
        })
    }

    fn sim() -> SimulatedVerifier {
        SimulatedVerifier::new(SimRuleSet::standard())
    }

    fn cfg() -> LoopConfig {
        LoopConfig::default()
    }

    #[test]
    fn fixes_after_append_hint() {
        let g = Counting::new(fix_on_hint());
        let v = Counting::new(sim());
        let env = Env { gateway: &g, verifier: &v };
        let mut rng = seeded_rng(1);
        let (rec, traj) = run_episode(
            &task("a", ""),
            &FixedPolicy(EditAction::AppendVerifierErrors),
            env,
            &LoopConfig {
                collect_for_training: true,
                ..cfg()
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(rec.outcome, Outcome::Verified);
        assert_eq!(rec.iterations_used, 2);
        assert_eq!((g.calls(), v.calls()), (2, 2));
        let traj = traj.unwrap();
        assert_eq!(traj.rewards(), vec![10.0]);
        assert!(traj.transitions[0].done);
        assert_eq!(rec.steps[0].action, Some(EditAction::AppendVerifierErrors));
        assert_eq!(rec.steps[1].action, None);
    }

    #[test]
    fn always_buggy_exhausts() {
        let g = Counting::new(constant("method M() {} //BUG:2"));
        let v = Counting::new(sim());
        let env = Env { gateway: &g, verifier: &v };
        let params = PolicyParams::zeros(NetShape::standard());
        let mut rng = seeded_rng(2);
        let c = LoopConfig {
            collect_for_training: true,
            ..cfg()
        };
        let (rec, traj) = run_episode(&task("a", ""), &params, env, &c, &mut rng).unwrap();
        assert_eq!(rec.outcome, Outcome::Exhausted);
        assert_eq!(rec.iterations_used, 7);
        assert_eq!((g.calls(), v.calls()), (7, 7));
        assert_eq!(rec.actions_taken(), 7);
        let traj = traj.unwrap();
        assert_eq!(traj.transitions.len(), 6);
        assert!(traj.rewards().iter().all(|&r| (r - (-0.9)).abs() < 1e-12));
        assert!(traj.transitions.last().unwrap().done);
        assert!(traj.transitions[..5].iter().all(|t| !t.done));
    }

    #[test]
    fn first_shot_success_samples_nothing() {
        let g = Counting::new(constant("method M() {}"));
        let v = Counting::new(sim());
        let env = Env { gateway: &g, verifier: &v };
        let params = PolicyParams::zeros(NetShape::standard());
        let mut rng = seeded_rng(3);
        let c = LoopConfig {
            collect_for_training: true,
            ..cfg()
        };
        let (rec, traj) = run_episode(&task("a", ""), &params, env, &c, &mut rng).unwrap();
        assert_eq!(rec.outcome, Outcome::Verified);
        assert_eq!(rec.iterations_used, 1);
        assert_eq!(rec.actions_taken(), 0);
        let traj = traj.unwrap();
        assert!(traj.transitions.is_empty());
        assert_eq!(traj.initial_reward, Some(10.0));
        assert_eq!(rec.trajectory_return(), 10.0);
    }

    #[test]
    fn no_trajectory_unless_collecting() {
        let g = constant("method M() {}");
        let v = sim();
        let params = PolicyParams::zeros(NetShape::standard());
        let mut rng = seeded_rng(3);
        let (_, traj) = run_episode(&task("a", ""), &params, Env { gateway: &g, verifier: &v }, &cfg(), &mut rng).unwrap();
        assert!(traj.is_none());
    }

    #[test]
    fn baselines() {
        let v = sim();
        let buggy = Counting::new(constant("method M() {} //BUG:1"));
        let rec = run_baseline(&task("a", ""), Env { gateway: &buggy, verifier: &v }, false, &cfg()).unwrap();
        assert_eq!(rec.mode, EpisodeMode::BaselineNoFeedback);
        assert_eq!(rec.outcome, Outcome::Exhausted);
        assert_eq!(rec.iterations_used, 1);
        assert_eq!(buggy.calls(), 1);
        assert_eq!(rec.actions_taken(), 0);

        let fixer = fix_on_hint();
        let rec = run_baseline(&task("a", ""), Env { gateway: &fixer, verifier: &v }, true, &cfg()).unwrap();
        assert_eq!(rec.outcome, Outcome::Verified);
        assert_eq!(rec.iterations_used, 2);

        let never = Counting::new(constant("method M() {} //BUG:1"));
        let rec = run_baseline(&task("a", ""), Env { gateway: &never, verifier: &v }, true, &cfg()).unwrap();
        assert_eq!(rec.outcome, Outcome::Exhausted);
        assert_eq!(rec.iterations_used, 7);
        assert_eq!(never.calls(), 7);
        assert!(rec.steps.iter().all(|s| s.action.map_or(true, |a| a == EditAction::AppendVerifierErrors)));
    }

    #[test]
    fn backend_failure_is_annotated() {
        let v = Counting::new(sim());
        let rec = run_baseline(&task("a", ""), Env { gateway: &Down, verifier: &v }, true, &cfg()).unwrap();
        assert_eq!(rec.outcome, Outcome::Exhausted);
        assert_eq!(rec.iterations_used, 0);
        assert_eq!(v.calls(), 0);
        assert!(rec.failure.unwrap().contains("connection refused"));
    }

    #[test]
    fn counter_env_reaches_zero_after_k_appends() {
        let g = counter_env();
        let v = sim();
        let env = Env { gateway: &g, verifier: &v };
        for k in 1..=3 {
            let rec = run_baseline(&task("a", &format!("INITIAL_ERRORS={k}")), env, true, &cfg()).unwrap();
            assert_eq!(rec.outcome, Outcome::Verified);
            assert_eq!(rec.iterations_used, k + 1);
            let errs: Vec<u32> = rec.steps.iter().map(|s| s.error_count).collect();
            let expect: Vec<u32> = (0..=k as u32).rev().collect();
            assert_eq!(errs, expect);
        }
    }

    #[test]
    fn counter_env_ignores_other_edits() {
        let g = counter_env();
        let v = sim();
        let env = Env { gateway: &g, verifier: &v };
        let mut rng = seeded_rng(0);
        for a in EditAction::ALL {
            if a == EditAction::AppendVerifierErrors {
                continue;
            }
            let (rec, _) = run_episode(&task("a", "INITIAL_ERRORS=2"), &FixedPolicy(a), env, &cfg(), &mut rng).unwrap();
            assert_eq!(rec.outcome, Outcome::Exhausted, "{a}");
            assert!(rec.steps.iter().all(|s| s.error_count == 2));
        }
    }

    #[test]
    fn zero_episodes_is_noop() {
        let g = counter_env();
        let v = sim();
        let ppo = PpoConfig::default();
        let out = train_policy(&[], Env { gateway: &g, verifier: &v }, &ppo, &cfg(), &TrainOptions::default()).unwrap();
        let mut rng = seeded_rng(ppo.seed);
        assert_eq!(out.params, PolicyParams::init(NetShape::standard(), &mut rng));
        assert!(out.rows.is_empty());
    }

    fn corpus() -> Vec<TaskSpec> {
        (1..=3)
            .map(|k| task(&format!("r{k}"), &format!("INITIAL_ERRORS={k}")))
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_checkpoints() {
        let g = counter_env();
        let v = sim();
        let env = Env { gateway: &g, verifier: &v };
        let ppo = PpoConfig {
            seed: 11,
            ..PpoConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            episodes: 40,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let a = train_policy(&corpus(), env, &ppo, &cfg(), &opts).unwrap();
        let b = train_policy(&corpus(), env, &ppo, &cfg(), &TrainOptions { checkpoint_dir: None, ..opts.clone() }).unwrap();
        assert_eq!(a.rows.len(), 40);
        assert_eq!(curve_csv(&a.rows), curve_csv(&b.rows));
        assert_eq!(a.params, b.params);
        let ckpt = Checkpoint::load(checkpoint_path(dir.path())).unwrap();
        assert_eq!(ckpt.episode, 40);
        assert_eq!(ckpt.params, a.params);
        assert!(curve_csv(&a.rows).starts_with(CURVE_HEADER));
    }

    #[test]
    fn non_finite_loss_keeps_last_good_params() {
        let g = counter_env();
        let v = sim();
        let env = Env { gateway: &g, verifier: &v };
        let ppo = PpoConfig {
            lr: f64::INFINITY,
            ..PpoConfig::default()
        };
        let opts = TrainOptions {
            episodes: 64,
            ..TrainOptions::default()
        };
        let mut c = cfg();
        c.reward.r_succ = 10.0;
        match train_policy(&corpus(), env, &ppo, &c, &opts) {
            Ok(out) => {
                assert!(out.aborted.is_some());
                assert!(out.params.theta.iter().all(|x| x.is_finite()));
            }
            Err(EpisodeError::Policy(PpoError::Config(_))) => {}
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn trajectory_reward_alignment_example() {
        // e0 = 2 with two forced appends: rewards for the outcomes at t=1,2
        let g = counter_env();
        let v = sim();
        let mut rng = seeded_rng(0);
        let c = LoopConfig {
            collect_for_training: true,
            ..cfg()
        };
        let (rec, traj) = run_episode(
            &task("a", "INITIAL_ERRORS=2"),
            &FixedPolicy(EditAction::AppendVerifierErrors),
            Env { gateway: &g, verifier: &v },
            &c,
            &mut rng,
        )
        .unwrap();
        assert_eq!(rec.iterations_used, 3);
        let r = traj.unwrap().rewards();
        assert_eq!(r.len(), 2);
        assert!((r[0] - (-0.7)).abs() < 1e-12);
        assert_eq!(r[1], 10.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loop_contract_holds(seed in any::<u64>(), k in 0u32..5, t_max in 1usize..9, feedback in any::<bool>(), use_policy in any::<bool>()) {
            let g = Counting::new(counter_env());
            let v = Counting::new(sim());
            let env = Env { gateway: &g, verifier: &v };
            let c = LoopConfig { t_max, collect_for_training: true, ..cfg() };
            let t = task("a", &format!("INITIAL_ERRORS={k}"));
            let mut rng = seeded_rng(seed);
            let params = PolicyParams::random(NetShape::standard(), 0.5, &mut rng);
            let (rec, traj) = if use_policy {
                run_episode(&t, &params, env, &c, &mut rng).unwrap()
            } else {
                (run_baseline(&t, env, feedback, &c).unwrap(), None)
            };
            prop_assert!(rec.iterations_used <= t_max);
            prop_assert_eq!(g.calls(), rec.iterations_used);
            prop_assert_eq!(v.calls(), rec.iterations_used);
            let verified_at = rec.steps.iter().position(|s| s.status == VerifyStatus::Verified);
            prop_assert_eq!(rec.verified(), verified_at.is_some());
            if let Some(i) = verified_at {
                prop_assert_eq!(i + 1, rec.steps.len());
            }
            if !use_policy && !feedback {
                prop_assert_eq!(rec.iterations_used, 1);
            }
            if use_policy {
                let expect = match (rec.outcome, rec.iterations_used) {
                    (Outcome::Verified, n) => n - 1,
                    (Outcome::Exhausted, n) => n,
                };
                prop_assert_eq!(rec.actions_taken(), expect);
                let traj = traj.unwrap();
                let mut expected: Vec<f64> = rec.steps.iter().skip(1).map(|s| s.reward).collect();
                if rec.iterations_used == 1 && rec.verified() {
                    expected = vec![rec.steps[0].reward];
                }
                prop_assert_eq!(traj.rewards(), expected);
                prop_assert!(traj.transitions.iter().all(|t| t.log_prob_old <= 0.0));
            }
        }
    }
}
