//! Actor-critic networks and the PPO trainer.
//!
//! Both networks are single-hidden-layer tanh MLPs stored in one flat `f64`
//! parameter vector, so the optimizer, gradient clipping and the
//! finite-difference checker all operate on plain slices.

use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mdp::{EditAction, StateVector, NUM_ACTIONS, STATE_DIM};

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("state has dimension {got}, policy expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite loss in batch {batch_id}")]
    NonFiniteLoss { batch_id: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Layer sizes: input D, hidden H, actions |A|.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub actions: usize,
}

impl NetShape {
    pub fn new(input: usize, hidden: usize, actions: usize) -> Self {
        Self {
            input,
            hidden,
            actions,
        }
    }

    pub fn standard() -> Self {
        Self::new(STATE_DIM, 32, NUM_ACTIONS)
    }

    fn actor_len(&self) -> usize {
        self.hidden * self.input + self.hidden + self.actions * self.hidden + self.actions
    }

    fn critic_len(&self) -> usize {
        self.hidden * self.input + self.hidden + self.hidden + 1
    }

    pub fn param_count(&self) -> usize {
        self.actor_len() + self.critic_len()
    }

    fn layout(&self) -> Layout {
        let (d, h, a) = (self.input, self.hidden, self.actions);
        let aw1 = 0;
        let ab1 = aw1 + h * d;
        let aw2 = ab1 + h;
        let ab2 = aw2 + a * h;
        let cw1 = ab2 + a;
        let cb1 = cw1 + h * d;
        let cw2 = cb1 + h;
        let cb2 = cw2 + h;
        Layout {
            aw1,
            ab1,
            aw2,
            ab2,
            cw1,
            cb1,
            cw2,
            cb2,
        }
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    aw1: usize,
    ab1: usize,
    aw2: usize,
    ab2: usize,
    cw1: usize,
    cb1: usize,
    cw2: usize,
    cb2: usize,
}

/// Actor (D→H→|A|, softmax) and critic (D→H→1) weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shape: NetShape,
    pub theta: Vec<f64>,
}

struct ActorPass {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: NetShape) -> Self {
        Self {
            shape,
            theta: vec![0.0; shape.param_count()],
        }
    }

    /// Hidden layers uniform in ±sqrt(6/(fan_in+fan_out)); biases and output
    /// layers zero, so the initial policy is exactly uniform.
    pub fn init(shape: NetShape, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        let l = shape.layout();
        let limit = (6.0 / (shape.input + shape.hidden) as f64).sqrt();
        for start in [l.aw1, l.cw1] {
            for w in &mut p.theta[start..start + shape.hidden * shape.input] {
                *w = rng.gen_range(-limit..limit);
            }
        }
        p
    }

    /// Every parameter uniform in ±scale (used by tests and the gradient checker).
    pub fn random(shape: NetShape, scale: f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        for w in &mut p.theta {
            *w = rng.gen_range(-scale..scale);
        }
        p
    }

    fn check_dim(&self, s: &[f64]) -> Result<(), PpoError> {
        if s.len() != self.shape.input {
            return Err(PpoError::DimensionMismatch {
                expected: self.shape.input,
                got: s.len(),
            });
        }
        Ok(())
    }

    fn hidden_layer(&self, w: usize, b: usize, s: &[f64]) -> Vec<f64> {
        let d = self.shape.input;
        (0..self.shape.hidden)
            .map(|j| {
                let row = &self.theta[w + j * d..w + (j + 1) * d];
                let z: f64 = self.theta[b + j] + row.iter().zip(s).map(|(a, x)| a * x).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    fn actor_pass(&self, s: &[f64]) -> ActorPass {
        let l = self.shape.layout();
        let h = self.shape.hidden;
        let hidden = self.hidden_layer(l.aw1, l.ab1, s);
        let logits: Vec<f64> = (0..self.shape.actions)
            .map(|k| {
                let row = &self.theta[l.aw2 + k * h..l.aw2 + (k + 1) * h];
                self.theta[l.ab2 + k] + row.iter().zip(&hidden).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let log_probs: Vec<f64> = logits.iter().map(|z| z - lse).collect();
        let probs = log_probs.iter().map(|lp| lp.exp()).collect();
        ActorPass {
            hidden,
            probs,
            log_probs,
        }
    }

    fn critic_pass(&self, s: &[f64]) -> (Vec<f64>, f64) {
        let l = self.shape.layout();
        let hidden = self.hidden_layer(l.cw1, l.cb1, s);
        let w2 = &self.theta[l.cw2..l.cw2 + self.shape.hidden];
        let v = self.theta[l.cb2] + w2.iter().zip(&hidden).map(|(a, x)| a * x).sum::<f64>();
        (hidden, v)
    }

    /// Action distribution π(·|s).
    pub fn actor_forward(&self, s: &StateVector) -> Result<Vec<f64>, PpoError> {
        self.check_dim(s.as_slice())?;
        Ok(self.actor_pass(s.as_slice()).probs)
    }

    /// Critic estimate V(s).
    pub fn value(&self, s: &StateVector) -> Result<f64, PpoError> {
        self.check_dim(s.as_slice())?;
        Ok(self.critic_pass(s.as_slice()).1)
    }

    /// Mutable view of the actor's output-layer weight for (action, hidden unit).
    pub fn actor_output_weight_mut(&mut self, action: usize, hidden: usize) -> &mut f64 {
        let l = self.shape.layout();
        &mut self.theta[l.aw2 + action * self.shape.hidden + hidden]
    }

    pub fn actor_output_bias_mut(&mut self, action: usize) -> &mut f64 {
        let l = self.shape.layout();
        &mut self.theta[l.ab2 + action]
    }

    /// Index range of the actor's parameters within `theta`.
    pub fn actor_range(&self) -> std::ops::Range<usize> {
        0..self.shape.actor_len()
    }
}

/// Draws an index from `dist` by inverse CDF; returns it with ln p.
pub fn sample_index(dist: &[f64], rng: &mut Rng) -> (usize, f64) {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            chosen = Some(i);
            break;
        }
    }
    // rounding can leave u just above the final cumulative sum
    let i = chosen.unwrap_or_else(|| dist.iter().rposition(|&p| p > 0.0).unwrap_or(0));
    (i, dist[i].ln())
}

pub fn sample_action(dist: &[f64], rng: &mut Rng) -> (EditAction, f64) {
    let (i, lp) = sample_index(dist, rng);
    (EditAction::ALL[i], lp)
}

/// Discounted returns G_t = Σ_{k≥t} γ^{k-t} r_k, by reverse accumulation.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: StateVector,
    pub action: EditAction,
    pub log_prob_old: f64,
    pub reward: f64,
    pub value_old: f64,
    pub done: bool,
}

fn d_clip_eps() -> f64 {
    0.2
}
fn d_gamma() -> f64 {
    0.99
}
fn d_lr() -> f64 {
    3e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_clip_norm() -> f64 {
    1.0
}
fn d_epochs() -> usize {
    4
}
fn d_entropy() -> f64 {
    0.01
}
fn d_true() -> bool {
    true
}
fn d_hidden() -> usize {
    32
}
fn d_batch_episodes() -> usize {
    16
}
fn d_init_seed() -> u64 {
    0
}

/// `[ppo]` section of the global config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    #[serde(default = "d_clip_eps")]
    pub clip_epsilon: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "d_clip_norm")]
    pub grad_clip_norm: f64,
    #[serde(default = "d_epochs")]
    pub epochs_per_batch: usize,
    #[serde(default = "d_entropy")]
    pub entropy_coef: f64,
    #[serde(default = "d_true")]
    pub advantage_norm: bool,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_batch_episodes")]
    pub batch_episodes: usize,
    #[serde(default = "d_init_seed")]
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.into()));
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if !(self.gamma >= 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.hidden == 0 || self.batch_episodes == 0 {
            return bad("hidden and batch_episodes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], cfg: &PpoConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.adam_beta1.powi(t);
        let bc2 = 1.0 - cfg.adam_beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1.0 - cfg.adam_beta1) * g;
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Per-sample clipped surrogate min(r·Â, clip(r, 1-ε, 1+ε)·Â) and its
/// derivative with respect to r (zero when the clipped branch is active).
pub fn clipped_surrogate(ratio: f64, advantage: f64, epsilon: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub total_loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Batch with returns and (optionally normalized) advantages precomputed.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub log_prob_old: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Returns are accumulated within episodes, which end at `done` (or at the
/// end of the batch). Advantages are Monte-Carlo: G_t − V_old(s_t).
pub fn prepare_batch(batch: &[Transition], cfg: &PpoConfig) -> Result<PreparedBatch, PpoError> {
    if batch.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut returns = vec![0.0; batch.len()];
    let mut acc = 0.0;
    for (i, t) in batch.iter().enumerate().rev() {
        if t.done {
            acc = 0.0;
        }
        acc = t.reward + cfg.gamma * acc;
        returns[i] = acc;
    }
    let mut advantages: Vec<f64> = batch.iter().zip(&returns).map(|(t, g)| g - t.value_old).collect();
    if cfg.advantage_norm && advantages.len() > 1 {
        let n = advantages.len() as f64;
        let mean = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for a in &mut advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    Ok(PreparedBatch {
        states: batch.iter().map(|t| t.state.0.clone()).collect(),
        actions: batch.iter().map(|t| t.action.id()).collect(),
        log_prob_old: batch.iter().map(|t| t.log_prob_old).collect(),
        returns,
        advantages,
    })
}

/// Total loss L_actor + 0.5·L_critic − c·H and its exact gradient.
pub fn loss_and_grad(params: &PolicyParams, batch: &PreparedBatch, cfg: &PpoConfig) -> (LossStats, Vec<f64>) {
    let shape = params.shape;
    let (d, h, na) = (shape.input, shape.hidden, shape.actions);
    let l = shape.layout();
    let th = &params.theta;
    let mut grad = vec![0.0; th.len()];
    let n = batch.states.len() as f64;
    let (mut policy_loss, mut value_loss, mut entropy, mut clipped) = (0.0, 0.0, 0.0, 0usize);

    for i in 0..batch.states.len() {
        let s = &batch.states[i];
        let a = batch.actions[i];

        // actor
        let pass = params.actor_pass(s);
        let ratio = (pass.log_probs[a] - batch.log_prob_old[i]).exp();
        let (surr, d_surr) = clipped_surrogate(ratio, batch.advantages[i], cfg.clip_epsilon);
        if (ratio - 1.0).abs() > cfg.clip_epsilon {
            clipped += 1;
        }
        policy_loss -= surr / n;
        let ent: f64 = -pass.probs.iter().zip(&pass.log_probs).map(|(p, lp)| p * lp).sum::<f64>();
        entropy += ent / n;

        // dL/dlogp_a for the actor term; d(ratio)/d(logp_a) = ratio
        let g_logp = -d_surr * ratio / n;
        let mut d_logits = vec![0.0; na];
        for (j, dz) in d_logits.iter_mut().enumerate() {
            let indicator = if j == a { 1.0 } else { 0.0 };
            let p = pass.probs[j];
            *dz = g_logp * (indicator - p) + cfg.entropy_coef * p * (pass.log_probs[j] + ent) / n;
        }
        let mut d_hidden = vec![0.0; h];
        for (k, dz) in d_logits.iter().enumerate() {
            grad[l.ab2 + k] += dz;
            for j in 0..h {
                grad[l.aw2 + k * h + j] += dz * pass.hidden[j];
                d_hidden[j] += dz * th[l.aw2 + k * h + j];
            }
        }
        for j in 0..h {
            let dz1 = d_hidden[j] * (1.0 - pass.hidden[j] * pass.hidden[j]);
            grad[l.ab1 + j] += dz1;
            for (x, g) in s.iter().zip(&mut grad[l.aw1 + j * d..l.aw1 + (j + 1) * d]) {
                *g += dz1 * x;
            }
        }

        // critic
        let (ch, v) = params.critic_pass(s);
        let err = v - batch.returns[i];
        value_loss += err * err / n;
        let dv = err / n; // d(0.5·mean(err²))/dv
        grad[l.cb2] += dv;
        for j in 0..h {
            grad[l.cw2 + j] += dv * ch[j];
            let dz1 = dv * th[l.cw2 + j] * (1.0 - ch[j] * ch[j]);
            grad[l.cb1 + j] += dz1;
            for (x, g) in s.iter().zip(&mut grad[l.cw1 + j * d..l.cw1 + (j + 1) * d]) {
                *g += dz1 * x;
            }
        }
    }

    let total_loss = policy_loss + 0.5 * value_loss - cfg.entropy_coef * entropy;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    (
        LossStats {
            policy_loss,
            value_loss,
            entropy,
            clip_fraction: clipped as f64 / n,
            total_loss,
            grad_norm,
        },
        grad,
    )
}

/// Runs `epochs_per_batch` full-batch Adam steps with global-norm gradient
/// clipping. The input parameters are left untouched on error.
pub fn ppo_update(
    params: &PolicyParams,
    batch: &[Transition],
    cfg: &PpoConfig,
    opt: &AdamState,
    batch_id: u64,
) -> Result<(PolicyParams, AdamState, Vec<LossStats>), PpoError> {
    let prepared = prepare_batch(batch, cfg)?;
    let mut next = params.clone();
    let mut opt = opt.clone();
    let mut stats = Vec::with_capacity(cfg.epochs_per_batch);
    for _ in 0..cfg.epochs_per_batch {
        let (s, mut grad) = loss_and_grad(&next, &prepared, cfg);
        if !s.total_loss.is_finite() || !s.grad_norm.is_finite() {
            return Err(PpoError::NonFiniteLoss { batch_id });
        }
        clip_grad_norm(&mut grad, cfg.grad_clip_norm);
        opt.apply(&mut next.theta, &grad, cfg);
        stats.push(s);
    }
    Ok((next, opt, stats))
}

/// Max relative error between `analytic` gradients and central differences
/// (h = 1e-5) over `samples` randomly chosen parameters.
pub fn grad_check_with<F>(
    params: &PolicyParams,
    batch: &PreparedBatch,
    cfg: &PpoConfig,
    samples: usize,
    rng: &mut Rng,
    analytic: F,
) -> f64
where
    F: Fn(&PolicyParams, &PreparedBatch, &PpoConfig) -> Vec<f64>,
{
    const H: f64 = 1e-5;
    let g = analytic(params, batch, cfg);
    let n = params.theta.len();
    let picks = sample_indices(rng, n, samples.min(n));
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in picks.iter() {
        let orig = probe.theta[idx];
        probe.theta[idx] = orig + H;
        let up = loss_and_grad(&probe, batch, cfg).0.total_loss;
        probe.theta[idx] = orig - H;
        let down = loss_and_grad(&probe, batch, cfg).0.total_loss;
        probe.theta[idx] = orig;
        let numeric = (up - down) / (2.0 * H);
        let rel = (g[idx] - numeric).abs() / (g[idx].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Gradient check of [`loss_and_grad`] on at least 50 parameters.
pub fn grad_check(params: &PolicyParams, batch: &[Transition], cfg: &PpoConfig, seed: u64) -> Result<f64, PpoError> {
    let prepared = prepare_batch(batch, cfg)?;
    let mut rng = seeded_rng(seed);
    Ok(grad_check_with(params, &prepared, cfg, 64, &mut rng, |p, b, c| {
        loss_and_grad(p, b, c).1
    }))
}

/// Random transitions for gradient checking: uniform states, random
/// actions, old log-probs from a perturbed copy of `params`, episodes of 4.
pub fn synthetic_batch(params: &PolicyParams, n: usize, rng: &mut Rng) -> Vec<Transition> {
    let mut behaviour = params.clone();
    for w in &mut behaviour.theta {
        *w += rng.gen_range(-0.05..0.05);
    }
    (0..n)
        .map(|i| {
            let state = StateVector((0..params.shape.input).map(|_| rng.gen::<f64>()).collect());
            let action = EditAction::ALL[rng.gen_range(0..params.shape.actions.min(NUM_ACTIONS))];
            let lp = behaviour.actor_pass(state.as_slice()).log_probs[action.id()];
            Transition {
                state,
                action,
                log_prob_old: lp,
                reward: rng.gen_range(-2.0..10.0),
                value_old: rng.gen_range(-1.0..1.0),
                done: i % 4 == 3,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub params: PolicyParams,
    pub adam: AdamState,
    pub episode: u64,
    pub seed: u64,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PpoError> {
        let body = serde_json::to_string(self).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        }
        // write-then-rename so a crash never leaves a torn checkpoint
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        std::fs::rename(&tmp, path).map_err(|e| PpoError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PpoError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| PpoError::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
        let ckpt: Self = serde_json::from_str(&text).map_err(|e| PpoError::Checkpoint(e.to_string()))?;
        if ckpt.version != Self::VERSION {
            return Err(PpoError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        if ckpt.params.theta.len() != ckpt.params.shape.param_count() {
            return Err(PpoError::Checkpoint("parameter count does not match shape".into()));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state(seed: u64) -> StateVector {
        let mut rng = seeded_rng(seed);
        StateVector((0..STATE_DIM).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let p = PolicyParams::zeros(NetShape::standard());
        let probs = p.actor_forward(&state(1)).unwrap();
        assert!(probs.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
        let p = PolicyParams::init(NetShape::standard(), &mut seeded_rng(3));
        let probs = p.actor_forward(&state(1)).unwrap();
        assert!(probs.iter().all(|&x| (x - 1.0 / 12.0).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch() {
        let p = PolicyParams::zeros(NetShape::standard());
        assert!(matches!(
            p.actor_forward(&StateVector(vec![0.0; 3])),
            Err(PpoError::DimensionMismatch { expected: 24, got: 3 })
        ));
    }

    #[test]
    fn param_count_formula() {
        let s = NetShape::new(24, 8, 12);
        assert_eq!(s.param_count(), (24 * 8 + 8 + 8 * 12 + 12) + (24 * 8 + 8 + 8 + 1));
    }

    #[test]
    fn raising_output_weight_raises_probability() {
        let mut p = PolicyParams::random(NetShape::standard(), 0.5, &mut seeded_rng(9));
        let s = state(2);
        let before = p.actor_forward(&s).unwrap()[5];
        let hidden = p.actor_pass(s.as_slice()).hidden;
        // pick a hidden unit with positive activation so the logit rises
        let j = hidden.iter().position(|&x| x > 0.0).unwrap();
        *p.actor_output_weight_mut(5, j) += 0.3;
        assert!(p.actor_forward(&s).unwrap()[5] > before);
        *p.actor_output_bias_mut(5) += 0.3;
        assert!(p.actor_forward(&s).unwrap()[5] > before);
    }

    #[test]
    fn one_hot_sampling() {
        let mut dist = vec![0.0; 12];
        dist[3] = 1.0;
        let mut rng = seeded_rng(0);
        for _ in 0..100 {
            let (a, lp) = sample_action(&dist, &mut rng);
            assert_eq!(a.id(), 3);
            assert_eq!(lp, 0.0);
        }
    }

    #[test]
    fn uniform_sampling_concentrates() {
        let dist = vec![1.0 / 12.0; 12];
        let mut rng = seeded_rng(42);
        let mut counts = [0usize; 12];
        for _ in 0..12_000 {
            counts[sample_index(&dist, &mut rng).0] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    }

    #[test]
    fn sampling_reproducible() {
        let dist = vec![0.1, 0.2, 0.3, 0.4];
        let run = |seed| {
            let mut rng = seeded_rng(seed);
            (0..50).map(|_| sample_index(&dist, &mut rng).0).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn returns_worked_example() {
        let g = compute_returns(&[-1.1, -1.1, 10.0], 0.99);
        let expected = -1.1 + 0.99 * -1.1 + 0.99f64.powi(2) * 10.0;
        assert!((expected - 7.612).abs() < 1e-9);
        assert!((g[0] - 7.612).abs() < 1e-9);
        assert_eq!(compute_returns(&[3.5], 0.7), vec![3.5]);
        assert_eq!(compute_returns(&[1.0, 2.0, 3.0], 0.0), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn clip_rule_hand_values() {
        assert_eq!(clipped_surrogate(1.3, 2.0, 0.2), (2.4, 0.0));
        // negative advantage: the unclipped branch (smaller) is kept
        let (v, d) = clipped_surrogate(1.3, -2.0, 0.2);
        assert!((v - -2.6).abs() < 1e-12);
        assert_eq!(d, -2.0);
    }

    #[test]
    fn ratio_one_batch_has_near_zero_policy_loss() {
        let cfg = PpoConfig::default();
        let p = PolicyParams::random(NetShape::standard(), 0.3, &mut seeded_rng(5));
        let mut rng = seeded_rng(6);
        let mut batch = synthetic_batch(&p, 16, &mut rng);
        for t in &mut batch {
            t.log_prob_old = p.actor_pass(t.state.as_slice()).log_probs[t.action.id()];
        }
        let prepared = prepare_batch(&batch, &cfg).unwrap();
        let (stats, _) = loss_and_grad(&p, &prepared, &cfg);
        assert!(stats.policy_loss.abs() < 1e-9);
        assert_eq!(stats.clip_fraction, 0.0);
    }

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let cfg = PpoConfig {
            lr: 0.0,
            ..PpoConfig::default()
        };
        let p = PolicyParams::random(NetShape::standard(), 0.3, &mut seeded_rng(5));
        let batch = synthetic_batch(&p, 8, &mut seeded_rng(1));
        let opt = AdamState::new(p.theta.len());
        let (p1, opt1, _) = ppo_update(&p, &batch, &cfg, &opt, 0).unwrap();
        let (p2, _, _) = ppo_update(&p1, &batch, &cfg, &opt1, 1).unwrap();
        assert_eq!(p.theta, p2.theta);
    }

    #[test]
    fn update_reduces_loss_on_fixed_batch() {
        let cfg = PpoConfig {
            lr: 1e-2,
            epochs_per_batch: 20,
            ..PpoConfig::default()
        };
        let p = PolicyParams::random(NetShape::standard(), 0.3, &mut seeded_rng(5));
        let batch = synthetic_batch(&p, 16, &mut seeded_rng(2));
        let (_, _, stats) = ppo_update(&p, &batch, &cfg, &AdamState::new(p.theta.len()), 0).unwrap();
        assert!(stats.last().unwrap().total_loss < stats[0].total_loss);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let cfg = PpoConfig::default();
        let p = PolicyParams::zeros(NetShape::standard());
        let mut batch = synthetic_batch(&p, 4, &mut seeded_rng(2));
        batch[0].reward = f64::NAN;
        let err = ppo_update(&p, &batch, &cfg, &AdamState::new(p.theta.len()), 17).unwrap_err();
        assert!(matches!(err, PpoError::NonFiniteLoss { batch_id: 17 }));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = PpoConfig::default();
        let p = PolicyParams::random(NetShape::new(24, 8, 12), 0.5, &mut seeded_rng(11));
        let batch = synthetic_batch(&p, 16, &mut seeded_rng(12));
        assert!(grad_check(&p, &batch, &cfg, 13).unwrap() < 1e-4);
    }

    #[test]
    fn zero_network_gradient_matches() {
        let cfg = PpoConfig::default();
        let p = PolicyParams::zeros(NetShape::new(24, 8, 12));
        let batch = synthetic_batch(&p, 16, &mut seeded_rng(12));
        let prepared = prepare_batch(&batch, &cfg).unwrap();
        let (_, g) = loss_and_grad(&p, &prepared, &cfg);
        assert!(g.iter().all(|x| x.is_finite()));
        assert!(grad_check(&p, &batch, &cfg, 3).unwrap() < 1e-4);
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = PpoConfig::default();
        let p = PolicyParams::random(NetShape::new(24, 8, 12), 0.5, &mut seeded_rng(11));
        let batch = synthetic_batch(&p, 16, &mut seeded_rng(12));
        let prepared = prepare_batch(&batch, &cfg).unwrap();
        let err = grad_check_with(&p, &prepared, &cfg, 64, &mut seeded_rng(1), |p, b, c| {
            let mut g = loss_and_grad(p, b, c).1;
            for x in &mut g[p.actor_range()] {
                *x = -*x;
            }
            g
        });
        assert!(err > 1e-2);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = PolicyParams::random(NetShape::standard(), 0.7, &mut seeded_rng(4));
        let mut adam = AdamState::new(p.theta.len());
        adam.apply(&mut p.clone().theta, &vec![0.123456789; p.theta.len()], &PpoConfig::default());
        let ckpt = Checkpoint {
            version: Checkpoint::VERSION,
            params: p,
            adam,
            episode: 300,
            seed: 9,
        };
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    proptest! {
        #[test]
        fn softmax_is_distribution(seed in 0u64..1000, scale in 0.01f64..20.0) {
            let p = PolicyParams::random(NetShape::standard(), scale, &mut seeded_rng(seed));
            let probs = p.actor_forward(&state(seed)).unwrap();
            prop_assert!(probs.iter().all(|&x| x >= 0.0));
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn returns_recurrence(rs in proptest::collection::vec(-20.0f64..20.0, 1..8), gamma in 0.0f64..=1.0) {
            let g = compute_returns(&rs, gamma);
            for t in 0..rs.len() {
                let next = if t + 1 < rs.len() { g[t + 1] } else { 0.0 };
                prop_assert!((g[t] - (rs[t] + gamma * next)).abs() <= 1e-12);
            }
        }

        #[test]
        fn clipped_never_exceeds_unclipped(r in 0.0f64..3.0, a in -5.0f64..5.0, eps in 0.05f64..0.5) {
            let (v, _) = clipped_surrogate(r, a, eps);
            prop_assert!(v <= r * a + 1e-15);
            if (1.0 - eps..=1.0 + eps).contains(&r) {
                prop_assert_eq!(v, r * a);
            }
        }

        #[test]
        fn clipping_bounds_norm(g in proptest::collection::vec(-100.0f64..100.0, 1..64), max in 0.01f64..5.0) {
            let mut g = g;
            clip_grad_norm(&mut g, max);
            let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(n <= max + 1e-9);
        }
    }
}
