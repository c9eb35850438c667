//! Finite-difference check of the PPO loss gradient, with a sign-flip
//! mutation that the check must catch.

use serde::{Deserialize, Serialize};

use p2s_core::mdp::{NUM_ACTIONS, STATE_DIM};
use p2s_core::ppo::{
    grad_check, grad_check_with, loss_and_grad, prepare_batch, seeded_rng, synthetic_batch, NetShape, PolicyParams,
    PpoConfig, PpoError,
};

/// Parameters probed per check.
const PROBES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub seeds: u64,
    pub batch: usize,
    pub hidden: usize,
    /// Worst relative error of the analytic gradient over all seeds.
    pub max_rel_error: f64,
    /// Smallest error seen with the actor gradient sign-flipped.
    pub mutated_min_rel_error: f64,
}

pub fn run_grad_check(seeds: u64, batch: usize, hidden: usize) -> Result<GradCheckSummary, PpoError> {
    let cfg = PpoConfig::default();
    let mut worst: f64 = 0.0;
    let mut mutated: f64 = f64::INFINITY;
    for seed in 0..seeds {
        let mut rng = seeded_rng(seed);
        let params = PolicyParams::init(NetShape::new(STATE_DIM, hidden, NUM_ACTIONS), &mut rng);
        let transitions = synthetic_batch(&params, batch, &mut rng);
        worst = worst.max(grad_check(&params, &transitions, &cfg, seed)?);
        let prepared = prepare_batch(&transitions, &cfg)?;
        let actor = params.actor_range();
        let mut probe_rng = seeded_rng(seed);
        let flipped = grad_check_with(&params, &prepared, &cfg, PROBES, &mut probe_rng, |p, b, c| {
            let mut g = loss_and_grad(p, b, c).1;
            for v in &mut g[actor.clone()] {
                *v = -*v;
            }
            g
        });
        mutated = mutated.min(flipped);
    }
    Ok(GradCheckSummary {
        seeds,
        batch,
        hidden,
        max_rel_error: worst,
        mutated_min_rel_error: mutated,
    })
}
