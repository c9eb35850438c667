//! `p2s train`: PPO training on a corpus, curve log, checkpoint, plots and a
//! held-out comparison against the uniform policy.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use p2s_core::episode::{checkpoint_path, curve_csv, evaluate, train_policy, Env, TrainOptions};
use p2s_core::mdp::{NUM_ACTIONS, STATE_DIM};
use p2s_core::ppo::{NetShape, PolicyParams};
use p2s_core::task::load_corpus;

use crate::config::TrainSection;
use crate::curves::render_training_curves;
use crate::{HarnessConfig, HarnessError};

pub const CURVE_FILE: &str = "curves.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub episodes: u64,
    pub seed: u64,
    /// Success rate of the trained policy on the held-out set.
    pub trained_success: Option<f64>,
    /// Success rate of the zero-weight (uniform) policy on the same set.
    pub uniform_success: Option<f64>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOverrides {
    pub episodes: Option<u64>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub no_plots: bool,
}

pub fn run_training(cfg: &HarnessConfig, ov: &TrainOverrides) -> Result<(PathBuf, TrainSummary), HarnessError> {
    let section: &TrainSection = cfg
        .train
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing [train] section".into()))?;
    let mut ppo = cfg.ppo.clone();
    if let Some(s) = ov.seed {
        ppo.seed = s;
    }
    let episodes = ov.episodes.unwrap_or(section.episodes);
    let out_dir = ov.output_dir.clone().unwrap_or_else(|| section.output_dir.clone());
    let loop_cfg = cfg.loop_config()?;
    let gateway = cfg.gateway()?;
    let verifier = cfg.verifier()?;
    let env = Env {
        gateway: gateway.as_ref(),
        verifier: verifier.as_ref(),
    };
    let corpus = load_corpus(&section.corpus).map_err(HarnessError::config)?;
    std::fs::create_dir_all(&out_dir).map_err(HarnessError::suite)?;
    let opts = TrainOptions {
        episodes,
        checkpoint_dir: Some(out_dir.clone()),
        checkpoint_every: section.checkpoint_every,
        init: None,
    };
    let outcome = train_policy(&corpus, env, &ppo, &loop_cfg, &opts).map_err(HarnessError::suite)?;
    let csv = curve_csv(&outcome.rows);
    write(&out_dir.join(CURVE_FILE), &csv)?;
    if !ov.no_plots && !outcome.rows.is_empty() {
        render_training_curves(&csv, &out_dir, true).map_err(HarnessError::suite)?;
    }
    let (trained_success, uniform_success) = match &section.eval_corpus {
        Some(p) => {
            let eval = load_corpus(p).map_err(HarnessError::config)?;
            let trained = evaluate(&eval, &outcome.params, env, &loop_cfg, section.eval_episodes, section.eval_seed)
                .map_err(HarnessError::suite)?;
            let uniform_policy = PolicyParams::zeros(NetShape::new(STATE_DIM, ppo.hidden, NUM_ACTIONS));
            let uniform = evaluate(&eval, &uniform_policy, env, &loop_cfg, section.eval_episodes, section.eval_seed)
                .map_err(HarnessError::suite)?;
            (Some(trained), Some(uniform))
        }
        None => (None, None),
    };
    let summary = TrainSummary {
        episodes: outcome.episodes_done,
        seed: ppo.seed,
        trained_success,
        uniform_success,
        aborted: outcome.aborted.map(|e| e.to_string()),
    };
    let json = serde_json::to_string_pretty(&summary).map_err(HarnessError::suite)? + "\n";
    write(&out_dir.join(SUMMARY_FILE), &json)?;
    log::info!("checkpoint at {}", checkpoint_path(&out_dir).display());
    Ok((out_dir, summary))
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|e| HarnessError::Suite(format!("{}: {e}", path.display())))
}
