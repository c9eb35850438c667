//! Verifier-guided prompt repair: task model, LLM gateway, Dafny verifier
//! wrapper, repair MDP, PPO learner and the episode loop.

pub mod episode;
pub mod gateway;
pub mod mdp;
pub mod ppo;
pub mod process;
pub mod task;
pub mod verifier;
