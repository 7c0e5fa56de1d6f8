//! Trajectory prediction by chaining per-step samples (or means) from the
//! dynamics model, carrying the recurrent state across the horizon.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::sim::{Action, VehicleState};

use super::snapshot::{AdmHidden, ModelSnapshot};
use super::{apply_delta, state_action_features, ContextVector};

/// Predicted state sequence; one state per executed action unless the
/// prediction left the sanity envelope, in which case `diverged_at` marks
/// the first bad step and the sequence is truncated before it.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<VehicleState>,
    pub diverged_at: Option<usize>,
}

impl Rollout {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }
}

enum Mode {
    Sample(ChaCha8Rng),
    Mean,
}

fn run(
    snap: &ModelSnapshot,
    s0: &VehicleState,
    actions: &[Action],
    ctx: &ContextVector,
    mut mode: Mode,
) -> Rollout {
    assert!(!actions.is_empty(), "rollout horizon must be at least 1");
    let mut hidden = AdmHidden::zeros(&snap.cfg);
    let mut states = Vec::with_capacity(actions.len());
    let mut state = *s0;
    for (t, a) in actions.iter().enumerate() {
        let sa = state_action_features(&state, a);
        let g = snap.adm_predict(&sa, ctx, &mut hidden);
        if !g.is_finite() {
            return Rollout { states, diverged_at: Some(t) };
        }
        let delta = match &mut mode {
            Mode::Sample(rng) => g.sample(rng),
            Mode::Mean => g.mean,
        };
        let next = apply_delta(&state, &delta);
        if !next.is_sane() {
            return Rollout { states, diverged_at: Some(t) };
        }
        states.push(next);
        state = next;
    }
    Rollout { states, diverged_at: None }
}

/// One stochastic rollout: `delta ~ N(mean, L L^T)` chained over the
/// horizon. Deterministic per seed.
pub fn rollout_sample(
    snap: &ModelSnapshot,
    s0: &VehicleState,
    actions: &[Action],
    ctx: &ContextVector,
    seed: u64,
) -> Rollout {
    run(snap, s0, actions, ctx, Mode::Sample(ChaCha8Rng::seed_from_u64(seed)))
}

/// Deterministic rollout chaining the predicted means (the risk-unaware
/// evaluation path).
pub fn rollout_mean(
    snap: &ModelSnapshot,
    s0: &VehicleState,
    actions: &[Action],
    ctx: &ContextVector,
) -> Rollout {
    run(snap, s0, actions, ctx, Mode::Mean)
}
