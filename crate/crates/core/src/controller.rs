//! Risk-aware MPPI: candidate sampling around the previous solution,
//! relaxed-barrier task costs over predicted trajectories, CVaR scoring
//! under the stochastic dynamics model, and the exponentially weighted
//! update of the nominal action sequence.

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::models::rollout::{rollout_mean, rollout_sample, Rollout};
use crate::models::snapshot::ModelSnapshot;
use crate::models::ContextVector;
use crate::rng::{child_seed, substream};
use crate::sim::{Action, VehicleState};
use crate::track::{lateral_accel, Track};

/// Cost assigned to diverged rollouts; dominates every finite cost. Kept
/// infinite so that merely catastrophic (but finite) trajectories still
/// order candidates — an exploring model needs "least bad" to mean
/// something.
pub const DIVERGENCE_COST: f64 = f64::INFINITY;

/// Controller parameters. Defaults target desk-scale tracks; everything is
/// configurable from the experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MppiConfig {
    /// Planning horizon H in steps.
    pub horizon: usize,
    /// Candidate action sequences per optimization step (K).
    pub candidates: usize,
    /// Stochastic rollouts per candidate (N in the CVaR evaluation).
    pub stochastic_evals: usize,
    /// CVaR confidence: average over the worst `ceil(alpha * N)` rollouts.
    pub alpha: f64,
    /// Softmax temperature of the weight update.
    pub temperature: f64,
    /// Per-channel exploration noise.
    pub steer_noise_std: f64,
    pub throttle_noise_std: f64,
    /// Relaxed-barrier switch point.
    pub barrier_delta: f64,
    pub track_barrier_weight: f64,
    pub accel_barrier_weight: f64,
    pub progress_weight: f64,
    pub smoothness_weight: f64,
    /// Lateral acceleration limit A (m/s^2).
    pub accel_limit: f64,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig {
            horizon: 25,
            candidates: 256,
            stochastic_evals: 8,
            alpha: 0.2,
            temperature: 0.5,
            steer_noise_std: 0.3,
            throttle_noise_std: 0.3,
            barrier_delta: 0.05,
            track_barrier_weight: 1.0,
            accel_barrier_weight: 1.0,
            progress_weight: 1.0,
            smoothness_weight: 0.1,
            accel_limit: 4.0,
        }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.candidates == 0 || self.stochastic_evals == 0 {
            return Err(Error::config("MPPI counts must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha must lie in (0, 1]"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.barrier_delta > 0.0) {
            return Err(Error::config("barrier_delta must be positive"));
        }
        if self.steer_noise_std < 0.0 || self.throttle_noise_std < 0.0 {
            return Err(Error::config("noise stds must be non-negative"));
        }
        Ok(())
    }
}

/// How candidate sequences are scored: CVaR over stochastic rollouts
/// (risk-aware) or the cost of the single mean rollout (risk-unaware).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskMode {
    Cvar,
    Mean,
}

/// Nominal plan plus per-step diagnostics.
#[derive(Debug, Clone)]
pub struct Solution {
    pub actions: Vec<Action>,
    pub diag: StepDiag,
}

#[derive(Debug, Clone, Default)]
pub struct StepDiag {
    pub min_cost: f64,
    pub mean_cost: f64,
    /// Effective sample size of the weight distribution.
    pub ess: f64,
    /// Every candidate hit the divergence sentinel.
    pub no_solution: bool,
}

impl Solution {
    /// All-zero plan of the given horizon (cold start).
    pub fn fresh(horizon: usize) -> Self {
        Solution { actions: vec![Action::zero(); horizon], diag: StepDiag::default() }
    }
}

/// Relaxed logarithmic barrier: `-ln z` beyond `delta`, smooth exponential
/// extension below it. Finite for every real `z`, continuous and C1 at the
/// switch, strictly decreasing, convex.
pub fn relaxed_barrier(z: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    if z > delta {
        -z.ln()
    } else {
        (1.0 - z / delta).exp() - 1.0 - delta.ln()
    }
}

/// Deeply violated constraints would overflow the exponential branch of the
/// barrier to infinity and make catastrophic candidates incomparable; each
/// barrier term saturates here instead. Far beyond every value a sane
/// trajectory produces, far below the divergence sentinel.
const BARRIER_TERM_CAP: f64 = 1e9;

/// Task cost of one predicted trajectory. `states[0]` is the current state;
/// `states[1..]` are the predicted successors aligned with `actions`.
/// Per step: negative progress gain, barriers on the track corridor and the
/// lateral-acceleration limit, and an action-smoothness penalty.
pub fn trajectory_cost(
    states: &[VehicleState],
    actions: &[Action],
    track: &Track,
    cfg: &MppiConfig,
) -> f64 {
    assert_eq!(states.len(), actions.len() + 1, "states must include the current state");
    let h = actions.len();
    let delta = cfg.barrier_delta;
    let barrier = |z: f64| relaxed_barrier(z, delta).min(BARRIER_TERM_CAP);
    let mut cost = 0.0;

    let mut loc = track.locate(states[0].x, states[0].y);
    for t in 1..=h {
        let next = track.locate_near(states[t].x, states[t].y, loc.segment, 8);
        cost -= cfg.progress_weight * (next.progress - loc.progress);
        cost += cfg.track_barrier_weight * barrier(track.width() - next.offset);

        // Same central-difference operator as the executed-state metric,
        // with the window clamped inside the trajectory.
        let center = t.clamp(1, h.saturating_sub(1).max(1));
        let lat = if h >= 2 {
            lateral_accel(&states[center - 1..=center + 1]).unwrap_or(0.0)
        } else {
            0.0
        };
        cost += cfg.accel_barrier_weight * barrier(cfg.accel_limit - lat.abs());

        if t >= 2 {
            let da_s = actions[t - 1].steer - actions[t - 2].steer;
            let da_t = actions[t - 1].throttle - actions[t - 2].throttle;
            cost += cfg.smoothness_weight * (da_s * da_s + da_t * da_t);
        }
        loc = next;
    }
    cost
}

/// Cost of a rollout, accounting for divergence.
fn rollout_trajectory_cost(
    rollout: &Rollout,
    s0: &VehicleState,
    actions: &[Action],
    track: &Track,
    cfg: &MppiConfig,
) -> f64 {
    if rollout.diverged() {
        return DIVERGENCE_COST;
    }
    let mut states = Vec::with_capacity(rollout.states.len() + 1);
    states.push(*s0);
    states.extend_from_slice(&rollout.states);
    let cost = trajectory_cost(&states, actions, track, cfg);
    // Barrier overflow (deep constraint violation) collapses to the
    // sentinel; NaN cannot be allowed into the weight softmax.
    if cost.is_finite() {
        cost
    } else {
        DIVERGENCE_COST
    }
}

/// Mean of the `ceil(alpha * n)` largest costs (the CVaR tail average).
/// Summation runs in descending order; the acceptance oracle mirrors that.
pub fn cvar_tail_mean(costs: &[f64], alpha: f64) -> f64 {
    assert!(!costs.is_empty());
    assert!(alpha > 0.0 && alpha <= 1.0);
    let k = ((alpha * costs.len() as f64).ceil() as usize).clamp(1, costs.len());
    let mut sorted = costs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("costs must be comparable"));
    let mut sum = 0.0;
    for &c in &sorted[..k] {
        sum += c;
    }
    sum / k as f64
}

/// CVaR cost of one candidate action sequence: N stochastic rollouts from
/// the dynamics model, each scored by [`trajectory_cost`], averaged over the
/// worst `ceil(alpha * N)`. Rollout `e` draws from the substream
/// `(seed, e)`, so results do not depend on evaluation order.
pub fn cvar_cost(
    snap: &ModelSnapshot,
    track: &Track,
    cfg: &MppiConfig,
    s0: &VehicleState,
    ctx: &ContextVector,
    actions: &[Action],
    seed: u64,
) -> f64 {
    let n = cfg.stochastic_evals;
    let mut costs = Vec::with_capacity(n);
    for e in 0..n {
        let rollout = rollout_sample(snap, s0, actions, ctx, child_seed(seed, &[e as u64]));
        costs.push(rollout_trajectory_cost(&rollout, s0, actions, track, cfg));
    }
    if costs.iter().all(|&c| !c.is_finite()) {
        return DIVERGENCE_COST;
    }
    cvar_tail_mean(&costs, cfg.alpha)
}

/// Risk-unaware score: cost of the single mean-chained rollout.
pub fn mean_rollout_cost(
    snap: &ModelSnapshot,
    track: &Track,
    cfg: &MppiConfig,
    s0: &VehicleState,
    ctx: &ContextVector,
    actions: &[Action],
) -> f64 {
    let rollout = rollout_mean(snap, s0, actions, ctx);
    rollout_trajectory_cost(&rollout, s0, actions, track, cfg)
}

/// Information-theoretic MPPI weights: `w_i ∝ exp(-(J_i - J_min) / λ)`,
/// normalized. The min subtraction keeps the exponentials in range.
pub fn mppi_weights(costs: &[f64], temperature: f64) -> Vec<f64> {
    let j_min = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let mut weights: Vec<f64> =
        costs.iter().map(|&j| (-(j - j_min) / temperature).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= sum;
    }
    weights
}

/// One receding-horizon MPPI iteration.
///
/// Shifts the previous solution by one step, samples `K` perturbed
/// candidates around it, scores each under the chosen risk mode, and
/// returns the first action of the weight-averaged nominal sequence.
/// Candidate `i` perturbs with substream `(seed, "cand", i)` and evaluates
/// with substream `(seed, "eval", i)`; results are reproducible regardless
/// of scheduling.
pub fn mppi_step(
    snap: &ModelSnapshot,
    track: &Track,
    cfg: &MppiConfig,
    risk: RiskMode,
    s0: &VehicleState,
    ctx: &ContextVector,
    prev: &Solution,
    seed: u64,
) -> (Action, Solution) {
    debug_assert_eq!(prev.actions.len(), cfg.horizon);
    let h = cfg.horizon;
    let k = cfg.candidates;

    // Warm start: drop the executed action, repeat the last.
    let mut base = Vec::with_capacity(h);
    base.extend_from_slice(&prev.actions[1..]);
    base.push(*prev.actions.last().expect("non-empty plan"));

    let steer_noise = Normal::new(0.0, cfg.steer_noise_std).expect("validated std");
    let throttle_noise = Normal::new(0.0, cfg.throttle_noise_std).expect("validated std");

    let candidates: Vec<Vec<Action>> = (0..k)
        .map(|i| {
            let mut rng = substream(seed, &[0xca, i as u64]);
            base.iter()
                .map(|a| {
                    Action {
                        steer: a.steer + rng.sample(steer_noise),
                        throttle: a.throttle + rng.sample(throttle_noise),
                    }
                    .clamped()
                })
                .collect()
        })
        .collect();

    let costs: Vec<f64> = exec::map_indexed(k, |i| match risk {
        RiskMode::Cvar => cvar_cost(
            snap,
            track,
            cfg,
            s0,
            ctx,
            &candidates[i],
            child_seed(seed, &[0xeb, i as u64]),
        ),
        RiskMode::Mean => mean_rollout_cost(snap, track, cfg, s0, ctx, &candidates[i]),
    });

    let min_cost = costs.iter().copied().fold(f64::INFINITY, f64::min);
    if !min_cost.is_finite() {
        // Nothing the model trusts; stop and let the harness count a
        // no-progress incident.
        let diag = StepDiag { min_cost, mean_cost: min_cost, ess: 0.0, no_solution: true };
        return (Action::zero(), Solution { actions: vec![Action::zero(); h], diag });
    }

    let weights = mppi_weights(&costs, cfg.temperature);
    let mut nominal = vec![Action::zero(); h];
    for (cand, &w) in candidates.iter().zip(weights.iter()) {
        for (n, a) in nominal.iter_mut().zip(cand.iter()) {
            n.steer += w * a.steer;
            n.throttle += w * a.throttle;
        }
    }
    for a in &mut nominal {
        *a = a.clamped();
    }

    let mean_cost = costs.iter().sum::<f64>() / k as f64;
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let first = nominal[0];
    let diag = StepDiag { min_cost, mean_cost, ess, no_solution: false };
    (first, Solution { actions: nominal, diag })
}
