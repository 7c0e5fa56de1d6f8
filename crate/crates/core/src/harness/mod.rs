//! Experiment harness: the trial runner with reset rules and metrics, the
//! two headline experiments, and report emission.

pub mod artifacts;
pub mod experiments;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::controller::{mppi_step, MppiConfig, RiskMode, Solution};
use crate::error::{Error, Result};
use crate::models::snapshot::ModelSnapshot;
use crate::models::{ContextVector, History};
use crate::rng::{child_seed, substream};
use crate::sim::{Action, SystemParams, Transition, VehicleSim, VehicleState};
use crate::track::{lateral_accel, Track};

/// Where the controller's context vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Re-encode the live history at every control step.
    Live,
    /// A fixed zero vector (baselines).
    Zero,
}

/// One of the four evaluated policies. All modes share every component;
/// they differ only in context zeroing and CVaR-vs-mean rollouts (the
/// checkpoint they run is chosen by the caller).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyMode {
    pub context: ContextMode,
    pub risk: RiskMode,
}

impl PolicyMode {
    pub fn adaptive_risk_aware() -> Self {
        PolicyMode { context: ContextMode::Live, risk: RiskMode::Cvar }
    }

    pub fn adaptive_risk_unaware() -> Self {
        PolicyMode { context: ContextMode::Live, risk: RiskMode::Mean }
    }

    /// The from-scratch baseline: its own checkpoint, zero context.
    pub fn zero_context() -> Self {
        PolicyMode { context: ContextMode::Zero, risk: RiskMode::Cvar }
    }

    /// The fixed-nominal baseline: a checkpoint trained on the nominal
    /// system only, zero context, no adaptation.
    pub fn nominal_fixed() -> Self {
        PolicyMode { context: ContextMode::Zero, risk: RiskMode::Cvar }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "adaptive-risk-aware" => Ok(Self::adaptive_risk_aware()),
            "adaptive-risk-unaware" => Ok(Self::adaptive_risk_unaware()),
            "zero-context" => Ok(Self::zero_context()),
            "nominal-fixed" => Ok(Self::nominal_fixed()),
            other => Err(Error::config(format!(
                "unknown policy mode {other}; expected adaptive-risk-aware, \
                 adaptive-risk-unaware, zero-context, or nominal-fixed"
            ))),
        }
    }
}

/// Run-loop parameters: budgets, reset rules, penalties.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Hard step limit per trial; exhausting it flags the lap incomplete.
    pub step_budget: usize,
    /// A reset fires when progress gain over this many steps...
    pub no_progress_window: usize,
    /// ...falls below this many meters.
    pub no_progress_min_gain: f64,
    /// Steps added per reset to the penalized lap time (100 = 10 s).
    pub reset_penalty_steps: usize,
    /// Whether the headline lap-time column includes the penalty (both raw
    /// and penalized are always reported).
    pub apply_reset_penalty: bool,
    /// Lap completes at `total_length - finish_margin`.
    pub finish_margin: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            step_budget: 400,
            no_progress_window: 20,
            no_progress_min_gain: 0.05,
            reset_penalty_steps: 100,
            apply_reset_penalty: true,
            finish_margin: 0.1,
        }
    }
}

/// Per-step log entry (state, action, context magnitude, cost diagnostics).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub state: VehicleState,
    pub action: Action,
    pub context_norm: f64,
    pub min_cost: f64,
    pub ess: f64,
    pub progress: f64,
    pub offset: f64,
    pub lat_accel: f64,
}

/// Outcome of one trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Steps until lap completion, or the budget if incomplete.
    pub lap_steps: usize,
    pub completed: bool,
    pub off_track_count: usize,
    pub lat_accel_count: usize,
    pub no_progress_incidents: usize,
    pub resets: usize,
    /// `lap_steps + resets * reset_penalty_steps`.
    pub penalized_steps: usize,
    pub steps: Vec<StepLog>,
    /// Contiguous trajectories, split at resets; the dataset view of the
    /// run. Reset teleports never appear as transitions.
    pub transitions: Vec<Vec<Transition>>,
}

impl RunMetrics {
    /// Constraint violations: off-track plus lateral-acceleration events.
    pub fn violations(&self) -> usize {
        self.off_track_count + self.lat_accel_count
    }
}

/// Everything one trial needs.
pub struct TrialSetup<'a> {
    pub system: &'a SystemParams,
    pub track: &'a Track,
    pub snapshot: &'a ModelSnapshot,
    pub mode: PolicyMode,
    /// Grow the history during the run (adaptation on/off).
    pub adapt: bool,
    pub initial_history: History,
    pub mppi: &'a MppiConfig,
    pub run: &'a RunConfig,
    pub seed: u64,
    /// Replaces the controller output at every step; degenerate-policy
    /// tests only.
    pub policy_override: Option<Action>,
}

/// Runs one trial: drive the simulator under the chosen policy at 10 Hz,
/// count violations and no-progress incidents, reset to the centerline at
/// the furthest prior progress when they fire, and stop at lap completion
/// or budget exhaustion. Returns the metrics and the (possibly grown)
/// history.
///
/// Determinism: every random draw derives from `setup.seed`; identical
/// setups produce identical metrics byte for byte.
pub fn run_trial(setup: &TrialSetup) -> Result<(RunMetrics, History)> {
    setup.mppi.validate()?;
    let track = setup.track;
    let total = track.total_length();
    let cap = setup.snapshot.cfg.history_cap;

    let mut sim = VehicleSim::new(
        setup.system.clone(),
        track.centered_state(0.0),
        child_seed(setup.seed, &[0x01]),
    );
    let mut history = setup.initial_history.clone();
    let mut solution = Solution::fresh(setup.mppi.horizon);
    let zero_ctx = ContextVector::zeros(setup.snapshot.cfg.context_dim);

    let mut metrics = RunMetrics {
        lap_steps: setup.run.step_budget,
        completed: false,
        off_track_count: 0,
        lat_accel_count: 0,
        no_progress_incidents: 0,
        resets: 0,
        penalized_steps: 0,
        steps: Vec::with_capacity(setup.run.step_budget),
        transitions: vec![Vec::new()],
    };

    // Rolling state for the executed-trajectory metrics, cleared on reset.
    let mut recent: Vec<VehicleState> = vec![*sim.state()];
    let mut progress_max: f64 = track.locate(sim.state().x, sim.state().y).progress;
    let mut window_progress: Vec<f64> = vec![progress_max];

    for step_idx in 0..setup.run.step_budget {
        let ctx = match setup.mode.context {
            ContextMode::Zero => zero_ctx.clone(),
            ContextMode::Live => {
                let mut rng = substream(setup.seed, &[0x02, step_idx as u64]);
                let feats = history.capped_features(cap, &mut rng);
                setup.snapshot.sit_encode(&feats)
            }
        };

        let (action, new_solution) = match setup.policy_override {
            Some(a) => (a, Solution::fresh(setup.mppi.horizon)),
            None => mppi_step(
                setup.snapshot,
                track,
                setup.mppi,
                setup.mode.risk,
                sim.state(),
                &ctx,
                &solution,
                child_seed(setup.seed, &[0x03, step_idx as u64]),
            ),
        };
        solution = new_solution;

        let transition = sim.step(action)?;
        let s_next = transition.s_next;
        recent.push(s_next);
        if recent.len() > 3 {
            recent.remove(0);
        }
        let lat = lateral_accel(&recent).unwrap_or(0.0);
        let loc = track.locate(s_next.x, s_next.y);
        progress_max = progress_max.max(loc.progress);
        window_progress.push(progress_max);

        if setup.adapt {
            history.push(transition);
        }
        metrics.transitions.last_mut().expect("segment list non-empty").push(transition);

        metrics.steps.push(StepLog {
            step: step_idx,
            state: s_next,
            action,
            context_norm: ctx.norm(),
            min_cost: solution.diag.min_cost,
            ess: solution.diag.ess,
            progress: loc.progress,
            offset: loc.offset,
            lat_accel: lat,
        });

        if progress_max >= total - setup.run.finish_margin {
            metrics.completed = true;
            metrics.lap_steps = step_idx + 1;
            break;
        }

        let off_track = loc.offset > track.width();
        let lat_violation = lat.abs() > setup.mppi.accel_limit;
        let no_progress = window_progress.len() > setup.run.no_progress_window
            && window_progress[window_progress.len() - 1]
                - window_progress[window_progress.len() - 1 - setup.run.no_progress_window]
                < setup.run.no_progress_min_gain;

        if off_track || lat_violation || no_progress {
            if off_track {
                metrics.off_track_count += 1;
            }
            if lat_violation {
                metrics.lat_accel_count += 1;
            }
            if !off_track && !lat_violation {
                metrics.no_progress_incidents += 1;
            }
            metrics.resets += 1;
            let reset_state = track.centered_state(progress_max);
            sim.reset_to(reset_state);
            solution = Solution::fresh(setup.mppi.horizon);
            recent = vec![reset_state];
            window_progress = vec![progress_max];
            metrics.transitions.push(Vec::new());
        }
    }

    metrics.transitions.retain(|seg| !seg.is_empty());
    metrics.penalized_steps = metrics.lap_steps + metrics.resets * setup.run.reset_penalty_steps;
    Ok((metrics, history))
}
