//! The two headline experiments: the adaptation curve (adaptive vs.
//! from-scratch vs. fixed-nominal baselines across history budgets) and the
//! risk ablation (CVaR vs. mean scoring over repeated runs on one track).

use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::models::snapshot::ModelSnapshot;
use crate::models::History;
use crate::nn::AdamState;
use crate::rng::child_seed;
use crate::sim::sample_system;
use crate::track::generate_track;
use crate::training::{train_phase, Dataset, TrainingConfig, TrajectoryRecord};

use super::{run_trial, PolicyMode, RunMetrics, TrialSetup};

/// Scales and knobs of the two experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Held-out systems for the adaptation curve.
    pub curve_systems: usize,
    /// Adaptation budgets (collected transitions) evaluated on the test
    /// track; the last one is the collection target.
    pub curve_budgets: Vec<usize>,
    /// Systems for the risk ablation.
    pub ablation_systems: usize,
    /// Consecutive runs per system, history carried across runs.
    pub ablation_runs: usize,
    /// From-scratch baseline: retrain cadence in collected steps.
    pub scratch_retrain_every: usize,
    /// Optimizer updates per retrain.
    pub scratch_updates: usize,
    pub scratch_batch: usize,
    pub scratch_lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            curve_systems: 20,
            curve_budgets: vec![0, 50, 100, 250, 500],
            ablation_systems: 30,
            ablation_runs: 5,
            scratch_retrain_every: 250,
            scratch_updates: 150,
            scratch_batch: 16,
            scratch_lr: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.curve_budgets.is_empty() {
            return Err(Error::config("curve_budgets must not be empty"));
        }
        let mut prev = None;
        for &b in &self.curve_budgets {
            if let Some(p) = prev {
                if b <= p {
                    return Err(Error::config("curve_budgets must be strictly increasing"));
                }
            }
            prev = Some(b);
        }
        if self.ablation_runs == 0 {
            return Err(Error::config("ablation_runs must be at least 1"));
        }
        Ok(())
    }

    pub fn max_budget(&self) -> usize {
        *self.curve_budgets.last().expect("validated non-empty")
    }
}

/// One row of the experiment tables (one trial).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub experiment: String,
    pub system_seed: u64,
    pub track_seed: u64,
    pub method: String,
    /// Curve: adaptation budget in transitions. Ablation: run index.
    pub budget: usize,
    pub lap_steps: usize,
    pub penalized_steps: usize,
    pub completed: bool,
    pub off_track: usize,
    pub lat_accel: usize,
    pub violations: usize,
    pub no_progress: usize,
    pub resets: usize,
}

impl TrialRow {
    fn from_metrics(
        experiment: &str,
        system_seed: u64,
        track_seed: u64,
        method: &str,
        budget: usize,
        m: &RunMetrics,
    ) -> Self {
        TrialRow {
            experiment: experiment.to_string(),
            system_seed,
            track_seed,
            method: method.to_string(),
            budget,
            lap_steps: m.lap_steps,
            penalized_steps: m.penalized_steps,
            completed: m.completed,
            off_track: m.off_track_count,
            lat_accel: m.lat_accel_count,
            violations: m.violations(),
            no_progress: m.no_progress_incidents,
            resets: m.resets,
        }
    }
}

/// Drives a system with the given policy on freshly generated tracks until
/// `target` transitions are in the history. Returns the history.
fn collect_adaptation_history(
    cfg: &AppConfig,
    snapshot: &ModelSnapshot,
    system_seed: u64,
    target: usize,
    seed: u64,
) -> Result<History> {
    let system = sample_system(system_seed, &cfg.ranges)?;
    let mut history = History::new();
    let mut attempt = 0u64;
    while history.len() < target && attempt <= 64 {
        let track = generate_track(child_seed(seed, &[0xad, attempt]), &cfg.track)?;
        let setup = TrialSetup {
            system: &system,
            track: &track,
            snapshot,
            mode: PolicyMode::adaptive_risk_aware(),
            adapt: true,
            initial_history: history.clone(),
            mppi: &cfg.controller,
            run: &cfg.run,
            seed: child_seed(seed, &[0xae, attempt]),
            policy_override: None,
        };
        let (_, new_history) = run_trial(&setup)?;
        history = new_history;
        attempt += 1;
    }
    if history.len() < target {
        return Err(Error::config(format!(
            "could not collect {target} adaptation transitions for system {system_seed}"
        )));
    }
    Ok(history)
}

/// From-scratch baseline for one system: a freshly initialized model driven
/// with zero context, retrained on its own data every
/// `scratch_retrain_every` collected steps, up to `target` steps total.
fn train_scratch_model(
    cfg: &AppConfig,
    system_seed: u64,
    target: usize,
    seed: u64,
) -> Result<ModelSnapshot> {
    let system = sample_system(system_seed, &cfg.ranges)?;
    let mut params = crate::models::init_params(&cfg.model, child_seed(seed, &[0x5c]))?;
    let tcfg = TrainingConfig {
        batch_size: cfg.experiment.scratch_batch,
        learning_rate: cfg.experiment.scratch_lr,
        zero_context: true,
        ..cfg.training.clone()
    };
    let mut adam = AdamState::new(tcfg.learning_rate);
    let mut dataset = Dataset::new();
    let mut collected = 0usize;
    let mut next_retrain = cfg.experiment.scratch_retrain_every;
    let mut attempt = 0u64;

    while collected < target && attempt <= 64 {
        let snapshot = ModelSnapshot::from_params(&cfg.model, &params);
        let track_seed = child_seed(seed, &[0x5d, attempt]);
        let track = generate_track(track_seed, &cfg.track)?;
        let setup = TrialSetup {
            system: &system,
            track: &track,
            snapshot: &snapshot,
            mode: PolicyMode::zero_context(),
            adapt: false,
            initial_history: History::new(),
            mppi: &cfg.controller,
            run: &cfg.run,
            seed: child_seed(seed, &[0x5e, attempt]),
            policy_override: None,
        };
        match run_trial(&setup) {
            Ok((metrics, _)) => {
                for segment in metrics.transitions {
                    collected += segment.len();
                    dataset.records.push(TrajectoryRecord {
                        system_seed,
                        track_seed,
                        transitions: segment,
                    });
                }
            }
            Err(Error::SimDiverged { .. }) => break,
            Err(e) => return Err(e),
        }
        if collected >= next_retrain || collected >= target {
            if !dataset.is_empty() {
                train_phase(
                    &dataset,
                    &mut params,
                    &cfg.model,
                    &tcfg,
                    &mut adam,
                    cfg.experiment.scratch_updates,
                    child_seed(seed, &[0x5f, next_retrain as u64]),
                )?;
            }
            next_retrain += cfg.experiment.scratch_retrain_every;
        }
        attempt += 1;
    }
    Ok(ModelSnapshot::from_params(&cfg.model, &params))
}

/// Adaptation-curve experiment: per held-out system, evaluate the adaptive
/// controller on a test track at fixed history budgets (continuing to adapt
/// during the run), the from-scratch baseline after its full collection
/// budget, and the fixed-nominal baseline.
pub fn experiment_adaptation_curve(
    cfg: &AppConfig,
    snapshot: &ModelSnapshot,
    nominal: &ModelSnapshot,
    seed: u64,
) -> Result<Vec<TrialRow>> {
    cfg.experiment.validate()?;
    let n = cfg.experiment.curve_systems;
    let max_budget = cfg.experiment.max_budget();

    let per_system: Vec<Result<Vec<TrialRow>>> = exec::map_indexed(n, |i| {
        let mut rows = Vec::new();
        let system_seed = child_seed(seed, &[0xa0, i as u64]);
        let system = sample_system(system_seed, &cfg.ranges)?;
        let test_track_seed = child_seed(seed, &[0xa1, i as u64]);
        let test_track = generate_track(test_track_seed, &cfg.track)?;

        let history = collect_adaptation_history(
            cfg,
            snapshot,
            system_seed,
            max_budget,
            child_seed(seed, &[0xa2, i as u64]),
        )?;

        for &budget in &cfg.experiment.curve_budgets {
            let setup = TrialSetup {
                system: &system,
                track: &test_track,
                snapshot,
                mode: PolicyMode::adaptive_risk_aware(),
                adapt: true,
                initial_history: history.truncated(budget),
                mppi: &cfg.controller,
                run: &cfg.run,
                seed: child_seed(seed, &[0xa3, i as u64, budget as u64]),
                policy_override: None,
            };
            let (metrics, _) = run_trial(&setup)?;
            rows.push(TrialRow::from_metrics(
                "curve",
                system_seed,
                test_track_seed,
                "adaptive",
                budget,
                &metrics,
            ));
        }

        let scratch = train_scratch_model(
            cfg,
            system_seed,
            max_budget,
            child_seed(seed, &[0xa4, i as u64]),
        )?;
        let setup = TrialSetup {
            system: &system,
            track: &test_track,
            snapshot: &scratch,
            mode: PolicyMode::zero_context(),
            adapt: false,
            initial_history: History::new(),
            mppi: &cfg.controller,
            run: &cfg.run,
            seed: child_seed(seed, &[0xa5, i as u64]),
            policy_override: None,
        };
        let (metrics, _) = run_trial(&setup)?;
        rows.push(TrialRow::from_metrics(
            "curve",
            system_seed,
            test_track_seed,
            "scratch",
            max_budget,
            &metrics,
        ));

        let setup = TrialSetup {
            system: &system,
            track: &test_track,
            snapshot: nominal,
            mode: PolicyMode::nominal_fixed(),
            adapt: false,
            initial_history: History::new(),
            mppi: &cfg.controller,
            run: &cfg.run,
            seed: child_seed(seed, &[0xa6, i as u64]),
            policy_override: None,
        };
        let (metrics, _) = run_trial(&setup)?;
        rows.push(TrialRow::from_metrics(
            "curve",
            system_seed,
            test_track_seed,
            "nominal",
            0,
            &metrics,
        ));
        Ok(rows)
    });

    let mut rows = Vec::new();
    for r in per_system {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Risk-ablation experiment: per system, five consecutive runs down the
/// same track for each scoring mode, starting from zero observations with
/// the history carried across runs.
pub fn experiment_risk_ablation(
    cfg: &AppConfig,
    snapshot: &ModelSnapshot,
    seed: u64,
) -> Result<Vec<TrialRow>> {
    cfg.experiment.validate()?;
    let n = cfg.experiment.ablation_systems;
    let modes = [
        ("risk-aware", PolicyMode::adaptive_risk_aware()),
        ("risk-unaware", PolicyMode::adaptive_risk_unaware()),
    ];

    let per_system: Vec<Result<Vec<TrialRow>>> = exec::map_indexed(n, |i| {
        let mut rows = Vec::new();
        let system_seed = child_seed(seed, &[0xb0, i as u64]);
        let system = sample_system(system_seed, &cfg.ranges)?;
        let track_seed = child_seed(seed, &[0xb1, i as u64]);
        let track = generate_track(track_seed, &cfg.track)?;

        for (mode_idx, (name, mode)) in modes.iter().enumerate() {
            let mut history = History::new();
            for run_idx in 0..cfg.experiment.ablation_runs {
                let setup = TrialSetup {
                    system: &system,
                    track: &track,
                    snapshot,
                    mode: *mode,
                    adapt: true,
                    initial_history: history,
                    mppi: &cfg.controller,
                    run: &cfg.run,
                    seed: child_seed(
                        seed,
                        &[0xb2, i as u64, mode_idx as u64, run_idx as u64],
                    ),
                    policy_override: None,
                };
                let (metrics, new_history) = run_trial(&setup)?;
                history = new_history;
                rows.push(TrialRow::from_metrics(
                    "ablation",
                    system_seed,
                    track_seed,
                    name,
                    run_idx,
                    &metrics,
                ));
            }
        }
        Ok(rows)
    });

    let mut rows = Vec::new();
    for r in per_system {
        rows.extend(r?);
    }
    Ok(rows)
}
