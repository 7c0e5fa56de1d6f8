//! The training loop: alternate data collection on freshly randomized
//! systems (driven by the current models under risk-aware MPPI) with
//! negative log-likelihood training of both networks end to end.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::config::AppConfig;
use crate::error::{Error, Result};
use crate::exec;
use crate::harness::{run_trial, PolicyMode, TrialSetup};
use crate::models::snapshot::ModelSnapshot;
use crate::models::{graph::window_nll, History, ModelConfig};
use crate::nn::{AdamState, ParamSet};
use crate::rng::{child_seed, substream};
use crate::sim::{sample_system, Transition};
use crate::track::generate_track;
use crate::autodiff::Tape;

/// Training-loop parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Collect/train cycles.
    pub cycles: usize,
    /// Fresh systems sampled per collection phase (never reused).
    pub systems_per_cycle: usize,
    /// Transitions collected per system.
    pub steps_per_system: usize,
    /// Optimizer updates per training phase.
    pub updates_per_cycle: usize,
    pub batch_size: usize,
    /// Consecutive transitions predicted per sample (trains the recurrent
    /// state in the same regime as rollouts).
    pub window: usize,
    pub learning_rate: f64,
    /// History prefixes are subsampled to this length during training.
    pub train_history_cap: usize,
    /// Feed a fixed zero context instead of the encoder (the from-scratch
    /// baseline of the experiments reuses the whole loop with this flag).
    pub zero_context: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            cycles: 10,
            systems_per_cycle: 4,
            steps_per_system: 300,
            updates_per_cycle: 300,
            batch_size: 32,
            window: 5,
            learning_rate: 3e-4,
            train_history_cap: 96,
            zero_context: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.window == 0 {
            return Err(Error::config("batch_size and window must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }
}

/// One contiguous stretch of driving on one system (resets split records).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub system_seed: u64,
    pub track_seed: u64,
    pub transitions: Vec<Transition>,
}

/// Collected experience across systems, persisted as JSON lines (one record
/// per line).
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transition_count(&self) -> usize {
        self.records.iter().map(|r| r.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.iter().all(|r| r.transitions.is_empty())
    }

    pub fn merge(&mut self, other: Dataset) {
        self.records.extend(other.records);
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load_jsonl(path: &Path) -> Result<Dataset> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(Dataset { records })
    }

    /// All `(record, start)` pairs that admit a window of at least one
    /// transition.
    fn window_index(&self) -> Vec<(usize, usize)> {
        let mut idx = Vec::new();
        for (r, rec) in self.records.iter().enumerate() {
            for start in 0..rec.transitions.len() {
                idx.push((r, start));
            }
        }
        idx
    }

    /// The strict history prefix for a window starting at `start` in record
    /// `rec`: every transition of the same system that lies strictly more
    /// than one step in the past, in collection order.
    fn history_prefix(&self, rec: usize, start: usize) -> Vec<Transition> {
        let system = self.records[rec].system_seed;
        let mut prefix = Vec::new();
        for (r, other) in self.records.iter().enumerate() {
            if other.system_seed != system || r > rec {
                continue;
            }
            if r < rec {
                prefix.extend_from_slice(&other.transitions);
            } else {
                let end = start.saturating_sub(1);
                prefix.extend_from_slice(&other.transitions[..end]);
            }
        }
        prefix
    }
}

/// Drives freshly sampled systems with the frozen current models and
/// returns the recorded experience. Each system starts from an empty
/// history and adapts at every step; tracks are regenerated until the
/// requested number of transitions has been collected. Simulator divergence
/// skips to the next system.
pub fn collect_phase(
    cfg: &AppConfig,
    snapshot: &ModelSnapshot,
    n_systems: usize,
    steps_per_system: usize,
    seed: u64,
) -> Result<Dataset> {
    let mode = if cfg.training.zero_context {
        PolicyMode::zero_context()
    } else {
        PolicyMode::adaptive_risk_aware()
    };
    let per_system: Vec<Result<Dataset>> = exec::map_indexed(n_systems, |j| {
        let sys_seed = child_seed(seed, &[0xc0, j as u64]);
        let system = sample_system(sys_seed, &cfg.ranges)?;
        let mut out = Dataset::new();
        let mut history = History::new();
        let mut collected = 0;
        let mut attempt = 0u64;
        while collected < steps_per_system {
            let track_seed = child_seed(seed, &[0xc1, j as u64, attempt]);
            let track = generate_track(track_seed, &cfg.track)?;
            let setup = TrialSetup {
                system: &system,
                track: &track,
                snapshot,
                mode,
                adapt: true,
                initial_history: history.clone(),
                mppi: &cfg.controller,
                run: &cfg.run,
                seed: child_seed(seed, &[0xc2, j as u64, attempt]),
                policy_override: None,
            };
            match run_trial(&setup) {
                Ok((metrics, new_history)) => {
                    history = new_history;
                    for segment in metrics.transitions {
                        collected += segment.len();
                        out.records.push(TrajectoryRecord {
                            system_seed: sys_seed,
                            track_seed,
                            transitions: segment,
                        });
                    }
                }
                Err(Error::SimDiverged { step }) => {
                    // Log and move on; the remaining budget is abandoned.
                    eprintln!("system {sys_seed}: simulation diverged at step {step}, skipping");
                    break;
                }
                Err(e) => return Err(e),
            }
            attempt += 1;
            if attempt > 64 {
                break;
            }
        }
        Ok(out)
    });
    let mut dataset = Dataset::new();
    for d in per_system {
        dataset.merge(d?);
    }
    Ok(dataset)
}

/// One gradient sample: loss value plus named parameter gradients.
struct SampleGrad {
    loss: f64,
    grads: Vec<(String, Vec<f64>)>,
}

fn sample_gradient(
    dataset: &Dataset,
    params: &ParamSet,
    model_cfg: &ModelConfig,
    tcfg: &TrainingConfig,
    index: &[(usize, usize)],
    sample_seed: u64,
) -> SampleGrad {
    let mut rng = substream(sample_seed, &[]);
    let (rec, start) = index[rng.random_range(0..index.len())];
    let record = &dataset.records[rec];
    let end = (start + tcfg.window).min(record.transitions.len());
    let window = &record.transitions[start..end];

    let history_feats = if tcfg.zero_context {
        Vec::new()
    } else {
        let prefix = History::from_transitions(dataset.history_prefix(rec, start));
        prefix.capped_features(tcfg.train_history_cap, &mut rng)
    };

    let mut tape = Tape::new();
    let loss = window_nll(&mut tape, params, model_cfg, &history_feats, window, tcfg.zero_context);
    let loss_val = tape.scalar(loss);
    if !loss_val.is_finite() {
        return SampleGrad { loss: loss_val, grads: Vec::new() };
    }
    tape.backward(loss);
    let grads = tape
        .param_grads()
        .map(|(name, g)| (name.to_string(), g.to_vec()))
        .collect();
    SampleGrad { loss: loss_val, grads }
}

/// Runs `updates` optimizer steps over the dataset. Each update samples a
/// batch of (system, time-step) windows, encodes each window's strict
/// history prefix, and applies one Adam step on the mean NLL. Returns the
/// per-update mean loss trace.
///
/// A non-finite batch is skipped; the first one also halves the learning
/// rate. Several in a row abort training.
pub fn train_phase(
    dataset: &Dataset,
    params: &mut ParamSet,
    model_cfg: &ModelConfig,
    tcfg: &TrainingConfig,
    adam: &mut AdamState,
    updates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    tcfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("training requires a non-empty dataset"));
    }
    let index = dataset.window_index();
    let mut trace = Vec::with_capacity(updates);
    let mut lr_halved = false;
    let mut consecutive_failures = 0;

    for update in 0..updates {
        let batch: Vec<SampleGrad> = {
            let params_ref = &*params;
            exec::map_indexed(tcfg.batch_size, |b| {
                sample_gradient(
                    dataset,
                    params_ref,
                    model_cfg,
                    tcfg,
                    &index,
                    child_seed(seed, &[0x7e, update as u64, b as u64]),
                )
            })
        };
        let batch_loss =
            batch.iter().map(|s| s.loss).sum::<f64>() / tcfg.batch_size as f64;
        if !batch_loss.is_finite() {
            consecutive_failures += 1;
            if !lr_halved {
                adam.lr *= 0.5;
                lr_halved = true;
            }
            if consecutive_failures > 5 {
                return Err(Error::Numerical(format!(
                    "training aborted: {consecutive_failures} non-finite batches in a row"
                )));
            }
            trace.push(f64::NAN);
            continue;
        }
        consecutive_failures = 0;

        params.zero_grads();
        let scale = 1.0 / tcfg.batch_size as f64;
        // Merge worker gradients in index order so results are independent
        // of scheduling.
        for sample in &batch {
            for (name, grad) in &sample.grads {
                params.accumulate_grad_vec(name, grad);
            }
        }
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
        }
        adam.step(params)?;
        trace.push(batch_loss);
    }
    Ok(trace)
}

/// Mean NLL over `n_samples` windows drawn from a dataset, without touching
/// the parameters. Used for held-out evaluation.
pub fn evaluate_nll(
    dataset: &Dataset,
    params: &ParamSet,
    model_cfg: &ModelConfig,
    tcfg: &TrainingConfig,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::config("evaluation requires a non-empty dataset"));
    }
    let index = dataset.window_index();
    let losses: Vec<f64> = exec::map_indexed(n_samples, |i| {
        let mut rng = substream(seed, &[0x3e, i as u64]);
        let (rec, start) = index[rng.random_range(0..index.len())];
        let record = &dataset.records[rec];
        let end = (start + tcfg.window).min(record.transitions.len());
        let window = &record.transitions[start..end];
        let history_feats = if tcfg.zero_context {
            Vec::new()
        } else {
            let prefix = History::from_transitions(dataset.history_prefix(rec, start));
            prefix.capped_features(tcfg.train_history_cap, &mut rng)
        };
        let mut tape = Tape::new();
        let loss =
            window_nll(&mut tape, params, model_cfg, &history_feats, window, tcfg.zero_context);
        tape.scalar(loss)
    });
    Ok(losses.iter().sum::<f64>() / n_samples as f64)
}

/// Per-cycle summary of a full training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub dataset_transitions: usize,
    pub mean_loss_first_10: f64,
    pub mean_loss_last_10: f64,
}

/// The full loop: `cycles` alternations of collection (on fresh systems)
/// and training (on everything collected so far). Checkpoints are written
/// by the caller between cycles via the callback.
pub fn run_training(
    cfg: &AppConfig,
    seed: u64,
    mut on_cycle: impl FnMut(usize, &ParamSet, &CycleReport) -> Result<()>,
) -> Result<(ParamSet, Dataset, Vec<CycleReport>)> {
    cfg.validate()?;
    let mut params = crate::models::init_params(&cfg.model, child_seed(seed, &[0x11]))?;
    let mut adam = AdamState::new(cfg.training.learning_rate);
    let mut dataset = Dataset::new();
    let mut reports = Vec::new();

    for cycle in 0..cfg.training.cycles {
        let snapshot = ModelSnapshot::from_params(&cfg.model, &params);
        let increment = collect_phase(
            cfg,
            &snapshot,
            cfg.training.systems_per_cycle,
            cfg.training.steps_per_system,
            child_seed(seed, &[0x22, cycle as u64]),
        )?;
        dataset.merge(increment);

        let trace = train_phase(
            &dataset,
            &mut params,
            &cfg.model,
            &cfg.training,
            &mut adam,
            cfg.training.updates_per_cycle,
            child_seed(seed, &[0x33, cycle as u64]),
        )?;
        let mean_of = |v: Vec<f64>| -> f64 {
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let head: Vec<f64> = trace.iter().take(10).copied().filter(|v| v.is_finite()).collect();
        let tail: Vec<f64> =
            trace.iter().rev().take(10).copied().filter(|v| v.is_finite()).collect();
        let report = CycleReport {
            cycle,
            dataset_transitions: dataset.transition_count(),
            mean_loss_first_10: mean_of(head),
            mean_loss_last_10: mean_of(tail),
        };
        on_cycle(cycle, &params, &report)?;
        reports.push(report);
    }
    Ok((params, dataset, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::init_params;
    use crate::sim::{Action, VehicleState};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            context_dim: 4,
            sit_layers: 1,
            sit_heads: 2,
            sit_width: 8,
            sit_ffn: 8,
            adm_hidden: 8,
            adm_head_hidden: 8,
            history_cap: 16,
            scale_floor: 1e-4,
        }
    }

    fn synthetic_dataset(systems: usize, steps: usize) -> Dataset {
        // Simple deterministic dynamics so the NLL has learnable structure.
        let mut records = Vec::new();
        for sys in 0..systems {
            let gain = 0.1 + 0.05 * sys as f64;
            let mut s = VehicleState::origin();
            let mut transitions = Vec::new();
            for t in 0..steps {
                let a = Action::new(((t as f64) * 0.37).sin(), 0.6);
                let s_next = VehicleState {
                    x: s.x + 0.1 * s.v_long,
                    y: s.y,
                    yaw: s.yaw,
                    v_long: s.v_long + gain * (a.throttle - 0.1 * s.v_long),
                    v_lat: 0.0,
                    yaw_rate: gain * a.steer,
                };
                transitions.push(Transition { s, a, s_next });
                s = s_next;
            }
            records.push(TrajectoryRecord {
                system_seed: sys as u64,
                track_seed: 0,
                transitions,
            });
        }
        Dataset { records }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model_cfg = tiny_model();
        let mut params = init_params(&model_cfg, 1).unwrap();
        let mut adam = AdamState::new(1e-3);
        let tcfg = TrainingConfig::default();
        let err = train_phase(
            &Dataset::new(),
            &mut params,
            &model_cfg,
            &tcfg,
            &mut adam,
            1,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn history_prefix_respects_strict_causality() {
        let ds = synthetic_dataset(2, 20);
        // Window at record 0 (system 0), start 7: prefix must contain
        // transitions 0..6 of that record only (i < t-1).
        let prefix = ds.history_prefix(0, 7);
        assert_eq!(prefix.len(), 6);
        for (i, t) in prefix.iter().enumerate() {
            assert_eq!(t.s.x, ds.records[0].transitions[i].s.x);
        }
        // Start 0 and 1 both give an empty prefix.
        assert!(ds.history_prefix(0, 0).is_empty());
        assert!(ds.history_prefix(0, 1).is_empty());
        // Records of other systems never leak in.
        let p2 = ds.history_prefix(1, 5);
        assert_eq!(p2.len(), 4);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let model_cfg = tiny_model();
        let mut params = init_params(&model_cfg, 2).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(0.0);
        let tcfg = TrainingConfig {
            batch_size: 4,
            window: 3,
            train_history_cap: 8,
            ..TrainingConfig::default()
        };
        let ds = synthetic_dataset(2, 15);
        train_phase(&ds, &mut params, &model_cfg, &tcfg, &mut adam, 3, 7).unwrap();
        for (name, t) in params.iter() {
            assert_eq!(t.data, before.get(name).data, "{name} changed under lr 0");
        }
    }

    #[test]
    fn training_is_reproducible() {
        let model_cfg = tiny_model();
        let tcfg = TrainingConfig {
            batch_size: 4,
            window: 3,
            train_history_cap: 8,
            learning_rate: 1e-3,
            ..TrainingConfig::default()
        };
        let ds = synthetic_dataset(2, 15);
        let run = || {
            let mut params = init_params(&model_cfg, 5).unwrap();
            let mut adam = AdamState::new(tcfg.learning_rate);
            let trace =
                train_phase(&ds, &mut params, &model_cfg, &tcfg, &mut adam, 5, 99).unwrap();
            (trace, params)
        };
        let (t1, p1) = run();
        let (t2, p2) = run();
        assert_eq!(t1, t2);
        for ((n1, a), (_, b)) in p1.iter().zip(p2.iter()) {
            assert_eq!(a.data, b.data, "{n1} differs between identical runs");
        }
    }

    #[test]
    fn loss_decreases_on_a_fixed_dataset() {
        let model_cfg = tiny_model();
        let tcfg = TrainingConfig {
            batch_size: 8,
            window: 4,
            train_history_cap: 12,
            learning_rate: 3e-3,
            ..TrainingConfig::default()
        };
        let ds = synthetic_dataset(3, 40);
        let mut params = init_params(&model_cfg, 8).unwrap();
        let mut adam = AdamState::new(tcfg.learning_rate);
        let trace =
            train_phase(&ds, &mut params, &model_cfg, &tcfg, &mut adam, 500, 13).unwrap();
        let early: f64 = trace[..20].iter().sum::<f64>() / 20.0;
        let late: f64 = trace[trace.len() - 20..].iter().sum::<f64>() / 20.0;
        assert!(
            late < early,
            "smoothed loss should fall: first 20 avg {early}, last 20 avg {late}"
        );
    }

    #[test]
    fn dataset_jsonl_roundtrip() {
        let ds = synthetic_dataset(2, 5);
        let dir = std::env::temp_dir().join("apex_ds_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ds.jsonl");
        ds.save_jsonl(&path).unwrap();
        let back = Dataset::load_jsonl(&path).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        assert_eq!(back.transition_count(), ds.transition_count());
        assert_eq!(
            back.records[1].transitions[3].s_next.v_long,
            ds.records[1].transitions[3].s_next.v_long
        );
        std::fs::remove_file(&path).ok();
    }
}
