//! Rough wall-clock probe of the hot paths; run with --release.

use std::time::Instant;

use apex_core::config::AppConfig;
use apex_core::controller::{mppi_step, RiskMode, Solution};
use apex_core::harness::{run_trial, PolicyMode, TrialSetup};
use apex_core::models::snapshot::ModelSnapshot;
use apex_core::models::{featurize_transition, init_params, ContextVector, History};
use apex_core::sim::{sample_system, Action, VehicleSim, VehicleState};
use apex_core::track::generate_track;

fn main() {
    let mut cfg = AppConfig::default();
    cfg.model.history_cap = 128;
    cfg.controller.candidates = 64;
    cfg.controller.stochastic_evals = 8;
    cfg.controller.horizon = 25;

    let params = init_params(&cfg.model, 1).unwrap();
    let snap = ModelSnapshot::from_params(&cfg.model, &params);
    let track = generate_track(1, &cfg.track).unwrap();
    let system = sample_system(1, &cfg.ranges).unwrap();

    // History of 128 transitions from real driving.
    let mut sim = VehicleSim::new(system.clone(), VehicleState::origin(), 7);
    let mut history = History::new();
    for i in 0..128 {
        let a = Action::new((i as f64 * 0.1).sin(), 0.6);
        history.push(sim.step(a).unwrap());
    }

    let feats: Vec<_> = history.transitions().iter().map(featurize_transition).collect();
    let t0 = Instant::now();
    let iters = 20;
    let mut ctx = ContextVector::zeros(cfg.model.context_dim);
    for _ in 0..iters {
        ctx = snap.sit_encode(&feats);
    }
    println!(
        "sit_encode  len=128 width={} layers={}: {:8.2} ms/call",
        cfg.model.sit_width,
        cfg.model.sit_layers,
        t0.elapsed().as_secs_f64() * 1e3 / iters as f64
    );

    let s0 = track.centered_state(0.5);
    for (k, n, label) in [(64usize, 8usize, "cvar"), (64, 1, "cvar-n1"), (256, 8, "cvar-k256")] {
        let mut c = cfg.controller.clone();
        c.candidates = k;
        c.stochastic_evals = n;
        let prev = Solution::fresh(c.horizon);
        let t0 = Instant::now();
        let iters = 5;
        for i in 0..iters {
            let _ = mppi_step(&snap, &track, &c, RiskMode::Cvar, &s0, &ctx, &prev, i as u64);
        }
        println!(
            "mppi_step   K={k:3} N={n} H={} ({label}): {:8.2} ms/call",
            c.horizon,
            t0.elapsed().as_secs_f64() * 1e3 / iters as f64
        );
    }
    {
        let c = cfg.controller.clone();
        let prev = Solution::fresh(c.horizon);
        let t0 = Instant::now();
        let iters = 5;
        for i in 0..iters {
            let _ = mppi_step(&snap, &track, &c, RiskMode::Mean, &s0, &ctx, &prev, i as u64);
        }
        println!(
            "mppi_step   K={} mean-rollout:     {:8.2} ms/call",
            c.candidates,
            t0.elapsed().as_secs_f64() * 1e3 / iters as f64
        );
    }

    // One full trial.
    let run = apex_core::harness::RunConfig { step_budget: 150, ..Default::default() };
    let setup = TrialSetup {
        system: &system,
        track: &track,
        snapshot: &snap,
        mode: PolicyMode::adaptive_risk_aware(),
        adapt: true,
        initial_history: History::new(),
        mppi: &cfg.controller,
        run: &run,
        seed: 3,
        policy_override: None,
    };
    let t0 = Instant::now();
    let (metrics, _) = run_trial(&setup).unwrap();
    println!(
        "run_trial   {} steps (adaptive cvar): {:8.2} ms total, {:.1} ms/step",
        metrics.lap_steps,
        t0.elapsed().as_secs_f64() * 1e3,
        t0.elapsed().as_secs_f64() * 1e3 / metrics.lap_steps as f64
    );

    // One training update at the default training config.
    let ds = {
        use apex_core::training::{Dataset, TrajectoryRecord};
        let mut records = Vec::new();
        let mut sim = VehicleSim::new(system, VehicleState::origin(), 9);
        let mut transitions = Vec::new();
        for i in 0..300 {
            transitions.push(sim.step(Action::new((i as f64 * 0.17).sin(), 0.5)).unwrap());
        }
        records.push(TrajectoryRecord { system_seed: 1, track_seed: 1, transitions });
        Dataset { records }
    };
    let mut params = init_params(&cfg.model, 2).unwrap();
    let mut adam = apex_core::nn::AdamState::new(3e-4);
    let t0 = Instant::now();
    let trace = apex_core::training::train_phase(
        &ds,
        &mut params,
        &cfg.model,
        &cfg.training,
        &mut adam,
        3,
        11,
    )
    .unwrap();
    println!(
        "train update (batch={} window={} cap={}): {:8.2} ms/update (loss {:.3})",
        cfg.training.batch_size,
        cfg.training.window,
        cfg.training.train_history_cap,
        t0.elapsed().as_secs_f64() * 1e3 / trace.len() as f64,
        trace.last().unwrap()
    );
}
