//! Prints model- and controller-quality diagnostics for a checkpoint:
//!
//! ```
//! cargo run --release -p apex-core --example diagnose -- <config.toml> <checkpoint.json>
//! ```

use apex_core::config::AppConfig;
use apex_core::harness::{run_trial, PolicyMode, TrialSetup};
use apex_core::models::snapshot::{AdmHidden, ModelSnapshot};
use apex_core::models::{
    featurize_transition, init_params, state_action_features, transition_delta, ContextVector,
    History,
};
use apex_core::nn::load_checkpoint;
use apex_core::rng::{child_seed, substream};
use apex_core::sim::{sample_system, Action, VehicleSim, VehicleState};
use apex_core::track::generate_track;
use rand::Rng;

const DIMS: [&str; 6] = ["dx", "dy", "dyaw", "dv_long", "dv_lat", "dyaw_rate"];

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = AppConfig::load(std::path::Path::new(&args[1])).unwrap();
    let ck = load_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let mut params = init_params(&cfg.model, 0).unwrap();
    params.load_values(&ck.params).unwrap();
    let snap = ModelSnapshot::from_params(&cfg.model, &params);

    // --- one-step prediction quality on a held-out system ---
    for sys_seed in [900u64, 901, 902] {
        let system = sample_system(sys_seed, &cfg.ranges).unwrap();
        let mut sim = VehicleSim::new(system.clone(), VehicleState::origin(), sys_seed);
        let mut rng = substream(sys_seed, &[1]);
        let mut history = History::new();
        // Drive with moderate random actions to build a history.
        for _ in 0..400 {
            let a = Action::new(rng.random_range(-0.8..0.8), rng.random_range(0.1..0.9));
            if let Ok(t) = sim.step(a) {
                history.push(t);
            }
        }
        println!(
            "system {sys_seed}: top_speed {:.2} m/s, delay {}, steer_scale {:.2}, bias {:+.3}",
            system.top_speed(),
            system.actuation_delay_steps,
            system.steer_scale,
            system.steer_bias
        );
        for hist_len in [0usize, 50, 200] {
            let prefix = history.truncated(hist_len);
            let mut r = substream(7, &[]);
            let feats = prefix.capped_features(cfg.model.history_cap, &mut r);
            let ctx = snap.sit_encode(&feats);
            // Evaluate on the transitions after the prefix.
            let eval: Vec<_> = history.transitions()[200..400].to_vec();
            let mut sq = [0.0f64; 6];
            let mut sig = [0.0f64; 6];
            let mut mag = [0.0f64; 6];
            let mut hidden = AdmHidden::zeros(&cfg.model);
            for (k, t) in eval.iter().enumerate() {
                // Mirror the training/rollout regime: fresh recurrent state
                // every few steps.
                if k % 5 == 0 {
                    hidden = AdmHidden::zeros(&cfg.model);
                }
                let g = snap.adm_predict(&state_action_features(&t.s, &t.a), &ctx, &mut hidden);
                let d = transition_delta(t);
                for i in 0..6 {
                    let e = g.mean[i] - d[i];
                    sq[i] += e * e;
                    sig[i] += g.diag()[i];
                    mag[i] += d[i].abs();
                }
            }
            let n = eval.len() as f64;
            print!("  hist {hist_len:4}: ");
            for i in 0..6 {
                print!(
                    "{}: rmse {:.4} sig {:.4} |d| {:.4}  ",
                    DIMS[i],
                    (sq[i] / n).sqrt(),
                    sig[i] / n,
                    mag[i] / n
                );
            }
            println!();
        }
    }

    // --- controller internals along one trial ---
    let system = sample_system(950, &cfg.ranges).unwrap();
    let track = generate_track(950, &cfg.track).unwrap();
    let setup = TrialSetup {
        system: &system,
        track: &track,
        snapshot: &snap,
        mode: PolicyMode::adaptive_risk_aware(),
        adapt: true,
        initial_history: History::new(),
        mppi: &cfg.controller,
        run: &cfg.run,
        seed: child_seed(950, &[2]),
        policy_override: None,
    };
    let (metrics, _) = run_trial(&setup).unwrap();
    println!(
        "\ntrial: lap {} completed {} violations {} (off {} lat {}) no_progress {}",
        metrics.lap_steps,
        metrics.completed,
        metrics.violations(),
        metrics.off_track_count,
        metrics.lat_accel_count,
        metrics.no_progress_incidents
    );
    println!("step | prog  off   lat    steer thr  | min_cost    ess   ctx");
    for s in metrics.steps.iter().step_by(10) {
        println!(
            "{:4} | {:5.2} {:5.2} {:6.2} | {:+.2} {:+.2} | {:11.3} {:5.1} {:5.2}",
            s.step,
            s.progress,
            s.offset,
            s.lat_accel,
            s.action.steer,
            s.action.throttle,
            s.min_cost,
            s.ess,
            s.context_norm
        );
    }
    let v: f64 =
        metrics.steps.iter().map(|s| s.state.v_long).sum::<f64>() / metrics.steps.len() as f64;
    println!("mean v_long {:.2} m/s over {} steps", v, metrics.steps.len());
}
