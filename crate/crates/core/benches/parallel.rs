//! Compares the rayon data-parallel fan-out points against the sequential
//! reference on the two real inner loops: MPPI candidate evaluation and
//! per-sample gradient computation. With the default `parallel` feature the
//! first lane distributes over rayon; `map_indexed_seq` is always
//! sequential.

use criterion::{criterion_group, criterion_main, Criterion};

use apex_core::autodiff::Tape;
use apex_core::config::AppConfig;
use apex_core::controller::cvar_cost;
use apex_core::exec;
use apex_core::models::graph::window_nll;
use apex_core::models::snapshot::ModelSnapshot;
use apex_core::models::{featurize_transition, init_params, ContextVector, ModelConfig};
use apex_core::rng::child_seed;
use apex_core::sim::{sample_system, Action, Transition, VehicleSim, VehicleState};
use apex_core::track::generate_track;

fn bench_model() -> ModelConfig {
    ModelConfig {
        context_dim: 16,
        sit_layers: 1,
        sit_heads: 2,
        sit_width: 32,
        sit_ffn: 48,
        adm_hidden: 32,
        adm_head_hidden: 32,
        history_cap: 64,
        scale_floor: 1e-4,
    }
}

fn driven_transitions(n: usize) -> Vec<Transition> {
    let system = sample_system(3, &Default::default()).unwrap();
    let mut sim = VehicleSim::new(system, VehicleState::origin(), 5);
    (0..n)
        .map(|i| sim.step(Action::new((i as f64 * 0.13).sin(), 0.6)).unwrap())
        .collect()
}

fn bench_candidate_evaluation(c: &mut Criterion) {
    let cfg = AppConfig::default();
    let model_cfg = bench_model();
    let params = init_params(&model_cfg, 1).unwrap();
    let snap = ModelSnapshot::from_params(&model_cfg, &params);
    let track = generate_track(1, &cfg.track).unwrap();
    let s0 = track.centered_state(0.5);
    let ctx = ContextVector::zeros(model_cfg.context_dim);
    let mut controller = cfg.controller.clone();
    controller.horizon = 15;
    controller.stochastic_evals = 4;
    let k = 32usize;
    let candidates: Vec<Vec<Action>> = (0..k)
        .map(|i| {
            (0..controller.horizon)
                .map(|t| Action::new(((i + t) as f64 * 0.1).sin() * 0.5, 0.5))
                .collect()
        })
        .collect();

    let eval = |i: usize| {
        cvar_cost(&snap, &track, &controller, &s0, &ctx, &candidates[i], child_seed(7, &[i as u64]))
    };

    let mut group = c.benchmark_group("candidate_evaluation");
    group.sample_size(10);
    group.bench_function("map_indexed", |b| b.iter(|| exec::map_indexed(k, eval)));
    group.bench_function("map_indexed_seq", |b| b.iter(|| exec::map_indexed_seq(k, eval)));
    group.finish();
}

fn bench_gradient_batch(c: &mut Criterion) {
    let model_cfg = bench_model();
    let params = init_params(&model_cfg, 2).unwrap();
    let transitions = driven_transitions(64);
    let feats: Vec<_> = transitions[..32].iter().map(featurize_transition).collect();
    let batch = 8usize;

    let grad_one = |i: usize| {
        let window = &transitions[32 + i * 4..32 + i * 4 + 4];
        let mut tape = Tape::new();
        let loss = window_nll(&mut tape, &params, &model_cfg, &feats, window, false);
        tape.backward(loss);
        tape.scalar(loss)
    };

    let mut group = c.benchmark_group("gradient_batch");
    group.sample_size(10);
    group.bench_function("map_indexed", |b| b.iter(|| exec::map_indexed(batch, grad_one)));
    group.bench_function("map_indexed_seq", |b| {
        b.iter(|| exec::map_indexed_seq(batch, grad_one))
    });
    group.finish();
}

criterion_group!(benches, bench_candidate_evaluation, bench_gradient_batch);
criterion_main!(benches);
