//! Builds and caches the heavyweight fixtures behind the acceptance suite:
//! the trained adaptive checkpoint, the fixed-nominal baseline checkpoint,
//! and the result tables of both experiments.
//!
//! Artifacts live under `<cache_root>/<key>/` where the key fingerprints
//! the config text and seed; rebuilding is triggered by deleting that
//! directory or changing either input. The same builder backs the
//! `prepare_acceptance` example (release-speed warm-up) and the test suite.

use std::path::Path;
use std::time::Instant;

use crate::config::AppConfig;
use crate::error::Result;
use crate::models::snapshot::ModelSnapshot;
use crate::models::init_params;
use crate::nn::{load_checkpoint, save_checkpoint, ParamSet};
use crate::rng::child_seed;
use crate::training::run_training;

use super::experiments::{experiment_adaptation_curve, experiment_risk_ablation, TrialRow};

pub struct AcceptanceArtifacts {
    pub cfg: AppConfig,
    pub params: ParamSet,
    pub snapshot: ModelSnapshot,
    pub nominal_snapshot: ModelSnapshot,
    pub curve_rows: Vec<TrialRow>,
    pub ablation_rows: Vec<TrialRow>,
    /// Wall-clock seconds of the ablation experiment when it was first run.
    pub ablation_wall_seconds: f64,
}

/// Stable fingerprint of config text + seed (FNV-1a).
pub fn cache_key(cfg_text: &str, seed: u64) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cfg_text.bytes().chain(seed.to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn load_or_train(
    cfg: &AppConfig,
    path: &Path,
    seed: u64,
    nominal: bool,
    log: &mut impl FnMut(&str),
) -> Result<ParamSet> {
    if path.exists() {
        log(&format!("reusing cached checkpoint {}", path.display()));
        let ck = load_checkpoint(path)?;
        let mut p = init_params(&cfg.model, 0)?;
        p.load_values(&ck.params)?;
        return Ok(p);
    }
    let mut run_cfg = cfg.clone();
    if nominal {
        run_cfg.ranges = run_cfg.ranges.collapsed_to_nominal();
        run_cfg.training.zero_context = true;
        log("training the fixed-nominal baseline");
    } else {
        log("training the adaptive model (one-time, cached afterwards)");
    }
    let (params, _, _) = run_training(&run_cfg, seed, |cycle, _, report| {
        log(&format!(
            "  cycle {cycle}: {} transitions, loss {:.3} -> {:.3}",
            report.dataset_transitions, report.mean_loss_first_10, report.mean_loss_last_10
        ));
        Ok(())
    })?;
    save_checkpoint(path, &params, serde_json::json!({ "seed": seed, "nominal": nominal }))?;
    Ok(params)
}

/// Loads the artifacts from the cache (building any missing piece).
pub fn build_or_load(
    config_path: &Path,
    cache_root: &Path,
    seed: u64,
    mut log: impl FnMut(&str),
) -> Result<AcceptanceArtifacts> {
    let cfg_text = std::fs::read_to_string(config_path)?;
    let cfg = AppConfig::load(config_path)?;
    let dir = cache_root.join(cache_key(&cfg_text, seed));
    std::fs::create_dir_all(&dir)?;

    let params = load_or_train(&cfg, &dir.join("checkpoint.json"), seed, false, &mut log)?;
    let snapshot = ModelSnapshot::from_params(&cfg.model, &params);
    let nominal_params = load_or_train(
        &cfg,
        &dir.join("nominal.json"),
        child_seed(seed, &[0x40]),
        true,
        &mut log,
    )?;
    let nominal_snapshot = ModelSnapshot::from_params(&cfg.model, &nominal_params);

    let curve_path = dir.join("curve_rows.json");
    let curve_rows: Vec<TrialRow> = if curve_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&curve_path)?)?
    } else {
        log("running the adaptation-curve experiment");
        let rows = experiment_adaptation_curve(&cfg, &snapshot, &nominal_snapshot, seed)?;
        std::fs::write(&curve_path, serde_json::to_string(&rows)?)?;
        rows
    };

    let ablation_path = dir.join("ablation_rows.json");
    let meta_path = dir.join("meta.json");
    let (ablation_rows, ablation_wall_seconds) = if ablation_path.exists() {
        let rows: Vec<TrialRow> = serde_json::from_str(&std::fs::read_to_string(&ablation_path)?)?;
        let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        (rows, meta["ablation_wall_seconds"].as_f64().unwrap_or(f64::NAN))
    } else {
        log("running the risk-ablation experiment");
        let t0 = Instant::now();
        let rows = experiment_risk_ablation(&cfg, &snapshot, seed)?;
        let secs = t0.elapsed().as_secs_f64();
        std::fs::write(&ablation_path, serde_json::to_string(&rows)?)?;
        std::fs::write(
            &meta_path,
            serde_json::json!({ "ablation_wall_seconds": secs }).to_string(),
        )?;
        (rows, secs)
    };

    Ok(AcceptanceArtifacts {
        cfg,
        params,
        snapshot,
        nominal_snapshot,
        curve_rows,
        ablation_rows,
        ablation_wall_seconds,
    })
}
