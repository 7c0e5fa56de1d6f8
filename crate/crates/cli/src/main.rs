//! `apex` — train the models, evaluate policies, and reproduce the two
//! headline experiments from one config file.
//!
//! Exit codes: 0 success, 2 a configured threshold (or replay comparison)
//! failed, 3 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use apex_core::config::AppConfig;
use apex_core::harness::experiments::{
    experiment_adaptation_curve, experiment_risk_ablation, TrialRow,
};
use apex_core::harness::report::{emit_report, write_trial_csv, Check};
use apex_core::harness::{run_trial, PolicyMode, TrialSetup};
use apex_core::models::snapshot::ModelSnapshot;
use apex_core::models::History;
use apex_core::nn::{load_checkpoint, save_checkpoint, ParamSet};
use apex_core::rng::child_seed;
use apex_core::sim::sample_system;
use apex_core::track::generate_track;
use apex_core::training::run_training;

#[derive(Parser)]
#[command(name = "apex", about = "Adaptive risk-aware track driving testbed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Path to the TOML configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed for the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Alternate collection and training; writes checkpoints per cycle.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Train the fixed-nominal baseline: randomization ranges collapse
        /// to their nominal point and the context is zeroed.
        #[arg(long)]
        nominal: bool,
    },
    /// Run one trial per sampled system under a chosen policy mode.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// adaptive-risk-aware | adaptive-risk-unaware | zero-context |
        /// nominal-fixed
        #[arg(long, default_value = "adaptive-risk-aware")]
        mode: String,
        /// Number of held-out systems to evaluate.
        #[arg(long, default_value_t = 5)]
        systems: usize,
        /// Freeze the history during runs.
        #[arg(long)]
        no_adapt: bool,
    },
    /// Adaptation-curve experiment (adaptive vs. scratch vs. nominal).
    Curve {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        nominal_checkpoint: PathBuf,
    },
    /// Risk ablation (CVaR vs. mean scoring, repeated runs per system).
    Ablation {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Re-run a recorded command from its provenance file and compare the
    /// emitted metrics byte for byte.
    Replay {
        /// Path to a provenance.json written by a previous run.
        #[arg(long)]
        provenance: PathBuf,
        /// Scratch directory for the re-run.
        #[arg(long, default_value = "replay-out")]
        out_dir: PathBuf,
    },
}

/// Everything needed to reproduce a run, written next to its outputs.
#[derive(Serialize, Deserialize)]
struct Provenance {
    command: String,
    seed: u64,
    config_sha256: String,
    /// Embedded so replay does not depend on the original path.
    config_toml: String,
    checkpoint_path: Option<String>,
    checkpoint_sha256: Option<String>,
    nominal_checkpoint_path: Option<String>,
    nominal_checkpoint_sha256: Option<String>,
    mode: Option<String>,
    systems: Option<usize>,
    no_adapt: Option<bool>,
    outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {} for hashing", path.display()))?;
    Ok(hex_digest(&bytes))
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_params(cfg: &AppConfig, path: &Path) -> Result<ParamSet> {
    let ckpt = load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let mut params = apex_core::models::init_params(&cfg.model, 0)
        .context("building parameter layout from [model]")?;
    params
        .load_values(&ckpt.params)
        .context("checkpoint does not match the [model] architecture")?;
    Ok(params)
}

fn write_provenance(out_dir: &Path, p: &Provenance) -> Result<()> {
    let json = serde_json::to_string_pretty(p)?;
    std::fs::write(out_dir.join("provenance.json"), json)?;
    Ok(())
}

fn print_checks(checks: &[Check]) -> bool {
    let mut all_pass = true;
    for c in checks {
        println!("[{}] {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
        all_pass &= c.pass;
    }
    all_pass
}

fn cmd_train(common: &CommonArgs, nominal: bool) -> Result<ExitCode> {
    let mut cfg = AppConfig::load(&common.config)?;
    if nominal {
        cfg.ranges = cfg.ranges.collapsed_to_nominal();
        cfg.training.zero_context = true;
    }
    std::fs::create_dir_all(&common.out_dir)?;
    let mut log = String::from("cycle,dataset_transitions,loss_first10,loss_last10\n");

    let (params, dataset, reports) = run_training(&cfg, common.seed, |cycle, params, report| {
        let path = common.out_dir.join(format!("checkpoint_cycle{cycle}.json"));
        save_checkpoint(
            &path,
            params,
            serde_json::json!({
                "cycle": cycle,
                "seed": common.seed,
                "nominal": nominal,
                "model": cfg.model,
            }),
        )?;
        eprintln!(
            "cycle {cycle}: {} transitions, loss {:.3} -> {:.3}",
            report.dataset_transitions, report.mean_loss_first_10, report.mean_loss_last_10
        );
        Ok(())
    })?;

    for r in &reports {
        log.push_str(&format!(
            "{},{},{},{}\n",
            r.cycle, r.dataset_transitions, r.mean_loss_first_10, r.mean_loss_last_10
        ));
    }
    std::fs::write(common.out_dir.join("train_log.csv"), log)?;
    let final_path = common.out_dir.join("checkpoint.json");
    save_checkpoint(
        &final_path,
        &params,
        serde_json::json!({
            "seed": common.seed,
            "nominal": nominal,
            "cycles": cfg.training.cycles,
            "model": cfg.model,
        }),
    )?;
    dataset.save_jsonl(&common.out_dir.join("dataset.jsonl"))?;

    let prov = Provenance {
        command: if nominal { "train --nominal".into() } else { "train".into() },
        seed: common.seed,
        config_sha256: sha256_file(&common.config)?,
        config_toml: std::fs::read_to_string(&common.config)?,
        checkpoint_path: Some(final_path.display().to_string()),
        checkpoint_sha256: Some(sha256_file(&final_path)?),
        nominal_checkpoint_path: None,
        nominal_checkpoint_sha256: None,
        mode: None,
        systems: None,
        no_adapt: None,
        outputs: vec!["checkpoint.json".into(), "train_log.csv".into(), "dataset.jsonl".into()],
    };
    write_provenance(&common.out_dir, &prov)?;
    println!("trained {} cycles; checkpoint at {}", reports.len(), final_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    mode_name: &str,
    systems: usize,
    no_adapt: bool,
) -> Result<ExitCode> {
    let cfg = AppConfig::load(&common.config)?;
    let params = load_params(&cfg, checkpoint)?;
    let snap = ModelSnapshot::from_params(&cfg.model, &params);
    let mode = PolicyMode::parse(mode_name)?;
    std::fs::create_dir_all(&common.out_dir)?;

    let mut rows = Vec::new();
    for i in 0..systems {
        let system_seed = child_seed(common.seed, &[0xe0, i as u64]);
        let system = sample_system(system_seed, &cfg.ranges)?;
        let track_seed = child_seed(common.seed, &[0xe1, i as u64]);
        let track = generate_track(track_seed, &cfg.track)?;
        let setup = TrialSetup {
            system: &system,
            track: &track,
            snapshot: &snap,
            mode,
            adapt: !no_adapt,
            initial_history: History::new(),
            mppi: &cfg.controller,
            run: &cfg.run,
            seed: child_seed(common.seed, &[0xe2, i as u64]),
            policy_override: None,
        };
        let (metrics, _) = run_trial(&setup)?;
        println!(
            "system {i}: lap {} steps (penalized {}), violations {}, no-progress {}, {}",
            metrics.lap_steps,
            metrics.penalized_steps,
            metrics.violations(),
            metrics.no_progress_incidents,
            if metrics.completed { "completed" } else { "incomplete" }
        );
        rows.push(TrialRow {
            experiment: "eval".into(),
            system_seed,
            track_seed,
            method: mode_name.into(),
            budget: 0,
            lap_steps: metrics.lap_steps,
            penalized_steps: metrics.penalized_steps,
            completed: metrics.completed,
            off_track: metrics.off_track_count,
            lat_accel: metrics.lat_accel_count,
            violations: metrics.violations(),
            no_progress: metrics.no_progress_incidents,
            resets: metrics.resets,
        });
    }
    write_trial_csv(&common.out_dir.join("metrics.csv"), &rows)?;

    let prov = Provenance {
        command: "eval".into(),
        seed: common.seed,
        config_sha256: sha256_file(&common.config)?,
        config_toml: std::fs::read_to_string(&common.config)?,
        checkpoint_path: Some(checkpoint.display().to_string()),
        checkpoint_sha256: Some(sha256_file(checkpoint)?),
        nominal_checkpoint_path: None,
        nominal_checkpoint_sha256: None,
        mode: Some(mode_name.into()),
        systems: Some(systems),
        no_adapt: Some(no_adapt),
        outputs: vec!["metrics.csv".into()],
    };
    write_provenance(&common.out_dir, &prov)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_curve(common: &CommonArgs, checkpoint: &Path, nominal_checkpoint: &Path) -> Result<ExitCode> {
    let cfg = AppConfig::load(&common.config)?;
    let params = load_params(&cfg, checkpoint)?;
    let snap = ModelSnapshot::from_params(&cfg.model, &params);
    let nominal_params = load_params(&cfg, nominal_checkpoint)?;
    let nominal_snap = ModelSnapshot::from_params(&cfg.model, &nominal_params);

    let rows = experiment_adaptation_curve(&cfg, &snap, &nominal_snap, common.seed)?;
    let checks = emit_report(&common.out_dir, &rows, &[], &cfg.thresholds)?;
    let prov = Provenance {
        command: "curve".into(),
        seed: common.seed,
        config_sha256: sha256_file(&common.config)?,
        config_toml: std::fs::read_to_string(&common.config)?,
        checkpoint_path: Some(checkpoint.display().to_string()),
        checkpoint_sha256: Some(sha256_file(checkpoint)?),
        nominal_checkpoint_path: Some(nominal_checkpoint.display().to_string()),
        nominal_checkpoint_sha256: Some(sha256_file(nominal_checkpoint)?),
        mode: None,
        systems: None,
        no_adapt: None,
        outputs: vec!["metrics.csv".into(), "curve.csv".into(), "curve.dat".into()],
    };
    write_provenance(&common.out_dir, &prov)?;
    if print_checks(&checks) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_ablation(common: &CommonArgs, checkpoint: &Path) -> Result<ExitCode> {
    let cfg = AppConfig::load(&common.config)?;
    let params = load_params(&cfg, checkpoint)?;
    let snap = ModelSnapshot::from_params(&cfg.model, &params);

    let rows = experiment_risk_ablation(&cfg, &snap, common.seed)?;
    let checks = emit_report(&common.out_dir, &[], &rows, &cfg.thresholds)?;
    let prov = Provenance {
        command: "ablation".into(),
        seed: common.seed,
        config_sha256: sha256_file(&common.config)?,
        config_toml: std::fs::read_to_string(&common.config)?,
        checkpoint_path: Some(checkpoint.display().to_string()),
        checkpoint_sha256: Some(sha256_file(checkpoint)?),
        nominal_checkpoint_path: None,
        nominal_checkpoint_sha256: None,
        mode: None,
        systems: None,
        no_adapt: None,
        outputs: vec!["metrics.csv".into(), "ablation.csv".into(), "ablation.dat".into()],
    };
    write_provenance(&common.out_dir, &prov)?;
    if print_checks(&checks) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_replay(provenance_path: &Path, out_dir: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(provenance_path)
        .with_context(|| format!("reading {}", provenance_path.display()))?;
    let prov: Provenance = serde_json::from_str(&text)?;
    let original_dir = provenance_path.parent().unwrap_or_else(|| Path::new("."));

    // Re-materialize the recorded config and verify referenced checkpoints
    // are unchanged.
    std::fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("replay-config.toml");
    std::fs::write(&config_path, &prov.config_toml)?;
    if hex_digest(prov.config_toml.as_bytes()) != prov.config_sha256 {
        bail!("embedded config does not match its recorded hash");
    }
    let verify = |path: &Option<String>, sha: &Option<String>| -> Result<()> {
        if let (Some(p), Some(s)) = (path, sha) {
            let actual = sha256_file(Path::new(p))?;
            if actual != *s {
                bail!("checkpoint {p} changed since the recorded run");
            }
        }
        Ok(())
    };
    verify(&prov.checkpoint_path, &prov.checkpoint_sha256)?;
    verify(&prov.nominal_checkpoint_path, &prov.nominal_checkpoint_sha256)?;

    let common = CommonArgs {
        config: config_path,
        seed: prov.seed,
        out_dir: out_dir.to_path_buf(),
    };
    let code = match prov.command.as_str() {
        "eval" => cmd_eval(
            &common,
            Path::new(prov.checkpoint_path.as_deref().context("eval provenance needs a checkpoint")?),
            prov.mode.as_deref().unwrap_or("adaptive-risk-aware"),
            prov.systems.unwrap_or(5),
            prov.no_adapt.unwrap_or(false),
        )?,
        "curve" => cmd_curve(
            &common,
            Path::new(prov.checkpoint_path.as_deref().context("curve provenance needs a checkpoint")?),
            Path::new(
                prov.nominal_checkpoint_path
                    .as_deref()
                    .context("curve provenance needs a nominal checkpoint")?,
            ),
        )?,
        "ablation" => cmd_ablation(
            &common,
            Path::new(
                prov.checkpoint_path.as_deref().context("ablation provenance needs a checkpoint")?,
            ),
        )?,
        other => bail!("replay of `{other}` is not supported"),
    };
    let _ = code;

    // Byte-for-byte comparison of every recorded output.
    let mut identical = true;
    for name in &prov.outputs {
        let a = std::fs::read(original_dir.join(name))
            .with_context(|| format!("original output {name}"))?;
        let b = std::fs::read(out_dir.join(name))
            .with_context(|| format!("replayed output {name}"))?;
        let matches = a == b;
        println!("[{}] {}", if matches { "MATCH" } else { "DIFFER" }, name);
        identical &= matches;
    }
    if identical {
        println!("replay reproduced all outputs byte for byte");
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, nominal } => cmd_train(common, *nominal),
        Command::Eval { common, checkpoint, mode, systems, no_adapt } => {
            cmd_eval(common, checkpoint, mode, *systems, *no_adapt)
        }
        Command::Curve { common, checkpoint, nominal_checkpoint } => {
            cmd_curve(common, checkpoint, nominal_checkpoint)
        }
        Command::Ablation { common, checkpoint } => cmd_ablation(common, checkpoint),
        Command::Replay { provenance, out_dir } => cmd_replay(provenance, out_dir),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
