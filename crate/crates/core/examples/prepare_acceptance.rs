//! Warms the acceptance-suite artifact cache at release speed:
//!
//! ```
//! cargo run --release -p apex-core --example prepare_acceptance
//! ```
//!
//! Afterwards `cargo test --workspace` finds the trained checkpoints and
//! experiment tables in `target/acceptance/` and only re-evaluates the
//! criteria. Safe to re-run; finished pieces are reused.

use std::path::PathBuf;

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let config = root.join("configs/acceptance.toml");
    let cache = root.join("target/acceptance");
    let artifacts =
        apex_core::harness::artifacts::build_or_load(&config, &cache, 2024, |msg| {
            eprintln!("{msg}");
        })
        .expect("artifact build failed");
    eprintln!(
        "ready: {} curve rows, {} ablation rows (ablation wall {:.0} s)",
        artifacts.curve_rows.len(),
        artifacts.ablation_rows.len(),
        artifacts.ablation_wall_seconds
    );
}
