//! Trains on an existing dataset for a given number of updates; isolates
//! optimization quality from the data-collection loop.
//!
//! cargo run --release -p apex-core --example offline_train -- <config> <dataset.jsonl> <updates> <out.json>

use apex_core::config::AppConfig;
use apex_core::models::init_params;
use apex_core::nn::{save_checkpoint, AdamState};
use apex_core::training::{train_phase, Dataset};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = AppConfig::load(std::path::Path::new(&args[1])).unwrap();
    let ds = Dataset::load_jsonl(std::path::Path::new(&args[2])).unwrap();
    let updates: usize = args[3].parse().unwrap();
    eprintln!("dataset: {} transitions in {} records", ds.transition_count(), ds.records.len());
    let mut params = init_params(&cfg.model, 99).unwrap();
    let mut adam = AdamState::new(cfg.training.learning_rate);
    let trace =
        train_phase(&ds, &mut params, &cfg.model, &cfg.training, &mut adam, updates, 17).unwrap();
    for (i, chunk) in trace.chunks(100).enumerate() {
        let m: f64 = chunk.iter().sum::<f64>() / chunk.len() as f64;
        eprintln!("updates {:5}: mean loss {:.3}", i * 100 + chunk.len(), m);
    }
    save_checkpoint(
        std::path::Path::new(&args[4]),
        &params,
        serde_json::json!({"offline": true}),
    )
    .unwrap();
}
