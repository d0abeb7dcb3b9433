//! Pretrains a small source model on the synthetic benchmark, then runs a
//! reduced variant matrix on the target task and prints the results table.
//!
//! Usage: `cargo run --release --example transfer_experiment [OUT_DIR]`

use std::path::PathBuf;

use transfer_lab::finetune::FreezePolicy;
use transfer_lab::harness::{pretrain_source, run_experiment, ExperimentConfig};
use transfer_lab::Result;

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("transfer-lab-example"));
    let mut config = ExperimentConfig {
        runs: 2,
        epochs: 15,
        batch_size: 32,
        variants: vec![FreezePolicy::RI, FreezePolicy::FE, FreezePolicy::NFT(2), FreezePolicy::FTED],
        out_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    config.synth.source_count = 1500;
    config.synth.target_count = 240;
    config.pretrain.epochs = 8;

    let source = pretrain_source(&config)?;
    println!("source model: validation accuracy {:.3}", source.val_accuracy);
    if let Some(w) = &source.warning {
        println!("warning: {w}");
    }
    let table = run_experiment(&config)?;
    print!("{table}");
    println!("artifacts in {}", out.display());
    Ok(())
}
