//! Trains the 1/8-width model on synthetic shapes for a few epochs, once
//! with real and fake batches kept apart in the discriminator and once with
//! them concatenated, and prints the per-epoch summaries.
//!
//! `cargo run --release --example train_smoke -- [epochs]`

use mdcgan::preprocess::{make_synthetic_dataset, to_model_range, SyntheticSpec};
use mdcgan::train::{DiscBatching, RunOutput, TrainConfig, Trainer};

fn main() -> mdcgan::Result<()> {
    let epochs: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2);
    let spec = SyntheticSpec {
        count: 512,
        ..SyntheticSpec::default()
    };
    let data = to_model_range(&make_synthetic_dataset(&spec)?);
    for batching in [DiscBatching::Split, DiscBatching::Combined] {
        println!("{batching:?} batching");
        let config = TrainConfig {
            scale_factor: 8,
            batch_size: 32,
            epochs,
            disc_batching: batching,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(config)?;
        trainer.run(&data, &RunOutput::default(), &mut |s| println!("  {s}"))?;
    }
    Ok(())
}
