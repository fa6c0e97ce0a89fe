//! Trains a tiny model for one epoch, checkpoints it, reloads the
//! checkpoint and writes a few samples as PNG files.
//!
//! `cargo run --release --example generate -- [out_dir]`

use std::path::PathBuf;

use mdcgan::cli::generate_images;
use mdcgan::preprocess::{make_synthetic_dataset, save_png, to_model_range, SyntheticSpec};
use mdcgan::train::{load_checkpoint, RunOutput, TrainConfig, Trainer};

fn main() -> mdcgan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mdcgan-generate"));
    let data = to_model_range(&make_synthetic_dataset(&SyntheticSpec {
        count: 128,
        ..SyntheticSpec::default()
    })?);
    let config = TrainConfig {
        scale_factor: 8,
        batch_size: 32,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(config)?;
    let run = RunOutput { dir: Some(out.clone()) };
    trainer.run(&data, &run, &mut |s| println!("{s}"))?;

    let restored = Trainer::from_checkpoint(&load_checkpoint(&out.join("last.mdcg"))?)?;
    for (i, img) in generate_images(&restored.generator, 8, 1)?.iter().enumerate() {
        save_png(img, &out.join(format!("sample_{i}.png")))?;
    }
    println!("wrote 8 samples to {}", out.display());
    Ok(())
}
