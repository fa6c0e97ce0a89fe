//! Runs the resize, Gaussian and median pipeline over a directory of
//! images and prints the per-channel statistics of the result. Without an
//! argument it first writes a few synthetic images to work on.
//!
//! `cargo run --release --example preprocess -- [input_dir]`

use std::path::PathBuf;

use mdcgan::preprocess::{
    channel_stats, load_processed, make_synthetic_dataset, save_png, scan_images, unstack, PipelineConfig,
    SyntheticSpec,
};

fn main() -> mdcgan::Result<()> {
    let input = match std::env::args().nth(1) {
        Some(dir) => PathBuf::from(dir),
        None => {
            let dir = std::env::temp_dir().join("mdcgan-preprocess-input");
            std::fs::create_dir_all(&dir)?;
            let spec = SyntheticSpec {
                count: 6,
                size: 96,
                ..SyntheticSpec::default()
            };
            for (i, img) in unstack(&make_synthetic_dataset(&spec)?)?.iter().enumerate() {
                save_png(img, &dir.join(format!("shape_{i}.png")))?;
            }
            dir
        }
    };
    let cfg = PipelineConfig {
        size: 32,
        ..PipelineConfig::default()
    };
    let loaded = load_processed(&scan_images(&input)?, &cfg);
    for (path, err) in &loaded.failures {
        eprintln!("skipped {}: {err}", path.display());
    }
    let refs: Vec<_> = loaded.images.iter().collect();
    let stats = channel_stats(&refs)?;
    println!("{} images at {}x{}", loaded.images.len(), cfg.size, cfg.size);
    print!("{}", stats.to_toml());
    Ok(())
}
