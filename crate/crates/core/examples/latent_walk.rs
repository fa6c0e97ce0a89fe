//! Latent-space arithmetic and a random walk through an untrained
//! 1/8-width generator, rendered as tile grids.
//!
//! `cargo run --release --example latent_walk -- [out_dir]`

use std::path::PathBuf;

use mdcgan::latent::{combine, render_walk, CombineMode, WalkMode, WalkPlan};
use mdcgan::model::{build_generator, LayerHyper, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mdcgan::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("mdcgan-walk"));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gen: Model<f32> = build_generator(8, &LayerHyper::default(), &mut rng)?;

    let (v1, v2, v3) = (vec![0.1; 4], vec![0.4; 4], vec![-0.2; 4]);
    for mode in [CombineMode::MinusV1, CombineMode::MinusV3, CombineMode::MinusV2] {
        println!("{mode:?}: {:?}", combine(&v1, &v2, &v3, mode)?);
    }

    for mode in [WalkMode::Random, WalkMode::Combine(CombineMode::MinusV1)] {
        let plan = WalkPlan::seeded(mode, 8, 0.1, 11)?;
        let dir = out.join(mode.to_string());
        let written = render_walk(&gen, &plan, &dir)?;
        println!("{mode}: {} codes, grid at {}", written.points.len(), written.grid.display());
    }
    Ok(())
}
