//! Builds the full-size generator and discriminator and prints their layer
//! tables next to the reference counts.

use mdcgan::model::{build_discriminator, build_generator, verify_architecture, LayerHyper, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mdcgan::Result<()> {
    let hyper = LayerHyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g: Model<f32> = build_generator(1, &hyper, &mut rng)?;
    let d: Model<f32> = build_discriminator(1, &hyper, &mut rng)?;
    let mut ok = true;
    for report in [verify_architecture(&g), verify_architecture(&d)] {
        println!("{report}");
        ok &= report.all_match();
    }
    println!("{}", if ok { "all layers match" } else { "MISMATCH" });
    Ok(())
}
