//! Variance-ratio test on two sets of summary statistics, then the full
//! comparison report on two small image batches.

use mdcgan::analysis::{analyze, f_test, SampleStats, Tail};
use mdcgan::preprocess::{make_synthetic_dataset, unstack, SyntheticSpec};

fn main() -> mdcgan::Result<()> {
    let a = SampleStats {
        n: 101,
        mean: 0.0,
        std: 40.81453,
    };
    let b = SampleStats {
        n: 101,
        mean: 0.0,
        std: 31.979033,
    };
    for alpha in [0.05, 0.01] {
        let t = f_test(&a, &b, alpha, Tail::Upper)?;
        println!("alpha {alpha}: F = {:.4}, critical {:.4}, reject {}", t.f, t.critical_value, t.reject);
    }

    let batch = |seed| -> mdcgan::Result<_> {
        unstack(&make_synthetic_dataset(&SyntheticSpec {
            count: 16,
            seed,
            ..SyntheticSpec::default()
        })?)
    };
    let report = analyze(&batch(1)?, &batch(2)?, 0.05, Tail::TwoSided)?;
    println!("{report}");
    Ok(())
}
