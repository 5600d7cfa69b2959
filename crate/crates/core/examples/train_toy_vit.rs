//! Train the toy ViT with GGeM pooling on seeded synthetic blobs and print
//! the per-epoch trace, including the exponent of every group.
//!
//! cargo run --release --example train_toy_vit [seed]

use ggem::data::{synthetic_blobs, BlobSpec, Dataset};
use ggem::vit::{train, ToyVitConfig, TrainConfig};

fn main() -> ggem::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let blobs = synthetic_blobs(&BlobSpec {
        seed,
        ..BlobSpec::default()
    })?;
    let dataset = Dataset::from_idx(&blobs, Some(3))?;
    let config = ToyVitConfig::default();
    let opts = TrainConfig {
        seed,
        ..TrainConfig::default()
    };

    let started = std::time::Instant::now();
    let (model, trace) = train(&dataset, &config, &opts)?;
    print!("{}", trace.to_csv());
    let last = trace.last().expect("at least one record");
    eprintln!(
        "{} parameters, final accuracy {:.3}, exponents {:?}, {:.1?}",
        model.param_count(),
        last.accuracy,
        last.exponents,
        started.elapsed()
    );
    Ok(())
}
