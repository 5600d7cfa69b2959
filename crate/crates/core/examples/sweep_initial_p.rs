//! Trains one model per initial exponent and reports where each group's
//! exponent ends up. `ggem train --sweep p_init=...` does the same with
//! files on disk.
//!
//! cargo run --release --example sweep_initial_p

use ggem::data::{synthetic_blobs, BlobSpec, Dataset};
use ggem::pooling::PoolingConfig;
use ggem::vit::{train, ToyVitConfig, TrainConfig};

fn main() -> ggem::Result<()> {
    let dataset = Dataset::from_idx(&synthetic_blobs(&BlobSpec::default())?, Some(3))?;
    let opts = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    println!("p_init  loss     acc    final p");
    for p in [1.0, 3.0, 5.0, 7.0] {
        let config = ToyVitConfig {
            pooling: PoolingConfig::ggem_uniform(4, p),
            ..ToyVitConfig::default()
        };
        let (_, trace) = train(&dataset, &config, &opts)?;
        let last = trace.last().expect("trace is never empty");
        println!("{p:<7} {:.4}   {:.3}  {:.3?}", last.loss, last.accuracy, last.exponents);
    }
    Ok(())
}
