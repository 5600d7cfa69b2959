//! Pools one small activation map with every strategy, then shows GeM
//! moving from the mean toward the max as p grows.

use ggem::pooling::{pool, ActivationMaps, PoolingConfig};
use ggem::tensor::Tensor;

fn main() -> ggem::Result<()> {
    // 2×2 patch grid, 4 channels, each holding [1, 3, 1, 3] over the tokens.
    let rows = [[1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0], [1.0, 1.0, 1.0, 1.0], [3.0, 3.0, 3.0, 3.0]];
    let maps = ActivationMaps::new(Tensor::new(vec![4, 4], rows.concat())?)?;

    for (label, cfg) in [
        ("average", PoolingConfig::average()),
        ("max", PoolingConfig::max()),
        ("gem p=3", PoolingConfig::gem(3.0)),
        ("ggem p=[1,2]", PoolingConfig::ggem(vec![1.0, 2.0])),
    ] {
        println!("{label:>13}: {:?}", pool(&maps, &cfg)?.as_slice());
    }

    println!("\n    p   gem(channel 0)");
    for p in [0.5, 1.0, 2.0, 5.0, 20.0, 100.0, 1000.0] {
        let v = pool(&maps, &PoolingConfig::gem(p))?;
        println!("{p:>5}   {:.6}", v.as_slice()[0]);
    }
    Ok(())
}
