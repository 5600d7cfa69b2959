//! Trains a small model for a few epochs, captures attention on a handful of
//! images and prints inter-head CKA and attention mean distance per block.

use ggem::analysis::{head_mean_distance, inter_head_cka};
use ggem::data::{synthetic_blobs, BlobSpec, Dataset};
use ggem::vit::{train, vit_forward, ToyVitConfig, TrainConfig};

fn main() -> ggem::Result<()> {
    let dataset = Dataset::from_idx(&synthetic_blobs(&BlobSpec::default())?, Some(3))?;
    let config = ToyVitConfig::default();
    let opts = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let (model, _) = train(&dataset, &config, &opts)?;

    let records = dataset.images[..24]
        .iter()
        .map(|img| Ok(vit_forward(img, &model, true)?.record.expect("captured")))
        .collect::<ggem::Result<Vec<_>>>()?;

    for block in 0..config.blocks {
        let sim = inter_head_cka(&records, block)?;
        let dist = head_mean_distance(&records, block, config.patch_size)?;
        println!("block {block}");
        for (h, row) in sim.matrix.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.map_or("  -  ".into(), |v| format!("{v:.3}"))).collect();
            println!("  head {h}: cka [{}]  distance {:.2} px", cells.join(" "), dist.per_head[h].unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
