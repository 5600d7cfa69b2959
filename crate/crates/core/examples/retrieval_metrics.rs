//! Scores GGeM descriptors of a trained model on a query/gallery split of
//! synthetic images with Recall@K, R-Precision and mAP.

use ggem::data::{synthetic_blobs, BlobSpec, Dataset};
use ggem::retrieval::{evaluate, DescriptorSet, Metric};
use ggem::vit::{train, vit_forward, ToyVitConfig, TrainConfig};

fn main() -> ggem::Result<()> {
    let spec = BlobSpec {
        samples: 90,
        ..BlobSpec::default()
    };
    let dataset = Dataset::from_idx(&synthetic_blobs(&spec)?, Some(3))?;
    let opts = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let (model, _) = train(&dataset, &ToyVitConfig::default(), &opts)?;

    let mut rows = Vec::new();
    for img in &dataset.images {
        rows.push(vit_forward(img, &model, false)?.pooled.as_slice().to_vec());
    }
    let labels: Vec<i64> = dataset.labels.iter().map(|&l| l as i64).collect();
    let (q_rows, g_rows) = rows.split_at(15);
    let (q_labels, g_labels) = labels.split_at(15);
    let queries = DescriptorSet::from_rows(q_rows.to_vec(), q_labels.to_vec())?;
    let gallery = DescriptorSet::from_rows(g_rows.to_vec(), g_labels.to_vec())?;

    for metric in [Metric::Cosine, Metric::Euclidean] {
        let r = evaluate(&queries, &gallery, &[1, 2, 4, 8], false, metric)?;
        println!("{metric:?}: recall {:?}, RP {:.3}, mAP {:.3}", r.recall_at_k, r.r_precision, r.map_score);
    }
    Ok(())
}
