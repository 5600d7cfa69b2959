//! Writes the synthetic blob dataset as a pair of IDX files, reads it back
//! and draws one image per class as ASCII.

use ggem::data::{read_idx_dataset, synthetic_blobs, write_idx_dataset, BlobSpec};

fn main() -> ggem::Result<()> {
    let spec = BlobSpec {
        samples: 12,
        ..BlobSpec::default()
    };
    let blobs = synthetic_blobs(&spec)?;
    let dir = std::env::temp_dir().join(format!("ggem-idx-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    write_idx_dataset(&blobs, &images, &labels)?;
    let back = read_idx_dataset(&images, &labels)?;
    assert_eq!(back, blobs);
    println!("{} images of {}×{} at {}", back.count(), back.rows, back.cols, dir.display());

    for class in 0..spec.classes {
        let i = back.labels.iter().position(|&l| usize::from(l) == class).expect("every class present");
        println!("\nclass {class}");
        for row in back.image(i).chunks(back.cols) {
            let line: String = row.iter().map(|&b| [' ', '.', ':', '#'][usize::from(b) / 64]).collect();
            println!("  {line}");
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
