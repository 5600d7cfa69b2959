//! Saves a model to a GGEM checkpoint, loads it and compares logits.

use ggem::gradcheck::random_images;
use ggem::rng::Rng;
use ggem::vit::{load_checkpoint, save_checkpoint, vit_forward, RngInfo, ToyVitConfig, ToyVitModel};

fn main() -> ggem::Result<()> {
    let config = ToyVitConfig::default();
    let rng = Rng::new(42);
    let model = ToyVitModel::new(config.clone(), &mut rng.split(0))?;
    let path = std::env::temp_dir().join(format!("ggem-example-{}.ggem", std::process::id()));
    save_checkpoint(&path, &model, RngInfo::from(&rng))?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    let (loaded, info) = load_checkpoint(&path)?;
    println!("{} parameters, {size} bytes, seed {}", loaded.param_count(), info.seed);

    let worst = random_images(&config, 4, 1)?
        .iter()
        .map(|img| {
            let a = vit_forward(img, &model, false)?.logits;
            let b = vit_forward(img, &loaded, false)?.logits;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        })
        .collect::<ggem::Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    println!("max logit change after the f32 round trip: {worst:.2e}");
    let _ = std::fs::remove_file(&path);
    Ok(())
}
