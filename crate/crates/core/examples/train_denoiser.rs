//! Train a desk-scale denoiser and save it.
//!
//! `cargo run --release --example train_denoiser -- [scenes] [steps] [out]`

use guidesim::denoiser::{Denoiser, DenoiserConfig};
use guidesim::diffusion::{build_training_set, fit_basis, train, TrainConfig};
use guidesim::synth::{gen_dataset, DatasetSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scenes: usize = args.first().map_or(Ok(300), |a| a.parse())?;
    let steps: usize = args.get(1).map_or(Ok(500), |a| a.parse())?;
    let out = args.get(2).cloned().unwrap_or_else(|| "ckpt".into());
    let (data, _) = gen_dataset(&DatasetSpec::default(), scenes, 0)?;
    let base = DenoiserConfig::desk();
    let (pca, sigma_data) = fit_basis(&data, base.k)?;
    println!("PCA with {} components, sigma_data {sigma_data:.2}", pca.k());
    let config = DenoiserConfig { sigma_data, ..base };
    let items = build_training_set(&data, &pca, &config)?;
    let mut den = Denoiser::new(config, pca, 0);
    println!("{} parameters", den.params.count());
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let report = train(&mut den, &items, &cfg, |s, l| {
        if s % 100 == 0 {
            println!("step {s:5}: loss {l:.4}");
        }
    })?;
    let tail = &report.losses[report.losses.len().saturating_sub(50)..];
    println!("mean loss over the last {} steps: {:.4}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    den.save(std::path::Path::new(&out))?;
    println!("saved to {out}");
    Ok(())
}
