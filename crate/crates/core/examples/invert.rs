//! Trains a small generator, then recovers latent codes from images by
//! optimization and reports the reconstruction quality.
//!
//! `cargo run --release --example invert`

use latentlink::generator::{invert_batch, train_generator, GeneratorTrainConfig, InitMode, InversionConfig};
use latentlink::metrics::psnr;
use latentlink::nn::Rng;
use latentlink::scene::{make_dataset, Image, SceneSpec};

fn main() -> latentlink::Result<()> {
    let spec = SceneSpec::default();
    let train = make_dataset(400, 1, &spec)?;
    let cfg = GeneratorTrainConfig {
        hidden: vec![128, 512],
        epochs: 15,
        ..Default::default()
    };
    let (g, report) = train_generator(&train, &cfg, &mut Rng::new(7))?;
    println!("generator: train MSE {:.5} after {} epochs", report.final_mse, cfg.epochs);

    let test = make_dataset(5, 2, &spec)?;
    let targets: Vec<&Image> = test.images().collect();
    let inv_cfg = InversionConfig {
        max_iterations: 300,
        init: InitMode::Mean(latentlink::generator::LatentCode(vec![0.5; spec.factor_dim()])),
        ..Default::default()
    };
    for (i, r) in invert_batch(&g, &targets, &inv_cfg)?.iter().enumerate() {
        let recon = g.generate(&r.latent)?;
        let true_factors = test.samples[i].0.values();
        let err = r.latent.values().iter().zip(true_factors).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "image {i}: {} iterations, PSNR {:.2} dB, max factor error {err:.3}",
            r.iterations,
            psnr(&recon, targets[i])?
        );
    }

    // images the generator can produce exactly invert much more closely
    let z = latentlink::generator::LatentCode(test.samples[0].0.values().to_vec());
    let produced = g.generate(&z)?;
    let r = &invert_batch(&g, &[&produced], &inv_cfg)?[0];
    println!("generator-produced image: PSNR {:.2} dB", psnr(&g.generate(&r.latent)?, &produced)?);
    Ok(())
}
