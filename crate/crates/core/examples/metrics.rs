//! PSNR and the feature-space perceptual distance on increasingly noisy
//! copies of a scene.
//!
//! `cargo run --release --example metrics`

use latentlink::metrics::{lpips, psnr, spearman, FeatureNet};
use latentlink::nn::Rng;
use latentlink::scene::{make_dataset, Image, SceneSpec};

fn main() -> latentlink::Result<()> {
    let spec = SceneSpec::default();
    let ds = make_dataset(1, 5, &spec)?;
    let clean = &ds.samples[0].1;
    let net = FeatureNet::default();
    let mut rng = Rng::new(1);

    let (mut psnrs, mut dists) = (Vec::new(), Vec::new());
    for amp in [0.01, 0.03, 0.1, 0.2, 0.4] {
        let noisy = Image::from_clamped(
            clean.height(),
            clean.width(),
            clean.pixels().iter().map(|v| v + amp * rng.normal()).collect(),
        )?;
        let (p, d) = (psnr(clean, &noisy)?, lpips(clean, &noisy, &net)?);
        println!("noise {amp:<5} PSNR {p:6.2} dB  LPIPS {d:.4}");
        psnrs.push(p);
        dists.push(d);
    }
    println!("rank correlation PSNR vs LPIPS: {:.2}", spearman(&psnrs, &dists));
    Ok(())
}
