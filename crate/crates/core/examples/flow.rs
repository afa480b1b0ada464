//! Fits a normalizing flow to latent codes and checks exact invertibility.
//!
//! `cargo run --release --example flow`

use latentlink::flow::{round_trip_error, train_flow, FlowArch, FlowModel, FlowTrainConfig};
use latentlink::generator::{latent_matrix, LatentCode};
use latentlink::nn::Rng;
use latentlink::scene::{sample_factors, SceneSpec};

fn main() -> latentlink::Result<()> {
    let spec = SceneSpec::default();
    let mut rng = Rng::new(3);
    // stand-in latents: scene factors, correlated through a shared term
    let latents: Vec<LatentCode> = (0..1000)
        .map(|_| {
            let f = sample_factors(&mut rng, &spec).0;
            let shared = f[0];
            LatentCode(f.iter().map(|v| 0.6 * v + 0.4 * shared).collect())
        })
        .collect();

    let flow = FlowModel::new(spec.factor_dim(), &FlowArch::default(), &mut rng)?;
    let cfg = FlowTrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let (trained, report) = train_flow(&flow, &latents, &cfg, &mut rng)?;
    println!("NLL per code: {:.3} -> {:.3}", report.initial_nll, report.final_nll);

    let x = latent_matrix(&latents)?;
    println!("max round-trip error: {:.2e}", round_trip_error(&trained, x.view())?);
    let (n, logdet) = trained.forward(&latents[0])?;
    println!("first code -> {:.3?} (log|det J| = {logdet:.3})", n.values());
    Ok(())
}
