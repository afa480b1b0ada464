//! A complete small system: generator, inversion, flow, trained channel
//! codec, then one image sent at several SNRs.
//!
//! `cargo run --release --example transmit -- [out.png]`

use std::path::PathBuf;

use latentlink::channel::{ChannelCodec, ChannelConfig};
use latentlink::flow::{train_flow, FlowArch, FlowModel, FlowTrainConfig};
use latentlink::generator::{invert_dataset, train_generator, GeneratorTrainConfig, InitMode, InversionConfig, LatentCode};
use latentlink::metrics::FeatureNet;
use latentlink::nn::Rng;
use latentlink::pipeline::{train_e2e, transmit, AnnealSchedule, SemComSystem, Stage2Config};
use latentlink::privacy::build_kb;
use latentlink::scene::{make_dataset, Image, SceneSpec};

fn main() -> latentlink::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("transmit.png"), PathBuf::from);
    let spec = SceneSpec::default();
    let mut rng = Rng::new(21);
    let train = make_dataset(400, 1, &spec)?;
    let gen_cfg = GeneratorTrainConfig {
        epochs: 15,
        ..Default::default()
    };
    let (g, _) = train_generator(&train, &gen_cfg, &mut rng)?;

    let inv = InversionConfig {
        max_iterations: 100,
        init: InitMode::Mean(LatentCode(vec![0.5; spec.factor_dim()])),
        ..Default::default()
    };
    let latents: Vec<LatentCode> = invert_dataset(&g, &train, &inv, 100)?.into_iter().map(|r| r.latent).collect();
    let kb = build_kb(&latents)?;

    let flow = FlowModel::new(spec.factor_dim(), &FlowArch::default(), &mut rng)?;
    let flow_cfg = FlowTrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let (flow, _) = train_flow(&flow, &latents, &flow_cfg, &mut rng)?;

    let codec = ChannelCodec::new(spec.factor_dim(), 10, 64, &mut rng)?;
    let sys = SemComSystem::new(g, flow, codec, ChannelConfig::awgn(10.0), FeatureNet::default())?.with_inversion(
        InversionConfig {
            init: InitMode::Mean(kb.mean.clone()),
            ..inv
        },
    );
    let stage2 = Stage2Config {
        epochs: 20,
        ..Default::default()
    };
    let (mut sys, report) = train_e2e(&sys, &latents, &AnnealSchedule::default(), &stage2, &rng.substream("e2e"))?;
    println!("stage-2 loss {:.4} -> {:.4}", report.epoch_loss[0], report.epoch_loss.last().unwrap());

    let test = make_dataset(1, 99, &spec)?;
    let image = &test.samples[0].1;
    let mut panels = vec![image.clone()];
    for snr in [0.0, 10.0, 20.0] {
        sys.channel = ChannelConfig::awgn(snr);
        let r = transmit(&sys, image, &Rng::new(1))?;
        println!("SNR {snr:>4} dB, ratio {}: PSNR {:.2} dB, LPIPS {:.4}", r.ratio, r.psnr_db, r.lpips);
        panels.push(r.reconstruction);
    }
    Image::hstack(&panels.iter().collect::<Vec<_>>())?.save_png(&out, 4)?;
    println!("wrote {} (original, then 0/10/20 dB)", out.display());
    Ok(())
}
