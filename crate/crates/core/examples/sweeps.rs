//! SNR and bandwidth-ratio sweeps at toy scale, written as CSV and SVG.
//!
//! `cargo run --release --example sweeps -- [out-dir]`

use std::path::PathBuf;

use latentlink::channel::ChannelConfig;
use latentlink::flow::{train_flow, FlowArch, FlowModel, FlowTrainConfig};
use latentlink::generator::{invert_dataset, train_generator, GeneratorTrainConfig, InitMode, InversionConfig, LatentCode};
use latentlink::metrics::FeatureNet;
use latentlink::nn::Rng;
use latentlink::pipeline::{kn_sweep, snr_sweep, AnnealSchedule, KnSweepSetup, Metric, SemComSystem, Stage2Config};
use latentlink::scene::{make_dataset, Image, SceneSpec};

fn main() -> latentlink::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("sweeps"), PathBuf::from);
    std::fs::create_dir_all(&dir).map_err(|e| latentlink::Error::Io { path: dir.clone(), source: e })?;
    let spec = SceneSpec::default();
    let rng = Rng::new(8);
    let train = make_dataset(300, 1, &spec)?;
    let test = make_dataset(20, 2, &spec)?;
    let gen_cfg = GeneratorTrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let (g, _) = train_generator(&train, &gen_cfg, &mut rng.substream("gen"))?;
    let inv = InversionConfig {
        max_iterations: 60,
        init: InitMode::Mean(LatentCode(vec![0.5; spec.factor_dim()])),
        ..Default::default()
    };
    let lat = |ds| -> latentlink::Result<Vec<LatentCode>> {
        Ok(invert_dataset(&g, ds, &inv, 100)?.into_iter().map(|r| r.latent).collect())
    };
    let (train_lat, test_lat) = (lat(&train)?, lat(&test)?);
    let images: Vec<Image> = test.images().cloned().collect();
    let flow = FlowModel::new(spec.factor_dim(), &FlowArch::default(), &mut rng.substream("flow-init"))?;
    let flow_cfg = FlowTrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let (flow, _) = train_flow(&flow, &train_lat, &flow_cfg, &mut rng.substream("flow"))?;

    let setup = KnSweepSetup {
        generator: g.clone(),
        flow,
        feature_net: FeatureNet::default(),
        eval_channel: ChannelConfig::awgn(10.0),
        codec_hidden: 32,
        schedule: AnnealSchedule::default(),
        stage2: Stage2Config {
            epochs: 10,
            ..Default::default()
        },
        reps: 1,
    };
    let kn = kn_sweep(&setup, &[1, 4, 16], &train_lat, &images, &test_lat, &rng.substream("kn"))?;
    kn.table.write_csv(&dir.join("kn.csv"))?;
    kn.table.write_svg(&dir.join("kn-psnr.svg"), Metric::Psnr)?;
    print!("{}", kn.table.to_csv());

    // reuse the k = 16 system for the SNR sweep
    let (_, sys, _): &(usize, SemComSystem, SemComSystem) = kn.systems.last().unwrap();
    let snr = snr_sweep(sys, &images, &test_lat, &[0.0, 5.0, 10.0, 20.0, f64::INFINITY], 2, &rng.substream("snr"))?;
    snr.write_csv(&dir.join("snr.csv"))?;
    snr.write_svg(&dir.join("snr-psnr.svg"), Metric::Psnr)?;
    print!("{}", snr.to_csv());
    println!("wrote {}", dir.display());
    Ok(())
}
