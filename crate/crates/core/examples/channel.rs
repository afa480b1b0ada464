//! Channel codec and AWGN channel: power normalization, empirical noise and
//! compression ratios.
//!
//! `cargo run --release --example channel`

use latentlink::channel::{
    compression_ratio, noise_variance, transmit_channel, ChannelCodec, ChannelConfig, SystemDims,
};
use latentlink::flow::FlowVector;
use latentlink::nn::Rng;

fn main() -> latentlink::Result<()> {
    let mut rng = Rng::new(9);
    for k in [1, 4, 10, 16] {
        let r = compression_ratio(SystemDims::new(3072, k)?);
        println!("k = {k:>2}: ratio {r} = {:.2e}", r.value());
    }

    let codec = ChannelCodec::new(16, 10, 64, &mut rng)?;
    let n = FlowVector((0..16).map(|_| rng.normal()).collect());
    let x = codec.encode(&n)?;
    println!("encoded {} symbols, mean power {:.12}", x.0.len(), x.mean_power());

    for snr in [0.0, 5.0, 10.0, 20.0, f64::INFINITY] {
        let cfg = ChannelConfig::awgn(snr);
        let (y, _) = transmit_channel(&x, &cfg, &mut rng);
        let mut total = 0.0;
        let trials = 2000;
        for _ in 0..trials {
            let (y, _) = transmit_channel(&x, &cfg, &mut rng);
            total += y.0.iter().zip(&x.0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        let decoded = codec.decode(&y)?;
        println!(
            "SNR {snr:>4} dB: noise var {:.4} (expected {:.4}), decoded[0] {:.3}",
            total / (trials * x.0.len()) as f64,
            noise_variance(snr),
            decoded.values()[0]
        );
    }
    Ok(())
}
