//! Channel codec, the `Y = h·X + n` channel, and compression-ratio bookkeeping.
//!
//! Symbols are real-valued; `k` counts real channel uses. The encoder output
//! is rescaled per vector to unit average power, so with noise variance
//! `σ² = 10^(−SNR/10)` the per-transmission SNR is exact.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::flow::FlowVector;
use crate::nn::io::{BinReader, BinWriter, WEIGHT_MAGIC, WEIGHT_VERSION};
use crate::nn::{Activation, ForwardCache, Mlp, MlpGrads, Rng};

/// Transmitted (`X`) or received (`Y`) channel symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSymbols(pub Vec<f64>);

impl ChannelSymbols {
    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>() / self.0.len() as f64
    }
}

/// Rescales `raw` to mean power 1: `raw · sqrt(k / ‖raw‖²)`.
pub fn normalize_power(raw: &[f64]) -> Result<Vec<f64>> {
    let energy: f64 = raw.iter().map(|v| v * v).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(Error::InvalidInput(format!(
            "encoder produced a degenerate symbol vector (energy {energy})"
        )));
    }
    let scale = (raw.len() as f64 / energy).sqrt();
    Ok(raw.iter().map(|v| v * scale).collect())
}

/// Noise variance per real symbol at unit signal power.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fading {
    /// `h = 1`.
    None,
    /// Scalar Rayleigh gain per transmission, equalized at the receiver with
    /// perfect channel knowledge (the receiver sees `Y / h`).
    Rayleigh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// `f64::INFINITY` switches noise off.
    pub snr_db: f64,
    pub fading: Fading,
}

impl ChannelConfig {
    pub fn awgn(snr_db: f64) -> Self {
        Self {
            snr_db,
            fading: Fading::None,
        }
    }

    pub fn noiseless() -> Self {
        Self::awgn(f64::INFINITY)
    }

    pub fn is_noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    fn draw_gain(&self, rng: &mut Rng) -> f64 {
        match self.fading {
            Fading::None => 1.0,
            Fading::Rayleigh => loop {
                let (a, b) = (rng.normal(), rng.normal());
                let h = ((a * a + b * b) / 2.0).sqrt();
                if h > 0.0 {
                    break h;
                }
            },
        }
    }

    /// `∂(receiver output)/∂X` for gain `h`.
    pub fn effective_gain(&self, h: f64) -> f64 {
        match self.fading {
            Fading::None => h,
            Fading::Rayleigh => 1.0,
        }
    }
}

/// Sends `x` through the channel. Returns the receiver-side symbols and `h`.
pub fn transmit_channel(x: &ChannelSymbols, cfg: &ChannelConfig, rng: &mut Rng) -> (ChannelSymbols, f64) {
    let h = cfg.draw_gain(rng);
    let sigma = noise_variance(cfg.snr_db).sqrt();
    let y = x
        .0
        .iter()
        .map(|&xi| {
            if cfg.is_noiseless() {
                // no `+ 0.0`: that would turn −0.0 into +0.0
                match cfg.fading {
                    Fading::None => h * xi,
                    Fading::Rayleigh => xi,
                }
            } else {
                received(cfg, h, xi, sigma * rng.normal())
            }
        })
        .collect();
    (ChannelSymbols(y), h)
}

#[inline]
fn received(cfg: &ChannelConfig, h: f64, x: f64, noise: f64) -> f64 {
    match cfg.fading {
        Fading::None => h * x + noise,
        Fading::Rayleigh => (h * x + noise) / h,
    }
}

/// Row-wise [`transmit_channel`]; one gain per row.
pub fn transmit_batch(x: ArrayView2<f64>, cfg: &ChannelConfig, rng: &mut Rng) -> (Array2<f64>, Array1<f64>) {
    let mut y = Array2::zeros(x.raw_dim());
    let mut gains = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let (out, h) = transmit_channel(&ChannelSymbols(row.to_vec()), cfg, rng);
        y.row_mut(i).assign(&Array1::from(out.0));
        gains[i] = h;
    }
    (y, gains)
}

/// Learned channel encoder/decoder pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelCodec {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Rescale encoder output to unit mean power. Only the identity codec
    /// turns this off.
    pub normalize: bool,
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    enc: ForwardCache,
    raw: Array2<f64>,
}

impl ChannelCodec {
    /// `d → hidden → k` encoder and `k → hidden → d` decoder, tanh hidden.
    pub fn new(d: usize, k: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        Ok(Self {
            encoder: Mlp::new(&[d, hidden, k], Activation::Tanh, Activation::Identity, rng)?,
            decoder: Mlp::new(&[k, hidden, d], Activation::Tanh, Activation::Identity, rng)?,
            normalize: true,
        })
    }

    /// Pass-through codec (`k = d`, no power normalization).
    pub fn identity(d: usize) -> Self {
        Self {
            encoder: Mlp::identity(d),
            decoder: Mlp::identity(d),
            normalize: false,
        }
    }

    pub fn d(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn k(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn encode(&self, n: &FlowVector) -> Result<ChannelSymbols> {
        let raw = self.encoder.predict(Array1::from(n.0.clone()).view())?;
        if self.normalize {
            Ok(ChannelSymbols(normalize_power(raw.as_slice().expect("contiguous"))?))
        } else {
            Ok(ChannelSymbols(raw.to_vec()))
        }
    }

    pub fn decode(&self, y: &ChannelSymbols) -> Result<FlowVector> {
        if y.0.len() != self.k() {
            return Err(Error::dims("received symbols", self.k(), y.0.len()));
        }
        Ok(FlowVector(self.decoder.predict(Array1::from(y.0.clone()).view())?.to_vec()))
    }

    pub fn encode_batch(&self, n: ArrayView2<f64>) -> Result<(Array2<f64>, EncodeCache)> {
        let (raw, enc) = self.encoder.forward_batch(n)?;
        let mut x = raw.clone();
        if self.normalize {
            for mut row in x.rows_mut() {
                let v = normalize_power(row.as_slice().expect("contiguous"))?;
                row.assign(&Array1::from(v));
            }
        }
        Ok((x, EncodeCache { enc, raw }))
    }

    /// Gradient through power normalization and the encoder network.
    pub fn encode_backward(&self, cache: &EncodeCache, g_x: ArrayView2<f64>) -> Result<(Array2<f64>, MlpGrads)> {
        let mut g_raw = g_x.to_owned();
        if self.normalize {
            let k = self.k() as f64;
            for (mut g, r) in g_raw.rows_mut().into_iter().zip(cache.raw.rows()) {
                // x = √k · r/‖r‖ ⇒ ∂x/∂r = (√k/‖r‖)(I − r rᵀ/‖r‖²)
                let norm2 = r.dot(&r);
                let scale = k.sqrt() / norm2.sqrt();
                let proj = r.dot(&g) / norm2;
                let out = (&g - &(&r * proj)) * scale;
                g.assign(&out);
            }
        }
        self.encoder.backward_batch(&cache.enc, g_raw.view())
    }

    pub fn decode_batch(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.decoder.forward_batch(y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        w.u32(self.d() as u32)?;
        w.u32(self.k() as u32)?;
        w.u8(u8::from(self.normalize))?;
        w.mlp(&self.encoder)?;
        w.mlp(&self.decoder)?;
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        let d = r.dim("codec d")?;
        let k = r.dim("codec k")?;
        let normalize = r.u8()? != 0;
        let encoder = r.mlp()?;
        let decoder = r.mlp()?;
        r.expect_end()?;
        if encoder.in_dim() != d || encoder.out_dim() != k || decoder.in_dim() != k || decoder.out_dim() != d {
            return Err(r.format_error(format!("codec networks do not match recorded d = {d}, k = {k}")));
        }
        Ok(Self {
            encoder,
            decoder,
            normalize,
        })
    }
}

/// Source size `n` (image values) and channel uses `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemDims {
    pub n: usize,
    pub k: usize,
}

impl SystemDims {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if k == 0 || k > n {
            return Err(Error::InvalidInput(format!("need 1 <= k <= n, got k = {k}, n = {n}")));
        }
        Ok(Self { n, k })
    }
}

/// The exact ratio `k/n`, kept unreduced for display.
#[derive(Debug, Clone, Copy, Eq)]
pub struct CompressionRatio {
    pub k: usize,
    pub n: usize,
}

impl CompressionRatio {
    pub fn value(&self) -> f64 {
        self.k as f64 / self.n as f64
    }

    pub fn is_one(&self) -> bool {
        self.k == self.n
    }
}

impl PartialEq for CompressionRatio {
    fn eq(&self, other: &Self) -> bool {
        self.k as u128 * other.n as u128 == other.k as u128 * self.n as u128
    }
}

impl fmt::Display for CompressionRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.k, self.n)
    }
}

pub fn compression_ratio(dims: SystemDims) -> CompressionRatio {
    CompressionRatio { k: dims.k, n: dims.n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, Dense};
    use ndarray::array;

    #[test]
    fn normalization_examples() {
        let x = normalize_power(&[3.0, 4.0]).unwrap();
        let s = (2.0f64 / 25.0).sqrt();
        assert!((x[0] - 3.0 * s).abs() < 1e-15 && (x[1] - 4.0 * s).abs() < 1e-15);
        assert!((x[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((ChannelSymbols(x).mean_power() - 1.0).abs() < 1e-12);
        assert_eq!(normalize_power(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(normalize_power(&[-5.0]).unwrap(), vec![-1.0]);
        assert!(normalize_power(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn noise_variance_definition() {
        assert_eq!(noise_variance(0.0), 1.0);
        assert!((noise_variance(10.0) - 0.1).abs() < 1e-15);
        assert_eq!(noise_variance(f64::INFINITY), 0.0);
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let x = ChannelSymbols(vec![0.3, -1.7, 1.2]);
        let (y, h) = transmit_channel(&x, &ChannelConfig::noiseless(), &mut Rng::new(1));
        assert_eq!(h, 1.0);
        assert_eq!(y, x);
    }

    #[test]
    fn rayleigh_equalized_noiseless_recovers_x() {
        let cfg = ChannelConfig {
            snr_db: f64::INFINITY,
            fading: Fading::Rayleigh,
        };
        let x = ChannelSymbols(vec![0.5, -1.0]);
        let (y, h) = transmit_channel(&x, &cfg, &mut Rng::new(2));
        assert!(h > 0.0);
        for (a, b) in y.0.iter().zip(&x.0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn codec_dims_and_identity() {
        let c = ChannelCodec::new(16, 10, 64, &mut Rng::new(3)).unwrap();
        assert_eq!((c.d(), c.k()), (16, 10));
        assert_eq!(c.encoder.layers().len(), 2);
        assert_eq!(c.decoder.layers().len(), 2);
        let x = c.encode(&FlowVector(vec![0.1; 16])).unwrap();
        assert!((x.mean_power() - 1.0).abs() < 1e-9);
        assert!(c.decode(&ChannelSymbols(vec![0.0; 3])).is_err());

        let id = ChannelCodec::identity(4);
        let n = FlowVector(vec![0.1, 2.0, -3.0, 0.0]);
        assert_eq!(id.decode(&id.encode(&n).unwrap()).unwrap(), n);
    }

    #[test]
    fn zero_weight_decoder_outputs_bias() {
        let mut c = ChannelCodec::new(3, 2, 4, &mut Rng::new(4)).unwrap();
        let last = c.decoder.layers().len() - 1;
        c.decoder.layers_mut()[last] = Dense {
            weight: Array2::zeros((3, 4)),
            bias: array![0.5, -0.5, 2.0],
            activation: Activation::Identity,
        };
        let out = c.decode(&ChannelSymbols(vec![1.0, -2.0])).unwrap();
        assert_eq!(out.0, vec![0.5, -0.5, 2.0]);
    }

    #[test]
    fn encode_gradient_through_normalization() {
        let c = ChannelCodec::new(5, 3, 6, &mut Rng::new(5)).unwrap();
        let mut rng = Rng::new(6);
        let w: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let n0: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let eval = |n: &[f64]| {
            let nb = Array2::from_shape_vec((1, 5), n.to_vec()).unwrap();
            let (x, cache) = c.encode_batch(nb.view()).unwrap();
            let loss: f64 = x.row(0).iter().zip(&w).map(|(a, b)| a * b).sum();
            let gx = Array2::from_shape_vec((1, 3), w.clone()).unwrap();
            let (gn, _) = c.encode_backward(&cache, gx.view()).unwrap();
            (loss, gn.row(0).to_vec())
        };
        assert!(grad_check(eval, &n0, 1e-5) < 1e-4);
    }

    #[test]
    fn ratios() {
        let r1 = compression_ratio(SystemDims::new(3072, 1).unwrap());
        let r10 = compression_ratio(SystemDims::new(3072, 10).unwrap());
        assert_eq!(r1.to_string(), "1/3072");
        assert_eq!(r10.to_string(), "10/3072");
        assert_eq!(r10, CompressionRatio { k: 5, n: 1536 });
        assert_ne!(r1, r10);
        let full = compression_ratio(SystemDims::new(3072, 3072).unwrap());
        assert!(full.is_one());
        assert_eq!(full, CompressionRatio { k: 1, n: 1 });
        assert!(SystemDims::new(10, 11).is_err());
        assert!(SystemDims::new(10, 0).is_err());
    }

    #[test]
    fn codec_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = ChannelCodec::new(4, 2, 5, &mut Rng::new(7)).unwrap();
        let p = dir.path().join("codec.llnk");
        c.save(&p).unwrap();
        assert_eq!(ChannelCodec::load(&p).unwrap(), c);
    }
}
