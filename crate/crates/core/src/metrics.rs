//! Image quality metrics: MSE, PSNR and an LPIPS-style perceptual distance.
//!
//! The perceptual distance follows the usual recipe over a fixed,
//! forward-only convolutional feature network: unit-normalize each spatial
//! position's channel vector, scale channels by per-layer weights `c_l`, and
//! average the squared differences over each layer's spatial grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::io::{BinReader, BinWriter, WEIGHT_MAGIC, WEIGHT_VERSION};
use crate::nn::Rng;
use crate::scene::Image;

/// PSNR written to CSV files in place of `+∞`.
pub const PSNR_CAP_DB: f64 = 100.0;

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::dims(
            "image pair",
            format!("{}x{}", a.height(), a.width()),
            format!("{}x{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10·log10(1 / mse)` for unit peak; `+∞` when `mse = 0`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// PSNR clamped to [`PSNR_CAP_DB`] for tabular output.
pub fn psnr_for_csv(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// 3×3, stride-2, zero-padded convolution followed by ReLU. No bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// `[out][in][3][3]`, flattened.
    pub weight: Vec<f64>,
}

impl ConvLayer {
    fn out_size(&self, size: usize) -> usize {
        (size + 2 - 3) / self.stride + 1
    }

    /// `input` is `h × w × in_channels`; returns `(h', w', h' × w' × out)`.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> (usize, usize, Vec<f64>) {
        let (oh, ow) = (self.out_size(h), self.out_size(w));
        let (ci, co) = (self.in_channels, self.out_channels);
        let mut out = vec![0.0; oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * co..(oy * ow + ox + 1) * co];
                for ky in 0..3 {
                    let iy = (oy * self.stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * self.stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let px = &input[(iy as usize * w + ix as usize) * ci..][..ci];
                        for (oc, acc) in o.iter_mut().enumerate() {
                            let base = oc * ci * 9 + ky * 3 + kx;
                            for (icn, &v) in px.iter().enumerate() {
                                *acc += self.weight[base + icn * 9] * v;
                            }
                        }
                    }
                }
                for v in o.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        (oh, ow, out)
    }
}

/// Fixed convolutional feature extractor with per-layer channel weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub layers: Vec<ConvLayer>,
    /// `c_l`, one weight per output channel of each layer.
    pub channel_weights: Vec<Vec<f64>>,
}

/// One layer's normalized features, `height × width × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layers: Vec<FeatureLayer>,
}

pub const DEFAULT_FEATURE_SEED: u64 = 0x4C50_4950;

impl Default for FeatureNet {
    fn default() -> Self {
        Self::seeded(&[3, 8, 16, 32], DEFAULT_FEATURE_SEED)
    }
}

impl FeatureNet {
    /// He-uniform random kernels from a fixed seed, `c_l = 1/√C_l`.
    pub fn seeded(channels: &[usize], seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut layers = Vec::new();
        let mut channel_weights = Vec::new();
        for w in channels.windows(2) {
            let (ci, co) = (w[0], w[1]);
            let limit = (6.0 / (ci * 9) as f64).sqrt();
            layers.push(ConvLayer {
                in_channels: ci,
                out_channels: co,
                stride: 2,
                weight: (0..co * ci * 9).map(|_| rng.uniform_in(-limit, limit)).collect(),
            });
            channel_weights.push(vec![1.0 / (co as f64).sqrt(); co]);
        }
        Self { layers, channel_weights }
    }

    pub fn extract(&self, img: &Image) -> Result<FeatureMap> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::InvalidInput("feature net has no layers".into()))?;
        if first.in_channels != 3 {
            return Err(Error::dims("feature net input channels", 3, first.in_channels));
        }
        // map [0, 1] to [-1, 1]
        let mut act: Vec<f64> = img.pixels().iter().map(|v| 2.0 * v - 1.0).collect();
        let (mut h, mut w) = (img.height(), img.width());
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (oh, ow, next) = layer.forward(&act, h, w);
            let c = layer.out_channels;
            let mut data = next.clone();
            for px in data.chunks_mut(c) {
                let n = px.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                for v in px.iter_mut() {
                    *v /= n;
                }
            }
            out.push(FeatureLayer {
                height: oh,
                width: ow,
                channels: c,
                data,
            });
            act = next;
            h = oh;
            w = ow;
        }
        Ok(FeatureMap { layers: out })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        w.u8(CONV_BLOCK_TAG)?;
        w.u32(self.layers.len() as u32)?;
        for (l, c) in self.layers.iter().zip(&self.channel_weights) {
            w.u32(l.in_channels as u32)?;
            w.u32(l.out_channels as u32)?;
            w.u32(l.stride as u32)?;
            w.f64s(l.weight.iter())?;
            w.f64s(c.iter())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        let tag = r.u8()?;
        if tag != CONV_BLOCK_TAG {
            return Err(r.format_error(format!("expected conv block tag {CONV_BLOCK_TAG:#x}, found {tag:#x}")));
        }
        let count = r.dim("conv layer count")?;
        let mut layers = Vec::with_capacity(count.min(64));
        let mut channel_weights = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let ci = r.dim("in channels")?;
            let co = r.dim("out channels")?;
            let stride = r.dim("stride")?;
            if stride == 0 {
                return Err(r.format_error("zero stride"));
            }
            let weight = r.f64s(co * ci * 9)?;
            channel_weights.push(r.f64s(co)?);
            layers.push(ConvLayer {
                in_channels: ci,
                out_channels: co,
                stride,
                weight,
            });
        }
        r.expect_end()?;
        for pair in layers.windows(2) {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(r.format_error("conv channel counts do not chain"));
            }
        }
        Ok(Self { layers, channel_weights })
    }
}

const CONV_BLOCK_TAG: u8 = 0xC0;

/// `Σ_l 1/(H_l W_l) Σ_ij ‖c_l ⊙ (f_ij − f̂_ij)‖²` over precomputed features.
pub fn lpips_from_features(a: &FeatureMap, b: &FeatureMap, channel_weights: &[Vec<f64>]) -> Result<f64> {
    if a.layers.len() != b.layers.len() || a.layers.len() != channel_weights.len() {
        return Err(Error::dims("feature layer count", a.layers.len(), b.layers.len()));
    }
    let mut total = 0.0;
    for ((fa, fb), c) in a.layers.iter().zip(&b.layers).zip(channel_weights) {
        if fa.data.len() != fb.data.len() || fa.channels != c.len() {
            return Err(Error::dims("feature layer shape", fa.data.len(), fb.data.len()));
        }
        let mut layer_sum = 0.0;
        for (pa, pb) in fa.data.chunks(fa.channels).zip(fb.data.chunks(fb.channels)) {
            layer_sum += pa
                .iter()
                .zip(pb)
                .zip(c)
                .map(|((x, y), w)| {
                    let d = w * (x - y);
                    d * d
                })
                .sum::<f64>();
        }
        total += layer_sum / (fa.height * fa.width) as f64;
    }
    Ok(total)
}

pub fn lpips(a: &Image, b: &Image, net: &FeatureNet) -> Result<f64> {
    check_shapes(a, b)?;
    let fa = net.extract(a)?;
    let fb = net.extract(b)?;
    lpips_from_features(&fa, &fb, &net.channel_weights)
}

/// All three metrics for one image pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub psnr_db: f64,
    pub lpips: f64,
}

pub fn score(reference: &Image, reconstruction: &Image, net: &FeatureNet) -> Result<Scores> {
    let m = mse(reference, reconstruction)?;
    Ok(Scores {
        mse: m,
        psnr_db: psnr_from_mse(m),
        lpips: lpips(reference, reconstruction, net)?,
    })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    cov / (vx * vy).sqrt()
}
