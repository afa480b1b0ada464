//! SNR and k/n sweeps, with CSV and SVG output.

use std::fmt::Write as _;
use std::path::Path;

use crate::channel::{compression_ratio, ChannelCodec, ChannelConfig, CompressionRatio, SystemDims};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::generator::{GeneratorModel, LatentCode};
use crate::metrics::{psnr_for_csv, FeatureNet};
use crate::nn::Rng;
use crate::scene::Image;

use super::{train_e2e, transmit_many, AnnealSchedule, SemComSystem, Stage2Config, Stage2Report};

/// Images per batched datapath call.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Snr,
    Ratio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Lpips,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    /// SNR in dB, or `k` on the ratio axis.
    pub x: f64,
    pub ratio: Option<CompressionRatio>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub lpips_mean: f64,
    pub lpips_std: f64,
    pub mse_mean: f64,
    pub reps: usize,
    pub seed: u64,
    /// Same statistics with the flow replaced by the identity (ratio axis only).
    pub no_flow: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub axis: SweepAxis,
    pub rows: Vec<CurveRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl CurveTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let head = "psnr_mean,psnr_std,lpips_mean,lpips_std,mse_mean,reps,seed";
        match self.axis {
            SweepAxis::Snr => writeln!(s, "snr_db,{head}"),
            SweepAxis::Ratio => writeln!(s, "k,ratio,{head},noflow_psnr_mean,noflow_lpips_mean"),
        }
        .expect("string write");
        for r in &self.rows {
            let x = match self.axis {
                SweepAxis::Snr => fmt_num(r.x),
                SweepAxis::Ratio => format!("{},{}", r.x as usize, r.ratio.map(|q| q.to_string()).unwrap_or_default()),
            };
            let _ = write!(
                s,
                "{x},{},{},{},{},{},{},{}",
                fmt_num(r.psnr_mean),
                fmt_num(r.psnr_std),
                fmt_num(r.lpips_mean),
                fmt_num(r.lpips_std),
                fmt_num(r.mse_mean),
                r.reps,
                r.seed
            );
            if self.axis == SweepAxis::Ratio {
                let (p, l) = r.no_flow.unwrap_or((f64::NAN, f64::NAN));
                let _ = write!(s, ",{},{}", fmt_num(p), fmt_num(l));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Line chart of one metric against the sweep axis.
    pub fn to_svg(&self, metric: Metric) -> String {
        let (w, h) = (640.0, 400.0);
        let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
        let pw = w - left - right;
        let ph = h - top - bottom;

        let value = |r: &CurveRow| match metric {
            Metric::Psnr => psnr_for_csv(r.psnr_mean),
            Metric::Lpips => r.lpips_mean,
        };
        let ablation = |r: &CurveRow| {
            r.no_flow.map(|(p, l)| match metric {
                Metric::Psnr => psnr_for_csv(p),
                Metric::Lpips => l,
            })
        };
        let xs: Vec<f64> = self
            .rows
            .iter()
            .map(|r| match (self.axis, r.ratio) {
                (SweepAxis::Ratio, Some(q)) => q.value(),
                _ => psnr_for_csv(r.x),
            })
            .collect();
        let mut ys: Vec<f64> = self.rows.iter().map(value).collect();
        ys.extend(self.rows.iter().filter_map(ablation));
        let finite = |v: &&f64| v.is_finite();
        let (mut x0, mut x1) = xs.iter().filter(finite).fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let (mut y0, mut y1) = ys.iter().filter(finite).fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        if x0 > x1 {
            (x0, x1) = (0.0, 1.0);
        }
        if y0 > y1 {
            (y0, y1) = (0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        let pad = ((y1 - y0) * 0.1).max(1e-6);
        y0 -= pad;
        y1 += pad;
        let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
        let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let (ylabel, title) = match metric {
            Metric::Psnr => ("PSNR (dB)", "PSNR"),
            Metric::Lpips => ("LPIPS", "LPIPS"),
        };
        let xlabel = match self.axis {
            SweepAxis::Snr => "SNR (dB)",
            SweepAxis::Ratio => "k/n",
        };

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title} vs {xlabel}</text>"#, w / 2.0);
        // axes
        let _ = writeln!(
            s,
            r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
            top + ph,
            left + pw
        );
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{:.2}" x2="{left}" y2="{:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{:.3}</text>"#,
                left - 5.0,
                py(y),
                py(y),
                left - 8.0,
                py(y) + 4.0,
                y
            );
        }
        for (r, &x) in self.rows.iter().zip(&xs) {
            if !x.is_finite() {
                continue;
            }
            let label = match (self.axis, r.ratio) {
                (SweepAxis::Ratio, Some(q)) => q.to_string(),
                _ => fmt_num(r.x).trim_end_matches('0').trim_end_matches('.').to_string(),
            };
            let _ = writeln!(
                s,
                r#"<line x1="{:.2}" y1="{}" x2="{:.2}" y2="{}" stroke="black"/><text x="{:.2}" y="{}" text-anchor="middle">{label}</text>"#,
                px(x),
                top + ph,
                px(x),
                top + ph + 5.0,
                px(x),
                top + ph + 20.0
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, left + pw / 2.0, h - 12.0);
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{ylabel}</text>"#,
            top + ph / 2.0,
            top + ph / 2.0
        );

        let mut series = |vals: Vec<(f64, f64)>, color: &str, name: &str, slot: usize| {
            let pts: Vec<String> = vals
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            if pts.is_empty() {
                return;
            }
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("pair");
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let ly = top + 14.0 + 16.0 * slot as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
                left + pw - 120.0,
                left + pw - 100.0,
                left + pw - 95.0,
                ly + 4.0
            );
        };
        series(xs.iter().copied().zip(self.rows.iter().map(value)).collect(), "#1f77b4", "with flow", 0);
        if self.rows.iter().any(|r| r.no_flow.is_some()) {
            let abl: Vec<(f64, f64)> = xs
                .iter()
                .zip(&self.rows)
                .map(|(&x, r)| (x, ablation(r).unwrap_or(f64::NAN)))
                .collect();
            series(abl, "#d62728", "no flow", 1);
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn write_svg(&self, path: &Path, metric: Metric) -> Result<()> {
        std::fs::write(path, self.to_svg(metric)).map_err(|e| Error::io(path, e))
    }
}

/// Summary statistics over `reps` noisy passes of every test image.
fn evaluate(
    sys: &SemComSystem,
    images: &[Image],
    latents: &[LatentCode],
    channel: &ChannelConfig,
    reps: usize,
    rng: &Rng,
) -> Result<(Stats, Stats, f64)> {
    let mut psnr = Vec::with_capacity(reps * images.len());
    let mut lpips = Vec::with_capacity(reps * images.len());
    let mut mse = 0.0;
    for rep in 0..reps {
        let rep_rng = rng.substream_indexed("rep", rep as u64);
        for (c, (imgs, lats)) in images.chunks(EVAL_CHUNK).zip(latents.chunks(EVAL_CHUNK)).enumerate() {
            let refs: Vec<&Image> = imgs.iter().collect();
            let rngs: Vec<Rng> = (0..imgs.len())
                .map(|i| rep_rng.substream_indexed("image", (c * EVAL_CHUNK + i) as u64))
                .collect();
            for r in transmit_many(sys, &refs, lats, channel, &rngs)? {
                psnr.push(psnr_for_csv(r.psnr_db));
                lpips.push(r.lpips);
                mse += r.mse;
            }
        }
    }
    let count = psnr.len() as f64;
    Ok((mean_std(&psnr), mean_std(&lpips), mse / count))
}

type Stats = (f64, f64);

fn check_eval_inputs(images: &[Image], latents: &[LatentCode], reps: usize) -> Result<()> {
    if images.is_empty() || images.len() != latents.len() {
        return Err(Error::InvalidInput(format!(
            "need matching nonempty images and latents, got {} and {}",
            images.len(),
            latents.len()
        )));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("reps must be positive".into()));
    }
    Ok(())
}

/// PSNR/LPIPS/MSE against channel SNR over pre-inverted test images.
/// `f64::INFINITY` in `snrs` is the noise-off sentinel.
pub fn snr_sweep(
    sys: &SemComSystem,
    images: &[Image],
    latents: &[LatentCode],
    snrs: &[f64],
    reps: usize,
    rng: &Rng,
) -> Result<CurveTable> {
    if snrs.is_empty() {
        return Err(Error::InvalidInput("empty SNR list".into()));
    }
    check_eval_inputs(images, latents, reps)?;
    let mut rows = Vec::with_capacity(snrs.len());
    for (i, &snr) in snrs.iter().enumerate() {
        if snr.is_nan() {
            return Err(Error::InvalidInput("SNR must not be NaN".into()));
        }
        let channel = ChannelConfig {
            snr_db: snr,
            fading: sys.channel.fading,
        };
        let point_rng = rng.substream_indexed("snr-point", i as u64);
        let ((pm, ps), (lm, ls), mm) = evaluate(sys, images, latents, &channel, reps, &point_rng)?;
        rows.push(CurveRow {
            x: snr,
            ratio: Some(sys.ratio()),
            psnr_mean: pm,
            psnr_std: ps,
            lpips_mean: lm,
            lpips_std: ls,
            mse_mean: mm,
            reps,
            seed: point_rng.seed(),
            no_flow: None,
        });
    }
    Ok(CurveTable {
        axis: SweepAxis::Snr,
        rows,
    })
}

/// Fixed components shared by every `k` in a k/n sweep.
#[derive(Debug, Clone)]
pub struct KnSweepSetup {
    pub generator: GeneratorModel,
    pub flow: FlowModel,
    pub feature_net: FeatureNet,
    /// Channel used for evaluation; its fading also applies in training.
    pub eval_channel: ChannelConfig,
    pub codec_hidden: usize,
    pub schedule: AnnealSchedule,
    pub stage2: Stage2Config,
    pub reps: usize,
}

#[derive(Debug, Clone)]
pub struct KnSweepOutput {
    pub table: CurveTable,
    /// `(k, with-flow system, no-flow system)`.
    pub systems: Vec<(usize, SemComSystem, SemComSystem)>,
    pub reports: Vec<(usize, Stage2Report, Stage2Report)>,
}

/// Trains one codec per `k` with the flow and one with the identity flow,
/// from the same initialization and noise, and evaluates both.
pub fn kn_sweep(
    setup: &KnSweepSetup,
    ks: &[usize],
    train_latents: &[LatentCode],
    test_images: &[Image],
    test_latents: &[LatentCode],
    rng: &Rng,
) -> Result<KnSweepOutput> {
    if ks.is_empty() {
        return Err(Error::InvalidInput("empty k list".into()));
    }
    check_eval_inputs(test_images, test_latents, setup.reps)?;
    let d = setup.generator.latent_dim();
    let n = setup.generator.spec.n();
    let mut rows = Vec::with_capacity(ks.len());
    let mut systems = Vec::with_capacity(ks.len());
    let mut reports = Vec::with_capacity(ks.len());
    for &k in ks {
        let ratio: CompressionRatio = compression_ratio(SystemDims::new(n, k)?);
        let codec = ChannelCodec::new(d, k, setup.codec_hidden, &mut rng.substream_indexed("kn-codec", k as u64))?;
        let train_rng = rng.substream_indexed("kn-train", k as u64);
        let eval_rng = rng.substream_indexed("kn-eval", k as u64);
        let build = |flow: FlowModel| {
            SemComSystem::new(
                setup.generator.clone(),
                flow,
                codec.clone(),
                setup.eval_channel,
                setup.feature_net.clone(),
            )
        };
        let (with_flow, rep_f) = train_e2e(&build(setup.flow.clone())?, train_latents, &setup.schedule, &setup.stage2, &train_rng)?;
        let (no_flow, rep_n) = train_e2e(&build(FlowModel::identity(d))?, train_latents, &setup.schedule, &setup.stage2, &train_rng)?;
        let ((pm, ps), (lm, ls), mm) = evaluate(&with_flow, test_images, test_latents, &setup.eval_channel, setup.reps, &eval_rng)?;
        let ((npm, _), (nlm, _), _) = evaluate(&no_flow, test_images, test_latents, &setup.eval_channel, setup.reps, &eval_rng)?;
        rows.push(CurveRow {
            x: k as f64,
            ratio: Some(ratio),
            psnr_mean: pm,
            psnr_std: ps,
            lpips_mean: lm,
            lpips_std: ls,
            mse_mean: mm,
            reps: setup.reps,
            seed: eval_rng.seed(),
            no_flow: Some((npm, nlm)),
        });
        systems.push((k, with_flow, no_flow));
        reports.push((k, rep_f, rep_n));
    }
    Ok(KnSweepOutput {
        table: CurveTable {
            axis: SweepAxis::Ratio,
            rows,
        },
        systems,
        reports,
    })
}
