//! Stage-2 codec training against the channel with SNR annealing.

use ndarray::{Array1, Array2, ArrayView2};

use crate::channel::{transmit_channel, ChannelCodec, ChannelConfig, ChannelSymbols};
use crate::error::{Error, Result};
use crate::flow::{FlowGrads, FlowModel};
use crate::generator::{cosine_lr, gather_rows, latent_matrix, GeneratorModel, LatentCode};
use crate::nn::{AdamConfig, AdamState, MlpGrads, Rng};

use super::SemComSystem;

/// Per-epoch training SNR: a linear ramp in dB from `start_snr_db` down to
/// `target_high_db` over the first `anneal_fraction` of epochs, then uniform
/// draws from `[target_low_db, target_high_db]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub start_snr_db: f64,
    pub target_low_db: f64,
    pub target_high_db: f64,
    pub anneal_fraction: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            start_snr_db: 20.0,
            target_low_db: 5.0,
            target_high_db: 10.0,
            anneal_fraction: 0.5,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.target_low_db.is_finite()
            && self.target_high_db.is_finite()
            && self.target_low_db <= self.target_high_db
            && self.start_snr_db >= self.target_high_db
            && (0.0..=1.0).contains(&self.anneal_fraction);
        if !ok {
            return Err(Error::InvalidInput(format!(
                "invalid anneal schedule: start {} dB, target [{}, {}] dB, fraction {}",
                self.start_snr_db, self.target_low_db, self.target_high_db, self.anneal_fraction
            )));
        }
        Ok(())
    }

    /// Number of epochs spent on the deterministic ramp.
    pub fn anneal_epochs(&self, epochs: usize) -> usize {
        (self.anneal_fraction * epochs as f64).floor() as usize
    }

    pub fn snr_for_epoch(&self, epoch: usize, epochs: usize, rng: &mut Rng) -> f64 {
        let ramp = self.anneal_epochs(epochs);
        if epoch < ramp {
            let t = epoch as f64 / ramp as f64;
            self.start_snr_db + (self.target_high_db - self.start_snr_db) * t
        } else {
            rng.uniform_in(self.target_low_db, self.target_high_db)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
    /// Weight of the latent-space term `MSE(L, L̂)`.
    pub gamma: f64,
    /// Also update flow parameters (at `flow_lr`).
    pub finetune_flow: bool,
    pub flow_lr: f64,
    /// Weight of `MSE(G(L̂), G(L))`; zero disables the pixel term.
    pub pixel_weight: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 2e-3,
            final_lr_fraction: 0.1,
            gamma: 1.0,
            finetune_flow: false,
            flow_lr: 1e-4,
            pixel_weight: 0.0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(self.gamma >= 0.0) || !(self.pixel_weight >= 0.0) {
            return Err(Error::InvalidInput("stage-2 config needs positive epochs, batch, lr and nonnegative weights".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Report {
    /// Mean minibatch loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training SNR used in each epoch.
    pub epoch_snr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage2Grads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
    pub flow: Option<FlowGrads>,
}

/// Stage-2 loss of one batch under an explicit effective noise matrix
/// (`Y = X + noise`), with gradients for the codec and optionally the flow.
pub fn stage2_loss(
    codec: &ChannelCodec,
    flow: &FlowModel,
    generator: Option<&GeneratorModel>,
    l: ArrayView2<f64>,
    noise: ArrayView2<f64>,
    cfg: &Stage2Config,
) -> Result<(f64, Stage2Grads)> {
    let b = l.nrows() as f64;
    let d = l.ncols() as f64;
    let (n, _, fwd_cache) = flow.forward_batch(l)?;
    let (x, enc_cache) = codec.encode_batch(n.view())?;
    if noise.dim() != x.dim() {
        return Err(Error::dims("noise matrix", format!("{:?}", x.dim()), format!("{:?}", noise.dim())));
    }
    let y = &x + &noise;
    let (n_hat, dec_cache) = codec.decode_batch(y.view())?;
    let (l_hat, inv_cache) = flow.inverse_batch(n_hat.view())?;

    let dn = &n_hat - &n;
    let dl = &l_hat - &l;
    let mut loss = dn.iter().map(|v| v * v).sum::<f64>() / (b * d) + cfg.gamma * dl.iter().map(|v| v * v).sum::<f64>() / (b * d);
    let mut g_l_hat = &dl * (2.0 * cfg.gamma / (b * d));

    if cfg.pixel_weight > 0.0 {
        let g = generator.ok_or_else(|| Error::InvalidInput("pixel loss needs the generator".into()))?;
        let target = g.net.predict_batch(l)?;
        let (out, cache) = g.net.forward_batch(l_hat.view())?;
        let diff = &out - &target;
        let px = diff.ncols() as f64;
        loss += cfg.pixel_weight * diff.iter().map(|v| v * v).sum::<f64>() / (b * px);
        let g_out = &diff * (2.0 * cfg.pixel_weight / (b * px));
        g_l_hat += &g.net.backward_input(&cache, g_out.view())?;
    }

    let (g_from_l, inv_grads) = flow.inverse_backward(&inv_cache, g_l_hat.view())?;
    let g_n_hat = &dn * (2.0 / (b * d)) + &g_from_l;
    let (g_y, decoder) = codec.decoder.backward_batch(&dec_cache, g_n_hat.view())?;
    let (g_n_enc, encoder) = codec.encode_backward(&enc_cache, g_y.view())?;

    let flow_grads = if cfg.finetune_flow {
        let g_n = g_n_enc - &dn * (2.0 / (b * d));
        let zero_ld = Array1::zeros(l.nrows());
        let (_, mut fg) = flow.forward_backward(&fwd_cache, g_n.view(), &zero_ld)?;
        fg.add_assign(&inv_grads);
        Some(fg)
    } else {
        None
    };
    Ok((
        loss,
        Stage2Grads {
            encoder,
            decoder,
            flow: flow_grads,
        },
    ))
}

/// Effective additive noise (`Y − X`) for `rows × k` symbols.
fn effective_noise(rows: usize, k: usize, channel: &ChannelConfig, rng: &mut Rng) -> Array2<f64> {
    let mut out = Array2::zeros((rows, k));
    for mut row in out.rows_mut() {
        let (y, _) = transmit_channel(&ChannelSymbols(vec![0.0; k]), channel, rng);
        row.assign(&ndarray::ArrayView1::from(&y.0));
    }
    out
}

/// Trains the codec (and optionally the flow) of `sys` on cached latents.
pub fn train_e2e(
    sys: &SemComSystem,
    latents: &[LatentCode],
    schedule: &AnnealSchedule,
    cfg: &Stage2Config,
    rng: &Rng,
) -> Result<(SemComSystem, Stage2Report)> {
    schedule.validate()?;
    cfg.validate()?;
    if latents.is_empty() {
        return Err(Error::InvalidInput("stage-2 training needs latents".into()));
    }
    let xs = latent_matrix(latents)?;
    if xs.ncols() != sys.codec.d() {
        return Err(Error::dims("training latents", sys.codec.d(), xs.ncols()));
    }
    let mut out = sys.clone();
    let fading = sys.channel.fading;
    let mut sched_rng = rng.substream("e2e-schedule");
    let mut shuffle_rng = rng.substream("e2e-shuffle");
    let mut noise_rng = rng.substream("e2e-noise");
    let codec_params = out.codec.encoder.param_count() + out.codec.decoder.param_count();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), codec_params);
    let mut flow_adam = AdamState::new(AdamConfig::with_lr(cfg.flow_lr), out.flow.param_count());
    let generator = (cfg.pixel_weight > 0.0).then_some(&sys.generator);

    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut report = Stage2Report {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        epoch_snr: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let snr = schedule.snr_for_epoch(epoch, cfg.epochs, &mut sched_rng);
        let channel = ChannelConfig { snr_db: snr, fading };
        adam.config.lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        flow_adam.config.lr = cosine_lr(cfg.flow_lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let l = gather_rows(&xs, chunk);
            let noise = effective_noise(chunk.len(), out.codec.k(), &channel, &mut noise_rng);
            let diverged = |loss: f64| Error::Diverged {
                stage: format!("train_e2e at {snr:.2} dB"),
                unit: "epoch",
                index: epoch,
                loss,
            };
            let (loss, grads) = stage2_loss(&out.codec, &out.flow, generator, l.view(), noise.view(), cfg).map_err(|e| match e {
                Error::NonFinite { .. } => diverged(f64::NAN),
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            total += loss * chunk.len() as f64;
            let mut blocks = grads.encoder.blocks();
            blocks.extend(grads.decoder.blocks());
            let mut params = out.codec.encoder.param_blocks_mut();
            params.extend(out.codec.decoder.param_blocks_mut());
            adam.step_blocks(params, &blocks).map_err(|_| diverged(loss))?;
            if let Some(fg) = &grads.flow {
                flow_adam.step_blocks(out.flow.param_blocks_mut(), &fg.blocks()).map_err(|_| diverged(loss))?;
            }
        }
        report.epoch_loss.push(total / latents.len() as f64);
        report.epoch_snr.push(snr);
    }
    Ok((out, report))
}

/// Latent-space reconstruction errors of a codec/flow pair at one channel setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentMse {
    /// `MSE(N, N̂)`.
    pub flow_space: f64,
    /// `MSE(L, L̂)`.
    pub latent_space: f64,
}

pub fn latent_mse(codec: &ChannelCodec, flow: &FlowModel, latents: &[LatentCode], channel: &ChannelConfig, rng: &Rng) -> Result<LatentMse> {
    let l = latent_matrix(latents)?;
    let (n, _, _) = flow.forward_batch(l.view())?;
    let (x, _) = codec.encode_batch(n.view())?;
    let noise = effective_noise(x.nrows(), x.ncols(), channel, &mut rng.substream("latent-mse"));
    let (n_hat, _) = codec.decode_batch((&x + &noise).view())?;
    let (l_hat, _) = flow.inverse_batch(n_hat.view())?;
    let count = (l.nrows() * l.ncols()) as f64;
    Ok(LatentMse {
        flow_space: (&n_hat - &n).iter().map(|v| v * v).sum::<f64>() / count,
        latent_space: (&l_hat - &l).iter().map(|v| v * v).sum::<f64>() / count,
    })
}
