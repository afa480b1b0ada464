//! End-to-end system assembly and the transmission datapath.
//!
//! ```text
//! F ─invert→ L ─filter→ L' ─project→ P ─flow→ N ─encode→ X ─channel→ Y
//!   ─decode→ N̂ ─flow⁻¹→ L̂ ─generate→ F̂
//! ```
//!
//! The datapath runs batched so sweeps can push many images through the
//! same GEMMs; a single [`transmit`] is a batch of one. Every transmission
//! draws its privacy bias and channel noise from its own [`Rng`], so results
//! do not depend on batch composition.

mod sweep;
mod train;

pub use sweep::{kn_sweep, snr_sweep, CurveRow, CurveTable, KnSweepOutput, KnSweepSetup, Metric, SweepAxis};
pub use train::{latent_mse, stage2_loss, train_e2e, AnnealSchedule, LatentMse, Stage2Config, Stage2Grads, Stage2Report};

use ndarray::Array2;

use crate::channel::{compression_ratio, transmit_channel, ChannelCodec, ChannelConfig, ChannelSymbols, CompressionRatio, SystemDims};
use crate::error::{Error, Result, StageExt};
use crate::flow::{FlowModel, FlowVector};
use crate::generator::{invert, latent_matrix, GeneratorModel, InversionConfig, LatentCode};
use crate::metrics::{score, FeatureNet, Scores};
use crate::nn::Rng;
use crate::privacy::{kb_project, privacy_filter, KnowledgeBase, PrivacyConfig};
use crate::scene::Image;

/// Privacy configuration together with the knowledge base it projects onto.
#[derive(Debug, Clone, PartialEq)]
pub struct PrivacySetup {
    pub config: PrivacyConfig,
    pub kb: KnowledgeBase,
}

#[derive(Debug, Clone)]
pub struct SemComSystem {
    pub generator: GeneratorModel,
    pub flow: FlowModel,
    pub codec: ChannelCodec,
    pub channel: ChannelConfig,
    pub privacy: Option<PrivacySetup>,
    pub dims: SystemDims,
    pub feature_net: FeatureNet,
    /// Sender-side inversion settings used by [`transmit`].
    pub inversion: InversionConfig,
}

impl SemComSystem {
    /// Assembles a system and checks that every dimension chains.
    pub fn new(
        generator: GeneratorModel,
        flow: FlowModel,
        codec: ChannelCodec,
        channel: ChannelConfig,
        feature_net: FeatureNet,
    ) -> Result<Self> {
        let dims = SystemDims::new(generator.spec.n(), codec.k())?;
        let sys = Self {
            generator,
            flow,
            codec,
            channel,
            privacy: None,
            dims,
            feature_net,
            inversion: InversionConfig::default(),
        };
        sys.validate()?;
        Ok(sys)
    }

    pub fn with_privacy(mut self, privacy: Option<PrivacySetup>) -> Result<Self> {
        self.privacy = privacy;
        self.validate()?;
        Ok(self)
    }

    pub fn with_inversion(mut self, inversion: InversionConfig) -> Self {
        self.inversion = inversion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.generator.latent_dim();
        if self.flow.dim() != d {
            return Err(Error::dims("flow dimension", d, self.flow.dim()));
        }
        if self.codec.d() != d || self.codec.decoder.out_dim() != d {
            return Err(Error::dims("codec latent dimension", d, self.codec.d()));
        }
        if self.codec.decoder.in_dim() != self.codec.k() {
            return Err(Error::dims("codec symbol count", self.codec.k(), self.codec.decoder.in_dim()));
        }
        if self.dims.k != self.codec.k() || self.dims.n != self.generator.spec.n() {
            return Err(Error::dims(
                "system dims (k, n)",
                format!("({}, {})", self.codec.k(), self.generator.spec.n()),
                format!("({}, {})", self.dims.k, self.dims.n),
            ));
        }
        if let Some(p) = &self.privacy {
            p.config.validate(&self.generator.spec)?;
            if p.kb.mean.dim() != d {
                return Err(Error::dims("knowledge-base mean", d, p.kb.mean.dim()));
            }
        }
        Ok(())
    }

    pub fn ratio(&self) -> CompressionRatio {
        compression_ratio(self.dims)
    }
}

/// Every intermediate of one transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmissionResult {
    pub original: Image,
    pub latent: LatentCode,
    pub filtered: LatentCode,
    pub projected: LatentCode,
    pub flow_code: FlowVector,
    pub symbols: ChannelSymbols,
    pub received: ChannelSymbols,
    pub gain: f64,
    pub decoded: FlowVector,
    pub recovered: LatentCode,
    pub reconstruction: Image,
    pub mse: f64,
    pub psnr_db: f64,
    pub lpips: f64,
    pub ratio: CompressionRatio,
    pub snr_db: f64,
    pub seed: u64,
}

impl TransmissionResult {
    pub fn scores(&self) -> Scores {
        Scores {
            mse: self.mse,
            psnr_db: self.psnr_db,
            lpips: self.lpips,
        }
    }

    /// Recomputes the metrics from the stored images and compares bitwise.
    pub fn metrics_consistent(&self, net: &FeatureNet) -> Result<bool> {
        let s = score(&self.original, &self.reconstruction, net)?;
        Ok(s.mse.to_bits() == self.mse.to_bits()
            && s.psnr_db.to_bits() == self.psnr_db.to_bits()
            && s.lpips.to_bits() == self.lpips.to_bits())
    }
}

/// Inverts `image` on the sender side and transmits it.
pub fn transmit(sys: &SemComSystem, image: &Image, rng: &Rng) -> Result<TransmissionResult> {
    let inv = invert(&sys.generator, image, &sys.inversion).stage("invert")?;
    transmit_latent(sys, image, &inv.latent, rng)
}

/// Transmits an already-inverted latent over `sys.channel`.
pub fn transmit_latent(sys: &SemComSystem, image: &Image, latent: &LatentCode, rng: &Rng) -> Result<TransmissionResult> {
    let mut out = transmit_many(sys, &[image], std::slice::from_ref(latent), &sys.channel, std::slice::from_ref(rng))?;
    Ok(out.pop().expect("one result"))
}

/// Batched datapath from inverted latents. `rngs[i]` drives transmission `i`.
pub fn transmit_many(
    sys: &SemComSystem,
    images: &[&Image],
    latents: &[LatentCode],
    channel: &ChannelConfig,
    rngs: &[Rng],
) -> Result<Vec<TransmissionResult>> {
    if images.len() != latents.len() || images.len() != rngs.len() {
        return Err(Error::InvalidInput(format!(
            "{} images, {} latents and {} rngs",
            images.len(),
            latents.len(),
            rngs.len()
        )));
    }
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let spec = &sys.generator.spec;

    let mut filtered = Vec::with_capacity(latents.len());
    let mut projected = Vec::with_capacity(latents.len());
    for (l, rng) in latents.iter().zip(rngs) {
        match &sys.privacy {
            Some(p) => {
                let mut prng = rng.substream("privacy");
                let f = privacy_filter(l, spec, &p.config, &mut prng).stage("privacy_filter")?;
                let proj = kb_project(&f, &p.kb, spec, &p.config).stage("kb_project")?;
                filtered.push(f);
                projected.push(proj);
            }
            None => {
                filtered.push(l.clone());
                projected.push(l.clone());
            }
        }
    }

    let p = latent_matrix(&projected).stage("flow_forward")?;
    let (n, _, _) = sys.flow.forward_batch(p.view()).stage("flow_forward")?;
    let (x, _) = sys.codec.encode_batch(n.view()).stage("encode")?;

    let mut y = Array2::zeros(x.raw_dim());
    let mut gains = Vec::with_capacity(x.nrows());
    for (i, rng) in rngs.iter().enumerate() {
        let mut crng = rng.substream("channel");
        let (yi, h) = transmit_channel(&ChannelSymbols(x.row(i).to_vec()), channel, &mut crng);
        y.row_mut(i).assign(&ndarray::ArrayView1::from(&yi.0));
        gains.push(h);
    }

    let (n_hat, _) = sys.codec.decode_batch(y.view()).stage("decode")?;
    let (l_hat, _) = sys.flow.inverse_batch(n_hat.view()).stage("flow_inverse")?;
    let f_hat = sys.generator.generate_batch(l_hat.view()).stage("generate")?;

    let ratio = sys.ratio();
    let mut out = Vec::with_capacity(images.len());
    for i in 0..images.len() {
        let reconstruction =
            Image::new(spec.height, spec.width, f_hat.row(i).to_vec()).stage("generate")?;
        let s = score(images[i], &reconstruction, &sys.feature_net).stage("metrics")?;
        out.push(TransmissionResult {
            original: images[i].clone(),
            latent: latents[i].clone(),
            filtered: filtered[i].clone(),
            projected: projected[i].clone(),
            flow_code: FlowVector(n.row(i).to_vec()),
            symbols: ChannelSymbols(x.row(i).to_vec()),
            received: ChannelSymbols(y.row(i).to_vec()),
            gain: gains[i],
            decoded: FlowVector(n_hat.row(i).to_vec()),
            recovered: LatentCode(l_hat.row(i).to_vec()),
            reconstruction,
            mse: s.mse,
            psnr_db: s.psnr_db,
            lpips: s.lpips,
            ratio,
            snr_db: channel.snr_db,
            seed: rngs[i].seed(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArch;
    use crate::generator::{train_generator, GeneratorTrainConfig};
    use crate::metrics::psnr;
    use crate::scene::{make_dataset, SceneSpec};

    fn small_generator() -> GeneratorModel {
        let spec = SceneSpec::with_size(8, 8);
        let ds = make_dataset(64, 1, &spec).unwrap();
        let cfg = GeneratorTrainConfig {
            hidden: vec![32],
            epochs: 5,
            ..Default::default()
        };
        train_generator(&ds, &cfg, &mut Rng::new(1)).unwrap().0
    }

    fn identity_system(g: GeneratorModel) -> SemComSystem {
        let d = g.latent_dim();
        SemComSystem::new(g, FlowModel::identity(d), ChannelCodec::identity(d), ChannelConfig::noiseless(), FeatureNet::seeded(&[3, 4], 1)).unwrap()
    }

    #[test]
    fn degenerate_path_is_generate_after_invert() {
        let g = small_generator();
        let sys = identity_system(g.clone());
        let target = g.generate(&LatentCode(vec![0.4; 16])).unwrap();
        let inv = invert(&g, &target, &sys.inversion).unwrap();
        let r = transmit(&sys, &target, &Rng::new(5)).unwrap();
        assert_eq!(r.recovered, inv.latent);
        let direct = g.generate(&inv.latent).unwrap();
        assert_eq!(r.reconstruction, direct);
        assert_eq!(r.mse, crate::metrics::mse(&direct, &target).unwrap());
        assert_eq!(r.psnr_db, psnr(&direct, &target).unwrap());
        assert!(r.metrics_consistent(&sys.feature_net).unwrap());
    }

    #[test]
    fn transmission_is_deterministic_and_batch_independent() {
        let g = small_generator();
        let mut rng = Rng::new(3);
        let flow = FlowModel::new(16, &FlowArch { identity_init: false, ..Default::default() }, &mut rng).unwrap();
        let codec = ChannelCodec::new(16, 6, 16, &mut rng).unwrap();
        let sys = SemComSystem::new(g.clone(), flow, codec, ChannelConfig::awgn(5.0), FeatureNet::seeded(&[3, 4], 1)).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| g.generate(&LatentCode(vec![0.2 + 0.2 * i as f64; 16])).unwrap()).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let lats: Vec<LatentCode> = (0..3).map(|i| LatentCode(vec![0.1 * (i + 1) as f64; 16])).collect();
        let rngs: Vec<Rng> = (0..3).map(|i| Rng::new(10 + i)).collect();
        let a = transmit_many(&sys, &refs, &lats, &sys.channel, &rngs).unwrap();
        let b = transmit_many(&sys, &refs, &lats, &sys.channel, &rngs).unwrap();
        assert_eq!(a, b);
        let single = transmit_latent(&sys, &imgs[1], &lats[1], &rngs[1]).unwrap();
        assert_eq!(single.received, a[1].received);
        assert!((single.psnr_db - a[1].psnr_db).abs() < 1e-9);
        assert!((a[0].symbols.mean_power() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatched_dims_rejected() {
        let g = small_generator();
        let r = SemComSystem::new(g, FlowModel::identity(8), ChannelCodec::identity(16), ChannelConfig::noiseless(), FeatureNet::default());
        assert!(r.is_err());
    }

    #[test]
    fn stage_errors_are_named() {
        let g = small_generator();
        let mut sys = identity_system(g.clone());
        let pcfg = PrivacyConfig {
            max_steps: 1,
            ..Default::default()
        };
        let kb = KnowledgeBase {
            mean: LatentCode(vec![50.0; 16]),
            source_count: 1,
        };
        sys = sys.with_privacy(Some(PrivacySetup { config: pcfg, kb })).unwrap();
        let img = g.generate(&LatentCode(vec![0.5; 16])).unwrap();
        let err = transmit_latent(&sys, &img, &LatentCode(vec![0.5; 16]), &Rng::new(1)).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "kb_project", .. }), "{err}");
    }
}
