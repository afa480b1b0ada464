//! Run configuration: a flat `key = value` document with dotted section
//! prefixes (`channel.snr_db = 10`). `#` starts a comment. Every key except
//! `seed` has a default; unknown keys are rejected with the closest match.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::channel::{ChannelConfig, Fading, SystemDims};
use crate::error::{Error, Result};
use crate::flow::{FlowArch, FlowTrainConfig};
use crate::generator::{GeneratorTrainConfig, InversionConfig};
use crate::metrics::DEFAULT_FEATURE_SEED;
use crate::pipeline::{AnnealSchedule, Stage2Config};
use crate::privacy::{Predicate, PrivacyConfig};
use crate::scene::SceneSpec;

/// Where the sender starts each inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionStart {
    Zeros,
    /// Start from the mean of the training latents (the knowledge base).
    KbMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionSettings {
    pub max_iterations: usize,
    pub lr: f64,
    pub mse_threshold: f64,
    pub start: InversionStart,
    /// Images per batched inversion call.
    pub chunk: usize,
}

impl InversionSettings {
    /// Inversion config with a zero start; callers substitute the KB mean.
    pub fn base(&self) -> InversionConfig {
        InversionConfig {
            max_iterations: self.max_iterations,
            lr: self.lr,
            mse_threshold: self.mse_threshold,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSettings {
    pub snrs: Vec<f64>,
    pub ks: Vec<usize>,
    pub reps: usize,
    /// SNR at which the k/n sweep evaluates.
    pub kn_snr_db: f64,
    /// Stage-2 epochs per codec in the k/n sweep.
    pub kn_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub scene: SceneSpec,
    pub dims: SystemDims,
    pub train_count: usize,
    pub test_count: usize,
    pub generator: GeneratorTrainConfig,
    pub inversion: InversionSettings,
    pub flow_arch: FlowArch,
    pub flow_train: FlowTrainConfig,
    pub codec_hidden: usize,
    pub stage2: Stage2Config,
    pub anneal: AnnealSchedule,
    pub channel: ChannelConfig,
    pub privacy_enabled: bool,
    pub privacy: PrivacyConfig,
    pub metric_seed: u64,
    pub sweep: SweepSettings,
    /// Test-set image used by `transmit` and `privacy-demo`.
    pub image_index: usize,
    /// `transmit` bypasses the flow and codec (identity maps), so a noiseless
    /// run reproduces the plain inversion path.
    pub transmit_identity_path: bool,
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        let scene = SceneSpec::default();
        Self {
            seed,
            out_dir: PathBuf::from("latentlink-out"),
            dims: SystemDims { n: scene.n(), k: 10 },
            scene,
            train_count: 2000,
            test_count: 100,
            generator: GeneratorTrainConfig {
                hidden: vec![128, 512],
                epochs: 60,
                batch_size: 64,
                lr: 3e-3,
                final_lr_fraction: 0.05,
            },
            inversion: InversionSettings {
                max_iterations: 100,
                lr: 0.05,
                mse_threshold: 1e-4,
                start: InversionStart::KbMean,
                chunk: 100,
            },
            flow_arch: FlowArch::default(),
            flow_train: FlowTrainConfig {
                epochs: 30,
                ..Default::default()
            },
            codec_hidden: 64,
            stage2: Stage2Config {
                epochs: 60,
                ..Default::default()
            },
            anneal: AnnealSchedule::default(),
            channel: ChannelConfig::awgn(10.0),
            privacy_enabled: false,
            privacy: PrivacyConfig::default(),
            metric_seed: DEFAULT_FEATURE_SEED,
            sweep: SweepSettings {
                snrs: vec![0.0, 5.0, 10.0, 15.0, 20.0],
                ks: vec![1, 4, 10, 16],
                reps: 1,
                kn_snr_db: 10.0,
                kn_epochs: 60,
            },
            image_index: 0,
            transmit_identity_path: false,
        }
    }

    /// Latent dimension `d`.
    pub fn latent_dim(&self) -> usize {
        self.scene.factor_dim()
    }
}

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "paths.out_dir",
    "scene.height",
    "scene.width",
    "dims.d",
    "dims.n",
    "dims.k",
    "data.train_count",
    "data.test_count",
    "generator.hidden",
    "generator.epochs",
    "generator.batch_size",
    "generator.lr",
    "generator.final_lr_fraction",
    "inversion.max_iterations",
    "inversion.lr",
    "inversion.mse_threshold",
    "inversion.init",
    "inversion.chunk",
    "flow.coupling_layers",
    "flow.fc_layers",
    "flow.hidden_width",
    "flow.initial_bound",
    "flow.identity_init",
    "flow.epochs",
    "flow.batch_size",
    "flow.lr",
    "flow.final_lr_fraction",
    "codec.hidden",
    "train.epochs",
    "train.batch_size",
    "train.lr",
    "train.final_lr_fraction",
    "train.gamma",
    "train.finetune_flow",
    "train.flow_lr",
    "train.pixel_weight",
    "anneal.start_snr_db",
    "anneal.target_low_db",
    "anneal.target_high_db",
    "anneal.fraction",
    "channel.snr_db",
    "channel.fading",
    "privacy.enabled",
    "privacy.segments",
    "privacy.lambda1",
    "privacy.lambda2",
    "privacy.growth",
    "privacy.initial_bias",
    "privacy.max_steps",
    "privacy.predicate",
    "privacy.overshoot",
    "metrics.seed",
    "sweep.snrs",
    "sweep.ks",
    "sweep.reps",
    "sweep.kn_snr_db",
    "sweep.kn_epochs",
    "transmit.image_index",
    "transmit.identity_path",
];

struct Entry {
    line: usize,
    value: String,
}

struct Doc {
    entries: BTreeMap<String, Entry>,
}

fn err(line: usize, key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        line,
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl Doc {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }

    fn parse<T>(&mut self, key: &str, slot: &mut T, f: impl Fn(&str) -> std::result::Result<T, String>) -> Result<()> {
        if let Some(e) = self.take(key) {
            *slot = f(&e.value).map_err(|r| err(e.line, key, r))?;
        }
        Ok(())
    }
}

fn p_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expected a nonnegative integer, found `{v}`"))
}

fn p_pos(v: &str) -> std::result::Result<usize, String> {
    match p_usize(v)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn p_u64(v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("expected an unsigned integer, found `{v}`"))
}

fn p_f64(v: &str) -> std::result::Result<f64, String> {
    match v {
        "inf" | "+inf" | "off" => Ok(f64::INFINITY),
        _ => v
            .parse::<f64>()
            .ok()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| format!("expected a number, found `{v}`")),
    }
}

fn p_finite(v: &str) -> std::result::Result<f64, String> {
    p_f64(v).and_then(|x| if x.is_finite() { Ok(x) } else { Err(format!("expected a finite number, found `{v}`")) })
}

fn p_positive(v: &str) -> std::result::Result<f64, String> {
    p_finite(v).and_then(|x| if x > 0.0 { Ok(x) } else { Err(format!("must be positive, found {x}")) })
}

fn p_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" => Ok(false),
        _ => Err(format!("expected true or false, found `{v}`")),
    }
}

fn p_list<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    let items: Vec<T> = v.split(',').map(|s| f(s.trim())).collect::<std::result::Result<_, _>>()?;
    if items.is_empty() {
        return Err("empty list".into());
    }
    Ok(items)
}

fn suggestion(key: &str) -> Option<&'static str> {
    let tail = |k: &str| k.rsplit('.').next().unwrap_or(k).to_string();
    KNOWN_KEYS
        .iter()
        .map(|&k| {
            let full = strsim::levenshtein(key, k);
            let short = strsim::levenshtein(&tail(key), &tail(k));
            (full.min(short), k)
        })
        .filter(|(d, _)| *d <= 3)
        .min_by_key(|(d, _)| *d)
        .map(|(_, k)| k)
}

fn tokenize(text: &str) -> Result<Doc> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(line, content, "expected `key = value`"))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(err(line, key, "empty key"));
        }
        if !KNOWN_KEYS.contains(&key) {
            let reason = match suggestion(key) {
                Some(s) => format!("unknown key; did you mean `{s}`?"),
                None => "unknown key".to_string(),
            };
            return Err(err(line, key, reason));
        }
        if value.is_empty() {
            return Err(err(line, key, "missing value"));
        }
        if let Some(prev) = entries.insert(
            key.to_string(),
            Entry {
                line,
                value: value.to_string(),
            },
        ) {
            return Err(err(line, key, format!("duplicate key (first set on line {})", prev.line)));
        }
    }
    Ok(Doc { entries })
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut doc = tokenize(text)?;
    let seed_entry = doc.take("seed").ok_or_else(|| err(0, "seed", "required key missing"))?;
    let seed = p_u64(&seed_entry.value).map_err(|r| err(seed_entry.line, "seed", r))?;
    let mut c = RunConfig::with_seed(seed);
    let lines: BTreeMap<String, usize> = doc.entries.iter().map(|(k, e)| (k.clone(), e.line)).collect();
    let line = |k: &str| lines.get(k).copied().unwrap_or(0);

    doc.parse("paths.out_dir", &mut c.out_dir, |v| Ok(PathBuf::from(v)))?;
    let (mut h, mut w) = (c.scene.height, c.scene.width);
    doc.parse("scene.height", &mut h, p_pos)?;
    doc.parse("scene.width", &mut w, p_pos)?;
    c.scene = SceneSpec::with_size(h, w);

    let mut d = c.scene.factor_dim();
    let mut n = c.scene.n();
    doc.parse("dims.d", &mut d, p_pos)?;
    doc.parse("dims.n", &mut n, p_pos)?;
    doc.parse("dims.k", &mut c.dims.k, p_pos)?;
    if d != c.scene.factor_dim() {
        return Err(err(line("dims.d"), "dims.d", format!("latent dimension is fixed by the scene layout at {}", c.scene.factor_dim())));
    }
    if n != c.scene.n() {
        return Err(err(line("dims.n"), "dims.n", format!("must equal scene.height × scene.width × 3 = {}", c.scene.n())));
    }
    c.dims.n = n;

    doc.parse("data.train_count", &mut c.train_count, p_pos)?;
    doc.parse("data.test_count", &mut c.test_count, p_pos)?;

    doc.parse("generator.hidden", &mut c.generator.hidden, |v| p_list(v, p_pos))?;
    doc.parse("generator.epochs", &mut c.generator.epochs, p_pos)?;
    doc.parse("generator.batch_size", &mut c.generator.batch_size, p_pos)?;
    doc.parse("generator.lr", &mut c.generator.lr, p_positive)?;
    doc.parse("generator.final_lr_fraction", &mut c.generator.final_lr_fraction, p_positive)?;

    doc.parse("inversion.max_iterations", &mut c.inversion.max_iterations, p_pos)?;
    doc.parse("inversion.lr", &mut c.inversion.lr, p_positive)?;
    doc.parse("inversion.mse_threshold", &mut c.inversion.mse_threshold, p_positive)?;
    doc.parse("inversion.chunk", &mut c.inversion.chunk, p_pos)?;
    doc.parse("inversion.init", &mut c.inversion.start, |v| match v {
        "zeros" => Ok(InversionStart::Zeros),
        "mean" => Ok(InversionStart::KbMean),
        _ => Err(format!("expected `zeros` or `mean`, found `{v}`")),
    })?;

    doc.parse("flow.coupling_layers", &mut c.flow_arch.coupling_layers, p_usize)?;
    doc.parse("flow.fc_layers", &mut c.flow_arch.fc_layers, |v| {
        p_usize(v).and_then(|n| if n >= 2 { Ok(n) } else { Err("needs at least 2 layers".into()) })
    })?;
    doc.parse("flow.hidden_width", &mut c.flow_arch.hidden_width, p_pos)?;
    doc.parse("flow.initial_bound", &mut c.flow_arch.initial_bound, p_positive)?;
    doc.parse("flow.identity_init", &mut c.flow_arch.identity_init, p_bool)?;
    doc.parse("flow.epochs", &mut c.flow_train.epochs, p_usize)?;
    doc.parse("flow.batch_size", &mut c.flow_train.batch_size, p_pos)?;
    doc.parse("flow.lr", &mut c.flow_train.lr, p_positive)?;
    doc.parse("flow.final_lr_fraction", &mut c.flow_train.final_lr_fraction, p_positive)?;

    doc.parse("codec.hidden", &mut c.codec_hidden, p_pos)?;

    doc.parse("train.epochs", &mut c.stage2.epochs, p_pos)?;
    doc.parse("train.batch_size", &mut c.stage2.batch_size, p_pos)?;
    doc.parse("train.lr", &mut c.stage2.lr, p_positive)?;
    doc.parse("train.final_lr_fraction", &mut c.stage2.final_lr_fraction, p_positive)?;
    doc.parse("train.gamma", &mut c.stage2.gamma, p_finite)?;
    doc.parse("train.finetune_flow", &mut c.stage2.finetune_flow, p_bool)?;
    doc.parse("train.flow_lr", &mut c.stage2.flow_lr, p_positive)?;
    doc.parse("train.pixel_weight", &mut c.stage2.pixel_weight, p_finite)?;
    if c.stage2.gamma < 0.0 {
        return Err(err(line("train.gamma"), "train.gamma", "must be nonnegative"));
    }
    if c.stage2.pixel_weight < 0.0 {
        return Err(err(line("train.pixel_weight"), "train.pixel_weight", "must be nonnegative"));
    }

    doc.parse("anneal.start_snr_db", &mut c.anneal.start_snr_db, p_finite)?;
    doc.parse("anneal.target_low_db", &mut c.anneal.target_low_db, p_finite)?;
    doc.parse("anneal.target_high_db", &mut c.anneal.target_high_db, p_finite)?;
    doc.parse("anneal.fraction", &mut c.anneal.anneal_fraction, p_finite)?;
    if let Err(Error::InvalidInput(reason)) = c.anneal.validate() {
        let key = ["anneal.fraction", "anneal.start_snr_db", "anneal.target_high_db", "anneal.target_low_db"]
            .into_iter()
            .find(|k| lines.contains_key(*k))
            .unwrap_or("anneal.start_snr_db");
        return Err(err(line(key), key, reason));
    }

    doc.parse("channel.snr_db", &mut c.channel.snr_db, p_f64)?;
    doc.parse("channel.fading", &mut c.channel.fading, |v| match v {
        "none" => Ok(Fading::None),
        "rayleigh" => Ok(Fading::Rayleigh),
        _ => Err(format!("expected `none` or `rayleigh`, found `{v}`")),
    })?;

    doc.parse("privacy.enabled", &mut c.privacy_enabled, p_bool)?;
    doc.parse("privacy.segments", &mut c.privacy.private_segments, |v| p_list(v, |s| Ok(s.to_string())))?;
    doc.parse("privacy.lambda1", &mut c.privacy.lambda1, p_positive)?;
    doc.parse("privacy.lambda2", &mut c.privacy.lambda2, p_positive)?;
    doc.parse("privacy.growth", &mut c.privacy.growth, p_positive)?;
    doc.parse("privacy.initial_bias", &mut c.privacy.initial_bias, p_positive)?;
    doc.parse("privacy.max_steps", &mut c.privacy.max_steps, p_pos)?;
    doc.parse("privacy.overshoot", &mut c.privacy.overshoot, p_positive)?;
    doc.parse("privacy.predicate", &mut c.privacy.predicate, |v| match v {
        "toward-mean" => Ok(Predicate::TowardMean),
        "literal" => Ok(Predicate::Literal),
        _ => Err(format!("expected `toward-mean` or `literal`, found `{v}`")),
    })?;
    if c.privacy.lambda2 >= 1.0 {
        return Err(err(
            line("privacy.lambda2"),
            "privacy.lambda2",
            format!("λ2 is less than 1 is required (0 < λ2 < 1), found {}", c.privacy.lambda2),
        ));
    }
    if c.privacy.growth <= 1.0 {
        return Err(err(line("privacy.growth"), "privacy.growth", "must exceed 1"));
    }
    for s in &c.privacy.private_segments {
        if c.scene.segment_range(s).is_none() {
            let names: Vec<&str> = c.scene.segments.iter().map(|g| g.name.as_str()).collect();
            return Err(err(line("privacy.segments"), "privacy.segments", format!("unknown segment `{s}` (known: {})", names.join(", "))));
        }
    }

    doc.parse("metrics.seed", &mut c.metric_seed, p_u64)?;
    doc.parse("sweep.snrs", &mut c.sweep.snrs, |v| p_list(v, p_f64))?;
    doc.parse("sweep.ks", &mut c.sweep.ks, |v| p_list(v, p_pos))?;
    doc.parse("sweep.reps", &mut c.sweep.reps, p_pos)?;
    doc.parse("sweep.kn_snr_db", &mut c.sweep.kn_snr_db, p_f64)?;
    doc.parse("sweep.kn_epochs", &mut c.sweep.kn_epochs, p_pos)?;
    doc.parse("transmit.image_index", &mut c.image_index, p_usize)?;
    doc.parse("transmit.identity_path", &mut c.transmit_identity_path, p_bool)?;
    if c.image_index >= c.test_count {
        return Err(err(
            line("transmit.image_index"),
            "transmit.image_index",
            format!("must be below data.test_count = {}", c.test_count),
        ));
    }

    debug_assert!(doc.entries.is_empty(), "unhandled keys: {:?}", doc.entries.keys().collect::<Vec<_>>());
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_only_gives_defaults() {
        let c = parse_config("seed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.latent_dim(), 16);
        assert_eq!(c.dims.n, 3072);
        assert_eq!(c.dims.k, 10);
        assert_eq!(c.privacy.lambda1, 0.5);
        assert_eq!(c.privacy.lambda2, 0.5);
    }

    #[test]
    fn every_known_key_is_handled() {
        // each key with a valid value must parse and be consumed
        let samples = [
            ("paths.out_dir", "out"),
            ("scene.height", "32"),
            ("scene.width", "32"),
            ("dims.d", "16"),
            ("dims.n", "3072"),
            ("dims.k", "1"),
            ("generator.hidden", "64, 256"),
            ("inversion.init", "zeros"),
            ("flow.identity_init", "false"),
            ("channel.snr_db", "inf"),
            ("channel.fading", "rayleigh"),
            ("privacy.segments", "eyes, mouth"),
            ("privacy.predicate", "literal"),
            ("sweep.snrs", "0, 5, off"),
            ("sweep.ks", "1,10"),
        ];
        let text: String = samples.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        let c = parse_config(&format!("seed = 1\n{text}")).unwrap();
        assert_eq!(c.dims.k, 1);
        assert_eq!(c.generator.hidden, vec![64, 256]);
        assert!(c.channel.is_noiseless());
        assert_eq!(c.privacy.private_segments, vec!["eyes", "mouth"]);
        assert_eq!(c.sweep.snrs[2], f64::INFINITY);
        for key in KNOWN_KEYS {
            assert!(!key.is_empty());
        }
    }

    #[test]
    fn lambda2_bound_is_cited() {
        let e = parse_config("seed = 1\nprivacy.lambda2 = 1.5\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("λ2 is less than 1"), "{msg}");
        assert!(matches!(e, Error::Config { line: 2, .. }));
    }

    #[test]
    fn typo_gets_suggestion() {
        let e = parse_config("seed = 1\nlamda1 = 0.3\n").unwrap_err().to_string();
        assert!(e.contains("privacy.lambda1"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = parse_config("# comment\nseed = 1\n\nchannel.snr_db = loud\n").unwrap_err();
        match e {
            Error::Config { line, key, .. } => {
                assert_eq!(line, 4);
                assert_eq!(key, "channel.snr_db");
            }
            other => panic!("{other}"),
        }
        let missing = parse_config("dims.k = 4\n").unwrap_err();
        assert!(matches!(missing, Error::Config { ref key, .. } if key == "seed"));
        assert!(parse_config("seed = 1\nseed = 2\n").is_err());
        assert!(parse_config("seed = 1\njust words\n").is_err());
        assert!(parse_config("seed = 1\ndims.n = 100\n").is_err());
        assert!(parse_config("seed = 1\nprivacy.segments = nose\n").is_err());
    }
}
