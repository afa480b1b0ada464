//! The operator commands and their artifact plumbing.
//!
//! Every command reads its prerequisites from the output directory, writes
//! its artifacts there, and records a `manifest-<command>.json` listing the
//! inputs and outputs with their SHA-256 hashes. Paths in manifests are
//! relative to the output directory, so identical runs in different
//! directories produce identical manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::channel::{compression_ratio, ChannelCodec, ChannelConfig};
use crate::config::{InversionStart, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{round_trip_error, train_flow, FlowModel};
use crate::generator::{
    invert, invert_batch_from, invert_dataset, latent_matrix, train_generator, GeneratorModel, InitMode, InversionConfig, LatentCode,
    LatentSet,
};
use crate::metrics::{psnr, psnr_for_csv, FeatureNet};
use crate::nn::io::WEIGHT_VERSION;
use crate::nn::Rng;
use crate::pipeline::{
    kn_sweep, snr_sweep, train_e2e, transmit_latent, KnSweepSetup, Metric, PrivacySetup, SemComSystem, Stage2Config,
};
use crate::privacy::{build_kb, KnowledgeBase, PrivacyConfig};
use crate::scene::{make_dataset, segment_region, Dataset, FactorVector, Image, DATASET_VERSION};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "LATENTLINK_OUT";

pub const TRAIN_SET: &str = "train.llds";
pub const TEST_SET: &str = "test.llds";
pub const GENERATOR_FILE: &str = "generator.llnk";
pub const TRAIN_LATENTS: &str = "latents-train.lllt";
pub const TEST_LATENTS: &str = "latents-test.lllt";
pub const FLOW_FILE: &str = "flow.llnk";
pub const CODEC_FILE: &str = "codec.llnk";
pub const E2E_LOSS_CSV: &str = "e2e-loss.csv";
pub const TRANSMIT_PNG: &str = "transmit.png";
pub const SNR_CSV: &str = "snr-sweep.csv";
pub const KN_CSV: &str = "kn-sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Command {
    GenData,
    TrainGen,
    InvertDataset,
    TrainFlow,
    TrainE2e,
    Transmit,
    SweepSnr,
    SweepKn,
    PrivacyDemo,
}

impl Command {
    pub const ALL: [Command; 9] = [
        Command::GenData,
        Command::TrainGen,
        Command::InvertDataset,
        Command::TrainFlow,
        Command::TrainE2e,
        Command::Transmit,
        Command::SweepSnr,
        Command::SweepKn,
        Command::PrivacyDemo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainGen => "train-gen",
            Command::InvertDataset => "invert-dataset",
            Command::TrainFlow => "train-flow",
            Command::TrainE2e => "train-e2e",
            Command::Transmit => "transmit",
            Command::SweepSnr => "sweep-snr",
            Command::SweepKn => "sweep-kn",
            Command::PrivacyDemo => "privacy-demo",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn manifest_name(self) -> String {
        format!("manifest-{}.json", self.name())
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub crate_version: String,
    /// File format versions by magic.
    pub formats: BTreeMap<String, u32>,
    pub seed: u64,
    /// Hash of the effective configuration (output directory excluded).
    pub config_sha256: String,
    pub substreams: Vec<String>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub results: BTreeMap<String, Value>,
}

#[derive(Debug, Clone)]
pub struct CommandOutcome {
    pub command: Command,
    pub manifest_path: PathBuf,
    pub manifest: Manifest,
}

/// Process exit status for a command result: 0, 2 for a missing
/// prerequisite, 1 for anything else.
pub fn exit_code<T>(result: &Result<T>) -> i32 {
    match result {
        Ok(_) => 0,
        Err(Error::MissingPrerequisite { .. }) => 2,
        Err(_) => 1,
    }
}

/// Applies an `LATENTLINK_OUT`-style override to the configured directory.
pub fn override_out_dir(cfg: &mut RunConfig, value: Option<String>) {
    if let Some(v) = value.filter(|v| !v.is_empty()) {
        cfg.out_dir = PathBuf::from(v);
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out_dir = PathBuf::new();
    sha256_hex(format!("{c:?}").as_bytes())
}

fn num(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or_else(|| Value::String(format!("{v}")), Value::Number)
}

/// Re-hashes every file a manifest lists and checks the recorded digests.
pub fn verify_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    for rec in manifest.inputs.iter().chain(&manifest.outputs) {
        let actual = sha256_file(&dir.join(&rec.path))?;
        if actual != rec.sha256 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("hash mismatch for {}: recorded {}, found {}", rec.path, rec.sha256, actual),
            });
        }
    }
    Ok(manifest)
}

/// Bookkeeping for one command run.
struct Run<'a> {
    cfg: &'a RunConfig,
    command: Command,
    root: Rng,
    inputs: Vec<String>,
    outputs: Vec<String>,
    substreams: Vec<String>,
    results: BTreeMap<String, Value>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, command: Command) -> Self {
        Self {
            cfg,
            command,
            root: Rng::new(cfg.seed),
            inputs: Vec::new(),
            outputs: Vec::new(),
            substreams: Vec::new(),
            results: BTreeMap::new(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// Declares a prerequisite file produced by `producer`.
    fn need(&mut self, name: &str, producer: Command) -> Result<PathBuf> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(Error::MissingPrerequisite {
                what: p.display().to_string(),
                run_first: format!("latentlink {producer} --config <config>"),
            });
        }
        if !self.inputs.iter().any(|n| n == name) {
            self.inputs.push(name.to_string());
        }
        Ok(p)
    }

    fn stream(&mut self, name: &str) -> Rng {
        self.substreams.push(name.to_string());
        self.root.substream(name)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.path(name)
    }

    fn result(&mut self, key: &str, v: Value) {
        self.results.insert(key.to_string(), v);
    }

    fn finish(self) -> Result<CommandOutcome> {
        let hash = |names: &[String]| -> Result<Vec<FileRecord>> {
            names
                .iter()
                .map(|n| {
                    Ok(FileRecord {
                        path: n.clone(),
                        sha256: sha256_file(&self.path(n))?,
                    })
                })
                .collect()
        };
        let manifest = Manifest {
            command: self.command.name().to_string(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            formats: BTreeMap::from([
                ("LLNK".to_string(), WEIGHT_VERSION),
                ("LLDS".to_string(), DATASET_VERSION),
                ("LLLT".to_string(), crate::generator::LATENT_VERSION),
            ]),
            seed: self.cfg.seed,
            config_sha256: config_hash(self.cfg),
            substreams: self.substreams.clone(),
            inputs: hash(&self.inputs)?,
            outputs: hash(&self.outputs)?,
            results: self.results.clone(),
        };
        let manifest_path = self.path(&self.command.manifest_name());
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(CommandOutcome {
            command: self.command,
            manifest_path,
            manifest,
        })
    }
}

/// Runs one command against `cfg.out_dir`. Stage failures come back wrapped
/// in [`Error::Stage`] named after the command; missing inputs come back as
/// [`Error::MissingPrerequisite`].
pub fn run_command(command: Command, cfg: &RunConfig) -> Result<CommandOutcome> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut run = Run::new(cfg, command);
    let body = match command {
        Command::GenData => gen_data(&mut run),
        Command::TrainGen => train_gen(&mut run),
        Command::InvertDataset => invert_cmd(&mut run),
        Command::TrainFlow => train_flow_cmd(&mut run),
        Command::TrainE2e => train_e2e_cmd(&mut run),
        Command::Transmit => transmit_cmd(&mut run),
        Command::SweepSnr => sweep_snr_cmd(&mut run),
        Command::SweepKn => sweep_kn_cmd(&mut run),
        Command::PrivacyDemo => privacy_demo_cmd(&mut run),
    };
    match body {
        Ok(()) => run.finish(),
        Err(e @ Error::MissingPrerequisite { .. }) => Err(e),
        Err(e) => Err(Error::Stage {
            stage: command.name(),
            source: Box::new(e),
        }),
    }
}

/// Runs the training and evaluation chain in order, stopping at the first failure.
pub fn run_pipeline(cfg: &RunConfig, commands: &[Command]) -> Result<Vec<CommandOutcome>> {
    commands.iter().map(|&c| run_command(c, cfg)).collect()
}

fn load_dataset(run: &mut Run, name: &str) -> Result<Dataset> {
    let p = run.need(name, Command::GenData)?;
    let ds = Dataset::load(&p)?;
    if ds.spec != run.cfg.scene {
        return Err(Error::InvalidInput(format!(
            "{name} was generated for a {}x{} scene; the config asks for {}x{}",
            ds.spec.height, ds.spec.width, run.cfg.scene.height, run.cfg.scene.width
        )));
    }
    Ok(ds)
}

fn load_generator(run: &mut Run) -> Result<GeneratorModel> {
    let p = run.need(GENERATOR_FILE, Command::TrainGen)?;
    GeneratorModel::load(&p)
}

fn load_latents(run: &mut Run, name: &str) -> Result<LatentSet> {
    let p = run.need(name, Command::InvertDataset)?;
    LatentSet::load(&p)
}

fn load_flow(run: &mut Run) -> Result<FlowModel> {
    let p = run.need(FLOW_FILE, Command::TrainFlow)?;
    FlowModel::load(&p)
}

fn load_codec(run: &mut Run) -> Result<ChannelCodec> {
    let p = run.need(CODEC_FILE, Command::TrainE2e)?;
    ChannelCodec::load(&p)
}

/// Sender-side inversion settings from the config.
pub fn sender_inversion(cfg: &RunConfig, kb: Option<&KnowledgeBase>) -> InversionConfig {
    let mut inv = cfg.inversion.base();
    if let (InversionStart::KbMean, Some(kb)) = (cfg.inversion.start, kb) {
        inv.init = InitMode::Mean(kb.mean.clone());
    }
    inv
}

/// Tighter inversion used to read factors back out of a reconstruction.
pub fn receiver_inversion(kb: &KnowledgeBase) -> InversionConfig {
    InversionConfig {
        max_iterations: 1000,
        mse_threshold: 1e-6,
        init: InitMode::Mean(kb.mean.clone()),
        ..Default::default()
    }
}

fn feature_net(cfg: &RunConfig) -> FeatureNet {
    FeatureNet::seeded(&[3, 8, 16, 32], cfg.metric_seed)
}

fn gen_data(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let train_seed = run.stream("dataset-train").next_u64();
    let test_seed = run.stream("dataset-test").next_u64();
    let train = make_dataset(cfg.train_count, train_seed, &cfg.scene)?;
    let test = make_dataset(cfg.test_count, test_seed, &cfg.scene)?;
    train.save(&run.output(TRAIN_SET))?;
    test.save(&run.output(TEST_SET))?;
    run.result("train_count", train.len().into());
    run.result("test_count", test.len().into());
    Ok(())
}

fn train_gen(run: &mut Run) -> Result<()> {
    let train = load_dataset(run, TRAIN_SET)?;
    let test = load_dataset(run, TEST_SET)?;
    let mut rng = run.stream("generator");
    let (g, report) = train_generator(&train, &run.cfg.generator, &mut rng)?;
    g.save(&run.output(GENERATOR_FILE))?;
    run.result("train_mse", num(report.final_mse));
    run.result("test_mse", num(g.dataset_mse(&test)?));
    Ok(())
}

fn invert_cmd(run: &mut Run) -> Result<()> {
    let g = load_generator(run)?;
    let train = load_dataset(run, TRAIN_SET)?;
    let test = load_dataset(run, TEST_SET)?;
    let chunk = run.cfg.inversion.chunk;
    // the knowledge base needs training latents, so the training set starts
    // from zeros and the test set from the resulting mean
    let train_res = invert_dataset(&g, &train, &run.cfg.inversion.base(), chunk)?;
    let train_set = LatentSet::from_results(&train_res);
    let kb = build_kb(&train_set.latents)?;
    let test_cfg = sender_inversion(run.cfg, Some(&kb));
    let test_set = LatentSet::from_results(&invert_dataset(&g, &test, &test_cfg, chunk)?);
    train_set.save(&run.output(TRAIN_LATENTS))?;
    test_set.save(&run.output(TEST_LATENTS))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    run.result("train_mean_residual_mse", num(mean(&train_set.residuals)));
    run.result("test_mean_residual_mse", num(mean(&test_set.residuals)));
    Ok(())
}

fn train_flow_cmd(run: &mut Run) -> Result<()> {
    let lat = load_latents(run, TRAIN_LATENTS)?;
    let d = run.cfg.latent_dim();
    let mut rng = run.stream("flow");
    let init = FlowModel::new(d, &run.cfg.flow_arch, &mut rng)?;
    let (flow, report) = train_flow(&init, &lat.latents, &run.cfg.flow_train, &mut rng)?;
    flow.save(&run.output(FLOW_FILE))?;
    run.result("initial_nll", num(report.initial_nll));
    run.result("final_nll", num(report.final_nll));
    run.result("round_trip_error", num(round_trip_error(&flow, latent_matrix(&lat.latents)?.view())?));
    Ok(())
}

fn base_system(run: &mut Run, flow: FlowModel, codec: ChannelCodec) -> Result<SemComSystem> {
    let g = load_generator(run)?;
    SemComSystem::new(g, flow, codec, run.cfg.channel, feature_net(run.cfg))
}

fn train_e2e_cmd(run: &mut Run) -> Result<()> {
    let flow = load_flow(run)?;
    let lat = load_latents(run, TRAIN_LATENTS)?;
    let cfg = run.cfg;
    let codec = ChannelCodec::new(cfg.latent_dim(), cfg.dims.k, cfg.codec_hidden, &mut run.stream("codec-init"))?;
    let sys = base_system(run, flow, codec)?;
    let rng = run.stream("e2e");
    let (trained, report) = train_e2e(&sys, &lat.latents, &cfg.anneal, &cfg.stage2, &rng)?;
    trained.codec.save(&run.output(CODEC_FILE))?;
    if cfg.stage2.finetune_flow {
        trained.flow.save(&run.output(FLOW_FILE))?;
    }
    let mut csv = String::from("epoch,snr_db,loss\n");
    for (i, (snr, loss)) in report.epoch_snr.iter().zip(&report.epoch_loss).enumerate() {
        csv.push_str(&format!("{i},{snr:.6},{loss:.9}\n"));
    }
    let p = run.output(E2E_LOSS_CSV);
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    run.result("first_epoch_loss", num(report.epoch_loss[0]));
    run.result("last_epoch_loss", num(*report.epoch_loss.last().expect("epochs > 0")));
    Ok(())
}

/// Loads the trained system described by the output directory.
fn trained_system(run: &mut Run) -> Result<(SemComSystem, KnowledgeBase)> {
    let flow = load_flow(run)?;
    let codec = load_codec(run)?;
    let lat = load_latents(run, TRAIN_LATENTS)?;
    let kb = build_kb(&lat.latents)?;
    let mut sys = base_system(run, flow, codec)?;
    sys.inversion = sender_inversion(run.cfg, Some(&kb));
    Ok((sys, kb))
}

fn transmit_cmd(run: &mut Run) -> Result<()> {
    let (mut sys, _) = trained_system(run)?;
    let test = load_dataset(run, TEST_SET)?;
    let cfg = run.cfg;
    if cfg.transmit_identity_path {
        let d = cfg.latent_dim();
        sys = SemComSystem::new(sys.generator.clone(), FlowModel::identity(d), ChannelCodec::identity(d), cfg.channel, sys.feature_net.clone())?
            .with_inversion(sys.inversion.clone());
    }
    let image = &test.samples[cfg.image_index].1;
    let inv = invert(&sys.generator, image, &sys.inversion)?;
    let inversion_psnr = psnr(&sys.generator.generate(&inv.latent)?, image)?;
    let rng = run.stream("transmit");
    let r = transmit_latent(&sys, image, &inv.latent, &rng)?;
    Image::hstack(&[&r.original, &r.reconstruction])?.save_png(&run.output(TRANSMIT_PNG), 4)?;
    run.result("image_index", cfg.image_index.into());
    run.result("snr_db", num(r.snr_db));
    run.result("ratio", Value::String(r.ratio.to_string()));
    run.result("psnr_db", num(r.psnr_db));
    run.result("lpips", num(r.lpips));
    run.result("mse", num(r.mse));
    run.result("inversion_psnr_db", num(inversion_psnr));
    run.result("identity_path", cfg.transmit_identity_path.into());
    Ok(())
}

fn sweep_snr_cmd(run: &mut Run) -> Result<()> {
    let (sys, _) = trained_system(run)?;
    let test = load_dataset(run, TEST_SET)?;
    let lat = load_latents(run, TEST_LATENTS)?;
    let images: Vec<Image> = test.images().cloned().collect();
    let rng = run.stream("snr-sweep");
    let table = snr_sweep(&sys, &images, &lat.latents, &run.cfg.sweep.snrs, run.cfg.sweep.reps, &rng)?;
    table.write_csv(&run.output(SNR_CSV))?;
    table.write_svg(&run.output("snr-psnr.svg"), Metric::Psnr)?;
    table.write_svg(&run.output("snr-lpips.svg"), Metric::Lpips)?;
    for row in &table.rows {
        run.result(&format!("psnr_at_{}", row.x), num(psnr_for_csv(row.psnr_mean)));
    }
    Ok(())
}

fn sweep_kn_cmd(run: &mut Run) -> Result<()> {
    let flow = load_flow(run)?;
    let g = load_generator(run)?;
    let train = load_latents(run, TRAIN_LATENTS)?;
    let test_lat = load_latents(run, TEST_LATENTS)?;
    let test = load_dataset(run, TEST_SET)?;
    let cfg = run.cfg;
    let setup = KnSweepSetup {
        generator: g,
        flow,
        feature_net: feature_net(cfg),
        eval_channel: ChannelConfig {
            snr_db: cfg.sweep.kn_snr_db,
            fading: cfg.channel.fading,
        },
        codec_hidden: cfg.codec_hidden,
        schedule: cfg.anneal,
        stage2: Stage2Config {
            epochs: cfg.sweep.kn_epochs,
            ..cfg.stage2.clone()
        },
        reps: cfg.sweep.reps,
    };
    let images: Vec<Image> = test.images().cloned().collect();
    let rng = run.stream("kn-sweep");
    let out = kn_sweep(&setup, &cfg.sweep.ks, &train.latents, &images, &test_lat.latents, &rng)?;
    out.table.write_csv(&run.output(KN_CSV))?;
    out.table.write_svg(&run.output("kn-psnr.svg"), Metric::Psnr)?;
    out.table.write_svg(&run.output("kn-lpips.svg"), Metric::Lpips)?;
    for row in &out.table.rows {
        let k = row.x as usize;
        run.result(&format!("psnr_k{k}"), num(row.psnr_mean));
        if let Some((p, _)) = row.no_flow {
            run.result(&format!("psnr_k{k}_noflow"), num(p));
        }
        let ratio = compression_ratio(crate::channel::SystemDims { n: cfg.dims.n, k });
        run.result(&format!("ratio_k{k}"), Value::String(ratio.to_string()));
    }
    Ok(())
}

/// Per-segment distances between two latent codes.
pub fn segment_distances(a: &LatentCode, b: &LatentCode, spec: &crate::scene::SceneSpec) -> BTreeMap<String, f64> {
    spec.segments
        .iter()
        .map(|s| {
            let r = spec.segment_range(&s.name).expect("own segment");
            (s.name.clone(), r.map(|i| (a.0[i] - b.0[i]).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

/// Bounding box `(y0, x0, h, w)` of a segment's pixels, padded by 2.
fn region_box(latent: &LatentCode, spec: &crate::scene::SceneSpec, segment: &str) -> Result<(usize, usize, usize, usize)> {
    let factors = FactorVector(latent.0.iter().map(|v| v.clamp(0.0, 1.0)).collect());
    let mask = segment_region(&factors, spec, segment)?;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / spec.width, i % spec.width);
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    if y0 == usize::MAX {
        // nothing rendered: fall back to the upper-middle band
        return Ok((spec.height / 5, 0, spec.height / 3, spec.width));
    }
    let y0 = y0.saturating_sub(2);
    let x0 = x0.saturating_sub(2);
    let y1 = (y1 + 2).min(spec.height - 1);
    let x1 = (x1 + 2).min(spec.width - 1);
    Ok((y0, x0, y1 - y0 + 1, x1 - x0 + 1))
}

fn privacy_demo_cmd(run: &mut Run) -> Result<()> {
    let (sys, kb) = trained_system(run)?;
    let test = load_dataset(run, TEST_SET)?;
    let test_lat = load_latents(run, TEST_LATENTS)?;
    let cfg = run.cfg;
    let spec = sys.generator.spec.clone();
    let idx = cfg.image_index;
    let image = &test.samples[idx].1;
    let latent = &test_lat.latents[idx];
    let rng = run.stream("privacy-demo");

    let others: Vec<String> = spec.segments.iter().map(|s| s.name.clone()).filter(|n| n != "eyes").collect();
    let variants = [("eyes", vec!["eyes".to_string()]), ("all-but-eyes", others)];
    let mut recon = Vec::new();
    let reinv_cfg = receiver_inversion(&kb);
    for (name, segments) in variants {
        let pcfg = PrivacyConfig {
            private_segments: segments,
            ..cfg.privacy.clone()
        };
        let psys = sys.clone().with_privacy(Some(PrivacySetup {
            config: pcfg,
            kb: kb.clone(),
        }))?;
        let r = transmit_latent(&psys, image, latent, &rng)?;
        let reinv = invert_batch_from(&sys.generator, &[&r.reconstruction], None, &reinv_cfg)?.remove(0);
        for (seg, d) in segment_distances(&r.recovered, latent, &spec) {
            run.result(&format!("{name}.recovered.{seg}"), num(d));
        }
        for (seg, d) in segment_distances(&reinv.latent, latent, &spec) {
            run.result(&format!("{name}.reinverted.{seg}"), num(d));
        }
        run.result(&format!("{name}.psnr_db"), num(r.psnr_db));
        recon.push(r.reconstruction);
    }

    image.save_png(&run.output("privacy-original.png"), 4)?;
    recon[0].save_png(&run.output("privacy-eyes.png"), 4)?;
    recon[1].save_png(&run.output("privacy-all-but-eyes.png"), 4)?;
    let (y0, x0, h, w) = region_box(latent, &spec, "eyes")?;
    let crops = [image.crop(y0, x0, h, w)?, recon[0].crop(y0, x0, h, w)?, recon[1].crop(y0, x0, h, w)?];
    Image::hstack(&[&crops[0], &crops[1], &crops[2]])?.save_png(&run.output("privacy-eye-crops.png"), 8)?;
    run.result("image_index", idx.into());
    run.result("snr_db", num(cfg.channel.snr_db));
    Ok(())
}
