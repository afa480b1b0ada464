//! Acceptance run: one PASS/FAIL line per headline criterion.
//!
//! Runs the full default pipeline once into a temporary directory (several
//! minutes on one core), then checks each criterion against the artifacts or
//! against freshly built components. Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use latentlink::channel::{
    compression_ratio, noise_variance, transmit_channel, ChannelCodec, ChannelConfig, ChannelSymbols, SystemDims,
};
use latentlink::commands::{
    receiver_inversion, run_command, run_pipeline, sender_inversion, sha256_file, Command, FLOW_FILE, GENERATOR_FILE, KN_CSV,
    SNR_CSV, TEST_LATENTS, TRAIN_LATENTS,
};
use latentlink::config::{parse_config, RunConfig};
use latentlink::flow::{round_trip_error, FlowArch, FlowModel};
use latentlink::generator::{
    generator_loss, invert_batch, inversion_objective, GeneratorModel, LatentCode, LatentSet,
};
use latentlink::metrics::{lpips, lpips_from_features, psnr, psnr_from_mse, FeatureLayer, FeatureMap, FeatureNet};
use latentlink::nn::{grad_check, Activation, Mlp, Rng};
use latentlink::pipeline::{stage2_loss, transmit_many, PrivacySetup, SemComSystem, Stage2Config};
use latentlink::privacy::{build_kb, filter_threshold, kb_project, privacy_filter, KnowledgeBase, Predicate, PrivacyConfig};
use latentlink::scene::{sample_factors, Image, SceneSpec};
use ndarray::Array2;

const SEED: u64 = 20;
const GRAD_POINTS: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, name: &str, ok: bool, detail: String, started: Instant) {
        let line = format!(
            "{} {name}: {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((ok, line));
    }
}

/// Artifacts of one default pipeline run.
struct Trained {
    cfg: RunConfig,
    generator: GeneratorModel,
    flow: FlowModel,
    kb: KnowledgeBase,
    test_latents: Vec<LatentCode>,
    test_images: Vec<Image>,
}

fn full_pipeline(dir: &Path) -> Trained {
    let mut cfg = RunConfig::with_seed(SEED);
    cfg.out_dir = dir.to_path_buf();
    let t = Instant::now();
    for command in Command::ALL {
        run_command(command, &cfg).expect("default pipeline runs");
        println!("  ran {command} ({:.0}s elapsed)", t.elapsed().as_secs_f64());
    }
    let generator = GeneratorModel::load(&dir.join(GENERATOR_FILE)).unwrap();
    let flow = FlowModel::load(&dir.join(FLOW_FILE)).unwrap();
    let train = LatentSet::load(&dir.join(TRAIN_LATENTS)).unwrap();
    let kb = build_kb(&train.latents).unwrap();
    let test_latents = LatentSet::load(&dir.join(TEST_LATENTS)).unwrap().latents;
    let test = latentlink::scene::Dataset::load(&dir.join(latentlink::commands::TEST_SET)).unwrap();
    Trained {
        cfg,
        generator,
        flow,
        kb,
        test_latents,
        test_images: test.images().cloned().collect(),
    }
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_owned).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_owned)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn compression(r: &mut Report) {
    let t = Instant::now();
    let a = compression_ratio(SystemDims::new(3072, 1).unwrap());
    let b = compression_ratio(SystemDims::new(3072, 10).unwrap());
    let ok = a.to_string() == "1/3072" && b.to_string() == "10/3072";
    r.record("compression ratio", ok, format!("k=1 -> {a}, k=10 -> {b} (exact)"), t);
}

fn random_rows(rng: &mut Rng, rows: usize, dim: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, dim), || scale * rng.normal())
}

fn flow_invertibility(r: &mut Report, trained: &FlowModel) {
    let t = Instant::now();
    let mut rng = Rng::new(SEED).substream("acceptance-flow");
    let x = random_rows(&mut rng, 1000, 16, 1.0);
    let err_trained = round_trip_error(trained, x.view()).unwrap();
    let arch = FlowArch {
        identity_init: false,
        ..Default::default()
    };
    let fresh = FlowModel::new(16, &arch, &mut rng).unwrap();
    let err_fresh = round_trip_error(&fresh, x.view()).unwrap();
    r.record(
        "flow invertibility",
        err_trained < 1e-6 && err_fresh < 1e-9,
        format!("max |f⁻¹(f(x)) − x|: trained {err_trained:.2e} (< 1e-6), untrained {err_fresh:.2e} (< 1e-9)"),
        t,
    );
}

fn flat_params(flow: &FlowModel) -> Vec<f64> {
    let mut f = flow.clone();
    f.param_blocks_mut().into_iter().flat_map(|b| b.to_vec()).collect()
}

fn set_params(flow: &mut FlowModel, p: &[f64]) {
    let mut off = 0;
    for b in flow.param_blocks_mut() {
        let n = b.len();
        b.copy_from_slice(&p[off..off + n]);
        off += n;
    }
}

fn small_flow_arch(layers: usize) -> FlowArch {
    FlowArch {
        coupling_layers: layers,
        fc_layers: 3,
        hidden_width: 8,
        identity_init: false,
        initial_bound: 0.8,
    }
}

/// Worst relative error over `GRAD_POINTS` points produced by `check(point)`.
fn worst_over_points(mut check: impl FnMut(u64) -> f64) -> f64 {
    (0..GRAD_POINTS as u64).map(&mut check).fold(0.0, f64::max)
}

fn gradient_suite(r: &mut Report) {
    let t = Instant::now();
    let root = Rng::new(SEED).substream("acceptance-grad");
    let mut results: Vec<(&str, f64)> = Vec::new();

    // generator training loss w.r.t. network weights
    results.push((
        "generator loss",
        worst_over_points(|i| {
            let mut rng = root.substream_indexed("generator", i);
            let net = Mlp::new(&[16, 12, 48], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
            let x = Array2::from_shape_simple_fn((4, 16), || rng.uniform());
            let y = Array2::from_shape_simple_fn((4, 48), || rng.uniform());
            let f = |p: &[f64]| {
                let mut n = net.clone();
                n.set_params_flat(p).unwrap();
                let (loss, g) = generator_loss(&n, x.view(), y.view()).unwrap();
                (loss, g.flatten())
            };
            grad_check(f, &net.params_flat(), FD_STEP)
        }),
    ));

    // inversion objective w.r.t. the latent code
    results.push((
        "inversion objective",
        worst_over_points(|i| {
            let mut rng = root.substream_indexed("inversion", i);
            let spec = SceneSpec::with_size(8, 8);
            let net = Mlp::new(&[16, 24, spec.n()], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
            let g = GeneratorModel { net, spec };
            let target = g.generate(&LatentCode((0..16).map(|_| rng.uniform()).collect())).unwrap();
            let z: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            grad_check(|v| inversion_objective(&g, v, &target).unwrap(), &z, FD_STEP)
        }),
    ));

    // one coupling layer's scale and translate nets, loss = w·y + Σ logdet
    results.push((
        "coupling nets",
        worst_over_points(|i| {
            let mut rng = root.substream_indexed("coupling", i);
            let flow = FlowModel::new(16, &small_flow_arch(1), &mut rng).unwrap();
            let x = random_rows(&mut rng, 3, 16, 1.0);
            let w = random_rows(&mut rng, 3, 16, 1.0);
            let f = |p: &[f64]| {
                let mut fl = flow.clone();
                set_params(&mut fl, p);
                let layer = &fl.layers[0];
                let (y, logdet, cache) = layer.forward_batch(x.view()).unwrap();
                let loss = (&y * &w).sum() + logdet.sum();
                let (_, g) = layer.forward_backward(&cache, w.view(), &ndarray::Array1::ones(3)).unwrap();
                let flat = g.scale.flatten().into_iter().chain(g.translate.flatten()).chain([g.bound]).collect();
                (loss, flat)
            };
            grad_check(f, &flat_params(&flow), FD_STEP)
        }),
    ));

    // channel codec through the stage-2 objective
    results.push((
        "codec",
        worst_over_points(|i| {
            let mut rng = root.substream_indexed("codec", i);
            let flow = FlowModel::new(16, &small_flow_arch(2), &mut rng).unwrap();
            let codec = ChannelCodec::new(16, 4, 8, &mut rng).unwrap();
            let l = Array2::from_shape_simple_fn((5, 16), || rng.uniform());
            let noise = random_rows(&mut rng, 5, 4, 0.3);
            let cfg = Stage2Config {
                gamma: 0.7,
                ..Default::default()
            };
            let ne = codec.encoder.param_count();
            let p0: Vec<f64> = codec.encoder.params_flat().into_iter().chain(codec.decoder.params_flat()).collect();
            let f = |p: &[f64]| {
                let mut c = codec.clone();
                c.encoder.set_params_flat(&p[..ne]).unwrap();
                c.decoder.set_params_flat(&p[ne..]).unwrap();
                let (loss, g) = stage2_loss(&c, &flow, None, l.view(), noise.view(), &cfg).unwrap();
                (loss, g.encoder.flatten().into_iter().chain(g.decoder.flatten()).collect())
            };
            grad_check(f, &p0, FD_STEP)
        }),
    ));

    // flow negative log-likelihood w.r.t. all flow parameters
    results.push((
        "flow NLL",
        worst_over_points(|i| {
            let mut rng = root.substream_indexed("nll", i);
            let flow = FlowModel::new(16, &small_flow_arch(3), &mut rng).unwrap();
            let x = random_rows(&mut rng, 4, 16, 1.0);
            let f = |p: &[f64]| {
                let mut fl = flow.clone();
                set_params(&mut fl, p);
                let (nll, g) = fl.nll_and_grad_matrix(x.view(), true).unwrap();
                (nll, g.unwrap().blocks().into_iter().flat_map(|b| b.to_vec()).collect())
            };
            grad_check(f, &flat_params(&flow), FD_STEP)
        }),
    ));

    let ok = results.iter().all(|(_, e)| *e < GRAD_TOL);
    let detail = results
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    r.record(
        "gradient suite",
        ok,
        format!("worst rel err over {GRAD_POINTS} points (< {GRAD_TOL:.0e}): {detail}"),
        t,
    );
}

fn channel_statistics(r: &mut Report) {
    let t = Instant::now();
    let mut rng = Rng::new(SEED).substream("acceptance-channel");
    let x = ChannelSymbols(vec![0.0; 100_000]);
    let mut detail = Vec::new();
    let mut ok = true;
    for snr in [0.0, 5.0, 10.0] {
        let (y, _) = transmit_channel(&x, &ChannelConfig::awgn(snr), &mut rng);
        let var = y.0.iter().map(|v| v * v).sum::<f64>() / y.0.len() as f64;
        let rel = (var / noise_variance(snr) - 1.0).abs();
        ok &= rel < 0.05;
        detail.push(format!("{snr} dB rel dev {rel:.4}"));
    }

    let mut signed: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
    signed[0] = -0.0;
    let input = ChannelSymbols(signed);
    let (out, _) = transmit_channel(&input, &ChannelConfig::noiseless(), &mut rng);
    let identical = input.0.iter().zip(&out.0).all(|(a, b)| a.to_bits() == b.to_bits());
    ok &= identical;

    let codec = ChannelCodec::new(16, 10, 64, &mut rng).unwrap();
    let mut worst_power = 0.0f64;
    for _ in 0..1000 {
        let n = latentlink::flow::FlowVector((0..16).map(|_| 3.0 * rng.normal()).collect());
        let p = codec.encode(&n).unwrap().mean_power();
        worst_power = worst_power.max((p - 1.0).abs());
    }
    ok &= worst_power <= 1e-9;
    r.record(
        "channel statistics",
        ok,
        format!(
            "noise variance within 5%: {}; noiseless bitwise identity: {identical}; max |power − 1| {worst_power:.1e}",
            detail.join(", ")
        ),
        t,
    );
}

fn metric_formulas(r: &mut Report) {
    let t = Instant::now();
    let p = psnr_from_mse(0.0625);
    let psnr_ok = (p - 12.0412).abs() < 1e-6;
    let layer = |d: Vec<f64>| FeatureMap {
        layers: vec![FeatureLayer {
            height: 1,
            width: 1,
            channels: 2,
            data: d,
        }],
    };
    let hand = lpips_from_features(&layer(vec![1.0, 0.0]), &layer(vec![0.0, 1.0]), &[vec![1.0, 1.0]]).unwrap();
    let hand_ok = (hand - 2.0).abs() < 1e-9;

    let net = FeatureNet::default();
    let mut rng = Rng::new(SEED).substream("acceptance-metrics");
    let mut props_ok = true;
    for _ in 0..100 {
        let a = Image::new(32, 32, (0..3072).map(|_| rng.uniform()).collect()).unwrap();
        let b = Image::new(32, 32, (0..3072).map(|_| rng.uniform()).collect()).unwrap();
        let ab = lpips(&a, &b, &net).unwrap();
        props_ok &= lpips(&a, &a, &net).unwrap() == 0.0 && ab >= 0.0 && ab == lpips(&b, &a, &net).unwrap();
    }
    r.record(
        "metric formulas",
        psnr_ok && hand_ok && props_ok,
        format!(
            "PSNR(MSE 0.0625) = {p:.7} dB; LPIPS hand case = {hand}; zero/symmetry/nonnegativity on 100 pairs: {props_ok}"
        ),
        t,
    );
}

fn inversion_quality(r: &mut Report, tr: &Trained) {
    let t = Instant::now();
    let mut rng = Rng::new(SEED).substream("acceptance-inversion");
    let codes: Vec<LatentCode> = (0..50).map(|_| LatentCode(sample_factors(&mut rng, &tr.cfg.scene).0)).collect();
    let images = tr.generator.generate_many(&codes).unwrap();
    let refs: Vec<&Image> = images.iter().collect();
    let inv = invert_batch(&tr.generator, &refs, &sender_inversion(&tr.cfg, Some(&tr.kb))).unwrap();
    let recon = tr.generator.generate_many(&inv.iter().map(|x| x.latent.clone()).collect::<Vec<_>>()).unwrap();
    let scores: Vec<f64> = recon.iter().zip(&images).map(|(a, b)| psnr(a, b).unwrap()).collect();
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let passing = scores.iter().filter(|s| **s > 30.0).count();
    r.record(
        "inversion quality",
        passing == 50,
        format!("{passing}/50 generator images above 30 dB (min {min:.2} dB, mean {mean:.2} dB)"),
        t,
    );
}

fn robustness(r: &mut Report, dir: &Path) {
    let t = Instant::now();
    let rows = csv_rows(&dir.join(SNR_CSV));
    let at = |snr: f64| rows.iter().find(|row| num(row, "snr_db") == snr).map(|row| num(row, "psnr_mean")).unwrap();
    let (p5, p15) = (at(5.0), at(15.0));
    let gap = (p5 - p15).abs();
    r.record(
        "robustness",
        gap < 3.0,
        format!("mean test PSNR {p5:.2} dB at 5 dB vs {p15:.2} dB at 15 dB, gap {gap:.2} dB (< 3)"),
        t,
    );
}

fn ablation(r: &mut Report, dir: &Path) {
    let t = Instant::now();
    let rows = csv_rows(&dir.join(KN_CSV));
    let row = rows.iter().find(|row| row["k"] == "10").unwrap();
    let (with, without) = (num(row, "psnr_mean"), num(row, "noflow_psnr_mean"));
    r.record(
        "flow ablation",
        with >= without,
        format!("k=10 mean test PSNR with flow {with:.3} dB vs without {without:.3} dB"),
        t,
    );
}

fn privacy_suite(r: &mut Report, tr: &Trained) {
    let t = Instant::now();
    let spec = &tr.cfg.scene;
    let cfg = PrivacyConfig::default();
    let idx = cfg.private_indices(spec).unwrap();
    let non_private: Vec<usize> = (0..spec.factor_dim()).filter(|i| !idx.contains(i)).collect();
    let mut rng = Rng::new(SEED).substream("acceptance-privacy");

    // filter and projection postconditions on random latents
    let mut filter_ok = 0;
    let mut attempted = 0;
    let mut projected_ok = 0;
    let mut exhausted = 0;
    for _ in 0..1000 {
        let l = LatentCode((0..spec.factor_dim()).map(|_| rng.uniform_in(-1.0, 2.0)).collect());
        let f = privacy_filter(&l, spec, &cfg, &mut rng).unwrap();
        let l_s: Vec<f64> = idx.iter().map(|&i| l.0[i]).collect();
        let moved: f64 = idx.iter().map(|&i| (f.0[i] - l.0[i]).powi(2)).sum::<f64>().sqrt();
        let kept = non_private.iter().all(|&i| f.0[i].to_bits() == l.0[i].to_bits());
        filter_ok += usize::from(moved > filter_threshold(&l_s, cfg.lambda1) && kept);

        attempted += 1;
        match kb_project(&f, &tr.kb, spec, &cfg) {
            Ok(p) => {
                let d = |a: &LatentCode, b: &LatentCode| {
                    idx.iter().map(|&i| (a.0[i] - b.0[i]).powi(2)).sum::<f64>().sqrt()
                };
                let holds = match cfg.predicate {
                    Predicate::TowardMean => d(&p, &tr.kb.mean) < cfg.lambda2 * d(&p, &f),
                    Predicate::Literal => d(&p, &f) < cfg.lambda2 * d(&p, &tr.kb.mean),
                };
                let kept = non_private.iter().all(|&i| p.0[i].to_bits() == l.0[i].to_bits());
                projected_ok += usize::from(holds && kept);
            }
            Err(_) => exhausted += 1,
        }
    }
    let succeeded = attempted - exhausted;

    // end-to-end: identity codec over a noiseless channel so only the privacy
    // chain, the flow and the generator act on the latent
    let sys = SemComSystem::new(
        tr.generator.clone(),
        tr.flow.clone(),
        ChannelCodec::identity(spec.factor_dim()),
        ChannelConfig::noiseless(),
        FeatureNet::default(),
    )
    .unwrap()
    .with_privacy(Some(PrivacySetup {
        config: cfg.clone(),
        kb: tr.kb.clone(),
    }))
    .unwrap();
    let n = 100.min(tr.test_images.len());
    let images: Vec<&Image> = tr.test_images[..n].iter().collect();
    let root = Rng::new(SEED).substream("acceptance-privacy-e2e");
    let rngs: Vec<Rng> = (0..n as u64).map(|i| root.substream_indexed("trial", i)).collect();
    let sent = transmit_many(&sys, &images, &tr.test_latents[..n], &ChannelConfig::noiseless(), &rngs).unwrap();
    let recon: Vec<&Image> = sent.iter().map(|s| &s.reconstruction).collect();
    let reread = invert_batch(&tr.generator, &recon, &receiver_inversion(&tr.kb)).unwrap();
    let mut e2e_pass = 0;
    let mut worst_np = 0.0f64;
    for (s, back) in sent.iter().zip(&reread) {
        let l = &s.latent;
        let eye_norm = idx.iter().map(|&i| l.0[i] * l.0[i]).sum::<f64>().sqrt();
        let eye_d = idx.iter().map(|&i| (back.latent.0[i] - l.0[i]).powi(2)).sum::<f64>().sqrt();
        let np = non_private.iter().map(|&i| (back.latent.0[i] - l.0[i]).abs()).fold(0.0, f64::max);
        worst_np = worst_np.max(np);
        e2e_pass += usize::from(eye_d > 0.5 * cfg.lambda1 * eye_norm && np <= 0.1);
    }

    let ok = filter_ok == 1000 && projected_ok == succeeded && e2e_pass >= 90;
    r.record(
        "privacy suite",
        ok,
        format!(
            "filter postcondition {filter_ok}/1000; toward-mean postcondition {projected_ok}/{succeeded} successful \
             projections ({exhausted} exhausted); end-to-end {e2e_pass}/{n} trials (≥ 90), worst non-private error {worst_np:.3}"
        ),
        t,
    );
}

const DETERMINISM_CONFIG: &str = "\
seed = 11
data.train_count = 200
data.test_count = 20
generator.epochs = 5
inversion.max_iterations = 30
flow.epochs = 3
train.epochs = 5
sweep.snrs = 0, 10, off
sweep.ks = 1, 10
sweep.kn_epochs = 3
";

fn hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".csv") || name.ends_with(".json") {
            out.insert(name, sha256_file(&path).unwrap());
        }
    }
    out
}

fn determinism(r: &mut Report) {
    let t = Instant::now();
    let runs: Vec<BTreeMap<String, String>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = parse_config(DETERMINISM_CONFIG).unwrap();
            cfg.out_dir = dir.path().to_path_buf();
            run_pipeline(&cfg, &Command::ALL).unwrap();
            hashes(dir.path())
        })
        .collect();
    let ok = !runs[0].is_empty() && runs[0] == runs[1];
    r.record(
        "determinism",
        ok,
        format!("{} CSV/manifest files compared across two full runs, identical: {ok}", runs[0].len()),
        t,
    );
}

fn main() -> ExitCode {
    // `cargo test -- --list` and filters passed by the test runner
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut report = Report { lines: Vec::new() };
    compression(&mut report);
    gradient_suite(&mut report);
    channel_statistics(&mut report);
    metric_formulas(&mut report);
    determinism(&mut report);

    let dir = tempfile::tempdir().unwrap();
    println!("running the default pipeline (seed {SEED}) ...");
    let trained = full_pipeline(dir.path());
    flow_invertibility(&mut report, &trained.flow);
    inversion_quality(&mut report, &trained);
    robustness(&mut report, dir.path());
    ablation(&mut report, dir.path());
    privacy_suite(&mut report, &trained);

    let failed = report.lines.iter().filter(|(ok, _)| !ok).count();
    println!("acceptance: {} passed, {failed} failed", report.lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
