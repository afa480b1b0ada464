//! MLP image generator and latent recovery by optimization.
//!
//! The generator maps a latent code (one value per scene factor, so the
//! segment layout of [`SceneSpec`] carries over) to an image through a dense
//! network with a sigmoid output. [`invert`] recovers a latent code for a
//! given image by running Adam on the image MSE with respect to the code.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::nn::io::{BinReader, BinWriter, WEIGHT_MAGIC, WEIGHT_VERSION};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, MlpGrads, Rng};
use crate::scene::{read_spec, write_spec, Dataset, FactorVector, Image, SceneSpec};

/// A point in generator latent space. Segment boundaries follow the
/// generator's [`SceneSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn segment<'a>(&'a self, spec: &SceneSpec, name: &str) -> Option<&'a [f64]> {
        spec.segment_range(name).map(|r| &self.0[r])
    }

    pub fn distance(&self, other: &LatentCode) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl From<&FactorVector> for LatentCode {
    fn from(f: &FactorVector) -> Self {
        Self(f.0.clone())
    }
}

/// Stacks codes into a `count × dim` matrix.
pub fn latent_matrix(codes: &[LatentCode]) -> Result<Array2<f64>> {
    let dim = codes.first().map_or(0, LatentCode::dim);
    let mut flat = Vec::with_capacity(codes.len() * dim);
    for (i, c) in codes.iter().enumerate() {
        if c.dim() != dim {
            return Err(Error::dims(format!("latent {i}"), dim, c.dim()));
        }
        flat.extend_from_slice(&c.0);
    }
    Array2::from_shape_vec((codes.len(), dim), flat).map_err(|e| Error::InvalidInput(e.to_string()))
}

pub fn latents_from_matrix(m: ArrayView2<f64>) -> Vec<LatentCode> {
    m.rows().into_iter().map(|r| LatentCode(r.to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    pub net: Mlp,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorTrainConfig {
    /// Hidden widths between the factor input and the pixel output.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate at the last epoch as a fraction of `lr` (cosine decay).
    pub final_lr_fraction: f64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 512],
            epochs: 200,
            batch_size: 32,
            lr: 1e-3,
            final_lr_fraction: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-pixel MSE of the returned model over the whole training set.
    pub final_mse: f64,
}

pub(crate) fn cosine_lr(base: f64, final_fraction: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    let floor = base * final_fraction;
    floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Gathers rows `idx` of `m`.
pub(crate) fn gather_rows(m: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(0), idx)
}

/// Mean squared pixel error of `net(x)` against `y`, with parameter gradients.
pub fn generator_loss(net: &Mlp, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, MlpGrads)> {
    let (pred, cache) = net.forward_batch(x)?;
    if pred.dim() != y.dim() {
        return Err(Error::dims("generator targets", pred.ncols(), y.ncols()));
    }
    let diff = pred - y;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let grad = diff * (2.0 / count);
    let (_, grads) = net.backward_batch(&cache, grad.view())?;
    Ok((loss, grads))
}

/// Supervised regression from scene factors to rendered images.
pub fn train_generator(ds: &Dataset, cfg: &GeneratorTrainConfig, rng: &mut Rng) -> Result<(GeneratorModel, TrainReport)> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let spec = ds.spec.clone();
    let mut dims = vec![spec.factor_dim()];
    dims.extend(&cfg.hidden);
    dims.push(spec.n());
    let mut init_rng = rng.substream("generator-init");
    let mut net = Mlp::new(&dims, Activation::Tanh, Activation::Sigmoid, &mut init_rng)?;

    let xs = ds.factor_matrix();
    let ys = ds.image_matrix();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut shuffle_rng = rng.substream("generator-shuffle");
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), net.param_count());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        adam.config.lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        shuffle_rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = gather_rows(&xs, chunk);
            let y = gather_rows(&ys, chunk);
            let (loss, grads) = generator_loss(&net, x.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "train_generator".into(),
                    unit: "epoch",
                    index: epoch,
                    loss,
                });
            }
            total += loss * chunk.len() as f64;
            let blocks = grads.blocks();
            adam.step_blocks(net.param_blocks_mut(), &blocks)?;
        }
        epoch_losses.push(total / ds.len() as f64);
    }

    let model = GeneratorModel { net, spec };
    let final_mse = model.dataset_mse(ds)?;
    Ok((model, TrainReport { epoch_losses, final_mse }))
}

impl GeneratorModel {
    pub fn latent_dim(&self) -> usize {
        self.net.in_dim()
    }

    fn check_latent_dim(&self, got: usize) -> Result<()> {
        if got != self.latent_dim() {
            return Err(Error::dims("generator latent", self.latent_dim(), got));
        }
        Ok(())
    }

    pub fn generate(&self, z: &LatentCode) -> Result<Image> {
        self.check_latent_dim(z.dim())?;
        let y = self.net.predict(Array1::from(z.0.clone()).view())?;
        Image::new(self.spec.height, self.spec.width, y.to_vec())
    }

    /// Generates one image per row of `z`.
    pub fn generate_batch(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_latent_dim(z.ncols())?;
        self.net.predict_batch(z)
    }

    pub fn generate_many(&self, codes: &[LatentCode]) -> Result<Vec<Image>> {
        if codes.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.generate_batch(latent_matrix(codes)?.view())?;
        out.rows()
            .into_iter()
            .map(|r| Image::new(self.spec.height, self.spec.width, r.to_vec()))
            .collect()
    }

    /// Per-pixel MSE between generated factors and stored images.
    pub fn dataset_mse(&self, ds: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        let xs = ds.factor_matrix();
        let ys = ds.image_matrix();
        for start in (0..ds.len()).step_by(256) {
            let end = (start + 256).min(ds.len());
            let pred = self.net.predict_batch(xs.slice(ndarray::s![start..end, ..]))?;
            let diff = pred - ys.slice(ndarray::s![start..end, ..]);
            total += diff.iter().map(|d| d * d).sum::<f64>();
        }
        Ok(total / (ds.len() * self.spec.n()) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        w.mlp(&self.net)?;
        write_spec(&mut w, &self.spec)?;
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        let net = r.mlp()?;
        let spec = read_spec(&mut r)?;
        r.expect_end()?;
        if net.in_dim() != spec.factor_dim() || net.out_dim() != spec.n() {
            return Err(r.format_error(format!(
                "network dims {:?} do not match scene spec (d = {}, n = {})",
                net.dims(),
                spec.factor_dim(),
                spec.n()
            )));
        }
        Ok(Self { net, spec })
    }
}

/// Where inversion starts.
#[derive(Debug, Clone, PartialEq)]
pub enum InitMode {
    Zeros,
    /// Start from a fixed code, typically the knowledge-base mean.
    Mean(LatentCode),
    /// Start from a caller-supplied code.
    Given(LatentCode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub max_iterations: usize,
    pub lr: f64,
    pub init: InitMode,
    /// Stop once the image MSE falls below this value.
    pub mse_threshold: f64,
    /// Reject steps that increase the loss and halve that code's step size.
    pub backtracking: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            lr: 0.05,
            init: InitMode::Zeros,
            mse_threshold: 1e-4,
            backtracking: true,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidInput("inversion needs positive iterations and lr".into()));
        }
        Ok(())
    }

    fn init_code(&self, dim: usize) -> Result<LatentCode> {
        let z = match &self.init {
            InitMode::Zeros => LatentCode::zeros(dim),
            InitMode::Mean(z) | InitMode::Given(z) => z.clone(),
        };
        if z.dim() != dim {
            return Err(Error::dims("inversion init", dim, z.dim()));
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult {
    pub latent: LatentCode,
    pub final_mse: f64,
    /// Iterations performed; 0 means the start point already met the threshold.
    pub iterations: usize,
    /// Image MSE of the current code after every iteration, starting with the init.
    pub history: Vec<f64>,
}

/// Image MSE of `G(z)` against `target` and its gradient with respect to `z`.
pub fn inversion_objective(g: &GeneratorModel, z: &[f64], target: &Image) -> Result<(f64, Vec<f64>)> {
    g.check_latent_dim(z.len())?;
    check_image(g, target)?;
    let zb = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row vector");
    let t = Array2::from_shape_vec((1, target.len()), target.pixels().to_vec()).expect("row vector");
    let (loss, grad) = batch_objective(g, zb.view(), &t)?;
    Ok((loss[0], grad.row(0).to_vec()))
}

fn check_image(g: &GeneratorModel, img: &Image) -> Result<()> {
    if img.height() != g.spec.height || img.width() != g.spec.width {
        return Err(Error::dims(
            "inversion target",
            format!("{}x{}", g.spec.height, g.spec.width),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    Ok(())
}

/// Per-row image MSE and its latent gradient.
fn batch_objective(g: &GeneratorModel, z: ArrayView2<f64>, targets: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let (pred, cache) = g.net.forward_batch(z)?;
    let diff = pred - targets;
    let n = diff.ncols() as f64;
    let losses = diff
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|d| d * d).sum::<f64>() / n)
        .collect();
    let grad_z = g.net.backward_input(&cache, (diff * (2.0 / n)).view())?;
    Ok((losses, grad_z))
}

/// Recovers a latent code for `target` by gradient descent on image MSE.
pub fn invert(g: &GeneratorModel, target: &Image, cfg: &InversionConfig) -> Result<InversionResult> {
    Ok(invert_batch(g, &[target], cfg)?.remove(0))
}

/// Inverts several images at once. Each image keeps its own Adam moments,
/// step size and stopping state; finished images leave the batch.
pub fn invert_batch(g: &GeneratorModel, targets: &[&Image], cfg: &InversionConfig) -> Result<Vec<InversionResult>> {
    invert_batch_from(g, targets, None, cfg)
}

/// Like [`invert_batch`] with an explicit start code per image, overriding `cfg.init`.
pub fn invert_batch_from(
    g: &GeneratorModel,
    targets: &[&Image],
    starts: Option<&[LatentCode]>,
    cfg: &InversionConfig,
) -> Result<Vec<InversionResult>> {
    cfg.validate()?;
    let d = g.latent_dim();
    let count = targets.len();
    if let Some(s) = starts {
        if s.len() != count {
            return Err(Error::dims("inversion start codes", count, s.len()));
        }
    }
    let mut z = Array2::zeros((count, d));
    let default_init = cfg.init_code(d)?;
    for i in 0..count {
        check_image(g, targets[i])?;
        let init = match starts {
            Some(s) => &s[i],
            None => &default_init,
        };
        g.check_latent_dim(init.dim())?;
        z.row_mut(i).assign(&Array1::from(init.0.clone()));
    }
    let mut t = Array2::zeros((count, g.spec.n()));
    for (i, img) in targets.iter().enumerate() {
        t.row_mut(i).assign(&ndarray::ArrayView1::from(img.pixels()));
    }

    let adam = AdamConfig::with_lr(cfg.lr);
    let mut m = Array2::<f64>::zeros((count, d));
    let mut v = Array2::<f64>::zeros((count, d));
    let mut steps = vec![0i32; count];
    let mut lr = vec![cfg.lr; count];
    let mut results: Vec<Option<InversionResult>> = vec![None; count];
    let mut histories: Vec<Vec<f64>> = vec![Vec::new(); count];

    let (loss0, grad0) = batch_objective(g, z.view(), &t)?;
    let mut loss = loss0;
    let mut grad = grad0;
    let mut active: Vec<usize> = Vec::new();
    for i in 0..count {
        histories[i].push(loss[i]);
        if !loss[i].is_finite() {
            return Err(Error::Diverged {
                stage: "invert".into(),
                unit: "iteration",
                index: 0,
                loss: loss[i],
            });
        }
        if loss[i] < cfg.mse_threshold {
            results[i] = Some(InversionResult {
                latent: LatentCode(z.row(i).to_vec()),
                final_mse: loss[i],
                iterations: 0,
                history: std::mem::take(&mut histories[i]),
            });
        } else {
            active.push(i);
        }
    }

    for iter in 1..=cfg.max_iterations {
        if active.is_empty() {
            break;
        }
        // Adam proposal for each active code
        let mut cand = Array2::zeros((active.len(), d));
        for (row, &i) in active.iter().enumerate() {
            steps[i] += 1;
            let c1 = 1.0 - adam.beta1.powi(steps[i]);
            let c2 = 1.0 - adam.beta2.powi(steps[i]);
            for j in 0..d {
                let gj = grad[[i, j]];
                m[[i, j]] = adam.beta1 * m[[i, j]] + (1.0 - adam.beta1) * gj;
                v[[i, j]] = adam.beta2 * v[[i, j]] + (1.0 - adam.beta2) * gj * gj;
                let step = lr[i] * (m[[i, j]] / c1) / ((v[[i, j]] / c2).sqrt() + adam.epsilon);
                cand[[row, j]] = z[[i, j]] - step;
            }
        }
        let sub_t = gather_rows(&t, &active);
        let (cand_loss, cand_grad) = batch_objective(g, cand.view(), &sub_t)?;

        let mut still = Vec::with_capacity(active.len());
        for (row, &i) in active.iter().enumerate() {
            let l = cand_loss[row];
            if !l.is_finite() {
                return Err(Error::Diverged {
                    stage: "invert".into(),
                    unit: "iteration",
                    index: iter,
                    loss: l,
                });
            }
            if !cfg.backtracking || l <= loss[i] {
                z.row_mut(i).assign(&cand.row(row));
                grad.row_mut(i).assign(&cand_grad.row(row));
                loss[i] = l;
            } else {
                lr[i] *= 0.5;
            }
            histories[i].push(loss[i]);
            if loss[i] < cfg.mse_threshold || iter == cfg.max_iterations {
                results[i] = Some(InversionResult {
                    latent: LatentCode(z.row(i).to_vec()),
                    final_mse: loss[i],
                    iterations: iter,
                    history: std::mem::take(&mut histories[i]),
                });
            } else {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(results.into_iter().map(|r| r.expect("every image finishes")).collect())
}

pub const LATENT_MAGIC: &[u8; 4] = b"LLLT";
pub const LATENT_VERSION: u32 = 1;

/// Cached inversion output: one code and its image-space residual per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub latents: Vec<LatentCode>,
    pub residuals: Vec<f64>,
}

impl LatentSet {
    pub fn from_results(results: &[InversionResult]) -> Self {
        Self {
            latents: results.iter().map(|r| r.latent.clone()).collect(),
            residuals: results.iter().map(|r| r.final_mse).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dim = self.latents.first().map_or(0, LatentCode::dim);
        let mut w = BinWriter::create(path)?;
        w.header(LATENT_MAGIC, LATENT_VERSION)?;
        w.u32(self.latents.len() as u32)?;
        w.u32(dim as u32)?;
        for (l, r) in self.latents.iter().zip(&self.residuals) {
            if l.dim() != dim {
                return Err(Error::dims("latent set entry", dim, l.dim()));
            }
            w.f64s(l.0.iter())?;
            w.f64(*r)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.header(LATENT_MAGIC, LATENT_VERSION)?;
        let count = r.u32()? as usize;
        let dim = r.dim("latent dimension")?;
        let mut latents = Vec::with_capacity(count.min(1 << 20));
        let mut residuals = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            latents.push(LatentCode(r.f64s(dim)?));
            residuals.push(r.f64()?);
        }
        r.expect_end()?;
        Ok(Self { latents, residuals })
    }
}

/// Inverts every dataset image in chunks of `chunk` images.
pub fn invert_dataset(
    g: &GeneratorModel,
    ds: &Dataset,
    cfg: &InversionConfig,
    chunk: usize,
) -> Result<Vec<InversionResult>> {
    let images: Vec<&Image> = ds.images().collect();
    let mut out = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        out.extend(invert_batch(g, part, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use crate::scene::make_dataset;

    fn small_spec() -> SceneSpec {
        SceneSpec::with_size(8, 8)
    }

    fn small_model(seed: u64) -> GeneratorModel {
        let spec = small_spec();
        let net = Mlp::new(
            &[spec.factor_dim(), 12, spec.n()],
            Activation::Tanh,
            Activation::Sigmoid,
            &mut Rng::new(seed),
        )
        .unwrap();
        GeneratorModel { net, spec }
    }

    #[test]
    fn latent_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.lllt");
        let set = LatentSet {
            latents: vec![LatentCode(vec![0.1, 0.2]), LatentCode(vec![-1.0, 3.5])],
            residuals: vec![1e-3, 2e-4],
        };
        set.save(&p).unwrap();
        assert_eq!(LatentSet::load(&p).unwrap(), set);
        std::fs::write(&p, b"LLNK").unwrap();
        assert!(LatentSet::load(&p).is_err());
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let g = small_model(1);
        let z = LatentCode(vec![0.3; 16]);
        let a = g.generate(&z).unwrap();
        assert_eq!(a, g.generate(&z).unwrap());
        assert!(a.pixels().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert!(g.generate(&LatentCode(vec![0.0; 3])).is_err());
    }

    #[test]
    fn zero_epochs_is_initialized_net() {
        let ds = make_dataset(20, 1, &small_spec()).unwrap();
        let cfg = GeneratorTrainConfig {
            hidden: vec![8],
            epochs: 0,
            ..Default::default()
        };
        let (g, report) = train_generator(&ds, &cfg, &mut Rng::new(3)).unwrap();
        assert!(report.epoch_losses.is_empty());
        // near the MSE of predicting 0.5 everywhere
        let ys = ds.image_matrix();
        let baseline = ys.iter().map(|v| (v - 0.5) * (v - 0.5)).sum::<f64>() / ys.len() as f64;
        assert!(report.final_mse < 3.0 * baseline + 0.05, "{} vs {}", report.final_mse, baseline);
        assert_eq!(g.latent_dim(), 16);
    }

    #[test]
    fn training_reduces_loss_and_is_seeded() {
        let ds = make_dataset(64, 2, &small_spec()).unwrap();
        let cfg = GeneratorTrainConfig {
            hidden: vec![32],
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            ..Default::default()
        };
        let (g1, r1) = train_generator(&ds, &cfg, &mut Rng::new(9)).unwrap();
        let (g2, r2) = train_generator(&ds, &cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(r1, r2);
        assert!(r1.epoch_losses.last().unwrap() < &(0.5 * r1.epoch_losses[0]));
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let g = small_model(4);
        let target = g.generate(&LatentCode(vec![0.7; 16])).unwrap();
        let mut rng = Rng::new(5);
        for _ in 0..5 {
            let z: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let err = grad_check(|v| inversion_objective(&g, v, &target).unwrap(), &z, 1e-5);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn inversion_at_fixed_point_stops_immediately() {
        let g = small_model(6);
        let z0 = LatentCode((0..16).map(|i| i as f64 / 16.0).collect());
        let f = g.generate(&z0).unwrap();
        let cfg = InversionConfig {
            init: InitMode::Given(z0.clone()),
            ..Default::default()
        };
        let r = invert(&g, &f, &cfg).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.final_mse < 1e-12);
        assert_eq!(r.latent, z0);
    }

    #[test]
    fn backtracking_history_is_monotone() {
        let g = small_model(7);
        let f = g.generate(&LatentCode(vec![0.8; 16])).unwrap();
        let cfg = InversionConfig {
            max_iterations: 100,
            lr: 0.3,
            ..Default::default()
        };
        let r = invert(&g, &f, &cfg).unwrap();
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(r.history.len(), r.iterations + 1);
        assert!(r.final_mse < r.history[0]);
    }

    #[test]
    fn batch_inversion_matches_inputs() {
        let g = small_model(8);
        let imgs: Vec<Image> = (0..3)
            .map(|i| g.generate(&LatentCode(vec![0.2 * i as f64; 16])).unwrap())
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let cfg = InversionConfig {
            max_iterations: 20,
            ..Default::default()
        };
        let batch = invert_batch(&g, &refs, &cfg).unwrap();
        assert_eq!(batch.len(), 3);
        let wrong = Image::filled(4, 4, 0.5).unwrap();
        assert!(invert(&g, &wrong, &cfg).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = small_model(9);
        let p = dir.path().join("g.llnk");
        g.save(&p).unwrap();
        assert_eq!(GeneratorModel::load(&p).unwrap(), g);
    }
}
