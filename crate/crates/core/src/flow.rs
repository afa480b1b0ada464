//! Affine-coupling normalizing flow between generator latents and a
//! standard-normal transmission space.
//!
//! Each [`CouplingLayer`] keeps the conditioning coordinates fixed and maps the
//! free ones as `y = x · exp(s(x_cond)) + t(x_cond)`, so its inverse and
//! log-determinant (`Σ s`) are exact. Gradients are available through both
//! directions, which stage-2 training needs for the receiver-side inverse.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::generator::{latent_matrix, latents_from_matrix, GeneratorModel, LatentCode};
use crate::nn::io::{BinReader, BinWriter, WEIGHT_MAGIC, WEIGHT_VERSION};
use crate::nn::{Activation, AdamConfig, AdamState, Dense, ForwardCache, Mlp, MlpGrads, Rng};

/// `(raw, s, t, scale cache, translate cache)`.
type Conditioned = (Array2<f64>, Array2<f64>, Array2<f64>, ForwardCache, ForwardCache);

/// How raw scale-net outputs become log-scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleHead {
    /// `s = bound · tanh(raw)` with a learned scalar `bound`.
    Bounded { bound: f64 },
    /// `s = raw`.
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer {
    /// `true` marks a conditioning coordinate (passed through unchanged).
    mask: Vec<bool>,
    cond: Vec<usize>,
    free: Vec<usize>,
    pub scale_net: Mlp,
    pub translate_net: Mlp,
    pub head: ScaleHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGrads {
    pub scale: MlpGrads,
    pub translate: MlpGrads,
    pub bound: f64,
}

impl CouplingGrads {
    fn add_assign(&mut self, other: &CouplingGrads) {
        self.scale.add_assign(&other.scale);
        self.translate.add_assign(&other.translate);
        self.bound += other.bound;
    }
}

/// Activations kept by a forward or inverse coupling pass.
#[derive(Debug, Clone)]
pub struct CouplingCache {
    /// Free coordinates on the data side (`x_free`).
    x_free: Array2<f64>,
    raw: Array2<f64>,
    s: Array2<f64>,
    scale_cache: ForwardCache,
    translate_cache: ForwardCache,
}

fn columns(m: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    m.select(Axis(1), idx)
}

fn scatter_columns(dst: &mut Array2<f64>, idx: &[usize], src: &Array2<f64>) {
    for (j, &c) in idx.iter().enumerate() {
        dst.column_mut(c).assign(&src.column(j));
    }
}

fn check_finite(m: &Array2<f64>, context: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, scale_net: Mlp, translate_net: Mlp, head: ScaleHead) -> Result<Self> {
        let cond: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        let free: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
        if cond.is_empty() || free.is_empty() {
            return Err(Error::InvalidInput("coupling mask must split coordinates into two nonempty sets".into()));
        }
        for (name, net) in [("scale", &scale_net), ("translate", &translate_net)] {
            if net.in_dim() != cond.len() || net.out_dim() != free.len() {
                return Err(Error::dims(
                    format!("{name} net of coupling layer"),
                    format!("{} -> {}", cond.len(), free.len()),
                    format!("{} -> {}", net.in_dim(), net.out_dim()),
                ));
            }
        }
        Ok(Self {
            mask,
            cond,
            free,
            scale_net,
            translate_net,
            head,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim() {
            return Err(Error::dims("coupling layer input", self.dim(), cols));
        }
        Ok(())
    }

    fn scales(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.head {
            ScaleHead::Bounded { bound } => raw.mapv(|r| bound * r.tanh()),
            ScaleHead::Unbounded => raw.clone(),
        }
    }

    /// Conditioner outputs `(raw, s, t)` and their caches.
    fn condition(&self, cond_vals: ArrayView2<f64>) -> Result<Conditioned> {
        let (raw, scale_cache) = self.scale_net.forward_batch(cond_vals)?;
        let (t, translate_cache) = self.translate_net.forward_batch(cond_vals)?;
        let s = self.scales(&raw);
        Ok((raw, s, t, scale_cache, translate_cache))
    }

    /// Forward on a batch: returns `(y, logdet per row, cache)`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, CouplingCache)> {
        self.check_dim(x.ncols())?;
        let xc = columns(x, &self.cond);
        let xf = columns(x, &self.free);
        let (raw, s, t, scale_cache, translate_cache) = self.condition(xc.view())?;
        let yf = &xf * &s.mapv(f64::exp) + &t;
        check_finite(&yf, "coupling forward")?;
        let mut y = x.to_owned();
        scatter_columns(&mut y, &self.free, &yf);
        let logdet = s.sum_axis(Axis(1));
        Ok((
            y,
            logdet,
            CouplingCache {
                x_free: xf,
                raw,
                s,
                scale_cache,
                translate_cache,
            },
        ))
    }

    /// Forward on a single vector.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let xb = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        let (y, ld, _) = self.forward_batch(xb.view())?;
        Ok((y.row(0).to_vec(), ld[0]))
    }

    /// Inverse on a batch: returns `(x, cache)`.
    pub fn inverse_batch(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, CouplingCache)> {
        self.check_dim(y.ncols())?;
        let yc = columns(y, &self.cond);
        let yf = columns(y, &self.free);
        let (raw, s, t, scale_cache, translate_cache) = self.condition(yc.view())?;
        let xf = (&yf - &t) * &s.mapv(|v| (-v).exp());
        check_finite(&xf, "coupling inverse")?;
        let mut x = y.to_owned();
        scatter_columns(&mut x, &self.free, &xf);
        Ok((
            x,
            CouplingCache {
                x_free: xf,
                raw,
                s,
                scale_cache,
                translate_cache,
            },
        ))
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        let yb = Array2::from_shape_vec((1, y.len()), y.to_vec()).expect("row");
        Ok(self.inverse_batch(yb.view())?.0.row(0).to_vec())
    }

    /// Backpropagates `g_s` (gradient w.r.t. log-scales) and `g_t` into the
    /// conditioning inputs and the conditioner parameters.
    fn conditioner_backward(
        &self,
        cache: &CouplingCache,
        g_s: &Array2<f64>,
        g_t: &Array2<f64>,
    ) -> Result<(Array2<f64>, CouplingGrads)> {
        let (g_raw, g_bound) = match self.head {
            ScaleHead::Bounded { bound } => {
                let mut g_raw = g_s.clone();
                let mut g_bound = 0.0;
                ndarray::Zip::from(&mut g_raw)
                    .and(&cache.raw)
                    .for_each(|g, &r| {
                        let th = r.tanh();
                        g_bound += *g * th;
                        *g *= bound * (1.0 - th * th);
                    });
                (g_raw, g_bound)
            }
            ScaleHead::Unbounded => (g_s.clone(), 0.0),
        };
        let (gc_s, scale) = self.scale_net.backward_batch(&cache.scale_cache, g_raw.view())?;
        let (gc_t, translate) = self.translate_net.backward_batch(&cache.translate_cache, g_t.view())?;
        Ok((
            gc_s + gc_t,
            CouplingGrads {
                scale,
                translate,
                bound: g_bound,
            },
        ))
    }

    /// Gradient of a loss `ℓ(y, logdet)` through the forward pass.
    pub fn forward_backward(
        &self,
        cache: &CouplingCache,
        g_y: ArrayView2<f64>,
        g_logdet: &Array1<f64>,
    ) -> Result<(Array2<f64>, CouplingGrads)> {
        let exp_s = cache.s.mapv(f64::exp);
        let gy_f = columns(g_y, &self.free);
        let g_xf = &gy_f * &exp_s;
        // ∂y_f/∂s = x_f · exp(s); ∂logdet/∂s = 1
        let mut g_s = &gy_f * &cache.x_free * &exp_s;
        for (mut row, gl) in g_s.rows_mut().into_iter().zip(g_logdet.iter()) {
            row += *gl;
        }
        let (g_cond, grads) = self.conditioner_backward(cache, &g_s, &gy_f)?;
        let mut g_x = g_y.to_owned();
        scatter_columns(&mut g_x, &self.free, &g_xf);
        for (j, &c) in self.cond.iter().enumerate() {
            let mut col = g_x.column_mut(c);
            col += &g_cond.column(j);
        }
        Ok((g_x, grads))
    }

    /// Gradient of a loss `ℓ(x)` through the inverse pass.
    pub fn inverse_backward(&self, cache: &CouplingCache, g_x: ArrayView2<f64>) -> Result<(Array2<f64>, CouplingGrads)> {
        let gx_f = columns(g_x, &self.free);
        // x_f = (y_f − t)·exp(−s)
        let g_yf = &gx_f * &cache.s.mapv(|v| (-v).exp());
        let g_t = -&g_yf;
        let g_s = -(&gx_f * &cache.x_free);
        let (g_cond, grads) = self.conditioner_backward(cache, &g_s, &g_t)?;
        let mut g_y = g_x.to_owned();
        scatter_columns(&mut g_y, &self.free, &g_yf);
        for (j, &c) in self.cond.iter().enumerate() {
            let mut col = g_y.column_mut(c);
            col += &g_cond.column(j);
        }
        Ok((g_y, grads))
    }

    fn zero_grads(&self) -> CouplingGrads {
        CouplingGrads {
            scale: MlpGrads::zeros_like(&self.scale_net),
            translate: MlpGrads::zeros_like(&self.translate_net),
            bound: 0.0,
        }
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.scale_net.param_blocks_mut();
        out.extend(self.translate_net.param_blocks_mut());
        if let ScaleHead::Bounded { bound } = &mut self.head {
            out.push(std::slice::from_mut(bound));
        }
        out
    }

    fn param_count(&self) -> usize {
        self.scale_net.param_count()
            + self.translate_net.param_count()
            + usize::from(matches!(self.head, ScaleHead::Bounded { .. }))
    }
}

/// Conditioner architecture shared by every coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowArch {
    pub coupling_layers: usize,
    /// Dense layers per conditioner network, output layer included.
    pub fc_layers: usize,
    pub hidden_width: usize,
    pub initial_bound: f64,
    /// Zero the conditioner output layers so the fresh flow is the identity.
    pub identity_init: bool,
}

impl Default for FlowArch {
    fn default() -> Self {
        Self {
            coupling_layers: 8,
            fc_layers: 6,
            hidden_width: 64,
            initial_bound: 1.0,
            identity_init: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel {
    dim: usize,
    pub layers: Vec<CouplingLayer>,
}

#[derive(Debug, Clone)]
pub struct FlowCache {
    layers: Vec<CouplingCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowGrads {
    pub layers: Vec<CouplingGrads>,
}

impl FlowGrads {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.scale.blocks());
            out.extend(g.translate.blocks());
            out.push(std::slice::from_ref(&g.bound));
        }
        out
    }

    pub fn add_assign(&mut self, other: &FlowGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }
}

/// Alternating even/odd conditioning masks.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<bool> {
    (0..dim).map(|i| i % 2 == layer % 2).collect()
}

fn conditioner(in_dim: usize, out_dim: usize, arch: &FlowArch, rng: &mut Rng) -> Result<Mlp> {
    let mut dims = vec![in_dim];
    dims.extend(std::iter::repeat_n(arch.hidden_width, arch.fc_layers.saturating_sub(1)));
    dims.push(out_dim);
    let mut net = Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng)?;
    if arch.identity_init {
        let last = net.layers().len() - 1;
        let layer = &mut net.layers_mut()[last];
        *layer = Dense::zeros(layer.in_dim(), layer.out_dim(), Activation::Identity);
    }
    Ok(net)
}

impl FlowModel {
    pub fn new(dim: usize, arch: &FlowArch, rng: &mut Rng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidInput("flow needs at least two dimensions".into()));
        }
        if arch.fc_layers == 0 {
            return Err(Error::InvalidInput("conditioner needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(arch.coupling_layers);
        for i in 0..arch.coupling_layers {
            let mask = alternating_mask(dim, i);
            let nc = mask.iter().filter(|m| **m).count();
            let nf = dim - nc;
            let s = conditioner(nc, nf, arch, rng)?;
            let t = conditioner(nc, nf, arch, rng)?;
            layers.push(CouplingLayer::new(
                mask,
                s,
                t,
                ScaleHead::Bounded {
                    bound: arch.initial_bound,
                },
            )?);
        }
        Ok(Self { dim, layers })
    }

    /// A flow with no coupling layers (the exact identity map).
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: Vec::new() }
    }

    pub fn from_layers(dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(Error::dims(format!("coupling layer {i}"), dim, l.dim()));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.dim {
            return Err(Error::dims("flow input", self.dim, cols));
        }
        Ok(())
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>, FlowCache)> {
        self.check_dim(x.ncols())?;
        let mut cur = x.to_owned();
        let mut logdet = Array1::zeros(x.nrows());
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, ld, cache) = layer.forward_batch(cur.view())?;
            logdet += &ld;
            caches.push(cache);
            cur = y;
        }
        Ok((cur, logdet, FlowCache { layers: caches }))
    }

    pub fn inverse_batch(&self, y: ArrayView2<f64>) -> Result<(Array2<f64>, FlowCache)> {
        self.check_dim(y.ncols())?;
        let mut cur = y.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in self.layers.iter().rev() {
            let (x, cache) = layer.inverse_batch(cur.view())?;
            caches.push(cache);
            cur = x;
        }
        caches.reverse();
        Ok((cur, FlowCache { layers: caches }))
    }

    /// `N = flow(L)` and `log|det ∂N/∂L|`.
    pub fn forward(&self, l: &LatentCode) -> Result<(FlowVector, f64)> {
        let x = latent_matrix(std::slice::from_ref(l))?;
        let (y, ld, _) = self.forward_batch(x.view())?;
        Ok((FlowVector(y.row(0).to_vec()), ld[0]))
    }

    pub fn inverse(&self, n: &FlowVector) -> Result<LatentCode> {
        let y = Array2::from_shape_vec((1, n.0.len()), n.0.clone()).expect("row");
        let (x, _) = self.inverse_batch(y.view())?;
        Ok(LatentCode(x.row(0).to_vec()))
    }

    /// Backpropagation through [`forward_batch`](Self::forward_batch).
    pub fn forward_backward(
        &self,
        cache: &FlowCache,
        g_y: ArrayView2<f64>,
        g_logdet: &Array1<f64>,
    ) -> Result<(Array2<f64>, FlowGrads)> {
        let mut g = g_y.to_owned();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (gx, lg) = layer.forward_backward(c, g.view(), g_logdet)?;
            grads.push(lg);
            g = gx;
        }
        grads.reverse();
        Ok((g, FlowGrads { layers: grads }))
    }

    /// Backpropagation through [`inverse_batch`](Self::inverse_batch).
    pub fn inverse_backward(&self, cache: &FlowCache, g_x: ArrayView2<f64>) -> Result<(Array2<f64>, FlowGrads)> {
        let mut g = g_x.to_owned();
        let mut grads: Vec<Option<CouplingGrads>> = vec![None; self.layers.len()];
        // inverse runs layers last-to-first, so backprop runs first-to-last
        for (i, (layer, c)) in self.layers.iter().zip(&cache.layers).enumerate() {
            let (gy, lg) = layer.inverse_backward(c, g.view())?;
            grads[i] = Some(lg);
            g = gy;
        }
        Ok((
            g,
            FlowGrads {
                layers: grads.into_iter().map(|g| g.expect("filled")).collect(),
            },
        ))
    }

    pub fn zero_grads(&self) -> FlowGrads {
        FlowGrads {
            layers: self.layers.iter().map(CouplingLayer::zero_grads).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CouplingLayer::param_count).sum()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(CouplingLayer::param_blocks_mut).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.scale_net.is_finite()
                && l.translate_net.is_finite()
                && match l.head {
                    ScaleHead::Bounded { bound } => bound.is_finite(),
                    ScaleHead::Unbounded => true,
                }
        })
    }

    /// Mean negative log-likelihood under a standard-normal base:
    /// `mean(½‖N‖² + (d/2)·ln 2π − logdet)`.
    pub fn nll(&self, batch: &[LatentCode]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("NLL of an empty batch".into()));
        }
        Ok(self.nll_and_grad_matrix(latent_matrix(batch)?.view(), false)?.0)
    }

    /// NLL of the rows of `x` and, if requested, its parameter gradient.
    pub fn nll_and_grad_matrix(&self, x: ArrayView2<f64>, want_grad: bool) -> Result<(f64, Option<FlowGrads>)> {
        let b = x.nrows() as f64;
        let d = self.dim as f64;
        let (y, logdet, cache) = self.forward_batch(x)?;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let total: f64 = y
            .rows()
            .into_iter()
            .zip(logdet.iter())
            .map(|(r, ld)| 0.5 * r.dot(&r) + d * half_ln_2pi - ld)
            .sum();
        let nll = total / b;
        if !want_grad {
            return Ok((nll, None));
        }
        let g_y = &y / b;
        let g_ld = Array1::from_elem(x.nrows(), -1.0 / b);
        let (_, grads) = self.forward_backward(&cache, g_y.view(), &g_ld)?;
        Ok((nll, Some(grads)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BinWriter::create(path)?;
        w.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        self.write_body(&mut w)?;
        w.finish()?;
        Ok(())
    }

    pub(crate) fn write_body<W: std::io::Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.u32(self.dim as u32)?;
        w.u32(self.layers.len() as u32)?;
        for l in &self.layers {
            w.bytes(&l.mask.iter().map(|&m| u8::from(m)).collect::<Vec<_>>())?;
            match l.head {
                ScaleHead::Bounded { bound } => {
                    w.u8(1)?;
                    w.f64(bound)?;
                }
                ScaleHead::Unbounded => w.u8(0)?,
            }
            w.mlp(&l.scale_net)?;
            w.mlp(&l.translate_net)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BinReader::open(path)?;
        r.header(WEIGHT_MAGIC, WEIGHT_VERSION)?;
        let flow = Self::read_body(&mut r)?;
        r.expect_end()?;
        Ok(flow)
    }

    pub(crate) fn read_body<R: std::io::Read>(r: &mut BinReader<R>) -> Result<Self> {
        let dim = r.dim("flow dim")?;
        let count = r.dim("coupling count")?;
        let mut layers = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let mut raw = vec![0u8; dim];
            r.bytes(&mut raw)?;
            let mask = raw.iter().map(|&b| b != 0).collect();
            let head = match r.u8()? {
                1 => ScaleHead::Bounded { bound: r.f64()? },
                0 => ScaleHead::Unbounded,
                t => return Err(r.format_error(format!("coupling {i}: unknown scale head {t}"))),
            };
            let s = r.mlp()?;
            let t = r.mlp()?;
            layers.push(CouplingLayer::new(mask, s, t, head).map_err(|e| r.format_error(format!("coupling {i}: {e}")))?);
        }
        Self::from_layers(dim, layers).map_err(|e| r.format_error(e.to_string()))
    }
}

/// A code in transmission space (`N` at the sender, `N̂` at the receiver).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVector(pub Vec<f64>);

impl FlowVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            final_lr_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrainReport {
    /// Full-set NLL before training.
    pub initial_nll: f64,
    /// Mean minibatch NLL per epoch.
    pub epoch_nll: Vec<f64>,
    /// Full-set NLL after training.
    pub final_nll: f64,
}

/// Maximum-likelihood training of the flow on generator latents.
pub fn train_flow(
    flow: &FlowModel,
    latents: &[LatentCode],
    cfg: &FlowTrainConfig,
    rng: &mut Rng,
) -> Result<(FlowModel, FlowTrainReport)> {
    if latents.len() < 2 {
        return Err(Error::InvalidInput("flow training needs at least two latents".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let xs = latent_matrix(latents)?;
    let mut flow = flow.clone();
    let initial_nll = flow.nll_and_grad_matrix(xs.view(), false)?.0;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), flow.param_count());
    let mut order: Vec<usize> = (0..latents.len()).collect();
    let mut shuffle = rng.substream("flow-shuffle");
    let mut epoch_nll = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.config.lr = crate::generator::cosine_lr(cfg.lr, cfg.final_lr_fraction, epoch, cfg.epochs);
        shuffle.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = crate::generator::gather_rows(&xs, chunk);
            let (nll, grads) = flow.nll_and_grad_matrix(x.view(), true).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    stage: "train_flow".into(),
                    unit: "epoch",
                    index: epoch,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            if !nll.is_finite() {
                return Err(Error::Diverged {
                    stage: "train_flow".into(),
                    unit: "epoch",
                    index: epoch,
                    loss: nll,
                });
            }
            total += nll * chunk.len() as f64;
            let grads = grads.expect("requested");
            let blocks = grads.blocks();
            adam.step_blocks(flow.param_blocks_mut(), &blocks)?;
        }
        epoch_nll.push(total / latents.len() as f64);
    }
    let final_nll = flow.nll_and_grad_matrix(xs.view(), false)?.0;
    Ok((
        flow,
        FlowTrainReport {
            initial_nll,
            epoch_nll,
            final_nll,
        },
    ))
}

/// Maximum absolute `inverse(forward(x)) − x` over the rows of `x`.
pub fn round_trip_error(flow: &FlowModel, x: ArrayView2<f64>) -> Result<f64> {
    let (y, _, _) = flow.forward_batch(x)?;
    let (back, _) = flow.inverse_batch(y.view())?;
    Ok((&back - &x).iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Per-pixel MSE between `G(L)` and `G(flow⁻¹(flow(L)))`; the reconstruction
/// term of stage-1 training, identically near zero for an exact flow.
pub fn reconstruction_mse(flow: &FlowModel, g: &GeneratorModel, latents: &[LatentCode]) -> Result<f64> {
    let x = latent_matrix(latents)?;
    let (y, _, _) = flow.forward_batch(x.view())?;
    let (back, _) = flow.inverse_batch(y.view())?;
    let a = g.generate_batch(x.view())?;
    let b = g.generate_batch(back.view())?;
    let diff = a - b;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
}

/// Applies the flow to a list of codes.
pub fn forward_many(flow: &FlowModel, latents: &[LatentCode]) -> Result<Vec<FlowVector>> {
    let x = latent_matrix(latents)?;
    let (y, _, _) = flow.forward_batch(x.view())?;
    Ok(latents_from_matrix(y.view()).into_iter().map(|l| FlowVector(l.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use ndarray::array;

    fn random_flow(dim: usize, seed: u64) -> FlowModel {
        let arch = FlowArch {
            hidden_width: 8,
            fc_layers: 3,
            identity_init: false,
            initial_bound: 0.8,
            ..Default::default()
        };
        FlowModel::new(dim, &arch, &mut Rng::new(seed)).unwrap()
    }

    fn linear_net(w: f64) -> Mlp {
        Mlp::from_layers(vec![Dense {
            weight: array![[w]],
            bias: array![0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn const_net(c: f64) -> Mlp {
        Mlp::from_layers(vec![Dense {
            weight: array![[0.0]],
            bias: array![c],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_coupling() {
        let l = CouplingLayer::new(vec![true, false], const_net(0.0), const_net(0.0), ScaleHead::Unbounded).unwrap();
        let (y, ld) = l.forward(&[0.3, -1.2]).unwrap();
        assert_eq!(y, vec![0.3, -1.2]);
        assert_eq!(ld, 0.0);
        assert_eq!(l.inverse(&[0.3, -1.2]).unwrap(), vec![0.3, -1.2]);
    }

    #[test]
    fn pure_translation() {
        let l = CouplingLayer::new(vec![true, false], const_net(0.0), const_net(2.5), ScaleHead::Unbounded).unwrap();
        let (y, ld) = l.forward(&[0.3, -1.0]).unwrap();
        assert_eq!(y, vec![0.3, 1.5]);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn closed_form_scale_layer() {
        // s(x0) = x0, t = 0: y = (1, e), logdet = 1
        let l = CouplingLayer::new(vec![true, false], linear_net(1.0), const_net(0.0), ScaleHead::Unbounded).unwrap();
        let (y, ld) = l.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(y[0], 1.0);
        assert!((y[1] - std::f64::consts::E).abs() < 1e-15);
        assert!((ld - 1.0).abs() < 1e-15);
        let x = l.inverse(&[1.0, std::f64::consts::E]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mask_must_split() {
        assert!(CouplingLayer::new(vec![true, true], const_net(0.0), const_net(0.0), ScaleHead::Unbounded).is_err());
        let wide = Mlp::identity(2);
        assert!(CouplingLayer::new(vec![true, false], wide.clone(), wide, ScaleHead::Unbounded).is_err());
    }

    #[test]
    fn fresh_default_flow_is_identity() {
        let flow = FlowModel::new(16, &FlowArch::default(), &mut Rng::new(1)).unwrap();
        assert_eq!(flow.layers.len(), 8);
        assert_eq!(flow.layers[0].scale_net.layers().len(), 6);
        let l = LatentCode((0..16).map(|i| i as f64 * 0.1 - 0.4).collect());
        let (n, ld) = flow.forward(&l).unwrap();
        assert_eq!(n.0, l.0);
        assert_eq!(ld, 0.0);
    }

    #[test]
    fn every_coordinate_transformed_by_half_the_layers() {
        for i in 0..16 {
            let free = (0..8).filter(|&l| !alternating_mask(16, l)[i]).count();
            assert_eq!(free, 4);
        }
    }

    #[test]
    fn single_layer_flow_equals_coupling() {
        let l = CouplingLayer::new(vec![true, false], linear_net(0.7), const_net(0.2), ScaleHead::Unbounded).unwrap();
        let flow = FlowModel::from_layers(2, vec![l.clone()]).unwrap();
        let (n, ld) = flow.forward(&LatentCode(vec![0.4, -0.9])).unwrap();
        let (y, ld2) = l.forward(&[0.4, -0.9]).unwrap();
        assert_eq!(n.0, y);
        assert_eq!(ld, ld2);
    }

    #[test]
    fn round_trip_random_flow() {
        let flow = random_flow(16, 2);
        let mut rng = Rng::new(3);
        let x = Array2::from_shape_simple_fn((1000, 16), || 2.0 * rng.normal());
        assert!(round_trip_error(&flow, x.view()).unwrap() < 1e-9);
        let (y, _, _) = flow.forward_batch(x.view()).unwrap();
        let (back, _) = flow.inverse_batch(y.view()).unwrap();
        let (again, _, _) = flow.forward_batch(back.view()).unwrap();
        assert!((&again - &y).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn logdet_matches_numeric_jacobian() {
        let flow = random_flow(4, 4);
        let x = [0.3, -0.5, 1.1, 0.2];
        let (_, ld) = flow.forward(&LatentCode(x.to_vec())).unwrap();
        let h = 1e-6;
        let mut jac = [[0.0; 4]; 4];
        for j in 0..4 {
            let mut p = x;
            let mut m = x;
            p[j] += h;
            m[j] -= h;
            let (yp, _) = flow.forward(&LatentCode(p.to_vec())).unwrap();
            let (ym, _) = flow.forward(&LatentCode(m.to_vec())).unwrap();
            for (i, row) in jac.iter_mut().enumerate() {
                row[j] = (yp.0[i] - ym.0[i]) / (2.0 * h);
            }
        }
        let det = det4(jac);
        assert!((det.abs().ln() - ld).abs() < 1e-4, "{} vs {}", det.abs().ln(), ld);
    }

    fn det4(m: [[f64; 4]; 4]) -> f64 {
        // Laplace expansion along the first row
        let minor = |skip: usize| -> [[f64; 3]; 3] {
            let mut out = [[0.0; 3]; 3];
            for r in 1..4 {
                let mut c2 = 0;
                for (c, &v) in m[r].iter().enumerate() {
                    if c != skip {
                        out[r - 1][c2] = v;
                        c2 += 1;
                    }
                }
            }
            out
        };
        let det3 = |a: [[f64; 3]; 3]| {
            a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
                + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
        };
        (0..4).map(|c| if c % 2 == 0 { 1.0 } else { -1.0 } * m[0][c] * det3(minor(c))).sum()
    }

    #[test]
    fn nll_closed_forms() {
        let flow = FlowModel::identity(16);
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let nll0 = flow.nll(&[LatentCode::zeros(16)]).unwrap();
        assert!((nll0 - 8.0 * ln2pi).abs() < 1e-12);
        let mut v = vec![0.0; 16];
        v[0] = 1.0;
        v[5] = -1.0;
        let nll2 = flow.nll(&[LatentCode(v)]).unwrap();
        assert!((nll2 - (1.0 + 8.0 * ln2pi)).abs() < 1e-12);
        assert!(flow.nll(&[]).is_err());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let flow = random_flow(6, 5);
        let mut rng = Rng::new(6);
        let x = Array2::from_shape_simple_fn((3, 6), || rng.normal());
        let base = flow.clone();
        let n_params = flow.param_count();
        let flat_of = |f: &FlowModel| -> Vec<f64> {
            let mut f = f.clone();
            f.param_blocks_mut().into_iter().flat_map(|b| b.to_vec()).collect()
        };
        let set = |f: &mut FlowModel, p: &[f64]| {
            let mut off = 0;
            for b in f.param_blocks_mut() {
                let n = b.len();
                b.copy_from_slice(&p[off..off + n]);
                off += n;
            }
        };
        let p0 = flat_of(&base);
        assert_eq!(p0.len(), n_params);
        let eval = |p: &[f64]| {
            let mut f = base.clone();
            set(&mut f, p);
            let (nll, g) = f.nll_and_grad_matrix(x.view(), true).unwrap();
            let flat: Vec<f64> = g.unwrap().blocks().into_iter().flat_map(|b| b.to_vec()).collect();
            (nll, flat)
        };
        assert!(grad_check(eval, &p0, 1e-5) < 1e-4);
    }

    #[test]
    fn inverse_backward_matches_finite_differences() {
        let flow = random_flow(6, 7);
        let mut rng = Rng::new(8);
        let y0: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let eval = |y: &[f64]| {
            let yb = Array2::from_shape_vec((1, 6), y.to_vec()).unwrap();
            let (x, cache) = flow.inverse_batch(yb.view()).unwrap();
            let loss: f64 = x.row(0).iter().zip(&w).map(|(a, b)| a * b).sum();
            let gx = Array2::from_shape_vec((1, 6), w.clone()).unwrap();
            let (gy, _) = flow.inverse_backward(&cache, gx.view()).unwrap();
            (loss, gy.row(0).to_vec())
        };
        assert!(grad_check(eval, &y0, 1e-5) < 1e-4);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let flow = random_flow(5, 9);
        let p = dir.path().join("flow.llnk");
        flow.save(&p).unwrap();
        assert_eq!(FlowModel::load(&p).unwrap(), flow);
    }

    #[test]
    fn training_reduces_nll_and_is_seeded() {
        let mut rng = Rng::new(10);
        let latents: Vec<LatentCode> = (0..200)
            .map(|_| LatentCode((0..4).map(|_| rng.uniform()).collect()))
            .collect();
        let arch = FlowArch {
            hidden_width: 16,
            fc_layers: 3,
            coupling_layers: 4,
            ..Default::default()
        };
        let flow = FlowModel::new(4, &arch, &mut Rng::new(11)).unwrap();
        let cfg = FlowTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            ..Default::default()
        };
        let (a, ra) = train_flow(&flow, &latents, &cfg, &mut Rng::new(12)).unwrap();
        let (b, rb) = train_flow(&flow, &latents, &cfg, &mut Rng::new(12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_nll < ra.initial_nll - 1.0, "{ra:?}");

        let cfg0 = FlowTrainConfig { epochs: 0, ..cfg };
        let (c, _) = train_flow(&flow, &latents, &cfg0, &mut Rng::new(12)).unwrap();
        assert_eq!(c, flow);
        assert!(train_flow(&flow, &latents[..1], &cfg0, &mut Rng::new(1)).is_err());
    }
}
