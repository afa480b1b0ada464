//! Dense network substrate shared by every learned component.
//!
//! A [`Mlp`] is a chain of dense layers `a = act(W x + b)`. Forward passes run
//! on row-major batches (`batch × features`) so the heavy products go through
//! GEMM; the single-vector API is a batch of one. Backward passes are analytic
//! and consume the [`ForwardCache`] produced by the matching forward call.

mod adam;
mod gradcheck;
pub mod io;
mod rng;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error};
pub use rng::Rng;

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative at pre-activation `z`, given the already computed output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Sigmoid => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Tanh,
            3 => Activation::Sigmoid,
            _ => return None,
        })
    }
}

/// One fully connected layer. `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.uniform_in(-limit, limit));
        Self {
            weight,
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Sequential dense network.
#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    id: u64,
    version: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            version: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Per-layer activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }

    /// Network output recorded in the cache.
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("cache has at least one layer")
    }
}

/// Parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// `(gradient slice)` per parameter block, in [`Mlp::param_blocks_mut`] order.
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (w, b) in &self.layers {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

impl Mlp {
    /// Builds a freshly initialized network over `dims = [in, h1, ..., out]`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidInput(format!("invalid layer dims {dims:?}")));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::glorot(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dims(format!("layer {i} bias"), l.out_dim(), l.bias.len()));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("layer {i} parameters"),
                });
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dims(
                    format!("layer {} -> {} chaining", i, i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weight: l.weight.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
                activation: l.activation,
            })
            .collect();
        Ok(Self {
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    /// Single identity layer of width `dim`.
    pub fn identity(dim: usize) -> Self {
        let layer = Dense {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation: Activation::Identity,
        };
        Self::from_layers(vec![layer]).expect("identity layer is valid")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable access to the layers. Invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Dense::out_dim));
        d
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dims("flat parameter vector", self.param_count(), params.len()));
        }
        let mut offset = 0;
        for l in self.layers_mut() {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Mutable parameter slices (weight, bias, weight, bias, ...).
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in self.layers_mut() {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::dims(
                format!("network input (dims {:?})", self.dims()),
                self.in_dim(),
                cols,
            ));
        }
        Ok(())
    }

    /// Forward pass on one vector.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<(Array1<f64>, ForwardCache)> {
        let batch = x.insert_axis(Axis(0));
        let (y, cache) = self.forward_batch(batch)?;
        Ok((y.index_axis_move(Axis(0), 0), cache))
    }

    /// Forward pass on a `batch × in` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(x.ncols())?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut current = x.to_owned();
        for layer in &self.layers {
            let z = affine(&layer.weight, &layer.bias, current.view());
            let act = layer.activation;
            let a = z.mapv(|v| act.apply(v));
            inputs.push(current);
            pre.push(z);
            current = a.clone();
            post.push(a);
        }
        Ok((
            current,
            ForwardCache {
                net_id: self.id,
                version: self.version,
                inputs,
                pre,
                post,
            },
        ))
    }

    /// Forward pass without recording a cache.
    pub fn predict_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut current = x.to_owned();
        for layer in &self.layers {
            let mut z = affine(&layer.weight, &layer.bias, current.view());
            let act = layer.activation;
            z.mapv_inplace(|v| act.apply(v));
            current = z;
        }
        Ok(current)
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self
            .predict_batch(x.insert_axis(Axis(0)))?
            .index_axis_move(Axis(0), 0))
    }

    fn check_cache(&self, cache: &ForwardCache, grad_rows: usize, grad_cols: usize) -> Result<()> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from net {}@v{}, backward on net {}@v{}",
                cache.net_id, cache.version, self.id, self.version
            )));
        }
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache("layer count differs".into()));
        }
        if grad_rows != cache.batch_size() || grad_cols != self.out_dim() {
            return Err(Error::dims(
                "upstream gradient",
                format!("{}x{}", cache.batch_size(), self.out_dim()),
                format!("{grad_rows}x{grad_cols}"),
            ));
        }
        Ok(())
    }

    /// Backward pass for one vector.
    pub fn backward(&self, cache: &ForwardCache, grad_y: ArrayView1<f64>) -> Result<(Array1<f64>, MlpGrads)> {
        let (gx, grads) = self.backward_batch(cache, grad_y.insert_axis(Axis(0)))?;
        Ok((gx.index_axis_move(Axis(0), 0), grads))
    }

    /// Backward pass on a batch; parameter gradients are summed over rows.
    pub fn backward_batch(&self, cache: &ForwardCache, grad_y: ArrayView2<f64>) -> Result<(Array2<f64>, MlpGrads)> {
        let (gx, grads) = self.backward_impl(cache, grad_y, true)?;
        Ok((gx, grads.expect("requested parameter gradients")))
    }

    /// Input gradient only; skips the weight-gradient products.
    pub fn backward_input(&self, cache: &ForwardCache, grad_y: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.backward_impl(cache, grad_y, false)?.0)
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_y: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Array2<f64>, Option<MlpGrads>)> {
        self.check_cache(cache, grad_y.nrows(), grad_y.ncols())?;
        let mut grads = want_params.then(|| Vec::with_capacity(self.layers.len()));
        let mut upstream = grad_y.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let act = layer.activation;
            let mut dz = upstream;
            if act != Activation::Identity {
                ndarray::Zip::from(&mut dz)
                    .and(&cache.pre[i])
                    .and(&cache.post[i])
                    .for_each(|g, &z, &a| *g *= act.derivative(z, a));
            }
            if let Some(g) = grads.as_mut() {
                let gw = dz.t().dot(&cache.inputs[i]);
                let gb = dz.sum_axis(Axis(0));
                g.push((gw.as_standard_layout().into_owned(), gb));
            }
            upstream = dz.dot(&layer.weight);
        }
        let grads = grads.map(|mut g| {
            g.reverse();
            MlpGrads { layers: g }
        });
        Ok((upstream, grads))
    }
}

/// `x · Wᵀ + b` for a `batch × in` input.
fn affine(weight: &Array2<f64>, bias: &Array1<f64>, x: ArrayView2<f64>) -> Array2<f64> {
    let mut z = x.dot(&weight.t());
    z += bias;
    z
}
