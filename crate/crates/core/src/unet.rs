//! Encoder–decoder segmentation network built from the [`crate::tensor`] primitives.
//!
//! Topology for `depth = d`:
//! d encoder levels of (3×3 conv + ReLU) ×2 followed by a 2×2 max-pool, a
//! bottleneck of (3×3 conv + ReLU) ×2, d decoder levels of 2×2 transposed
//! conv, skip concatenation (skip first) and (3×3 conv + ReLU) ×2, then a
//! 1×1 conv to two channels and a channel softmax.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{
    concat_channels, conv2d_backward, conv2d_forward, deconv2_backward, deconv2_forward, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, softmax_channels, split_channels, ArgmaxMap, ConvParams, Dims4,
    LayerGrad, Tensor4,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetSpec {
    /// Number of pooling stages.
    pub depth: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub feature_cap: usize,
}

impl UNetSpec {
    pub const DEFAULT_FEATURE_CAP: usize = 1024;

    pub const fn new(depth: usize, base_features: usize) -> Self {
        Self { depth, base_features, in_channels: 1, out_channels: 2, feature_cap: Self::DEFAULT_FEATURE_CAP }
    }

    /// 34 counted layers, 512×512 input, F = 64.
    pub const fn u34() -> Self {
        Self::new(5, 64)
    }

    /// One resolution level shallower than [`UNetSpec::u34`].
    pub const fn u28() -> Self {
        Self::new(4, 64)
    }

    /// Small network used for phantom experiments on 64×64 slices.
    pub const fn desk() -> Self {
        Self::new(3, 8)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.depth > 12 {
            return fail(format!("depth must be in 1..=12, got {}", self.depth));
        }
        if self.base_features == 0 {
            return fail("base feature count must be positive".into());
        }
        if self.feature_cap < self.base_features {
            return fail(format!("feature cap {} below base features {}", self.feature_cap, self.base_features));
        }
        if self.in_channels == 0 {
            return fail("network needs at least one input channel".into());
        }
        if self.out_channels != 2 {
            return fail(format!("only two-class output is supported, got {}", self.out_channels));
        }
        Ok(())
    }

    /// Feature count at resolution level `level` (0 = full resolution, `depth` = bottleneck).
    pub fn features(&self, level: usize) -> usize {
        self.base_features.saturating_mul(1usize << level).min(self.feature_cap)
    }

    /// Spatial divisor every input extent must be a multiple of.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Counted layers: convolutions (4d + 2), pools (d), transposed
    /// convolutions (d), the 1×1 output convolution and the softmax.
    pub fn counted_layers(&self) -> usize {
        6 * self.depth + 4
    }

    pub fn check_input(&self, dims: Dims4) -> Result<()> {
        let m = self.size_multiple();
        if dims.c != self.in_channels {
            return shape_err(format!("input {dims} needs {} channel(s)", self.in_channels));
        }
        if dims.h % m != 0 || dims.w % m != 0 || dims.h == 0 || dims.w == 0 {
            return shape_err(format!("input {dims} height and width must be positive multiples of {m}"));
        }
        Ok(())
    }

    /// Name, kind and shape of every parameterized layer, in topology order.
    pub fn layout(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        let conv3 = |name: String, i: usize, o: usize| LayerSpec { name, kind: LayerKind::Conv3, in_c: i, out_c: o };
        let mut prev = self.in_channels;
        for level in 0..self.depth {
            let f = self.features(level);
            out.push(conv3(format!("enc{level}.conv1"), prev, f));
            out.push(conv3(format!("enc{level}.conv2"), f, f));
            prev = f;
        }
        let fb = self.features(self.depth);
        out.push(conv3("mid.conv1".into(), prev, fb));
        out.push(conv3("mid.conv2".into(), fb, fb));
        prev = fb;
        for level in (0..self.depth).rev() {
            let f = self.features(level);
            out.push(LayerSpec { name: format!("dec{level}.up"), kind: LayerKind::Up, in_c: prev, out_c: f });
            out.push(conv3(format!("dec{level}.conv1"), 2 * f, f));
            out.push(conv3(format!("dec{level}.conv2"), f, f));
            prev = f;
        }
        out.push(LayerSpec { name: "head".into(), kind: LayerKind::Head, in_c: prev, out_c: self.out_channels });
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 convolution, stride 1, pad 1, followed by ReLU.
    Conv3,
    /// 2×2 transposed convolution, stride 2.
    Up,
    /// 1×1 convolution producing logits.
    Head,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_c: usize,
    pub out_c: usize,
}

impl LayerSpec {
    pub fn kernel(&self) -> usize {
        match self.kind {
            LayerKind::Conv3 => 3,
            LayerKind::Up => 2,
            LayerKind::Head => 1,
        }
    }

    fn stride_pad(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv3 => (1, 1),
            LayerKind::Up => (2, 0),
            LayerKind::Head => (1, 0),
        }
    }

    pub fn weight_dims(&self) -> Dims4 {
        let k = self.kernel();
        Dims4::new(self.out_c, self.in_c, k, k)
    }

    pub fn zeros<T: Scalar>(&self) -> ConvParams<T> {
        let (stride, pad) = self.stride_pad();
        ConvParams::zeros(self.out_c, self.in_c, self.kernel(), stride, pad)
    }
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// Network parameters in topology order.
///
/// Every mutable access bumps an internal version so that a
/// [`ForwardCache`] taken before an update cannot be used afterwards.
#[derive(Debug)]
pub struct UNetParams<T> {
    spec: UNetSpec,
    layers: Vec<ConvParams<T>>,
    uid: u64,
    version: u64,
}

impl<T: Scalar> Clone for UNetParams<T> {
    fn clone(&self) -> Self {
        Self { spec: self.spec, layers: self.layers.clone(), uid: fresh_uid(), version: 0 }
    }
}

impl<T: Scalar> PartialEq for UNetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// He-initialized network: weights ~ N(0, 2 / fan_in) with fan_in = in_c·k·k, zero biases.
pub fn build<T: Scalar>(spec: &UNetSpec, seed: u64) -> Result<UNetParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layout()
        .iter()
        .map(|ls| {
            let mut p = ls.zeros::<T>();
            let fan_in = (ls.in_c * ls.kernel() * ls.kernel()) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive standard deviation");
            for w in p.weights.data_mut() {
                *w = T::from_f64_lossy(normal.sample(&mut rng));
            }
            p
        })
        .collect();
    Ok(UNetParams { spec: *spec, layers, uid: fresh_uid(), version: 0 })
}

impl<T: Scalar> UNetParams<T> {
    /// Assembles parameters, checking every layer against the spec's layout.
    pub fn from_layers(spec: UNetSpec, layers: Vec<ConvParams<T>>) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        if layout.len() != layers.len() {
            return shape_err(format!("expected {} layers, got {}", layout.len(), layers.len()));
        }
        for (ls, p) in layout.iter().zip(&layers) {
            let (stride, pad) = ls.stride_pad();
            if p.weights.dims() != ls.weight_dims() || p.bias.len() != ls.out_c || p.stride != stride || p.pad != pad {
                return shape_err(format!(
                    "layer {} expects weights {}, got {}",
                    ls.name,
                    ls.weight_dims(),
                    p.weights.dims()
                ));
            }
        }
        Ok(Self { spec, layers, uid: fresh_uid(), version: 0 })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[ConvParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvParams<T>] {
        self.version += 1;
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(ConvParams::num_params).sum()
    }

    /// Counted layers of the instantiated topology (see [`UNetSpec::counted_layers`]).
    pub fn counted_layers(&self) -> usize {
        let layout = self.spec.layout();
        let convs = layout.iter().filter(|l| l.kind == LayerKind::Conv3).count();
        let ups = layout.iter().filter(|l| l.kind == LayerKind::Up).count();
        let heads = layout.iter().filter(|l| l.kind == LayerKind::Head).count();
        // pools mirror the transposed convolutions one-to-one; one softmax
        convs + ups + ups + heads + 1
    }

    /// Flat mutable views of every parameter tensor (weights then bias, per layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [T]> {
        self.version += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Probabilities `(n, 2, h, w)`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(softmax_channels(&self.run(x, false)?.0))
    }

    /// Probabilities plus the activations needed by [`UNetParams::backward`].
    pub fn forward_train(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let (logits, cache) = self.run(x, true)?;
        Ok((softmax_channels(&logits), cache.expect("cache requested")))
    }

    fn idx_enc(&self, level: usize, i: usize) -> usize {
        2 * level + i
    }

    fn idx_mid(&self, i: usize) -> usize {
        2 * self.spec.depth + i
    }

    fn idx_dec(&self, level: usize, i: usize) -> usize {
        2 * self.spec.depth + 2 + 3 * (self.spec.depth - 1 - level) + i
    }

    fn idx_head(&self) -> usize {
        5 * self.spec.depth + 2
    }

    fn run(&self, x: &Tensor4<T>, keep: bool) -> Result<(Tensor4<T>, Option<ForwardCache<T>>)> {
        self.spec.check_input(x.dims())?;
        let n_layers = self.layers.len();
        let mut inputs: Vec<Option<Tensor4<T>>> = vec![None; n_layers];
        let mut outputs: Vec<Option<Tensor4<T>>> = vec![None; n_layers];
        let mut pools = Vec::with_capacity(self.spec.depth);
        let mut skips = Vec::with_capacity(self.spec.depth);

        let mut conv_relu = |idx: usize, input: Tensor4<T>, inputs: &mut Vec<Option<Tensor4<T>>>| -> Result<Tensor4<T>> {
            let y = relu_forward(&conv2d_forward(&input, &self.layers[idx])?);
            if keep {
                inputs[idx] = Some(input);
                outputs[idx] = Some(y.clone());
            }
            Ok(y)
        };

        let mut cur = x.clone();
        for level in 0..self.spec.depth {
            let a = conv_relu(self.idx_enc(level, 0), cur, &mut inputs)?;
            let b = conv_relu(self.idx_enc(level, 1), a, &mut inputs)?;
            let (pooled, map) = maxpool2_forward(&b)?;
            skips.push(b);
            pools.push(map);
            cur = pooled;
        }
        cur = conv_relu(self.idx_mid(0), cur, &mut inputs)?;
        cur = conv_relu(self.idx_mid(1), cur, &mut inputs)?;
        let mut skip_channels = vec![0; self.spec.depth];
        for level in (0..self.spec.depth).rev() {
            let up_idx = self.idx_dec(level, 0);
            let up = deconv2_forward(&cur, &self.layers[up_idx])?;
            if keep {
                inputs[up_idx] = Some(cur);
            }
            let skip = skips.pop().expect("one skip per level");
            skip_channels[level] = skip.dims().c;
            let cat = concat_channels(&skip, &up)?;
            let a = conv_relu(self.idx_dec(level, 1), cat, &mut inputs)?;
            cur = conv_relu(self.idx_dec(level, 2), a, &mut inputs)?;
        }
        let head = self.idx_head();
        let logits = conv2d_forward(&cur, &self.layers[head])?;
        let cache = keep.then(|| {
            inputs[head] = Some(cur);
            ForwardCache {
                owner: (self.uid, self.version),
                logits_dims: logits.dims(),
                inputs,
                outputs,
                pools,
                skip_channels,
            }
        });
        Ok((logits, cache))
    }

    /// Gradients of every parameter given the gradient of the loss with
    /// respect to the logits (for softmax + cross-entropy, `P − G`).
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor4<T>) -> Result<UNetGrads<T>> {
        if cache.owner != (self.uid, self.version) {
            return Err(Error::Usage("forward cache does not belong to the current parameters".into()));
        }
        if grad_logits.dims() != cache.logits_dims {
            return shape_err(format!(
                "logit gradient {} does not match logits {}",
                grad_logits.dims(),
                cache.logits_dims
            ));
        }
        let mut pass = BackwardPass { params: self, cache, grads: vec![None; self.layers.len()] };

        let mut g = pass.conv(self.idx_head(), grad_logits, false)?;
        let mut skip_grads: Vec<Option<Tensor4<T>>> = vec![None; self.spec.depth];
        for level in 0..self.spec.depth {
            g = pass.conv(self.idx_dec(level, 2), &g, true)?;
            g = pass.conv(self.idx_dec(level, 1), &g, true)?;
            let (g_skip, g_up) = split_channels(&g, cache.skip_channels[level])?;
            skip_grads[level] = Some(g_skip);
            g = pass.up(self.idx_dec(level, 0), &g_up)?;
        }
        g = pass.conv(self.idx_mid(1), &g, true)?;
        g = pass.conv(self.idx_mid(0), &g, true)?;
        for level in (0..self.spec.depth).rev() {
            let mut routed = maxpool2_backward(&cache.pools[level], &g)?;
            let skip = skip_grads[level].take().expect("skip gradient per level");
            for (r, s) in routed.data_mut().iter_mut().zip(skip.data()) {
                *r += *s;
            }
            g = pass.conv(self.idx_enc(level, 1), &routed, true)?;
            g = pass.conv(self.idx_enc(level, 0), &g, true)?;
        }
        let grads = pass.grads;
        Ok(UNetGrads { layers: grads.into_iter().map(|l| l.expect("gradient for every layer")).collect(), input_grad: g })
    }
}

struct BackwardPass<'a, T> {
    params: &'a UNetParams<T>,
    cache: &'a ForwardCache<T>,
    grads: Vec<Option<ConvParams<T>>>,
}

impl<T: Scalar> BackwardPass<'_, T> {
    fn input(&self, idx: usize) -> &Tensor4<T> {
        self.cache.inputs[idx].as_ref().expect("cached layer input")
    }

    fn record(&mut self, idx: usize, lg: LayerGrad<T>) -> Tensor4<T> {
        let p = &self.params.layers[idx];
        self.grads[idx] = Some(ConvParams { weights: lg.weights_grad, bias: lg.bias_grad, stride: p.stride, pad: p.pad });
        lg.input_grad
    }

    fn conv(&mut self, idx: usize, g: &Tensor4<T>, relu: bool) -> Result<Tensor4<T>> {
        let lg = if relu {
            let out = self.cache.outputs[idx].as_ref().expect("cached layer output");
            conv2d_backward(self.input(idx), &self.params.layers[idx], &relu_backward(out, g)?)?
        } else {
            conv2d_backward(self.input(idx), &self.params.layers[idx], g)?
        };
        Ok(self.record(idx, lg))
    }

    fn up(&mut self, idx: usize, g: &Tensor4<T>) -> Result<Tensor4<T>> {
        let lg = deconv2_backward(self.input(idx), &self.params.layers[idx], g)?;
        Ok(self.record(idx, lg))
    }
}

/// Activations retained by [`UNetParams::forward_train`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    owner: (u64, u64),
    logits_dims: Dims4,
    inputs: Vec<Option<Tensor4<T>>>,
    outputs: Vec<Option<Tensor4<T>>>,
    pools: Vec<ArgmaxMap>,
    skip_channels: Vec<usize>,
}

impl<T: Scalar> ForwardCache<T> {
    /// ReLU on/off bits and pooling winners; equal patterns mean the network
    /// is the same smooth function between the two evaluations.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut words = Vec::new();
        for out in self.outputs.iter().flatten() {
            for chunk in out.data().chunks(64) {
                words.push(chunk.iter().enumerate().fold(0u64, |acc, (i, v)| acc | (u64::from(*v > T::zero()) << i)));
            }
        }
        for map in &self.pools {
            words.extend(map.winners().iter().map(|&w| w as u64));
        }
        words
    }
}

/// Per-layer gradients mirroring [`UNetParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct UNetGrads<T> {
    pub layers: Vec<ConvParams<T>>,
    pub input_grad: Tensor4<T>,
}

impl<T: Scalar> UNetGrads<T> {
    pub fn grad_slices(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.weights.data(), l.bias.as_slice()]).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.grad_slices().iter().all(|s| s.iter().all(|v| v.is_zero()))
    }
}
