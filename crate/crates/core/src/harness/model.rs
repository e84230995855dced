//! Small feed-forward classifier with an optional single-head self-attention
//! layer. Parameters live in one flat vector: the prunable weight matrices of
//! the hidden layers first (in layer order), then biases and the output
//! layer.

use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// tanh approximation
    Gelu,
}

impl Activation {
    fn code(self) -> u64 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
        }
    }

    fn from_code(c: u64) -> Result<Self> {
        Ok(match c {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Gelu,
            _ => return Err(Error::Format(format!("unknown activation code {c}"))),
        })
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(T::zero()),
            Activation::Gelu => {
                let (c, k, _) = gelu_consts::<T>();
                z * sigmoid2(c * (z + k * z * z * z))
            }
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let (c, k, half) = gelu_consts::<T>();
                let u = c * (z + k * z * z * z);
                let sech = u.cosh().recip();
                sigmoid2(u) + half * z * sech * sech * c * (T::one() + T::lit(3.0) * k * z * z)
            }
        }
    }
}

/// `(1 + tanh u) / 2` without cancellation for negative `u`.
#[inline]
fn sigmoid2<T: Scalar>(u: T) -> T {
    (T::one() + (-(u + u)).exp()).recip()
}

#[inline]
fn gelu_consts<T: Scalar>() -> (T, T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715), T::lit(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, activation: Activation },
    /// Input viewed as `tokens × width`; output `X + softmax(QKᵀ/√width) V`.
    Attention { tokens: usize, width: usize },
}

impl LayerSpec {
    pub fn input_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Attention { tokens, width } => tokens * width,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Attention { tokens, width } => tokens * width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
    /// Prepends a self-attention layer over `inputs / tokens`-wide tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<AttentionConfig>,
}

impl ModelConfig {
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        let mut layers = Vec::new();
        if let Some(AttentionConfig { tokens }) = self.attention {
            if tokens == 0 || self.inputs % tokens != 0 {
                return Err(Error::Shape(format!("{} inputs do not split into {tokens} tokens", self.inputs)));
            }
            layers.push(LayerSpec::Attention { tokens, width: self.inputs / tokens });
        }
        let mut width = self.inputs;
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense { inputs: width, outputs: h, activation: self.activation });
            width = h;
        }
        Ok(layers)
    }
}

/// A named row-major tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub offset: usize,
    pub dims: Vec<usize>,
    pub is_weight: bool,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    weights: Vec<usize>,
    bias: Option<usize>,
}

/// Per-layer activations retained for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache<T> {
    Dense { input: Vec<T>, pre: Vec<T> },
    Attention { input: Vec<T>, q: Vec<T>, k: Vec<T>, v: Vec<T>, a: Vec<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    inputs: usize,
    classes: usize,
    hidden: Vec<LayerSpec>,
    params: Vec<T>,
    slots: Vec<Slot>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

const MAGIC: &[u8; 8] = b"SRGMODL1";

impl<T: Scalar> ToyModel<T> {
    /// Seeded initialization: `N(0, 2/fan_in)` for dense layers, `N(0, 1/width)/2`
    /// for attention projections, zero biases.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config.inputs, config.layers()?, config.classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<LayerSpec> = model.hidden.clone();
        let out = model.output_spec();
        for (l, spec) in specs.iter().chain(std::iter::once(&out)).enumerate() {
            let std = match *spec {
                LayerSpec::Dense { inputs, .. } => (2.0 / inputs as f64).sqrt(),
                LayerSpec::Attention { width, .. } => 0.5 / (width as f64).sqrt(),
            };
            for &off in &model.slots[l].weights.clone() {
                let len = weight_len(spec);
                for p in &mut model.params[off..off + len] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p = T::lit(std * z);
                }
            }
        }
        Ok(model)
    }

    /// All-zero model with the given hidden stack and a dense output layer.
    pub fn zeros(inputs: usize, hidden: Vec<LayerSpec>, classes: usize) -> Result<Self> {
        if inputs == 0 || classes == 0 {
            return Err(Error::Shape("model needs inputs > 0 and classes > 0".into()));
        }
        let mut width = inputs;
        for (l, spec) in hidden.iter().enumerate() {
            if spec.input_width() != width || spec.output_width() == 0 {
                return Err(Error::Shape(format!("layer {l} expects width {} but receives {width}", spec.input_width())));
            }
            width = spec.output_width();
        }
        let output = LayerSpec::Dense { inputs: width, outputs: classes, activation: Activation::Identity };

        let mut layout = Layout::new();
        let mut tensors = Vec::new();
        let mut slots: Vec<Slot> = Vec::new();
        for (l, spec) in hidden.iter().enumerate() {
            let names: &[&str] = match spec {
                LayerSpec::Dense { .. } => &["w"],
                LayerSpec::Attention { .. } => &["wq", "wk", "wv"],
            };
            let mut weights = Vec::new();
            for n in names {
                let name = format!("layer{l}.{n}");
                let r = layout.push(name.clone(), weight_len(spec));
                tensors.push(Tensor { name, offset: r.start, dims: weight_dims(spec), is_weight: true });
                weights.push(r.start);
            }
            slots.push(Slot { weights, bias: None });
        }
        let mut offset = layout.len();
        for (l, spec) in hidden.iter().enumerate() {
            if let LayerSpec::Dense { outputs, .. } = *spec {
                tensors.push(Tensor { name: format!("layer{l}.b"), offset, dims: vec![outputs], is_weight: false });
                slots[l].bias = Some(offset);
                offset += outputs;
            }
        }
        let wlen = weight_len(&output);
        tensors.push(Tensor { name: "output.w".into(), offset, dims: weight_dims(&output), is_weight: true });
        tensors.push(Tensor { name: "output.b".into(), offset: offset + wlen, dims: vec![classes], is_weight: false });
        slots.push(Slot { weights: vec![offset], bias: Some(offset + wlen) });
        offset += wlen + classes;

        Ok(Self { inputs, classes, hidden, params: vec![T::zero(); offset], slots, tensors, layout })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Number of hidden layers.
    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn hidden(&self) -> &[LayerSpec] {
        &self.hidden
    }

    pub fn output_spec(&self) -> LayerSpec {
        let width = self.hidden.last().map_or(self.inputs, LayerSpec::output_width);
        LayerSpec::Dense { inputs: width, outputs: self.classes, activation: Activation::Identity }
    }

    /// Layout of the prunable weights, which occupy `params()[..dim()]`.
    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Number of prunable weights.
    pub fn dim(&self) -> usize {
        self.layout.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn prunable(&self) -> &[T] {
        &self.params[..self.dim()]
    }

    pub fn prunable_mut(&mut self) -> &mut [T] {
        let d = self.dim();
        &mut self.params[..d]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Replaces the flat parameter vector.
    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        self.params = params;
        Ok(())
    }

    pub fn cast<S: Scalar>(&self) -> ToyModel<S> {
        ToyModel {
            inputs: self.inputs,
            classes: self.classes,
            hidden: self.hidden.clone(),
            params: crate::scalar::to_vec(&self.params),
            slots: self.slots.clone(),
            tensors: self.tensors.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn forward(&self, x: &[T], n: usize) -> Result<Vec<T>> {
        self.forward_with(&self.params, x, n, None)
    }

    /// Forward pass with an explicit parameter vector (same shape as
    /// `params()`); fills `caches` for [`Self::backward_with`] when given.
    pub fn forward_with(&self, params: &[T], x: &[T], n: usize, mut caches: Option<&mut Vec<Cache<T>>>) -> Result<Vec<T>> {
        if x.len() != n * self.inputs {
            return Err(Error::Shape(format!("batch of {} values is not {n} rows of width {}", x.len(), self.inputs)));
        }
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: params.len() });
        }
        if let Some(c) = caches.as_deref_mut() {
            c.clear();
        }
        let out = self.output_spec();
        let mut h = x.to_vec();
        for (spec, slot) in self.hidden.iter().chain(std::iter::once(&out)).zip(&self.slots) {
            h = match *spec {
                LayerSpec::Dense { inputs, outputs, activation } => {
                    let w = &params[slot.weights[0]..slot.weights[0] + inputs * outputs];
                    let b = &params[slot.bias.expect("dense layers carry a bias")..][..outputs];
                    let pre = dense_forward(&h, w, b, n, inputs, outputs);
                    let post = pre.iter().map(|&z| activation.apply(z)).collect();
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dense { input: h, pre });
                    }
                    post
                }
                LayerSpec::Attention { tokens, width } => {
                    let ws: Vec<&[T]> = slot.weights.iter().map(|&o| &params[o..o + width * width]).collect();
                    let (y, q, k, v, a) = attention_forward(&h, &ws, n, tokens, width);
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Attention { input: h, q, k, v, a });
                    }
                    y
                }
            };
        }
        Ok(h)
    }

    /// Gradient of `Σ dlogits ⊙ logits` w.r.t. all parameters, given the
    /// caches of the matching forward pass.
    pub fn backward_with(&self, params: &[T], caches: &[Cache<T>], dlogits: Vec<T>, n: usize) -> Vec<T> {
        let mut grad = vec![T::zero(); params.len()];
        let out = self.output_spec();
        let specs: Vec<LayerSpec> = self.hidden.iter().copied().chain(std::iter::once(out)).collect();
        let mut dy = dlogits;
        for l in (0..specs.len()).rev() {
            let slot = &self.slots[l];
            let need_dx = l > 0;
            dy = match (specs[l], &caches[l]) {
                (LayerSpec::Dense { inputs, outputs, activation }, Cache::Dense { input, pre }) => {
                    if activation != Activation::Identity {
                        for (g, &z) in dy.iter_mut().zip(pre) {
                            *g *= activation.derivative(z);
                        }
                    }
                    let w_off = slot.weights[0];
                    let w = &params[w_off..w_off + inputs * outputs];
                    // biases always sit after their weight matrix in the flat vector
                    let b_off = slot.bias.expect("dense layers carry a bias");
                    let (head, tail) = grad.split_at_mut(b_off);
                    let gw = &mut head[w_off..w_off + inputs * outputs];
                    let gb = &mut tail[..outputs];
                    dense_backward(input, w, &dy, gw, gb, n, inputs, outputs, need_dx)
                }
                (LayerSpec::Attention { tokens, width }, Cache::Attention { input, q, k, v, a }) => {
                    let ws: Vec<&[T]> = slot.weights.iter().map(|&o| &params[o..o + width * width]).collect();
                    let (dx, dws) = attention_backward(input, q, k, v, a, &ws, &dy, n, tokens, width);
                    for (&o, dw) in slot.weights.iter().zip(dws) {
                        for (g, d) in grad[o..o + width * width].iter_mut().zip(dw) {
                            *g += d;
                        }
                    }
                    dx
                }
                _ => unreachable!("cache kind follows the layer kind"),
            };
        }
        grad
    }

    /// Keeps the first `keep` hidden layers and the output layer.
    pub fn drop_layers(&self, keep: usize) -> Result<Self> {
        if keep == 0 || keep > self.depth() {
            return Err(Error::LayerDrop { keep, depth: self.depth() });
        }
        let hidden = self.hidden[..keep].to_vec();
        let mut next = Self::zeros(self.inputs, hidden, self.classes)?;
        if next.output_spec() != self.output_spec() {
            return Err(Error::Shape(format!(
                "output layer expects width {} but layer {} emits {}",
                self.output_spec().input_width(),
                keep - 1,
                next.output_spec().input_width()
            )));
        }
        for t in next.tensors.clone() {
            let name = &t.name;
            let src = self.tensors.iter().find(|s| &s.name == name).expect("kept tensors exist in the source");
            next.params[t.range()].copy_from_slice(&self.params[src.range()]);
        }
        Ok(next)
    }

    /// Binary checkpoint: magic, input/class counts, the layer registry, then
    /// every tensor as `u64` rank, `u64` dims and little-endian `f32` data.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        for v in [self.inputs, self.classes, self.hidden.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for spec in &self.hidden {
            let fields = match *spec {
                LayerSpec::Dense { inputs, outputs, activation } => [0, inputs as u64, outputs as u64, activation.code()],
                LayerSpec::Attention { tokens, width } => [1, tokens as u64, width as u64, 0],
            };
            for f in fields {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        for t in &self.tensors {
            w.write_all(&(t.dims.len() as u64).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &p in &self.params[t.range()] {
                w.write_all(&(p.to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let inputs = read_u64(&mut r)? as usize;
        let classes = read_u64(&mut r)? as usize;
        let depth = read_u64(&mut r)? as usize;
        if depth > 1 << 16 {
            return Err(Error::Format(format!("implausible depth {depth}")));
        }
        let mut hidden = Vec::with_capacity(depth);
        for _ in 0..depth {
            let f: Vec<u64> = (0..4).map(|_| read_u64(&mut r)).collect::<Result<_>>()?;
            hidden.push(match f[0] {
                0 => LayerSpec::Dense { inputs: f[1] as usize, outputs: f[2] as usize, activation: Activation::from_code(f[3])? },
                1 => LayerSpec::Attention { tokens: f[1] as usize, width: f[2] as usize },
                k => return Err(Error::Format(format!("unknown layer kind {k}"))),
            });
        }
        let mut model = Self::zeros(inputs, hidden, classes)?;
        for t in model.tensors.clone() {
            let rank = read_u64(&mut r)? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
            if dims != t.dims {
                return Err(Error::Format(format!("tensor {} has dims {dims:?}, expected {:?}", t.name, t.dims)));
            }
            let mut buf = [0u8; 4];
            for p in &mut model.params[t.range()] {
                r.read_exact(&mut buf)?;
                *p = T::lit(f32::from_le_bytes(buf) as f64);
            }
        }
        Ok(model)
    }
}

fn weight_len(spec: &LayerSpec) -> usize {
    weight_dims(spec).iter().product()
}

fn weight_dims(spec: &LayerSpec) -> Vec<usize> {
    match *spec {
        LayerSpec::Dense { inputs, outputs, .. } => vec![outputs, inputs],
        LayerSpec::Attention { width, .. } => vec![width, width],
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub(crate) fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `W` is `outputs × inputs`.
fn dense_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], n: usize, inputs: usize, outputs: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * outputs];
    for s in 0..n {
        let xs = &x[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            out[s * outputs + o] = b[o] + dot_lanes(xs, &w[o * inputs..(o + 1) * inputs]);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn dense_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dz: &[T],
    gw: &mut [T],
    gb: &mut [T],
    n: usize,
    inputs: usize,
    outputs: usize,
    need_dx: bool,
) -> Vec<T> {
    let mut dx = if need_dx { vec![T::zero(); n * inputs] } else { Vec::new() };
    for s in 0..n {
        let xs = &x[s * inputs..(s + 1) * inputs];
        for o in 0..outputs {
            let g = dz[s * outputs + o];
            if g == T::zero() {
                continue;
            }
            gb[o] += g;
            axpy(g, xs, &mut gw[o * inputs..(o + 1) * inputs]);
            if need_dx {
                axpy(g, &w[o * inputs..(o + 1) * inputs], &mut dx[s * inputs..(s + 1) * inputs]);
            }
        }
    }
    dx
}

/// `C = A·B` for row-major `A: r×k`, `B: k×c`.
fn matmul<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for p in 0..k {
            axpy(a[i * k + p], &b[p * c..(p + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
    }
    out
}

/// `C = Aᵀ·B` for `A: k×r`, `B: k×c`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for p in 0..k {
        for i in 0..r {
            axpy(a[p * r + i], &b[p * c..(p + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
    }
    out
}

/// `C = A·Bᵀ` for `A: r×k`, `B: c×k`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = dot_lanes(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
    out
}

type AttentionOut<T> = (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>);

fn attention_forward<T: Scalar>(x: &[T], ws: &[&[T]], n: usize, tokens: usize, width: usize) -> AttentionOut<T> {
    let tw = tokens * width;
    let scale = T::lit(1.0 / (width as f64).sqrt());
    let (mut y, mut qs, mut ks, mut vs, mut as_) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in 0..n {
        let xs = &x[s * tw..(s + 1) * tw];
        let q = matmul(xs, ws[0], tokens, width, width);
        let k = matmul(xs, ws[1], tokens, width, width);
        let v = matmul(xs, ws[2], tokens, width, width);
        let mut a = matmul_nt(&q, &k, tokens, width, tokens);
        for row in a.chunks_exact_mut(tokens) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z * scale));
            let mut total = T::zero();
            for z in row.iter_mut() {
                *z = (*z * scale - mx).exp();
                total += *z;
            }
            row.iter_mut().for_each(|z| *z /= total);
        }
        let av = matmul(&a, &v, tokens, tokens, width);
        y.extend(xs.iter().zip(&av).map(|(&a, &b)| a + b));
        qs.extend(q);
        ks.extend(k);
        vs.extend(v);
        as_.extend(a);
    }
    (y, qs, ks, vs, as_)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    x: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    a: &[T],
    ws: &[&[T]],
    dy: &[T],
    n: usize,
    tokens: usize,
    width: usize,
) -> (Vec<T>, [Vec<T>; 3]) {
    let tw = tokens * width;
    let tt = tokens * tokens;
    let scale = T::lit(1.0 / (width as f64).sqrt());
    let mut dx = dy.to_vec();
    let mut dws = [vec![T::zero(); width * width], vec![T::zero(); width * width], vec![T::zero(); width * width]];
    for s in 0..n {
        let (xs, dys) = (&x[s * tw..(s + 1) * tw], &dy[s * tw..(s + 1) * tw]);
        let (qs, ks, vs) = (&q[s * tw..(s + 1) * tw], &k[s * tw..(s + 1) * tw], &v[s * tw..(s + 1) * tw]);
        let as_ = &a[s * tt..(s + 1) * tt];
        let dv = matmul_tn(as_, dys, tokens, tokens, width);
        let da = matmul_nt(dys, vs, tokens, width, tokens);
        let mut ds = vec![T::zero(); tt];
        for t in 0..tokens {
            let row = t * tokens..(t + 1) * tokens;
            let inner = dot_lanes(&as_[row.clone()], &da[row.clone()]);
            for u in row {
                ds[u] = as_[u] * (da[u] - inner) * scale;
            }
        }
        let dq = matmul(&ds, ks, tokens, tokens, width);
        let dk = matmul_tn(&ds, qs, tokens, tokens, width);
        for (dw, dp) in dws.iter_mut().zip([&dq, &dk, &dv]) {
            for (g, d) in dw.iter_mut().zip(matmul_tn(xs, dp, tokens, width, width)) {
                *g += d;
            }
        }
        let dxs = &mut dx[s * tw..(s + 1) * tw];
        for (w, dp) in ws.iter().zip([&dq, &dk, &dv]) {
            // dX += dP · Wᵀ
            for (g, d) in dxs.iter_mut().zip(matmul_nt(dp, w, tokens, width, width)) {
                *g += d;
            }
        }
    }
    (dx, dws)
}
