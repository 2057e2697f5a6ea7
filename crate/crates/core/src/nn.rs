//! Dense ReLU networks with analytic backprop, Adam, sinusoidal timestep
//! embeddings and the `VGP1` checkpoint format.
//!
//! Everything is generic over [`Scalar`] so that gradient checks can run the
//! same code in `f64`. Training uses `f32`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Mul, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::RngStream;

pub trait Scalar:
    Copy
    + Send
    + Sync
    + Debug
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

/// Layer widths `[input, hidden.., output]`; ReLU on hidden layers, identity
/// on the output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::invalid("an MLP needs at least one hidden layer"));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("layer widths must be >= 1"));
        }
        Ok(MlpSpec { widths })
    }

    pub fn with_hidden(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut w = vec![input];
        w.extend_from_slice(hidden);
        w.push(output);
        Self::new(w)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> Vec<LayerLayout> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    n_in: w[0],
                    n_out: w[1],
                    weight_offset: off,
                    bias_offset: off + w[0] * w[1],
                };
                off += (w[0] + 1) * w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector. Each layer is a row-major `[n_out][n_in]` weight
/// block followed by `n_out` biases.
#[derive(Debug, Clone)]
pub struct MlpParams<T: Scalar = f32> {
    spec: MlpSpec,
    layers: Vec<LayerLayout>,
    data: Vec<T>,
    version: u64,
}

impl<T: Scalar> PartialEq for MlpParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.data == other.data
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self::from_vec(spec, vec![T::ZERO; spec.param_count()]).expect("sized by spec")
    }

    pub fn from_vec(spec: &MlpSpec, data: Vec<T>) -> Result<Self> {
        if data.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                data.len()
            )));
        }
        Ok(MlpParams { spec: spec.clone(), layers: spec.layers(), data, version: fresh_version() })
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and biases.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(spec);
        for l in spec.layers() {
            let bound = 1.0 / (l.n_in as f64).sqrt();
            for v in &mut p.data[l.weight_offset..l.bias_offset + l.n_out] {
                *v = T::from_f64(rng.uniform_range(-bound, bound));
            }
        }
        p
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.version = fresh_version();
        &mut self.data
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let l = self.layers[layer];
        &self.data[l.weight_offset..l.bias_offset]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        let l = self.layers[layer];
        &self.data[l.bias_offset..l.bias_offset + l.n_out]
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            version: fresh_version(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.finite())
    }
}

impl MlpParams<f32> {
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in self.spec.widths() {
            h.update((*w as u32).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Pre-activations and layer inputs for a batch, tied to one parameter
/// version.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    rows: usize,
    version: u64,
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each layer.
    preacts: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn preactivations(&self, layer: usize) -> &[T] {
        &self.preacts[layer]
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::ZERO; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::ZERO;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn check_input<T: Scalar>(spec: &MlpSpec, params: &MlpParams<T>, input: &[T]) -> Result<usize> {
    if params.spec != *spec {
        return Err(Error::invalid("parameters do not match network spec"));
    }
    let w = spec.input_width();
    if input.is_empty() || !input.len().is_multiple_of(w) {
        return Err(Error::invalid(format!(
            "input length {} is not a positive multiple of width {w}",
            input.len()
        )));
    }
    Ok(input.len() / w)
}

/// Batched forward pass over row-major `input` (`rows x input_width`).
pub fn forward<T: Scalar>(
    spec: &MlpSpec,
    params: &MlpParams<T>,
    input: &[T],
) -> Result<(Vec<T>, ForwardCache<T>)> {
    let rows = check_input(spec, params, input)?;
    let n_layers = params.layers.len();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut preacts = Vec::with_capacity(n_layers);
    let mut x = input.to_vec();
    for (li, l) in params.layers.iter().enumerate() {
        let w = &params.data[l.weight_offset..l.bias_offset];
        let b = &params.data[l.bias_offset..l.bias_offset + l.n_out];
        let mut z = vec![T::ZERO; rows * l.n_out];
        for r in 0..rows {
            let xr = &x[r * l.n_in..(r + 1) * l.n_in];
            let zr = &mut z[r * l.n_out..(r + 1) * l.n_out];
            for o in 0..l.n_out {
                zr[o] = b[o] + dot(&w[o * l.n_in..(o + 1) * l.n_in], xr);
            }
        }
        let next = if li + 1 < n_layers {
            z.iter().map(|v| if *v > T::ZERO { *v } else { T::ZERO }).collect()
        } else {
            z.clone()
        };
        inputs.push(std::mem::replace(&mut x, next));
        preacts.push(z);
    }
    let cache = ForwardCache { rows, version: params.version, inputs, preacts };
    Ok((x, cache))
}

/// Gradient of `sum(output * grad_output)` with respect to the parameters.
pub fn backward<T: Scalar>(
    spec: &MlpSpec,
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    grad_output: &[T],
) -> Result<Vec<T>> {
    let (grads, _) = backward_full(spec, params, cache, grad_output, false)?;
    Ok(grads)
}

/// Like [`backward`], also returning the gradient with respect to the input.
pub fn backward_with_input<T: Scalar>(
    spec: &MlpSpec,
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    grad_output: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let (grads, gx) = backward_full(spec, params, cache, grad_output, true)?;
    Ok((grads, gx.expect("requested")))
}

fn backward_full<T: Scalar>(
    spec: &MlpSpec,
    params: &MlpParams<T>,
    cache: &ForwardCache<T>,
    grad_output: &[T],
    want_input_grad: bool,
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    if params.spec != *spec {
        return Err(Error::invalid("parameters do not match network spec"));
    }
    if cache.version != params.version {
        return Err(Error::illegal("forward cache is stale for these parameters"));
    }
    let rows = cache.rows;
    if grad_output.len() != rows * spec.output_width() {
        return Err(Error::invalid("grad_output shape mismatch"));
    }
    let mut grads = vec![T::ZERO; params.data.len()];
    let mut delta = grad_output.to_vec();
    let mut input_grad = None;
    for li in (0..params.layers.len()).rev() {
        let l = params.layers[li];
        let x = &cache.inputs[li];
        let w = &params.data[l.weight_offset..l.bias_offset];
        {
            let (gw, gb) = grads[l.weight_offset..l.bias_offset + l.n_out].split_at_mut(l.n_in * l.n_out);
            for r in 0..rows {
                let xr = &x[r * l.n_in..(r + 1) * l.n_in];
                let dr = &delta[r * l.n_out..(r + 1) * l.n_out];
                for o in 0..l.n_out {
                    let d = dr[o];
                    if d != T::ZERO {
                        axpy(&mut gw[o * l.n_in..(o + 1) * l.n_in], d, xr);
                        gb[o] += d;
                    }
                }
            }
        }
        if li == 0 && !want_input_grad {
            break;
        }
        let mut gx = vec![T::ZERO; rows * l.n_in];
        for r in 0..rows {
            let dr = &delta[r * l.n_out..(r + 1) * l.n_out];
            let gr = &mut gx[r * l.n_in..(r + 1) * l.n_in];
            for o in 0..l.n_out {
                let d = dr[o];
                if d != T::ZERO {
                    axpy(gr, d, &w[o * l.n_in..(o + 1) * l.n_in]);
                }
            }
        }
        if li == 0 {
            input_grad = Some(gx);
            break;
        }
        // ReLU derivative of the layer below.
        let z = &cache.preacts[li - 1];
        for (g, zv) in gx.iter_mut().zip(z) {
            if !(*zv > T::ZERO) {
                *g = T::ZERO;
            }
        }
        delta = gx;
    }
    Ok((grads, input_grad))
}

/// Rows per gradient shard. Fixed so results do not depend on thread count.
pub const GRAD_SHARD_ROWS: usize = 8;

/// Forward, loss and backward over `input` in fixed shards, reduced in shard
/// order.
///
/// `loss` receives the first row index of the shard, the shard's outputs and a
/// zeroed gradient buffer to fill; it returns the shard's summed loss.
pub fn loss_and_grad<F>(
    spec: &MlpSpec,
    params: &MlpParams<f32>,
    input: &[f32],
    exec: Exec,
    loss: F,
) -> Result<(f64, Vec<f32>)>
where
    F: Fn(usize, &[f32], &mut [f32]) -> f64 + Sync + Send,
{
    let rows = check_input(spec, params, input)?;
    let w_in = spec.input_width();
    let w_out = spec.output_width();
    let n_shards = rows.div_ceil(GRAD_SHARD_ROWS);
    let shards = exec.map_range(n_shards, |s| -> Result<(f64, Vec<f32>)> {
        let r0 = s * GRAD_SHARD_ROWS;
        let r1 = (r0 + GRAD_SHARD_ROWS).min(rows);
        let (out, cache) = forward(spec, params, &input[r0 * w_in..r1 * w_in])?;
        let mut g = vec![0.0f32; out.len()];
        let l = loss(r0, &out, &mut g);
        debug_assert_eq!(g.len(), (r1 - r0) * w_out);
        let grads = backward(spec, params, &cache, &g)?;
        Ok((l, grads))
    });
    let mut total = 0.0;
    let mut grads = vec![0.0f32; params.len()];
    for shard in shards {
        let (l, g) = shard?;
        total += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((total, grads))
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
    skipped: u64,
}

impl Adam {
    pub const DEFAULT_LR: f32 = 1e-4;

    pub fn new(n_params: usize, lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            skipped: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Updates rejected because of non-finite gradients or results.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn first_moment(&self) -> &[f32] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f32] {
        &self.v
    }

    /// One update. Non-finite gradients leave params and state untouched and
    /// return `NumericFault`.
    pub fn step(&mut self, params: &mut MlpParams<f32>, grads: &[f32]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("gradient/optimizer shape mismatch"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Err(Error::NumericFault("non-finite gradient; update skipped".into()));
        }
        let t = self.step + 1;
        let bc1 = 1.0 - f64::from(self.beta1).powi(t as i32);
        let bc2 = 1.0 - f64::from(self.beta2).powi(t as i32);
        let step_size = (f64::from(self.lr) / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut next = params.as_slice().to_vec();
        for i in 0..next.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            next[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + self.eps);
        }
        if next.iter().any(|p| !p.is_finite()) {
            self.skipped += 1;
            return Err(Error::NumericFault("update produced non-finite parameters".into()));
        }
        params.as_mut_slice().copy_from_slice(&next);
        self.m = m;
        self.v = v;
        self.step = t;
        Ok(())
    }
}

/// Sinusoidal embedding `[sin(t*f_k).., cos(t*f_k)..]` with `dim/2`
/// frequencies spaced geometrically from 1 down to 1e-4.
pub fn timestep_embedding(t: usize, total: usize, dim: usize) -> Vec<f32> {
    assert!(t < total, "timestep {t} out of range 0..{total}");
    assert!(dim >= 2 && dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for k in 0..half {
        let expo = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let arg = t as f64 / 10_000f64.powf(expo);
        out[k] = arg.sin() as f32;
        out[half + k] = arg.cos() as f32;
    }
    out
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VGP1";

/// ```text
/// "VGP1" u32:n_widths u32[n_widths] u32:header_len header u32:n_params
/// f32[n_params] u32:crc32(all preceding bytes)
/// ```
pub fn encode_checkpoint(params: &MlpParams<f32>, header: &str) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + header.len() + params.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let widths = params.spec().widths();
    buf.extend_from_slice(&(widths.len() as u32).to_le_bytes());
    for w in widths {
        buf.extend_from_slice(&(*w as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for v in params.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Returns the parameters and the free-form header. Nothing is returned unless
/// the CRC and every length check pass.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(MlpParams<f32>, String)> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(corrupt("CRC mismatch"));
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut pos = 4;
    let next_u32 = |pos: &mut usize| -> Result<usize> {
        let b = body.get(*pos..*pos + 4).ok_or_else(|| corrupt("truncated header"))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    };
    let n_widths = next_u32(&mut pos)?;
    if n_widths > 64 {
        return Err(corrupt("implausible layer count"));
    }
    let widths = (0..n_widths).map(|_| next_u32(&mut pos)).collect::<Result<Vec<_>>>()?;
    let spec = MlpSpec::new(widths).map_err(|e| corrupt(&e.to_string()))?;
    let hlen = next_u32(&mut pos)?;
    let header = body.get(pos..pos + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header = String::from_utf8(header.to_vec()).map_err(|_| corrupt("header not utf-8"))?;
    pos += hlen;
    let n = next_u32(&mut pos)?;
    if n != spec.param_count() || body.len() != pos + 4 * n {
        return Err(corrupt("parameter payload size mismatch"));
    }
    let data = body[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = MlpParams::from_vec(&spec, data)?;
    Ok((params, header))
}
