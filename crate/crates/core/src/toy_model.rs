//! A small fully convolutional predictor with hand-written backprop, Adam,
//! and a versioned checkpoint format.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{MultiGrid, ScalarGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Values in (0, 1).
    #[default]
    Sigmoid,
    /// Positive, unbounded: `softplus(z) + 1e-6`.
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    /// Channel widths from input to output; one 3x3 layer per consecutive pair.
    pub channels: Vec<usize>,
    pub leak: f64,
    #[serde(default)]
    pub output: OutputActivation,
}

impl ToyConfig {
    pub fn with_input(in_channels: usize) -> Self {
        Self { channels: vec![in_channels, 16, 16, 16, 1], leak: 0.01, output: OutputActivation::Sigmoid }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.iter().any(|&c| c == 0) {
            return invalid_arg("network needs at least one layer with positive widths");
        }
        if *self.channels.last().expect("len >= 2") != 1 {
            return invalid_arg("last layer must have one output channel");
        }
        if !(0.0..1.0).contains(&self.leak) {
            return invalid_arg("leak must be in [0, 1)");
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.channels.windows(2).map(|p| (p[0], p[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| o * i * 9 + o).sum()
    }
}

struct Cache {
    width: usize,
    height: usize,
    /// Layer inputs: `acts[0]` is the network input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations per layer.
    pre: Vec<Vec<f64>>,
}

pub struct ToyNet {
    config: ToyConfig,
    params: Vec<f64>,
    cache: Option<Cache>,
}

impl Clone for ToyNet {
    fn clone(&self) -> Self {
        Self { config: self.config.clone(), params: self.params.clone(), cache: None }
    }
}

impl std::fmt::Debug for ToyNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToyNet").field("config", &self.config).field("params", &self.params.len()).finish()
    }
}

impl PartialEq for ToyNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// `out[p] += weight * inp[p + (dy, dx)]` over pixels whose source is inside the image.
fn add_shifted(out: &mut [f64], inp: &[f64], w: usize, h: usize, dy: isize, dx: isize, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let (r0, r1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)) as usize);
    let (c0, c1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize);
    for r in r0..r1 {
        let src = ((r as isize + dy) as usize) * w;
        let o = &mut out[r * w + c0..r * w + c1];
        let i = &inp[(src as isize + c0 as isize + dx) as usize..(src as isize + c1 as isize + dx) as usize];
        for (a, b) in o.iter_mut().zip(i) {
            *a += weight * b;
        }
    }
}

/// `sum_p a[p] * b[p + (dy, dx)]` over the same support as [`add_shifted`].
fn dot_shifted(a: &[f64], b: &[f64], w: usize, h: usize, dy: isize, dx: isize) -> f64 {
    let (r0, r1) = ((-dy).max(0) as usize, (h as isize - dy.max(0)) as usize);
    let (c0, c1) = ((-dx).max(0) as usize, (w as isize - dx.max(0)) as usize);
    let mut sum = 0.0;
    for r in r0..r1 {
        let src = ((r as isize + dy) as usize) * w;
        let x = &a[r * w + c0..r * w + c1];
        let y = &b[(src as isize + c0 as isize + dx) as usize..(src as isize + c1 as isize + dx) as usize];
        sum += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    }
    sum
}

const TAPS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ToyNet {
    /// He-normal weights from `seed`, zero biases.
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(seed);
        let mut params = Vec::with_capacity(config.param_count());
        for (cin, cout) in config.layers() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            params.extend((0..cout * cin * 9).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, cout));
        }
        Ok(Self { config, params, cache: None })
    }

    pub fn zeros(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let n = config.param_count();
        Ok(Self { config, params: vec![0.0; n], cache: None })
    }

    pub fn from_params(config: ToyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_count() {
            return invalid_arg(format!("expected {} parameters, got {}", config.param_count(), params.len()));
        }
        if let Some(i) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", params[i])));
        }
        Ok(Self { config, params, cache: None })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    /// `(weights, biases)` of layer `l`; weights are `[cout][cin][3][3]`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let mut off = 0;
        for (i, (cin, cout)) in self.config.layers().enumerate() {
            let nw = cout * cin * 9;
            if i == l {
                return (&self.params[off..off + nw], &self.params[off + nw..off + nw + cout]);
            }
            off += nw + cout;
        }
        panic!("layer {l} out of range");
    }

    fn run(&self, input: &MultiGrid) -> Result<Cache> {
        if input.channels() != self.config.in_channels() {
            return invalid_arg(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels(),
                input.channels()
            ));
        }
        let (w, h) = (input.width(), input.height());
        let n = w * h;
        let layer_count = self.config.channels.len() - 1;
        let mut acts = vec![input.data().to_vec()];
        let mut pre = Vec::with_capacity(layer_count);
        for (l, (cin, cout)) in self.config.layers().enumerate() {
            let (weights, bias) = self.layer(l);
            let x = acts.last().expect("input");
            let mut z = vec![0.0; cout * n];
            z.par_chunks_mut(n).enumerate().for_each(|(co, out)| {
                out.fill(bias[co]);
                for ci in 0..cin {
                    let plane = &x[ci * n..(ci + 1) * n];
                    for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                        add_shifted(out, plane, w, h, dy, dx, weights[(co * cin + ci) * 9 + t]);
                    }
                }
            });
            let last = l + 1 == layer_count;
            let a: Vec<f64> = if last {
                match self.config.output {
                    OutputActivation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
                    OutputActivation::Softplus => z.iter().map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p() + 1e-6).collect(),
                }
            } else {
                let leak = self.config.leak;
                z.iter().map(|&v| if v > 0.0 { v } else { leak * v }).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        Ok(Cache { width: w, height: h, acts, pre })
    }

    pub fn forward(&self, input: &MultiGrid) -> Result<ScalarGrid> {
        let cache = self.run(input)?;
        ScalarGrid::new(cache.width, cache.height, cache.acts.last().expect("output").clone())
    }

    /// Forward pass that keeps the activations for [`ToyNet::backward`].
    pub fn forward_train(&mut self, input: &MultiGrid) -> Result<ScalarGrid> {
        let cache = self.run(input)?;
        let out = ScalarGrid::new(cache.width, cache.height, cache.acts.last().expect("output").clone())?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Parameter gradient of `sum(upstream * output)` at the last
    /// [`ToyNet::forward_train`] input, in the layout of [`ToyNet::params`].
    pub fn backward(&self, upstream: &ScalarGrid) -> Result<Vec<f64>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Precondition("backward called without a cached forward pass".into()))?;
        if upstream.width() != cache.width || upstream.height() != cache.height {
            return invalid_arg("upstream gradient does not match the cached output size");
        }
        let (w, h) = (cache.width, cache.height);
        let n = w * h;
        let layers: Vec<(usize, usize)> = self.config.layers().collect();
        let mut grads = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(layers.len());
        let mut off = 0;
        for &(cin, cout) in &layers {
            offsets.push(off);
            off += cout * cin * 9 + cout;
        }

        // d loss / d output activation -> d loss / d pre-activation of the last layer.
        let last = layers.len() - 1;
        let out = &cache.acts[last + 1];
        let mut gz: Vec<f64> = match self.config.output {
            OutputActivation::Sigmoid => upstream.data().iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            OutputActivation::Softplus => {
                upstream.data().iter().zip(&cache.pre[last]).map(|(g, &z)| g * sigmoid(z)).collect()
            }
        };

        for l in (0..layers.len()).rev() {
            let (cin, cout) = layers[l];
            let (weights, _) = self.layer(l);
            let x = &cache.acts[l];
            let base = offsets[l];
            let (gw, gb) = grads[base..base + cout * cin * 9 + cout].split_at_mut(cout * cin * 9);
            gw.par_chunks_mut(cin * 9).zip(gb.par_iter_mut()).enumerate().for_each(|(co, (gwc, gbc))| {
                let g = &gz[co * n..(co + 1) * n];
                *gbc = g.iter().sum();
                for ci in 0..cin {
                    let plane = &x[ci * n..(ci + 1) * n];
                    for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                        gwc[ci * 9 + t] = dot_shifted(g, plane, w, h, dy, dx);
                    }
                }
            });
            if l == 0 {
                break;
            }
            let mut gx = vec![0.0; cin * n];
            gx.par_chunks_mut(n).enumerate().for_each(|(ci, out)| {
                for co in 0..cout {
                    let g = &gz[co * n..(co + 1) * n];
                    for (t, &(dy, dx)) in TAPS.iter().enumerate() {
                        add_shifted(out, g, w, h, -dy, -dx, weights[(co * cin + ci) * 9 + t]);
                    }
                }
            });
            let leak = self.config.leak;
            for (g, &z) in gx.iter_mut().zip(&cache.pre[l - 1]) {
                if z <= 0.0 {
                    *g *= leak;
                }
            }
            gz = gx;
        }
        Ok(grads)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_count: usize) -> Result<Self> {
        let c = &config;
        if !(c.lr >= 0.0 && c.lr.is_finite()) || !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || !(c.eps > 0.0) {
            return invalid_arg(format!("invalid Adam settings {config:?}"));
        }
        Ok(Self { config, m: vec![0.0; param_count], v: vec![0.0; param_count], step: 0 })
    }

    /// Bias-corrected Adam update. Rejects the whole step, leaving state and
    /// parameters untouched, if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return invalid_arg(format!(
                "Adam state holds {} moments but got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient {i} is {} at step {}; update aborted",
                grads[i],
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"SIDEPTH\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ToyConfig,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Writes magic, version, a JSON header (config and `meta`), then one named
/// little-endian f64 blob per layer tensor.
pub fn write_checkpoint<W: Write>(mut out: W, net: &ToyNet, meta: &serde_json::Value) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader { config: net.config.clone(), meta: meta.clone() })
        .map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let layer_count = net.config.channels.len() - 1;
    out.write_all(&((2 * layer_count) as u32).to_le_bytes())?;
    for l in 0..layer_count {
        let (wts, bias) = net.layer(l);
        for (name, data) in [(format!("conv{l}.weight"), wts), (format!("conv{l}.bias"), bias)] {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(data.len() as u64).to_le_bytes())?;
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint written by [`write_checkpoint`]; returns the net and its metadata.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ToyNet, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u64(&mut r)?;
    if len > 1 << 24 {
        return Err(Error::Format("checkpoint header too large".into()));
    }
    let mut header = vec![0u8; len as usize];
    r.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    header.config.validate()?;
    let layer_count = header.config.channels.len() - 1;
    let blobs = read_u32(&mut r)? as usize;
    if blobs != 2 * layer_count {
        return Err(Error::Format(format!("expected {} tensors, found {blobs}", 2 * layer_count)));
    }
    let mut params = Vec::with_capacity(header.config.param_count());
    for (l, (cin, cout)) in header.config.layers().enumerate() {
        for (suffix, expect) in [("weight", cout * cin * 9), ("bias", cout)] {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 256 {
                return Err(Error::Format("tensor name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let want = format!("conv{l}.{suffix}");
            if name != want.as_bytes() {
                return Err(Error::Format(format!("expected tensor {want}, found {}", String::from_utf8_lossy(&name))));
            }
            let count = read_u64(&mut r)? as usize;
            if count != expect {
                return Err(Error::Format(format!("tensor {want} has {count} values, expected {expect}")));
            }
            for _ in 0..count {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                params.push(f64::from_le_bytes(b));
            }
        }
    }
    Ok((ToyNet::from_params(header.config, params)?, header.meta))
}
