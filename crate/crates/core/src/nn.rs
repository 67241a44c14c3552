//! Minimal fully-connected network with hand-written backpropagation, plus Adam.
//!
//! Parameters live in one flat vector so optimizers and gradient checks can treat
//! the model as a point in `R^n`. Layout per layer: weights (`out x in`, row-major),
//! then biases.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{self, g9};
use crate::rng::SeededStream;
use crate::spectral::NormMode;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    slope: f64,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    // inputs to each layer; inputs[0] is the network input
    inputs: Vec<Vec<f64>>,
    // pre-activations of each layer
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(sizes: &[usize], slope: f64, seed: u64) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0));
        let mut rng = SeededStream::new(seed);
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self {
            sizes: sizes.to_vec(),
            slope,
            params,
        }
    }

    pub fn zeros(sizes: &[usize], slope: f64) -> Self {
        Self {
            sizes: sizes.to_vec(),
            slope,
            params: vec![0.0; param_count(sizes)],
        }
    }

    pub fn from_params(sizes: &[usize], slope: f64, params: Vec<f64>) -> Option<Self> {
        (params.len() == param_count(sizes)).then(|| Self {
            sizes: sizes.to_vec(),
            slope,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_count(&self) -> usize {
        self.sizes.len() - 1
    }

    #[inline]
    fn act(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.slope * z
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).pre.pop().unwrap()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        assert_eq!(x.len(), self.sizes[0], "input length");
        let last = self.layer_count() - 1;
        let mut inputs = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layer_count());
        let mut off = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[off..off + n_in * n_out];
            let bias = &self.params[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let input = inputs.last().unwrap();
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    bias[o]
                        + weights[o * n_in..(o + 1) * n_in]
                            .iter()
                            .zip(input)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                })
                .collect();
            if l < last {
                inputs.push(z.iter().map(|&v| self.act(v)).collect());
            }
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// Adds `d(loss)/d(params)` into `grad` given `d(loss)/d(output)`.
    /// Returns `d(loss)/d(input)`.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len());
        let layers = self.layer_count();
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = d_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            if l < layers - 1 {
                for (d, &z) in delta.iter_mut().zip(&trace.pre[l]) {
                    if z <= 0.0 {
                        *d *= self.slope;
                    }
                }
            }
            let off = offsets[l];
            let input = &trace.inputs[l];
            let (gw, gb) = grad[off..off + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, &a) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            let weights = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(&weights[o * n_in..(o + 1) * n_in]) {
                    *p += d * w;
                }
            }
            delta = prev;
        }
        delta
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Central difference of `f` along coordinate `idx`.
pub fn central_difference(params: &mut [f64], idx: usize, delta: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = params[idx];
    params[idx] = orig + delta;
    let plus = f(params);
    params[idx] = orig - delta;
    let minus = f(params);
    params[idx] = orig;
    (plus - minus) / (2.0 * delta)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Model checkpoint: a text header followed by the weights as one FQA1 block
/// (`width = parameter count`, `height = 1`).
///
/// ```text
/// FQCK version=1
/// tag=<model kind>
/// layers=<n0>,<n1>,...
/// activation=leaky_relu slope=<s>
/// normalization=<mode>        (optional)
/// end
/// <FQA1 block>
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tag: String,
    pub sizes: Vec<usize>,
    pub slope: f64,
    pub normalization: Option<NormMode>,
    pub params: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "FQCK version={CHECKPOINT_VERSION}\ntag={}\nlayers={}\nactivation=leaky_relu slope={}\n",
            self.tag,
            self.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            g9(self.slope)
        )
        .into_bytes();
        if let Some(n) = self.normalization {
            out.extend_from_slice(format!("normalization={n}\n").as_bytes());
        }
        out.extend_from_slice(b"end\n");
        format::write_raw(&mut out, self.params.len(), 1, &self.params).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        let first = lines.first().ok_or_else(|| bad("empty header"))?;
        let version = first
            .strip_prefix("FQCK version=")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("missing FQCK magic"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (mut tag, mut sizes, mut slope, mut normalization) = (None, None, None, None);
        for line in &lines[1..] {
            if let Some(v) = line.strip_prefix("tag=") {
                tag = Some(v.to_string());
            } else if let Some(v) = line.strip_prefix("layers=") {
                sizes = Some(
                    v.split(',')
                        .map(|s| s.parse::<usize>().map_err(|_| bad("bad layer size")))
                        .collect::<Result<Vec<_>>>()?,
                );
            } else if let Some(v) = line.strip_prefix("activation=leaky_relu slope=") {
                slope = Some(v.parse::<f64>().map_err(|_| bad("bad slope"))?);
            } else if let Some(v) = line.strip_prefix("normalization=") {
                normalization = Some(v.parse::<NormMode>()?);
            } else {
                return Err(bad(&format!("unknown header line {line:?}")));
            }
        }
        let (w, h, params) = format::read_raw(&mut &bytes[pos..])?;
        let sizes = sizes.ok_or_else(|| bad("missing layers"))?;
        if h != 1 || w != params.len() || w != param_count(&sizes) {
            return Err(bad("parameter block does not match layer sizes"));
        }
        Ok(Self {
            tag: tag.ok_or_else(|| bad("missing tag"))?,
            sizes,
            slope: slope.ok_or_else(|| bad("missing activation"))?,
            normalization,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
