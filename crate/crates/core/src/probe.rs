//! Linear and MLP probes over per-token hidden states.
//!
//! A probe maps each token's layer-`l` hidden vector to one logit. The MLP
//! variant narrows `hidden_dim -> hidden_dim/4 -> hidden_dim/16 -> 1` with
//! layer normalization (per token vector, not per batch) before each
//! activation; the linear variant is a single affine map. Parameters live in
//! f64 and gradients are exact analytic derivatives of the implemented
//! forward pass, which is what lets finite-difference checks hold to 1e-4
//! and better.
//!
//! GELU uses the tanh form `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
//! so the backward pass can differentiate the exact function being computed.
//!
//! Checkpoints are a single file: magic, JSON header (arch, seed, layer,
//! fingerprint), then the flattened parameters as little-endian f32. Loading
//! then saving reproduces the file byte for byte.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::sigmoid_clamped;
use crate::rng::stream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";

/// Variance floor inside the layer-norm standard deviation.
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

/// Probe architecture: `layer_dims` runs input width to output width and must
/// be strictly decreasing with a final width of 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeArch {
    pub kind: ProbeKind,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub use_layer_norm: bool,
}

impl ProbeArch {
    /// Single affine map `[d, 1]`.
    pub fn linear(hidden_dim: usize) -> Self {
        ProbeArch {
            kind: ProbeKind::Linear,
            layer_dims: vec![hidden_dim, 1],
            activation: Activation::Gelu,
            use_layer_norm: false,
        }
    }

    /// Default MLP: widths d/4 and d/16 (kept only while > 1), GELU, layer
    /// norm. Needs `hidden_dim >= 3` so at least one hidden layer fits.
    pub fn mlp_default(hidden_dim: usize) -> Result<Self> {
        if hidden_dim < 3 {
            return Err(Error::Config(format!(
                "default MLP needs hidden_dim >= 3, got {hidden_dim}"
            )));
        }
        let mut dims = vec![hidden_dim];
        let h1 = (hidden_dim / 4).max(2).min(hidden_dim - 1);
        dims.push(h1);
        let h2 = hidden_dim / 16;
        if h2 > 1 && h2 < h1 {
            dims.push(h2);
        }
        dims.push(1);
        Ok(ProbeArch {
            kind: ProbeKind::Mlp,
            layer_dims: dims,
            activation: Activation::Gelu,
            use_layer_norm: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    /// Number of affine maps.
    pub fn num_affine(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Number of hidden (normalized/activated) layers.
    pub fn num_hidden(&self) -> usize {
        self.layer_dims.len().saturating_sub(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Config("layer_dims needs at least input and output".into()));
        }
        if *self.layer_dims.last().unwrap() != 1 {
            return Err(Error::Config(format!(
                "output width must be 1, got {}",
                self.layer_dims.last().unwrap()
            )));
        }
        if self.layer_dims[0] == 0 {
            return Err(Error::Config("input width must be >= 1".into()));
        }
        for w in self.layer_dims.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::Config(format!(
                    "layer_dims must be strictly decreasing, got {:?}",
                    self.layer_dims
                )));
            }
        }
        match self.kind {
            ProbeKind::Linear if self.layer_dims.len() != 2 => Err(Error::Config(format!(
                "linear probe must have exactly [d, 1] dims, got {:?}",
                self.layer_dims
            ))),
            ProbeKind::Mlp if self.layer_dims.len() < 3 => Err(Error::Config(format!(
                "mlp probe needs at least one hidden layer, got {:?}",
                self.layer_dims
            ))),
            _ => Ok(()),
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let mut count = 0;
        for j in 0..self.num_affine() {
            count += self.layer_dims[j] * self.layer_dims[j + 1] + self.layer_dims[j + 1];
        }
        if self.use_layer_norm {
            for j in 0..self.num_hidden() {
                count += 2 * self.layer_dims[j + 1];
            }
        }
        count
    }
}

/// One affine map, `weight` row-major `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Learned layer-norm affine (scale starts at 1, shift at 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormLayer {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub arch: ProbeArch,
    pub layers: Vec<DenseLayer>,
    /// One entry per hidden layer; `None` when `use_layer_norm` is off.
    pub norms: Vec<Option<NormLayer>>,
}

/// Gradients in the same shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrads {
    pub layers: Vec<DenseLayer>,
    pub norms: Vec<Option<NormLayer>>,
}

/// Seeded initialization: weights drawn N(0, 1/fan_in), biases zero, norm
/// scales one, shifts zero.
pub fn init_probe(arch: &ProbeArch, seed: u64) -> Result<ProbeParams> {
    arch.validate()?;
    let mut rng = stream(seed, "probe/init");
    let normal = Normal::new(0.0, 1.0).expect("std > 0");

    let mut layers = Vec::new();
    for j in 0..arch.num_affine() {
        let (fan_in, fan_out) = (arch.layer_dims[j], arch.layer_dims[j + 1]);
        let std = (1.0 / fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| std * normal.sample(&mut rng)).collect();
        layers.push(DenseLayer { weight, bias: vec![0.0; fan_out] });
    }

    let norms = (0..arch.num_hidden())
        .map(|j| {
            arch.use_layer_norm.then(|| NormLayer {
                scale: vec![1.0; arch.layer_dims[j + 1]],
                shift: vec![0.0; arch.layer_dims[j + 1]],
            })
        })
        .collect();

    Ok(ProbeParams { arch: arch.clone(), layers, norms })
}

impl ProbeParams {
    /// Zero-valued gradients matching this parameter set.
    pub fn zero_grads(&self) -> ProbeGrads {
        ProbeGrads {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            norms: self
                .norms
                .iter()
                .map(|n| {
                    n.as_ref().map(|n| NormLayer {
                        scale: vec![0.0; n.scale.len()],
                        shift: vec![0.0; n.shift.len()],
                    })
                })
                .collect(),
        }
    }

    /// Flatten into one vector: per affine layer weight then bias, then its
    /// norm scale and shift when present. The checkpoint blob and the
    /// optimizer state both use this order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        for (j, layer) in self.layers.iter().enumerate() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
            if let Some(Some(norm)) = self.norms.get(j) {
                out.extend_from_slice(&norm.scale);
                out.extend_from_slice(&norm.shift);
            }
        }
        out
    }

    /// Inverse of [`ProbeParams::flatten`].
    pub fn from_flat(arch: &ProbeArch, flat: &[f64]) -> Result<ProbeParams> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(Error::ShapeMismatch {
                context: "flattened probe parameters".into(),
                expected: arch.param_count(),
                got: flat.len(),
            });
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let slice = flat[pos..pos + n].to_vec();
            pos += n;
            slice
        };
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for j in 0..arch.num_affine() {
            let (fan_in, fan_out) = (arch.layer_dims[j], arch.layer_dims[j + 1]);
            layers.push(DenseLayer { weight: take(fan_in * fan_out), bias: take(fan_out) });
            if j < arch.num_hidden() {
                norms.push(arch.use_layer_norm.then(|| NormLayer {
                    scale: take(fan_out),
                    shift: take(fan_out),
                }));
            }
        }
        Ok(ProbeParams { arch: arch.clone(), layers, norms })
    }
}

impl ProbeGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (j, layer) in self.layers.iter().enumerate() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
            if let Some(Some(norm)) = self.norms.get(j) {
                out.extend_from_slice(&norm.scale);
                out.extend_from_slice(&norm.shift);
            }
        }
        out
    }
}

fn activation(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => {
            let u = (2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            0.5 * x * (1.0 + u.tanh())
        }
    }
}

fn activation_grad(act: Activation, x: f64) -> f64 {
    match act {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            let u = c * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let sech2 = 1.0 - t * t;
            0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
        }
    }
}

/// Cached intermediates for one token, enough to run the exact backward pass.
#[derive(Debug, Clone)]
struct TokenTrace {
    /// Input to each affine map (length `num_affine`).
    inputs: Vec<Vec<f64>>,
    /// Per hidden layer: pre-norm activations.
    prenorm: Vec<Vec<f64>>,
    /// Per hidden layer: normalized values (before scale/shift); empty when
    /// layer norm is off.
    normed: Vec<Vec<f64>>,
    /// Per hidden layer: the layer-norm standard deviation.
    sigma: Vec<f64>,
    /// Per hidden layer: input to the activation.
    preact: Vec<Vec<f64>>,
}

/// Forward pass plus the caches needed by [`backward`].
pub struct ForwardPass {
    pub logits: Vec<f64>,
    traces: Vec<TokenTrace>,
}

fn affine(layer: &DenseLayer, x: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len();
    let mut out = layer.bias.clone();
    debug_assert_eq!(out.len(), out_dim);
    for r in 0..out_dim {
        let row = &layer.weight[r * in_dim..(r + 1) * in_dim];
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        out[r] += acc;
    }
    out
}

fn forward_token(params: &ProbeParams, x0: &[f64]) -> (f64, TokenTrace) {
    let arch = &params.arch;
    let m = arch.num_affine();
    let mut trace = TokenTrace {
        inputs: Vec::with_capacity(m),
        prenorm: Vec::with_capacity(arch.num_hidden()),
        normed: Vec::with_capacity(arch.num_hidden()),
        sigma: Vec::with_capacity(arch.num_hidden()),
        preact: Vec::with_capacity(arch.num_hidden()),
    };

    let mut x = x0.to_vec();
    for j in 0..m {
        trace.inputs.push(x.clone());
        let mut a = affine(&params.layers[j], &x, arch.layer_dims[j + 1]);
        if j == m - 1 {
            return (a[0], trace);
        }

        trace.prenorm.push(a.clone());
        if let Some(norm) = &params.norms[j] {
            let d = a.len() as f64;
            let mean = a.iter().sum::<f64>() / d;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let sigma = (var + NORM_EPS).sqrt();
            let normed: Vec<f64> = a.iter().map(|v| (v - mean) / sigma).collect();
            trace.sigma.push(sigma);
            trace.normed.push(normed.clone());
            for (i, v) in a.iter_mut().enumerate() {
                *v = norm.scale[i] * normed[i] + norm.shift[i];
            }
        } else {
            trace.sigma.push(0.0);
            trace.normed.push(Vec::new());
        }

        trace.preact.push(a.clone());
        x = a.iter().map(|&v| activation(arch.activation, v)).collect();
    }
    unreachable!("num_affine >= 1");
}

/// Per-token logits for a row-major `[num_tokens, hidden_dim]` f32 matrix.
pub fn forward(params: &ProbeParams, states: &[f32], num_tokens: usize) -> Result<ForwardPass> {
    let d = params.arch.input_dim();
    if states.len() != num_tokens * d {
        return Err(Error::ShapeMismatch {
            context: "probe forward states".into(),
            expected: num_tokens * d,
            got: states.len(),
        });
    }
    let mut logits = Vec::with_capacity(num_tokens);
    let mut traces = Vec::with_capacity(num_tokens);
    let mut x = vec![0.0f64; d];
    for t in 0..num_tokens {
        for (dst, src) in x.iter_mut().zip(&states[t * d..(t + 1) * d]) {
            *dst = f64::from(*src);
        }
        let (z, trace) = forward_token(params, &x);
        logits.push(z);
        traces.push(trace);
    }
    Ok(ForwardPass { logits, traces })
}

/// Logits only.
pub fn forward_logits(params: &ProbeParams, states: &[f32], num_tokens: usize) -> Result<Vec<f64>> {
    forward(params, states, num_tokens).map(|fp| fp.logits)
}

/// Hallucination probabilities: sigmoid of the clamped logits.
pub fn predict_proba(params: &ProbeParams, states: &[f32], num_tokens: usize) -> Result<Vec<f64>> {
    Ok(forward_logits(params, states, num_tokens)?
        .into_iter()
        .map(sigmoid_clamped)
        .collect())
}

/// Exact parameter gradients given `d(loss)/d(logit)` per token. Tokens with
/// zero upstream gradient contribute nothing.
pub fn backward(params: &ProbeParams, pass: &ForwardPass, upstream: &[f64]) -> Result<ProbeGrads> {
    if upstream.len() != pass.logits.len() {
        return Err(Error::ShapeMismatch {
            context: "probe backward upstream".into(),
            expected: pass.logits.len(),
            got: upstream.len(),
        });
    }
    let arch = &params.arch;
    let m = arch.num_affine();
    let mut grads = params.zero_grads();

    for (trace, &dz) in pass.traces.iter().zip(upstream) {
        if dz == 0.0 {
            continue;
        }

        // Output affine.
        let x_last = &trace.inputs[m - 1];
        let gl = &mut grads.layers[m - 1];
        for (gw, xv) in gl.weight.iter_mut().zip(x_last) {
            *gw += dz * xv;
        }
        gl.bias[0] += dz;
        let mut dx: Vec<f64> = params.layers[m - 1].weight.iter().map(|w| w * dz).collect();

        // Hidden layers in reverse.
        for j in (0..m - 1).rev() {
            let width = arch.layer_dims[j + 1];
            // Through the activation.
            let mut da: Vec<f64> = (0..width)
                .map(|i| dx[i] * activation_grad(arch.activation, trace.preact[j][i]))
                .collect();

            // Through layer norm.
            if let Some(norm) = &params.norms[j] {
                let gn = grads.norms[j].as_mut().expect("norm grads allocated");
                let normed = &trace.normed[j];
                for i in 0..width {
                    gn.scale[i] += da[i] * normed[i];
                    gn.shift[i] += da[i];
                }
                let dn: Vec<f64> = (0..width).map(|i| da[i] * norm.scale[i]).collect();
                let d = width as f64;
                let mean_dn = dn.iter().sum::<f64>() / d;
                let mean_dn_n = dn.iter().zip(normed).map(|(g, n)| g * n).sum::<f64>() / d;
                let sigma = trace.sigma[j];
                for i in 0..width {
                    da[i] = (dn[i] - mean_dn - normed[i] * mean_dn_n) / sigma;
                }
            }

            // Through the affine.
            let x_in = &trace.inputs[j];
            let in_dim = x_in.len();
            let gl = &mut grads.layers[j];
            for r in 0..width {
                let g = da[r];
                if g != 0.0 {
                    let row = &mut gl.weight[r * in_dim..(r + 1) * in_dim];
                    for (gw, xv) in row.iter_mut().zip(x_in) {
                        *gw += g * xv;
                    }
                }
                gl.bias[r] += g;
            }
            let w = &params.layers[j].weight;
            let mut dx_next = vec![0.0f64; in_dim];
            for r in 0..width {
                let g = da[r];
                if g != 0.0 {
                    let row = &w[r * in_dim..(r + 1) * in_dim];
                    for (acc, wv) in dx_next.iter_mut().zip(row) {
                        *acc += g * wv;
                    }
                }
            }
            dx = dx_next;
        }
    }
    Ok(grads)
}

/// Probed layer by the 95% depth rule: `floor(0.95 L)`, at least 1.
pub fn default_probe_layer(num_layers: usize) -> usize {
    ((0.95 * num_layers as f64).floor() as usize).max(1)
}

/// Header stored alongside checkpoint parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// Layer the probe was trained on.
    pub layer: usize,
    /// Dataset/training provenance string.
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ProbeArch,
    seed: u64,
    layer: usize,
    fingerprint: String,
    param_count: usize,
}

/// Write `magic + header_len + header JSON + f32 parameter blob`. Parameters
/// are narrowed to f32; loading widens them back, so save -> load -> save is
/// byte-identical.
pub fn save_checkpoint(params: &ProbeParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let flat = params.flatten();
    let header = CheckpointHeader {
        arch: params.arch.clone(),
        seed: meta.seed,
        layer: meta.layer,
        fingerprint: meta.fingerprint.clone(),
        param_count: flat.len(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(8 + header_json.len() + 4 * flat.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &flat {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ProbeParams, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(bytes.get(0..4).unwrap_or(b"")).into_owned(),
        });
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body = bytes.get(8..8 + header_len).ok_or_else(|| Error::ShapeMismatch {
        context: "checkpoint header".into(),
        expected: 8 + header_len,
        got: bytes.len(),
    })?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;

    let blob = &bytes[8 + header_len..];
    if blob.len() != header.param_count * 4 {
        return Err(Error::ShapeMismatch {
            context: "checkpoint parameter blob bytes".into(),
            expected: header.param_count * 4,
            got: blob.len(),
        });
    }
    let flat: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let params = ProbeParams::from_flat(&header.arch, &flat)?;
    Ok((
        params,
        CheckpointMeta {
            seed: header.seed,
            layer: header.layer,
            fingerprint: header.fingerprint,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use tempfile::TempDir;

    fn to_f32(values: &[f64]) -> Vec<f32> {
        values.iter().map(|&v| v as f32).collect()
    }

    #[test]
    fn relu_mlp_matches_hand_computed_chain() {
        // [2, 2, 1], relu, no layer norm; weights chosen so one token lands
        // entirely in the dead zone and the other does not.
        let arch = ProbeArch {
            kind: ProbeKind::Mlp,
            layer_dims: vec![2, 2, 1],
            activation: Activation::Relu,
            use_layer_norm: false,
        };
        let params = ProbeParams {
            arch,
            layers: vec![
                DenseLayer { weight: vec![1.0, 2.0, -1.0, 0.5], bias: vec![0.5, -1.0] },
                DenseLayer { weight: vec![2.0, -3.0], bias: vec![0.25] },
            ],
            norms: vec![None],
        };
        // Token [1, -2]: a = [-2.5, -3] -> relu [0, 0] -> z = 0.25.
        // Token [2, 1]:  a = [4.5, -2.5] -> relu [4.5, 0] -> z = 9.25.
        let states = to_f32(&[1.0, -2.0, 2.0, 1.0]);
        let z = forward_logits(&params, &states, 2).unwrap();
        assert!((z[0] - 0.25).abs() < 1e-12);
        assert!((z[1] - 9.25).abs() < 1e-12);
    }

    #[test]
    fn linear_probe_is_a_dot_product() {
        let params = ProbeParams {
            arch: ProbeArch::linear(3),
            layers: vec![DenseLayer { weight: vec![0.5, -1.0, 2.0], bias: vec![0.1] }],
            norms: vec![],
        };
        let states = to_f32(&[1.0, 2.0, 3.0]);
        let z = forward_logits(&params, &states, 1).unwrap();
        // 0.5*1 - 1*2 + 2*3 + 0.1 = 4.6
        assert!((z[0] - 4.6).abs() < 1e-9, "got {}", z[0]);
    }

    #[test]
    fn gelu_matches_the_tanh_form_written_longhand() {
        for x in [-2.0, -0.5, 0.0, 0.3, 1.0, 2.7] {
            let u = (2.0f64 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x);
            let expected = 0.5 * x * (1.0 + u.tanh());
            assert!((activation(Activation::Gelu, x) - expected).abs() < 1e-15);
        }
        assert!((activation(Activation::Gelu, 1.0) - 0.841192).abs() < 1e-6);
    }

    /// Central finite differences of `sum(upstream * logits)` against the
    /// analytic backward pass.
    fn check_gradients(arch: ProbeArch, seed: u64) {
        let mut rng = crate::rng::stream(seed, "test/probe/fd");
        let params = init_probe(&arch, seed).unwrap();
        let n = 5;
        let d = arch.input_dim();
        let states: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let upstream: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let pass = forward(&params, &states, n).unwrap();
        let analytic = backward(&params, &pass, &upstream).unwrap().flatten();

        let flat = params.flatten();
        let h = 1e-5;
        let mut max_err = 0.0f64;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let eval = |v: &[f64]| {
                let p = ProbeParams::from_flat(&arch, v).unwrap();
                forward_logits(&p, &states, n)
                    .unwrap()
                    .iter()
                    .zip(&upstream)
                    .map(|(z, u)| z * u)
                    .sum::<f64>()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-4);
            max_err = max_err.max((analytic[i] - fd).abs() / denom);
        }
        assert!(max_err <= 1e-6, "{arch:?}: max relative gradient error {max_err}");
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        check_gradients(ProbeArch::linear(4), 3);
        check_gradients(ProbeArch::mlp_default(12).unwrap(), 4);
        check_gradients(
            ProbeArch {
                kind: ProbeKind::Mlp,
                layer_dims: vec![6, 3, 1],
                activation: Activation::Gelu,
                use_layer_norm: false,
            },
            5,
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let arch = ProbeArch::mlp_default(8).unwrap();
        let params = init_probe(&arch, 1).unwrap();
        let states = vec![0.3f32; 4 * 8];
        let pass = forward(&params, &states, 4).unwrap();
        let grads = backward(&params, &pass, &[0.0; 4]).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn init_is_seed_deterministic_and_scaled() {
        let arch = ProbeArch::mlp_default(16).unwrap();
        let a = init_probe(&arch, 7).unwrap();
        let b = init_probe(&arch, 7).unwrap();
        assert_eq!(a, b);
        let c = init_probe(&arch, 8).unwrap();
        assert_ne!(a, c);

        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
        let w = &a.layers[0].weight;
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        // fan_in 16 -> variance about 1/16.
        assert!((var - 1.0 / 16.0).abs() < 0.05, "weight variance {var}");
    }

    #[test]
    fn default_layer_rule() {
        assert_eq!(default_probe_layer(32), 30);
        assert_eq!(default_probe_layer(28), 26);
        assert_eq!(default_probe_layer(1), 1);
        assert_eq!(default_probe_layer(2), 1);
    }

    #[test]
    fn arch_validation_rejects_bad_shapes() {
        assert!(ProbeArch::linear(4).validate().is_ok());
        assert!(ProbeArch::mlp_default(16).unwrap().validate().is_ok());

        let widening = ProbeArch {
            kind: ProbeKind::Mlp,
            layer_dims: vec![4, 8, 1],
            activation: Activation::Gelu,
            use_layer_norm: true,
        };
        assert!(widening.validate().is_err());

        let wrong_output = ProbeArch {
            kind: ProbeKind::Linear,
            layer_dims: vec![4, 2],
            activation: Activation::Gelu,
            use_layer_norm: false,
        };
        assert!(wrong_output.validate().is_err());
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = init_probe(&ProbeArch::linear(4), 1).unwrap();
        let states = vec![0.0f32; 6];
        assert!(matches!(
            forward_logits(&params, &states, 2),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn probabilities_stay_in_unit_interval() {
        let params = ProbeParams {
            arch: ProbeArch::linear(1),
            layers: vec![DenseLayer { weight: vec![1000.0], bias: vec![0.0] }],
            norms: vec![],
        };
        let p = predict_proba(&params, &to_f32(&[1.0, -1.0, 0.0]), 3).unwrap();
        assert!(p[0] < 1.0 && p[0] > 0.999);
        assert!(p[1] > 0.0 && p[1] < 0.001);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = ProbeArch::mlp_default(16).unwrap();
        let params = init_probe(&arch, 21).unwrap();
        let meta = CheckpointMeta { seed: 21, layer: 6, fingerprint: "seed=21;cfg=test".into() };
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("probe.ckpt");

        save_checkpoint(&params, &meta, &path).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_meta, meta);
        assert_eq!(loaded.arch, params.arch);

        // Loaded values are the f32 projection of the saved ones.
        for (a, b) in params.flatten().iter().zip(loaded.flatten()) {
            assert_eq!(*a as f32, b as f32);
            assert_eq!(f64::from(*a as f32), b);
        }

        // Save -> load -> save is byte-identical.
        let path2 = dir.path().join("probe2.ckpt");
        save_checkpoint(&loaded, &loaded_meta, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_bad_magic() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE12345678").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadMagic { .. })));
    }
}
