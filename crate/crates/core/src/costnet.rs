//! Small network mapping `(v, d, phi)` and an upcoming-curvature window to a
//! correction of the short-horizon cost schedule.
//!
//! Architecture: optional 1-D convolution over the curvature window, layer
//! normalization, fully connected layers with leaky ReLU and dropout, and a
//! linear head. The head has one block per stage plus a global block that is
//! added to every stage; the sum is squashed by `tanh` into per-entry bounds.
//! Gradients are computed by a hand-written reverse pass over a [`Tape`].

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::solver::CostSchedule;

const LN_EPS: f64 = 1e-5;
const MAGIC: &[u8; 8] = b"ZMPCNET\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { channels: 8, kernel: 5, stride: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Length of the curvature window fed to the network.
    pub context_len: usize,
    /// When false the curvature window is ignored entirely.
    pub use_context: bool,
    pub use_conv: bool,
    pub conv: ConvSpec,
    pub layer_norm: bool,
    pub fc_widths: Vec<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
    /// Short horizon; the output covers stages `0..=horizon`.
    pub horizon: usize,
    /// `n + m` of the controller.
    pub dim: usize,
    /// Per-entry bound on `|dq|`.
    pub q_scale: Vec<f64>,
    /// Per-entry bound on `|dp|`.
    pub p_scale: Vec<f64>,
    /// Entries whose correction is always zero.
    pub frozen: Vec<bool>,
}

impl NetConfig {
    /// Desk-scale defaults: conv front end, `[64, 64]` hidden layers,
    /// `|dq| <= q_manual + 1`, `|dp| <= 10`.
    pub fn new(context_len: usize, horizon: usize, q_manual: &DVector<f64>, frozen: Vec<bool>) -> Self {
        let dim = q_manual.len();
        Self {
            context_len,
            use_context: true,
            use_conv: true,
            conv: ConvSpec::default(),
            layer_norm: true,
            fc_widths: vec![64, 64],
            leaky_slope: 0.01,
            dropout: 0.1,
            horizon,
            dim,
            q_scale: q_manual.iter().map(|q| q + 1.0).collect(),
            p_scale: vec![10.0; dim],
            frozen,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("net config: {m}")));
        if self.dim == 0 || self.q_scale.len() != self.dim || self.p_scale.len() != self.dim {
            return bad("scale vectors must have length dim");
        }
        if self.frozen.len() != self.dim {
            return bad("frozen mask must have length dim");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.fc_widths.iter().any(|&w| w == 0) {
            return bad("hidden widths must be positive");
        }
        if self.use_context && self.use_conv {
            let c = &self.conv;
            if c.channels == 0 || c.kernel == 0 || c.stride == 0 || c.kernel > self.context_len {
                return bad("convolution does not fit the context window");
            }
        }
        Ok(())
    }

    fn conv_out_len(&self) -> usize {
        (self.context_len - self.conv.kernel) / self.conv.stride + 1
    }

    /// Width of the feature vector entering the first hidden layer.
    pub fn feature_dim(&self) -> usize {
        3 + match (self.use_context, self.use_conv) {
            (false, _) => 0,
            (true, false) => self.context_len,
            (true, true) => self.conv.channels * self.conv_out_len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * (self.horizon + 1) * self.dim + 2 * self.dim
    }

    fn layout(&self) -> Layout {
        let mut off = 0;
        let mut take = |k: usize| {
            let r = off..off + k;
            off += k;
            r
        };
        let conv = (self.use_context && self.use_conv).then(|| {
            let w = take(self.conv.channels * self.conv.kernel);
            let b = take(self.conv.channels);
            (w, b)
        });
        let f = self.feature_dim();
        let norm = self.layer_norm.then(|| (take(f), take(f)));
        let mut dense = Vec::new();
        let mut fan_in = f;
        for &w in &self.fc_widths {
            dense.push(Dense { inputs: fan_in, outputs: w, w: take(w * fan_in), b: take(w) });
            fan_in = w;
        }
        let out = self.output_dim();
        let head = Dense { inputs: fan_in, outputs: out, w: take(out * fan_in), b: take(out) };
        Layout { conv, norm, dense, head, total: off }
    }
}

#[derive(Debug, Clone)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Option<(std::ops::Range<usize>, std::ops::Range<usize>)>,
    norm: Option<(std::ops::Range<usize>, std::ops::Range<usize>)>,
    dense: Vec<Dense>,
    head: Dense,
    total: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Network input: `[v, d, phi]` and the curvature window.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput<'a> {
    pub state: [f64; 3],
    pub context: &'a [f64],
}

/// Intermediate values of one forward pass, needed by [`CostNet::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    state: [f64; 3],
    context: Vec<f64>,
    conv_pre: Vec<f64>,
    features: Vec<f64>,
    norm_xhat: Vec<f64>,
    norm_inv_std: f64,
    /// Per hidden layer: input, pre-activation, dropout scale per unit.
    hidden: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
    head_in: Vec<f64>,
    /// `tanh` of each (stage, entry) sum, `[q block, p block]` per stage.
    squashed: Vec<f64>,
}

impl Tape {
    /// Dropout scales (0 or `1 / (1 - rate)`, or all 1 in eval mode).
    pub fn dropout_masks(&self) -> Vec<Vec<f64>> {
        self.hidden.iter().map(|h| h.2.clone()).collect()
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; len], v: vec![0.0; len] }
    }
}

#[derive(Debug, Clone)]
pub struct CostNet {
    config: NetConfig,
    layout: Layout,
    theta: Vec<f64>,
    pub adam: Adam,
    version: u64,
}

impl CostNet {
    /// Kaiming-uniform hidden layers, zero biases and a zero output layer,
    /// so the initial correction is exactly zero.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let mut theta = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
        let mut fill = |theta: &mut [f64], fan_in: usize| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            theta.iter_mut().for_each(|w| *w = rng.gen_range(-bound..bound));
        };
        if let Some((w, _)) = &layout.conv {
            fill(&mut theta[w.clone()], config.conv.kernel);
        }
        if let Some((g, _)) = &layout.norm {
            theta[g.clone()].iter_mut().for_each(|v| *v = 1.0);
        }
        for d in &layout.dense {
            fill(&mut theta[d.w.clone()], d.inputs);
        }
        let total = layout.total;
        Ok(Self { config, layout, theta, adam: Adam::new(total), version: 0 })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Replaces the parameters; any outstanding tape becomes stale.
    pub fn set_params(&mut self, theta: Vec<f64>) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::Dimension(format!("expected {} parameters, got {}", self.theta.len(), theta.len())));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        self.theta = theta;
        self.version += 1;
        Ok(())
    }

    /// Zeroes the output layer, restoring the zero-correction network.
    pub fn zero_head(&mut self) {
        let h = self.layout.head.clone();
        self.theta[h.w].fill(0.0);
        self.theta[h.b].fill(0.0);
        self.version += 1;
    }

    pub fn forward(&self, input: &NetInput, mode: Mode, rng: &mut impl Rng) -> Result<(CostSchedule, Tape)> {
        let masks = if mode == Mode::Train && self.config.dropout > 0.0 {
            let keep = 1.0 - self.config.dropout;
            self.config
                .fc_widths
                .iter()
                .map(|&w| (0..w).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect())
                .collect()
        } else {
            self.config.fc_widths.iter().map(|&w| vec![1.0; w]).collect()
        };
        self.forward_with_masks(input, masks)
    }

    /// Deterministic forward pass (dropout disabled).
    pub fn eval(&self, input: &NetInput) -> Result<CostSchedule> {
        let masks = self.config.fc_widths.iter().map(|&w| vec![1.0; w]).collect();
        self.forward_with_masks(input, masks).map(|r| r.0)
    }

    /// Forward pass with given dropout scales, e.g. to replay a training pass.
    pub fn forward_with_masks(&self, input: &NetInput, masks: Vec<Vec<f64>>) -> Result<(CostSchedule, Tape)> {
        let cfg = &self.config;
        if cfg.use_context && input.context.len() != cfg.context_len {
            return Err(Error::Dimension(format!(
                "context window has {} samples, network expects {}",
                input.context.len(),
                cfg.context_len
            )));
        }
        if masks.len() != cfg.fc_widths.len() || masks.iter().zip(&cfg.fc_widths).any(|(m, &w)| m.len() != w) {
            return Err(Error::Dimension("dropout masks do not match the hidden layers".into()));
        }
        let th = &self.theta;
        let slope = cfg.leaky_slope;
        let mut features = input.state.to_vec();
        let mut conv_pre = Vec::new();
        if cfg.use_context {
            if let Some((w, b)) = &self.layout.conv {
                let (w, b) = (&th[w.clone()], &th[b.clone()]);
                let (k, s, t_out) = (cfg.conv.kernel, cfg.conv.stride, cfg.conv_out_len());
                for c in 0..cfg.conv.channels {
                    for t in 0..t_out {
                        let mut acc = b[c];
                        for j in 0..k {
                            acc += w[c * k + j] * input.context[t * s + j];
                        }
                        conv_pre.push(acc);
                        features.push(leaky(acc, slope));
                    }
                }
            } else {
                features.extend_from_slice(input.context);
            }
        }
        let mut x = features.clone();
        let mut norm_xhat = Vec::new();
        let mut norm_inv_std = 0.0;
        if let Some((g, b)) = &self.layout.norm {
            let f = x.len() as f64;
            let mean = x.iter().sum::<f64>() / f;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f;
            norm_inv_std = 1.0 / (var + LN_EPS).sqrt();
            norm_xhat = x.iter().map(|v| (v - mean) * norm_inv_std).collect();
            x = norm_xhat.iter().zip(&th[g.clone()]).zip(&th[b.clone()]).map(|((xh, g), b)| xh * g + b).collect();
        }
        let mut hidden = Vec::with_capacity(self.layout.dense.len());
        for (d, mask) in self.layout.dense.iter().zip(masks) {
            let pre = dense_forward(d, th, &x);
            let out = pre.iter().zip(&mask).map(|(p, m)| leaky(*p, slope) * m).collect();
            hidden.push((x, pre, mask));
            x = out;
        }
        let head = dense_forward(&self.layout.head, th, &x);

        let (stages, dim) = (cfg.horizon + 1, cfg.dim);
        let global = &head[2 * stages * dim..];
        let mut squashed = vec![0.0; 2 * stages * dim];
        let mut out = CostSchedule { q: vec![DVector::zeros(dim); stages], p: vec![DVector::zeros(dim); stages] };
        for i in 0..stages {
            for j in 0..dim {
                let (iq, ip) = (2 * i * dim + j, 2 * i * dim + dim + j);
                let tq = (head[iq] + global[j]).tanh();
                let tp = (head[ip] + global[dim + j]).tanh();
                squashed[iq] = tq;
                squashed[ip] = tp;
                if !cfg.frozen[j] {
                    out.q[i][j] = cfg.q_scale[j] * tq;
                    out.p[i][j] = cfg.p_scale[j] * tp;
                }
            }
        }
        let tape = Tape {
            version: self.version,
            state: input.state,
            context: input.context.to_vec(),
            conv_pre,
            features,
            norm_xhat,
            norm_inv_std,
            hidden,
            head_in: x,
            squashed,
        };
        Ok((out, tape))
    }

    /// Gradient of a scalar loss with respect to the parameters, given its
    /// gradient with respect to the produced correction.
    pub fn backward(&self, tape: &Tape, upstream: &CostSchedule) -> Result<Vec<f64>> {
        if tape.version != self.version {
            return Err(Error::StaleTape(format!("tape from version {}, net at {}", tape.version, self.version)));
        }
        let cfg = &self.config;
        let (stages, dim) = (cfg.horizon + 1, cfg.dim);
        if upstream.stages() != stages || upstream.dim() != dim {
            return Err(Error::Dimension("upstream gradient does not match the network output".into()));
        }
        let th = &self.theta;
        let slope = cfg.leaky_slope;
        let mut grad = vec![0.0; th.len()];

        let mut g_head = vec![0.0; cfg.output_dim()];
        for i in 0..stages {
            for j in 0..dim {
                if cfg.frozen[j] {
                    continue;
                }
                let (iq, ip) = (2 * i * dim + j, 2 * i * dim + dim + j);
                let gq = upstream.q[i][j] * cfg.q_scale[j] * (1.0 - tape.squashed[iq].powi(2));
                let gp = upstream.p[i][j] * cfg.p_scale[j] * (1.0 - tape.squashed[ip].powi(2));
                g_head[iq] += gq;
                g_head[ip] += gp;
                g_head[2 * stages * dim + j] += gq;
                g_head[2 * stages * dim + dim + j] += gp;
            }
        }
        let mut g = dense_backward(&self.layout.head, th, &tape.head_in, &g_head, &mut grad);
        for (d, (input, pre, mask)) in self.layout.dense.iter().zip(&tape.hidden).rev() {
            let g_pre: Vec<f64> =
                g.iter().zip(pre).zip(mask).map(|((g, p), m)| g * m * leaky_slope(*p, slope)).collect();
            g = dense_backward(d, th, input, &g_pre, &mut grad);
        }
        if let Some((gr, br)) = &self.layout.norm {
            let gain = &th[gr.clone()];
            let f = g.len() as f64;
            let mut g_xhat = vec![0.0; g.len()];
            for k in 0..g.len() {
                grad[gr.start + k] += g[k] * tape.norm_xhat[k];
                grad[br.start + k] += g[k];
                g_xhat[k] = g[k] * gain[k];
            }
            let mean_g = g_xhat.iter().sum::<f64>() / f;
            let mean_gx = g_xhat.iter().zip(&tape.norm_xhat).map(|(a, b)| a * b).sum::<f64>() / f;
            g = g_xhat
                .iter()
                .zip(&tape.norm_xhat)
                .map(|(gx, xh)| tape.norm_inv_std * (gx - mean_g - xh * mean_gx))
                .collect();
        }
        if let Some((wr, br)) = &self.layout.conv {
            let (k, s, t_out) = (cfg.conv.kernel, cfg.conv.stride, cfg.conv_out_len());
            for c in 0..cfg.conv.channels {
                for t in 0..t_out {
                    let idx = c * t_out + t;
                    let gp = g[3 + idx] * leaky_slope(tape.conv_pre[idx], slope);
                    grad[br.start + c] += gp;
                    for j in 0..k {
                        grad[wr.start + c * k + j] += gp * tape.context[t * s + j];
                    }
                }
            }
        }
        debug_assert_eq!(tape.features.len(), g.len());
        let _ = tape.state;
        Ok(grad)
    }

    /// One Adam update. Non-finite gradients are rejected and leave the
    /// network untouched.
    pub fn adam_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.theta.len() {
            return Err(Error::Dimension("gradient length does not match the parameters".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let a = &mut self.adam;
        a.step += 1;
        let bc1 = 1.0 - a.beta1.powi(a.step as i32);
        let bc2 = 1.0 - a.beta2.powi(a.step as i32);
        for k in 0..grad.len() {
            a.m[k] = a.beta1 * a.m[k] + (1.0 - a.beta1) * grad[k];
            a.v[k] = a.beta2 * a.v[k] + (1.0 - a.beta2) * grad[k] * grad[k];
            let mhat = a.m[k] / bc1;
            let vhat = a.v[k] / bc2;
            self.theta[k] -= lr * mhat / (vhat.sqrt() + a.eps);
        }
        self.version += 1;
        Ok(())
    }

    /// Writes `magic | version | header length | JSON header | parameters | sha256`.
    pub fn save(&self, path: impl AsRef<Path>, meta: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_bytes(meta)?;
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header { config: self.config.clone(), meta: meta.clone() })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.theta.len() as u64).to_le_bytes());
        for v in &self.theta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, BTreeMap<String, String>)> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>)> {
        let (header, theta) = parse_checkpoint(bytes)?;
        let mut net = CostNet::new(header.config, 0)?;
        if theta.len() != net.theta.len() {
            return Err(Error::Checkpoint("parameter count does not match the stored configuration".into()));
        }
        net.theta = theta;
        Ok((net, header.meta))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetConfig,
    meta: BTreeMap<String, String>,
}

fn parse_checkpoint(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 + 32 || &bytes[..8] != MAGIC {
        return Err(err("not a cost network checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(err(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let rest = &body[20..];
    if rest.len() < hlen + 8 {
        return Err(err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..hlen])?;
    let count = u64::from_le_bytes(rest[hlen..hlen + 8].try_into().unwrap()) as usize;
    let data = &rest[hlen + 8..];
    if data.len() != count * 8 {
        return Err(err("parameter block has the wrong length"));
    }
    let theta = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, theta))
}

/// Summary printed by `costnet info`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInfo {
    pub config: NetConfig,
    pub meta: BTreeMap<String, String>,
    pub num_params: usize,
}

impl NetInfo {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let (net, meta) = CostNet::load(path)?;
        Ok(Self { num_params: net.num_params(), config: net.config, meta })
    }
}

impl fmt::Display for NetInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "format version   {FORMAT_VERSION}")?;
        writeln!(f, "parameters       {}", self.num_params)?;
        writeln!(f, "horizon          {}", c.horizon)?;
        writeln!(f, "cost dim         {}", c.dim)?;
        writeln!(f, "context          {} samples (used: {})", c.context_len, c.use_context)?;
        if c.use_context && c.use_conv {
            writeln!(f, "conv             {} ch, kernel {}, stride {}", c.conv.channels, c.conv.kernel, c.conv.stride)?;
        }
        writeln!(f, "layer norm       {}", c.layer_norm)?;
        writeln!(f, "hidden           {:?}", c.fc_widths)?;
        writeln!(f, "leaky slope      {}", c.leaky_slope)?;
        writeln!(f, "dropout          {}", c.dropout)?;
        writeln!(f, "q scale          {:?}", c.q_scale)?;
        writeln!(f, "p scale          {:?}", c.p_scale)?;
        for (k, v) in &self.meta {
            writeln!(f, "{k:<16} {v}")?;
        }
        Ok(())
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_slope(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

fn dense_forward(d: &Dense, th: &[f64], x: &[f64]) -> Vec<f64> {
    let w = &th[d.w.clone()];
    let b = &th[d.b.clone()];
    (0..d.outputs).map(|o| b[o] + dot(&w[o * d.inputs..(o + 1) * d.inputs], x)).collect()
}

/// Four independent partial sums; a single running sum is latency bound.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Accumulates weight and bias gradients; returns the input gradient.
fn dense_backward(d: &Dense, th: &[f64], x: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let w = &th[d.w.clone()];
    let mut gx = vec![0.0; d.inputs];
    for o in 0..d.outputs {
        if g[o] == 0.0 {
            continue;
        }
        grad[d.b.start + o] += g[o];
        let row = d.w.start + o * d.inputs;
        for i in 0..d.inputs {
            grad[row + i] += g[o] * x[i];
            gx[i] += g[o] * w[o * d.inputs + i];
        }
    }
    gx
}

/// Writes a checkpoint's summary; used by the command line.
pub fn write_info(path: impl AsRef<Path>, mut out: impl Write) -> Result<()> {
    write!(out, "{}", NetInfo::read(path)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(use_conv: bool) -> NetConfig {
        let q = DVector::from_vec(vec![0.0, 3.0, 1.0, 0.01, 0.01, 0.01, 0.01, 1.0]);
        let mut frozen = vec![false; 8];
        frozen[0] = true;
        frozen[4] = true;
        let mut c = NetConfig::new(20, 3, &q, frozen);
        c.use_conv = use_conv;
        c.fc_widths = vec![12, 10];
        c
    }

    fn random_net(cfg: NetConfig, seed: u64) -> CostNet {
        let mut net = CostNet::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let theta = net.params().iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        net.set_params(theta).unwrap();
        net
    }

    fn input(seed: u64) -> ([f64; 3], Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = (0..20).map(|_| rng.gen_range(-2.5..2.5)).collect();
        ([rng.gen_range(0.3..1.8), rng.gen_range(-0.3..0.3), rng.gen_range(-0.4..0.4)], ctx)
    }

    #[test]
    fn fresh_net_outputs_zero() {
        let net = CostNet::new(small_config(true), 1).unwrap();
        let (s, z) = input(2);
        let out = net.eval(&NetInput { state: s, context: &z }).unwrap();
        assert!(out.q.iter().chain(&out.p).all(|v| v.iter().all(|&e| e == 0.0)));
    }

    #[test]
    fn eval_is_deterministic() {
        let net = random_net(small_config(true), 3);
        let (s, z) = input(4);
        let a = net.eval(&NetInput { state: s, context: &z }).unwrap();
        let b = net.eval(&NetInput { state: s, context: &z }).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_linear_layer_gradient() {
        // no hidden layers, no context, no norm: output = tanh(W x + b) scaled
        let q = DVector::from_vec(vec![1.0, 1.0]);
        let mut cfg = NetConfig::new(4, 0, &q, vec![false, false]);
        cfg.use_context = false;
        cfg.layer_norm = false;
        cfg.fc_widths = vec![];
        cfg.dropout = 0.0;
        let net = random_net(cfg, 5);
        let x = [0.7, -0.2, 0.1];
        let (out, tape) = net.forward_with_masks(&NetInput { state: x, context: &[] }, vec![]).unwrap();
        // loss = sum of dp entries; dL/dp = 1
        let mut up = out.clone();
        up.q.iter_mut().for_each(|v| v.fill(0.0));
        up.p.iter_mut().for_each(|v| v.fill(1.0));
        let grad = net.backward(&tape, &up).unwrap();
        // closed form: stage block row r = dim + j, global row = 2 dim + dim + j
        let th = net.params();
        let rows = net.config().output_dim();
        let pre = |r: usize| th[rows * 3 + r] + (0..3).map(|i| th[r * 3 + i] * x[i]).sum::<f64>();
        for j in 0..2 {
            let (r_stage, r_glob) = (2 + j, 4 + 2 + j);
            let t = (pre(r_stage) + pre(r_glob)).tanh();
            let g = 10.0 * (1.0 - t * t);
            for i in 0..3 {
                assert!((grad[r_stage * 3 + i] - g * x[i]).abs() < 1e-12);
                assert!((grad[r_glob * 3 + i] - g * x[i]).abs() < 1e-12);
            }
            assert!((grad[rows * 3 + r_stage] - g).abs() < 1e-12);
        }
        // q rows untouched
        assert!((0..3).all(|i| grad[i] == 0.0));
    }

    #[test]
    fn full_net_matches_finite_differences() {
        for use_conv in [true, false] {
            let net = random_net(small_config(use_conv), 7);
            let (s, z) = input(8);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let (out, tape) = net.forward(&NetInput { state: s, context: &z }, Mode::Train, &mut rng).unwrap();
            let masks = tape.dropout_masks();
            let weights: Vec<f64> = (0..2 * out.stages() * out.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = |o: &CostSchedule| o.to_flat().iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
            let mut up = out.clone();
            for i in 0..up.stages() {
                for j in 0..up.dim() {
                    up.q[i][j] = weights[2 * i * up.dim() + j];
                    up.p[i][j] = weights[2 * i * up.dim() + up.dim() + j];
                }
            }
            let grad = net.backward(&tape, &up).unwrap();
            let h = 1e-5;
            for _ in 0..50 {
                let k = rng.gen_range(0..net.num_params());
                let mut plus = net.clone();
                let mut theta = net.params().to_vec();
                theta[k] += h;
                plus.set_params(theta.clone()).unwrap();
                theta[k] -= 2.0 * h;
                let mut minus = net.clone();
                minus.set_params(theta).unwrap();
                let inp = NetInput { state: s, context: &z };
                let fp = loss(&plus.forward_with_masks(&inp, masks.clone()).unwrap().0);
                let fm = loss(&minus.forward_with_masks(&inp, masks.clone()).unwrap().0);
                let fd = (fp - fm) / (2.0 * h);
                // tiny entries are compared absolutely; their difference quotients are rounding-limited
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
                assert!(rel < 1e-5, "param {k}: fd {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let net = random_net(small_config(true), 11);
        let (s, z) = input(12);
        let (out, tape) = net.forward(&NetInput { state: s, context: &z }, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grad = net.backward(&tape, &out.zeros_like()).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = random_net(small_config(true), 13);
        let (s, z) = input(14);
        let (out, tape) = net.forward(&NetInput { state: s, context: &z }, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = vec![0.0; net.num_params()];
        net.adam_step(&g, 0.1).unwrap();
        assert!(matches!(net.backward(&tape, &out), Err(Error::StaleTape(_))));
    }

    #[test]
    fn adam_first_step_by_hand() {
        let q = DVector::from_vec(vec![1.0]);
        let mut cfg = NetConfig::new(1, 0, &q, vec![false]);
        cfg.use_context = false;
        cfg.layer_norm = false;
        cfg.fc_widths = vec![];
        let mut net = CostNet::new(cfg, 0).unwrap();
        let mut g = vec![0.0; net.num_params()];
        g[0] = 1.0;
        net.adam_step(&g, 0.1).unwrap();
        // m = 0.1, v = 0.001; bias-corrected both give 1, so the step is lr / (1 + eps)
        assert!((net.params()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!(net.params()[1..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut net = random_net(small_config(false), 15);
        let before = net.params().to_vec();
        let mut g = vec![0.0; net.num_params()];
        g[3] = f64::NAN;
        assert!(matches!(net.adam_step(&g, 0.1), Err(Error::NonFiniteGradient)));
        assert_eq!(net.params(), &before[..]);
        assert_eq!(net.adam.step, 0);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let net = random_net(small_config(true), 16);
        let mut meta = BTreeMap::new();
        meta.insert("model".to_string(), "kinematic".to_string());
        let bytes = net.to_bytes(&meta).unwrap();
        let (back, m2) = CostNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());
        assert_eq!(m2, meta);
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(CostNet::from_bytes(&bad), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn outputs_stay_in_bounds(seed in 0u64..1_000_000, scale in 0.0f64..20.0) {
            let mut net = CostNet::new(small_config(true), seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta = net.params().iter().map(|_| rng.gen_range(-scale..=scale)).collect();
            net.set_params(theta).unwrap();
            let (s, z) = input(seed ^ 0x55);
            let out = net.eval(&NetInput { state: s, context: &z }).unwrap();
            let cfg = net.config();
            for i in 0..out.stages() {
                for j in 0..cfg.dim {
                    prop_assert!(out.p[i][j].abs() <= cfg.p_scale[j]);
                    prop_assert!(out.q[i][j].abs() <= cfg.q_scale[j]);
                }
            }
        }
    }
}
