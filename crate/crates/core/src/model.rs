//! Desk-scale pose network: a strided conv backbone, covariance pooling, a
//! BiMap/ReEig head and a Cholesky decode, plus the ablation variants.
//!
//! Forward passes record what they need for the explicit backward pass in a
//! [`Trace`]. Operation counts are carried in the trace rather than in any
//! global state.

use std::fmt;
use std::ops::AddAssign;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{
    encode_pose_to_spd, euler_params_from_factor, euler_params_from_factor_backward, euler_to_rotation,
    gram_schmidt_so3, params_from_factor, params_from_factor_backward, PoseParams6D,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_backward, cholesky_lower, Mat};
use crate::losses::{euler_pose_loss, log_tangent_frobenius_loss, pose_loss, LossBreakdown};
use crate::optim::{init_stiefel, AdamState, StiefelOptState};
use crate::spd::{
    bimap_backward, bimap_forward, channel_cov_pool, channel_cov_pool_backward, cov_pool, cov_pool_backward,
    reeig_backward_cached, reeig_forward_cached, FeatureMap, ReEigCache, StiefelPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    Full6d,
    EulerSpd3,
    MlpHead,
    ChannelCov,
    LogTangent,
}

impl VariantId {
    pub const ALL: [VariantId; 5] =
        [VariantId::Full6d, VariantId::EulerSpd3, VariantId::MlpHead, VariantId::ChannelCov, VariantId::LogTangent];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantId::Full6d => "full_6d",
            VariantId::EulerSpd3 => "euler_spd3",
            VariantId::MlpHead => "mlp_head",
            VariantId::ChannelCov => "channel_cov",
            VariantId::LogTangent => "log_tangent",
        }
    }

    pub fn uses_spd_head(&self) -> bool {
        !matches!(self, VariantId::MlpHead)
    }

    /// Side of the square matrix the head must end at.
    pub fn head_out_dim(&self) -> usize {
        match self {
            VariantId::EulerSpd3 => 3,
            _ => 4,
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        VariantId::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyBackboneConfig {
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self { input_size: 32, channels: vec![8, 16, 32] }
    }
}

impl ToyBackboneConfig {
    /// Spatial side after all stride-2 stages.
    pub fn output_side(&self) -> usize {
        self.channels.iter().fold(self.input_size, |s, _| conv_out(s))
    }

    pub fn spatial_len(&self) -> usize {
        self.output_side().pow(2)
    }

    pub fn out_channels(&self) -> usize {
        self.channels.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config(format!("backbone: invalid shape {self:?}")));
        }
        if self.out_channels() < 2 {
            return Err(Error::Config("backbone: need at least 2 output channels".into()));
        }
        if self.spatial_len() < 4 {
            return Err(Error::Config(format!("backbone: {} output positions, need >= 4", self.spatial_len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdHeadConfig {
    pub dims: Vec<usize>,
    pub eps_reeig: f64,
}

impl SpdHeadConfig {
    pub const DEFAULT_EPS: f64 = 1e-4;

    /// `layers + 1` dims evenly spaced from `n_in` down to `n_out`.
    pub fn interpolated(n_in: usize, n_out: usize, layers: usize, eps_reeig: f64) -> Self {
        let dims = (0..=layers)
            .map(|i| {
                let x = n_in as f64 + (n_out as f64 - n_in as f64) * i as f64 / layers.max(1) as f64;
                x.round() as usize
            })
            .collect();
        Self { dims, eps_reeig }
    }

    pub fn validate(&self, n_in: usize, n_out: usize) -> Result<()> {
        if !(self.eps_reeig > 0.0 && self.eps_reeig.is_finite()) {
            return Err(Error::Config(format!("eps_reeig must be positive, got {}", self.eps_reeig)));
        }
        if self.dims.len() < 2 || self.dims.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("head dims must be strictly descending, got {:?}", self.dims)));
        }
        if self.dims[0] != n_in || *self.dims.last().unwrap() != n_out {
            return Err(Error::Config(format!("head dims {:?} must run from {n_in} to {n_out}", self.dims)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: VariantId,
    pub backbone: ToyBackboneConfig,
    pub head: SpdHeadConfig,
    pub mlp_hidden: usize,
}

impl ModelConfig {
    /// Default backbone with a four-layer head sized for `variant`.
    pub fn new(variant: VariantId) -> Self {
        Self::with_backbone(variant, ToyBackboneConfig::default(), None, SpdHeadConfig::DEFAULT_EPS)
    }

    pub fn with_backbone(
        variant: VariantId,
        backbone: ToyBackboneConfig,
        dims: Option<Vec<usize>>,
        eps_reeig: f64,
    ) -> Self {
        let n_in = head_input_dim(variant, &backbone);
        let head = match dims {
            Some(dims) => SpdHeadConfig { dims, eps_reeig },
            None => SpdHeadConfig::interpolated(n_in, variant.head_out_dim(), 4, eps_reeig),
        };
        Self { variant, backbone, head, mlp_hidden: 256 }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.variant.uses_spd_head() {
            self.head.validate(head_input_dim(self.variant, &self.backbone), self.variant.head_out_dim())?;
        } else if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    fn pooled_dim(&self) -> usize {
        head_input_dim(self.variant, &self.backbone)
    }
}

fn head_input_dim(variant: VariantId, backbone: &ToyBackboneConfig) -> usize {
    match variant {
        VariantId::ChannelCov => backbone.out_channels(),
        _ => backbone.spatial_len(),
    }
}

fn conv_out(side: usize) -> usize {
    (side + 1) / 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn normal(name: &str, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect();
        Self { name: name.to_string(), shape, data }
    }

    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { name: name.to_string(), shape, data: vec![0.0; len] }
    }
}

/// Euclidean tensors (conv, MLP) and Stiefel-constrained BiMap weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub euclidean: Vec<ParamTensor>,
    pub stiefel: Vec<StiefelPoint>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub euclidean: usize,
    pub stiefel: usize,
    pub total: usize,
}

pub fn count_parameters(params: &Params) -> ParamCount {
    let euclidean = params.euclidean.iter().map(|t| t.data.len()).sum();
    let stiefel = params.stiefel.iter().map(|w| w.rows() * w.cols()).sum();
    ParamCount { euclidean, stiefel, total: euclidean + stiefel }
}

/// Scaled-normal conv/MLP weights, zero biases, BiMap weights via QR.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut euclidean = Vec::new();
    let mut cin = 1;
    for (k, &cout) in cfg.backbone.channels.iter().enumerate() {
        let fan_in = (cin * 9) as f64;
        euclidean.push(ParamTensor::normal(&format!("conv{k}.weight"), vec![cout, cin, 3, 3], (2.0 / fan_in).sqrt(), &mut rng));
        euclidean.push(ParamTensor::zeros(&format!("conv{k}.bias"), vec![cout]));
        cin = cout;
    }
    let mut stiefel = Vec::new();
    if cfg.variant.uses_spd_head() {
        for w in cfg.head.dims.windows(2) {
            stiefel.push(init_stiefel(w[0], w[1], rng.random())?);
        }
    } else {
        let n = cfg.pooled_dim();
        let d_in = n * (n + 1) / 2;
        let h = cfg.mlp_hidden;
        euclidean.push(ParamTensor::normal("mlp.fc1.weight", vec![h, d_in], (2.0 / d_in as f64).sqrt(), &mut rng));
        euclidean.push(ParamTensor::zeros("mlp.fc1.bias", vec![h]));
        euclidean.push(ParamTensor::normal("mlp.fc2.weight", vec![9, h], (1.0 / h as f64).sqrt(), &mut rng));
        euclidean.push(ParamTensor::zeros("mlp.fc2.bias", vec![9]));
    }
    Ok(Params { euclidean, stiefel })
}

fn check_layout(cfg: &ModelConfig, params: &Params) -> Result<()> {
    let stages = cfg.backbone.channels.len();
    let want_e = 2 * stages + if cfg.variant.uses_spd_head() { 0 } else { 4 };
    let want_s = if cfg.variant.uses_spd_head() { cfg.head.dims.len() - 1 } else { 0 };
    if params.euclidean.len() != want_e || params.stiefel.len() != want_s {
        return Err(Error::Config(format!(
            "parameter layout: {} euclidean / {} stiefel tensors, expected {want_e} / {want_s}",
            params.euclidean.len(),
            params.stiefel.len()
        )));
    }
    Ok(())
}

/// Per-forward operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounters {
    pub conv: usize,
    pub cov_pool: usize,
    pub channel_cov_pool: usize,
    pub bimap: usize,
    pub reeig: usize,
    pub cholesky_decode: usize,
    pub gram_schmidt: usize,
    pub euler_decode: usize,
    pub mlp_layers: usize,
    pub log_eig: usize,
}

impl OpCounters {
    pub fn spd_ops(&self) -> usize {
        self.bimap + self.reeig + self.log_eig
    }
}

impl AddAssign for OpCounters {
    fn add_assign(&mut self, o: Self) {
        self.conv += o.conv;
        self.cov_pool += o.cov_pool;
        self.channel_cov_pool += o.channel_cov_pool;
        self.bimap += o.bimap;
        self.reeig += o.reeig;
        self.cholesky_decode += o.cholesky_decode;
        self.gram_schmidt += o.gram_schmidt;
        self.euler_decode += o.euler_decode;
        self.mlp_layers += o.mlp_layers;
        self.log_eig += o.log_eig;
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let s = 1.0 / (1.0 + (-z).exp());
    s * (1.0 + z * (1.0 - s))
}

/// 3×3, stride 2, zero padding 1; weight layout `[cout][cin][3][3]`.
fn conv_forward(x: &FeatureMap, w: &[f64], b: &[f64]) -> FeatureMap {
    let cout = b.len();
    let (cin, h, wd) = (x.channels, x.height, x.width);
    let (ho, wo) = (conv_out(h), conv_out(wd));
    let mut out = FeatureMap::zeros(cout, ho, wo);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = b[co];
                for ci in 0..cin {
                    let wb = (co * cin + ci) * 9;
                    let xb = ci * h * wd;
                    for ky in 0..3 {
                        let iy = 2 * oy + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = 2 * ox + kx;
                            if ix == 0 || ix > wd {
                                continue;
                            }
                            s += w[wb + ky * 3 + kx] * x.data[xb + (iy - 1) * wd + ix - 1];
                        }
                    }
                }
                out.data[(co * ho + oy) * wo + ox] = s;
            }
        }
    }
    out
}

/// Returns `(∂/∂x, ∂/∂w, ∂/∂b)`.
fn conv_backward(x: &FeatureMap, w: &[f64], dy: &FeatureMap) -> (FeatureMap, Vec<f64>, Vec<f64>) {
    let cout = dy.channels;
    let (cin, h, wd) = (x.channels, x.height, x.width);
    let (ho, wo) = (dy.height, dy.width);
    let mut dx = FeatureMap::zeros(cin, h, wd);
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = dy.data[(co * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                db[co] += g;
                for ci in 0..cin {
                    let wb = (co * cin + ci) * 9;
                    let xb = ci * h * wd;
                    for ky in 0..3 {
                        let iy = 2 * oy + ky;
                        if iy == 0 || iy > h {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = 2 * ox + kx;
                            if ix == 0 || ix > wd {
                                continue;
                            }
                            let xi = xb + (iy - 1) * wd + ix - 1;
                            dw[wb + ky * 3 + kx] += g * x.data[xi];
                            dx.data[xi] += g * w[wb + ky * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Alternating BiMap and ReEig; returns `Σ_L` and every intermediate `Σ_l` (input first).
pub fn spd_head_forward(sigma0: &Mat, weights: &[StiefelPoint], eps: f64) -> Result<(Mat, Vec<Mat>)> {
    let mut x = sigma0.clone();
    let mut all = vec![x.clone()];
    for (l, w) in weights.iter().enumerate() {
        if w.rows() != x.nrows() {
            return Err(Error::Config(format!("head layer {l}: weight {}x{} vs input {}", w.rows(), w.cols(), x.nrows())));
        }
        x = reeig_forward_cached(&bimap_forward(&x, w)?, eps)?.0;
        all.push(x.clone());
    }
    Ok((x, all))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub rotation: Matrix3<f64>,
    pub t_norm: Vector3<f64>,
}

/// An image with its normalized pose label.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub image: FeatureMap,
    pub target: Target,
}

#[derive(Debug, Clone)]
pub enum HeadOutput {
    /// `(u, v, t)` with the factor it was read from (`None` for the MLP head).
    Params6D { params: PoseParams6D, factor: Option<Mat> },
    Euler { theta: Vector3<f64>, t: Vector3<f64>, factor: Mat },
    /// Variant C stops at `Σ_L`.
    Tangent(Mat),
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

/// Forward record for one image.
#[derive(Debug, Clone)]
pub struct Trace {
    pub counters: OpCounters,
    stage_inputs: Vec<FeatureMap>,
    stage_pre: Vec<FeatureMap>,
    pub features: FeatureMap,
    pub pooled: Mat,
    /// `Σ_0 … Σ_L` (empty for the MLP head).
    pub head_states: Vec<Mat>,
    head_caches: Vec<ReEigCache>,
    mlp: Option<MlpCache>,
    pub output: HeadOutput,
}

pub fn forward(cfg: &ModelConfig, params: &Params, image: &FeatureMap) -> Result<Trace> {
    check_layout(cfg, params)?;
    let side = cfg.backbone.input_size;
    if image.channels != 1 || image.height != side || image.width != side {
        return invalid(format!(
            "forward: expected 1x{side}x{side} image, got {}x{}x{}",
            image.channels, image.height, image.width
        ));
    }
    let mut counters = OpCounters::default();
    let mut stage_inputs = Vec::new();
    let mut stage_pre = Vec::new();
    let mut a = image.clone();
    for k in 0..cfg.backbone.channels.len() {
        let z = conv_forward(&a, &params.euclidean[2 * k].data, &params.euclidean[2 * k + 1].data);
        counters.conv += 1;
        let next = FeatureMap { data: z.data.iter().map(|&v| silu(v)).collect(), ..z.clone() };
        stage_inputs.push(std::mem::replace(&mut a, next));
        stage_pre.push(z);
    }
    let features = a;

    let pooled = if cfg.variant == VariantId::ChannelCov {
        counters.channel_cov_pool += 1;
        channel_cov_pool(&features)?
    } else {
        counters.cov_pool += 1;
        cov_pool(&features)?
    };

    let mut head_states = Vec::new();
    let mut head_caches = Vec::new();
    let mut mlp = None;
    let output = if cfg.variant.uses_spd_head() {
        let mut x = pooled.clone();
        for w in &params.stiefel {
            let y = bimap_forward(&x, w)?;
            let (next, cache) = reeig_forward_cached(&y, cfg.head.eps_reeig)?;
            counters.bimap += 1;
            counters.reeig += 1;
            head_states.push(std::mem::replace(&mut x, next));
            head_caches.push(cache);
        }
        head_states.push(x.clone());
        match cfg.variant {
            VariantId::EulerSpd3 => {
                let factor = cholesky_lower(&x)?;
                counters.cholesky_decode += 1;
                counters.euler_decode += 1;
                let (theta, t) = euler_params_from_factor(&factor);
                HeadOutput::Euler { theta, t, factor }
            }
            VariantId::LogTangent => HeadOutput::Tangent(x),
            _ => {
                let factor = cholesky_lower(&x)?;
                counters.cholesky_decode += 1;
                HeadOutput::Params6D { params: params_from_factor(&factor), factor: Some(factor) }
            }
        }
    } else {
        let (out, cache) = mlp_forward(params, &pooled, cfg.mlp_hidden);
        counters.mlp_layers += 2;
        mlp = Some(cache);
        HeadOutput::Params6D { params: PoseParams6D::from_slice(&out), factor: None }
    };

    Ok(Trace { counters, stage_inputs, stage_pre, features, pooled, head_states, head_caches, mlp, output })
}

/// Backbone activations only (no pooling or head).
pub fn backbone_features(cfg: &ModelConfig, params: &Params, image: &FeatureMap) -> Result<FeatureMap> {
    let side = cfg.backbone.input_size;
    if image.channels != 1 || image.height != side || image.width != side {
        return invalid(format!("backbone: expected 1x{side}x{side} image"));
    }
    if params.euclidean.len() < 2 * cfg.backbone.channels.len() {
        return Err(Error::Config("backbone: missing conv parameters".into()));
    }
    let mut a = image.clone();
    for k in 0..cfg.backbone.channels.len() {
        let z = conv_forward(&a, &params.euclidean[2 * k].data, &params.euclidean[2 * k + 1].data);
        a = FeatureMap { data: z.data.iter().map(|&v| silu(v)).collect(), ..z };
    }
    Ok(a)
}

fn upper_triangle(m: &Mat) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for p in 0..n {
        for q in p..n {
            out.push(m[(p, q)]);
        }
    }
    out
}

fn mlp_forward(params: &Params, pooled: &Mat, hidden: usize) -> (Vec<f64>, MlpCache) {
    let k = params.euclidean.len() - 4;
    let (w1, b1) = (&params.euclidean[k].data, &params.euclidean[k + 1].data);
    let (w2, b2) = (&params.euclidean[k + 2].data, &params.euclidean[k + 3].data);
    let input = upper_triangle(pooled);
    let d = input.len();
    let hidden_pre: Vec<f64> =
        (0..hidden).map(|i| b1[i] + w1[i * d..(i + 1) * d].iter().zip(&input).map(|(a, b)| a * b).sum::<f64>()).collect();
    let h: Vec<f64> = hidden_pre.iter().map(|&z| silu(z)).collect();
    let out = (0..9).map(|o| b2[o] + w2[o * hidden..(o + 1) * hidden].iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()).collect();
    (out, MlpCache { input, hidden_pre, hidden: h })
}

/// Fills the MLP gradient slots; returns `∂/∂Σ̂`.
fn mlp_backward(params: &Params, cache: &MlpCache, d_out: &[f64; 9], n: usize, grads: &mut [Vec<f64>]) -> Mat {
    let k = params.euclidean.len() - 4;
    let h = cache.hidden.len();
    let d = cache.input.len();
    let (w1, w2) = (&params.euclidean[k].data, &params.euclidean[k + 2].data);
    let mut dh = vec![0.0; h];
    for o in 0..9 {
        grads[k + 3][o] += d_out[o];
        for i in 0..h {
            grads[k + 2][o * h + i] += d_out[o] * cache.hidden[i];
            dh[i] += d_out[o] * w2[o * h + i];
        }
    }
    let mut dx = vec![0.0; d];
    for i in 0..h {
        let g = dh[i] * silu_grad(cache.hidden_pre[i]);
        grads[k + 1][i] += g;
        for j in 0..d {
            grads[k][i * d + j] += g * cache.input[j];
            dx[j] += g * w1[i * d + j];
        }
    }
    let mut d_pooled = Mat::zeros(n, n);
    let mut idx = 0;
    for p in 0..n {
        for q in p..n {
            d_pooled[(p, q)] = dx[idx];
            idx += 1;
        }
    }
    d_pooled
}

/// Point estimate with the translation still in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub rotation: Matrix3<f64>,
    pub t_norm: Vector3<f64>,
}

pub fn predict(cfg: &ModelConfig, params: &Params, image: &FeatureMap) -> Result<(Prediction, OpCounters)> {
    let trace = forward(cfg, params, image)?;
    let mut counters = trace.counters;
    let pred = match &trace.output {
        HeadOutput::Params6D { params: p, .. } => {
            counters.gram_schmidt += 1;
            Prediction { rotation: gram_schmidt_so3(&p.u, &p.v)?, t_norm: p.t }
        }
        HeadOutput::Euler { theta, t, .. } => Prediction { rotation: euler_to_rotation(theta), t_norm: *t },
        HeadOutput::Tangent(s) => {
            let p = params_from_factor(&cholesky_lower(s)?);
            counters.cholesky_decode += 1;
            counters.gram_schmidt += 1;
            Prediction { rotation: gram_schmidt_so3(&p.u, &p.v)?, t_norm: p.t }
        }
    };
    Ok((pred, counters))
}

/// Gradients in the layout of [`Params`]; Stiefel entries are Euclidean (unprojected).
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub euclidean: Vec<Vec<f64>>,
    pub stiefel: Vec<Mat>,
}

impl Grads {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            euclidean: params.euclidean.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            stiefel: params.stiefel.iter().map(|w| Mat::zeros(w.rows(), w.cols())).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Grads, s: f64) {
        for (a, b) in self.euclidean.iter_mut().zip(&other.euclidean) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
        for (a, b) in self.stiefel.iter_mut().zip(&other.stiefel) {
            *a += b * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.euclidean.iter().flatten().all(|v| v.is_finite())
            && self.stiefel.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Training loss of `cfg.variant` on one example and its gradient.
pub fn loss_and_grad(
    cfg: &ModelConfig,
    params: &Params,
    ex: &Example,
    lambda: f64,
) -> Result<(LossBreakdown, Grads, OpCounters)> {
    let trace = forward(cfg, params, &ex.image)?;
    let mut counters = trace.counters;
    let mut grads = Grads::zeros_like(params);
    let target = &ex.target;

    let (loss, d_pooled) = match &trace.output {
        HeadOutput::Params6D { params: p, factor } => {
            let (loss, dp) = pose_loss(p, &target.rotation, &target.t_norm, lambda)?;
            counters.gram_schmidt += 1;
            let d_pooled = match factor {
                Some(l) => {
                    let d_sigma = cholesky_backward(l, &params_from_factor_backward(l, &dp))?;
                    head_backward(&trace, params, d_sigma, &mut grads)?
                }
                None => {
                    let cache = trace.mlp.as_ref().expect("mlp cache");
                    mlp_backward(params, cache, &dp.to_array(), trace.pooled.nrows(), &mut grads.euclidean)
                }
            };
            (loss, d_pooled)
        }
        HeadOutput::Euler { theta, t, factor } => {
            let (loss, d_theta, d_t) = euler_pose_loss(theta, t, &target.rotation, &target.t_norm)?;
            let d_l = euler_params_from_factor_backward(factor, &d_theta, &d_t);
            let d_sigma = cholesky_backward(factor, &d_l)?;
            (loss, head_backward(&trace, params, d_sigma, &mut grads)?)
        }
        HeadOutput::Tangent(s) => {
            let gt = encode_pose_to_spd(&PoseParams6D::from_rotation(&target.rotation, target.t_norm))?;
            let (value, d_s) = log_tangent_frobenius_loss(s, gt.as_mat())?;
            counters.log_eig += 2;
            (LossBreakdown::total_only(value), head_backward(&trace, params, d_s, &mut grads)?)
        }
    };

    let d_features = if cfg.variant == VariantId::ChannelCov {
        channel_cov_pool_backward(&trace.features, &d_pooled)?
    } else {
        cov_pool_backward(&trace.features, &d_pooled)?
    };
    backbone_backward(&trace, params, d_features, &mut grads.euclidean);
    Ok((loss, grads, counters))
}

fn head_backward(trace: &Trace, params: &Params, d_out: Mat, grads: &mut Grads) -> Result<Mat> {
    let mut d = d_out;
    for l in (0..params.stiefel.len()).rev() {
        let d_y = reeig_backward_cached(&trace.head_caches[l], &d)?;
        let (d_x, d_w) = bimap_backward(&trace.head_states[l], &params.stiefel[l], &d_y)?;
        grads.stiefel[l] += d_w;
        d = d_x;
    }
    Ok(d)
}

fn backbone_backward(trace: &Trace, params: &Params, d_features: FeatureMap, grads: &mut [Vec<f64>]) {
    let mut d = d_features;
    for k in (0..trace.stage_pre.len()).rev() {
        let z = &trace.stage_pre[k];
        let dz = FeatureMap { data: d.data.iter().zip(&z.data).map(|(g, &v)| g * silu_grad(v)).collect(), ..z.clone() };
        let (dx, dw, db) = conv_backward(&trace.stage_inputs[k], &params.euclidean[2 * k].data, &dz);
        grads[2 * k].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        grads[2 * k + 1].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        d = dx;
    }
}

/// Adam for Euclidean tensors, Riemannian SGD for BiMap weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    pub adam: AdamState,
    pub stiefel: StiefelOptState,
}

impl Optimizers {
    pub fn new(lr_adam: f64, lr_stiefel: f64) -> Result<Self> {
        if !(lr_adam >= 0.0 && lr_adam.is_finite()) {
            return invalid(format!("adam lr must be non-negative, got {lr_adam}"));
        }
        Ok(Self { adam: AdamState::new(lr_adam), stiefel: StiefelOptState::new(lr_stiefel)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    /// Ids skipped because their 6D output was degenerate.
    pub skipped: Vec<usize>,
}

/// Per-example losses and gradients in batch order; degenerate rotations are `None`.
fn batch_terms(
    cfg: &ModelConfig,
    params: &Params,
    batch: &[&Example],
    lambda: f64,
) -> Result<Vec<Option<(LossBreakdown, Grads)>>> {
    let results: Vec<Result<(LossBreakdown, Grads, OpCounters)>> =
        batch.par_iter().map(|ex| loss_and_grad(cfg, params, ex, lambda)).collect();
    results
        .into_iter()
        .zip(batch)
        .map(|(r, ex)| match r {
            Ok((l, g, _)) => {
                if !l.total.is_finite() {
                    return Err(Error::DivergenceDetected(format!("sample {}: loss {:?}", ex.id, l)));
                }
                Ok(Some((l, g)))
            }
            Err(Error::DegenerateRotation(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// One optimization step on the batch mean loss.
pub fn train_step(
    cfg: &ModelConfig,
    params: &mut Params,
    opt: &mut Optimizers,
    batch: &[&Example],
    lambda: f64,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return invalid("train_step: empty batch");
    }
    let terms = batch_terms(cfg, params, batch, lambda)?;
    let skipped: Vec<usize> = terms.iter().zip(batch).filter(|(t, _)| t.is_none()).map(|(_, ex)| ex.id).collect();
    let kept: Vec<&(LossBreakdown, Grads)> = terms.iter().flatten().collect();
    if kept.is_empty() {
        return Ok(StepOutcome { loss: LossBreakdown::default(), skipped });
    }
    let scale = 1.0 / kept.len() as f64;
    let mut grads = Grads::zeros_like(params);
    for (_, g) in &kept {
        grads.add_scaled(g, scale);
    }
    if !grads.is_finite() {
        return Err(Error::DivergenceDetected(format!("non-finite gradient in batch {:?}", ids(batch))));
    }
    let losses: Vec<LossBreakdown> = kept.iter().map(|(l, _)| *l).collect();
    let loss = LossBreakdown::mean(&losses).unwrap_or_default();

    let mut data: Vec<Vec<f64>> = params.euclidean.iter_mut().map(|t| std::mem::take(&mut t.data)).collect();
    let adam = opt.adam.step(&mut data, &grads.euclidean);
    for (t, d) in params.euclidean.iter_mut().zip(data) {
        t.data = d;
    }
    adam?;
    opt.stiefel.step(&mut params.stiefel, &grads.stiefel)?;
    Ok(StepOutcome { loss, skipped })
}

fn ids(batch: &[&Example]) -> Vec<usize> {
    batch.iter().map(|e| e.id).collect()
}

/// Mean training loss over `examples` without updating anything.
pub fn evaluate_loss(cfg: &ModelConfig, params: &Params, examples: &[Example], lambda: f64) -> Result<LossBreakdown> {
    let losses: Vec<Result<Option<LossBreakdown>>> = examples
        .par_iter()
        .map(|ex| match forward_loss(cfg, params, ex, lambda) {
            Ok(l) => Ok(Some(l)),
            Err(Error::DegenerateRotation(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let kept: Vec<LossBreakdown> = losses.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    LossBreakdown::mean(&kept).ok_or_else(|| Error::DivergenceDetected("no valid evaluation samples".into()))
}

/// Loss only; skips the backward pass.
pub fn forward_loss(cfg: &ModelConfig, params: &Params, ex: &Example, lambda: f64) -> Result<LossBreakdown> {
    let trace = forward(cfg, params, &ex.image)?;
    let t = &ex.target;
    Ok(match &trace.output {
        HeadOutput::Params6D { params: p, .. } => pose_loss(p, &t.rotation, &t.t_norm, lambda)?.0,
        HeadOutput::Euler { theta, t: th, .. } => euler_pose_loss(theta, th, &t.rotation, &t.t_norm)?.0,
        HeadOutput::Tangent(s) => {
            let gt = encode_pose_to_spd(&PoseParams6D::from_rotation(&t.rotation, t.t_norm))?;
            LossBreakdown::total_only(log_tangent_frobenius_loss(s, gt.as_mat())?.0)
        }
    })
}
