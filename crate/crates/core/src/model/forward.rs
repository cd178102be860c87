use serde::{Deserialize, Serialize};

use super::{ModelConfig, Parameters};
use crate::error::{domain_err, shape_err, Result};
use crate::rng::uniform_at;
use crate::tensor::{emulate_half, matmul, HalfFormat, Tensor};

/// Forward mode. Training mode carries the key of its dropout stream so a
/// forward pass and its paired backward pass draw identical masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_key: u64 },
}

/// The four per-block linear layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearSite {
    AttnKqv,
    AttnOut,
    MlpUp,
    MlpDown,
}

impl LinearSite {
    pub const ALL: [LinearSite; 4] =
        [LinearSite::AttnKqv, LinearSite::AttnOut, LinearSite::MlpUp, LinearSite::MlpDown];

    pub fn index(self) -> usize {
        match self {
            LinearSite::AttnKqv => 0,
            LinearSite::AttnOut => 1,
            LinearSite::MlpUp => 2,
            LinearSite::MlpDown => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LinearSite::AttnKqv => "attn-kqv-proj",
            LinearSite::AttnOut => "attn-out-proj",
            LinearSite::MlpUp => "mlp-up",
            LinearSite::MlpDown => "mlp-down",
        }
    }
}

/// How a linear layer `x W + b` is computed. Swapping the kernel is how the
/// quantized forward and the substitution oracles reuse one forward pass.
pub trait LinearKernel {
    fn linear(&self, block: usize, site: LinearSite, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor>;

    /// Logit projection (no bias).
    fn output_projection(&self, x: &Tensor, w: &Tensor) -> Result<Tensor>;
}

/// Plain float linears, optionally under half emulation.
#[derive(Debug, Clone, Copy)]
pub struct FloatKernel {
    pub fmt: HalfFormat,
}

pub(crate) fn add_bias_rows(y: &mut Tensor, b: &Tensor, fmt: HalfFormat) {
    let bias: Vec<f32> = b.data().iter().map(|&v| emulate_half(v, fmt)).collect();
    for i in 0..y.rows() {
        for (v, &bb) in y.row_mut(i).iter_mut().zip(&bias) {
            *v = emulate_half(*v + bb, fmt);
        }
    }
}

impl LinearKernel for FloatKernel {
    fn linear(&self, _block: usize, _site: LinearSite, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, w, self.fmt)?;
        add_bias_rows(&mut y, b, self.fmt);
        Ok(y)
    }

    fn output_projection(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        matmul(x, w, self.fmt)
    }
}

/// Captured input of one quantizable linear layer for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapture {
    pub block: usize,
    pub site: LinearSite,
    pub input: Tensor,
}

/// Post-layernorm inputs of `attn-kqv-proj` and `mlp-up` for every block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub sample_id: u64,
    pub layers: Vec<LayerCapture>,
}

impl ActivationTrace {
    pub fn site_inputs(&self, site: LinearSite) -> impl Iterator<Item = &LayerCapture> {
        self.layers.iter().filter(move |c| c.site == site)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub trace: Option<ActivationTrace>,
}

/// Layernorm result with the pieces the backward pass needs.
#[derive(Debug, Clone)]
pub struct LayerNormOutput {
    pub out: Tensor,
    /// `(x - mean) * rstd`, before gain and bias.
    pub normalized: Tensor,
    pub rstd: Vec<f32>,
}

/// Row-wise layernorm. Under a half format every intermediate is rounded.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32, fmt: HalfFormat) -> LayerNormOutput {
    let h = |v: f32| emulate_half(v, fmt);
    let (t, d) = x.shape();
    let g: Vec<f32> = gain.data().iter().map(|&v| h(v)).collect();
    let b: Vec<f32> = bias.data().iter().map(|&v| h(v)).collect();
    let mut out = Tensor::zeros(t, d);
    let mut normalized = Tensor::zeros(t, d);
    let mut rstd = Vec::with_capacity(t);
    let mut centered = vec![0.0f32; d];
    for i in 0..t {
        let row = x.row(i);
        let mean = h(row.iter().map(|&v| h(v)).sum::<f32>() / d as f32);
        let mut sq = 0.0f32;
        for (c, &v) in centered.iter_mut().zip(row) {
            *c = h(h(v) - mean);
            sq += h(*c * *c);
        }
        let var = h(sq / d as f32);
        let r = h(1.0 / h(var + eps).sqrt());
        rstd.push(r);
        let nrow = normalized.row_mut(i);
        for (n, &c) in nrow.iter_mut().zip(&centered) {
            *n = h(c * r);
        }
        let orow = out.row_mut(i);
        for j in 0..d {
            orow[j] = h(normalized.get(i, j) * g[j] + b[j]);
        }
    }
    LayerNormOutput { out, normalized, rstd }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Exact (erf) GeLU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))) as f32
}

#[inline]
pub(crate) fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (cdf + x * pdf) as f32
}

/// Natural-log probability of each target under row-wise softmax of `logits`.
pub fn token_log_probs(logits: &Tensor, targets: &[u32]) -> Result<Vec<f64>> {
    if logits.rows() != targets.len() {
        return shape_err(format!("{} logit rows vs {} targets", logits.rows(), targets.len()));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let row = logits.row(i);
            if t as usize >= row.len() {
                return domain_err(format!("target {t} outside vocabulary of {}", row.len()));
            }
            let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let sum: f64 = row.iter().map(|&z| (z as f64 - m).exp()).sum();
            Ok(row[t as usize] as f64 - m - sum.ln())
        })
        .collect()
}

/// Mean negative log-likelihood in nats per token.
pub fn nll_loss(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    if targets.is_empty() {
        return domain_err("no targets");
    }
    let lp = token_log_probs(logits, targets)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

pub(crate) struct BlockCache {
    pub ln1: LayerNormOutput,
    pub qkv: Tensor,
    pub probs: Vec<Tensor>,
    pub attn: Tensor,
    pub mask1: Option<Vec<f32>>,
    pub ln2: LayerNormOutput,
    pub up: Tensor,
    pub act: Tensor,
    pub mask2: Option<Vec<f32>>,
}

pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub lnf: LayerNormOutput,
}

pub(crate) fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return domain_err("empty token sequence");
    }
    if tokens.len() > cfg.max_seq {
        return shape_err(format!("sequence length {} exceeds max_seq {}", tokens.len(), cfg.max_seq));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return domain_err(format!("token id {t} outside vocabulary of {}", cfg.vocab_size));
    }
    Ok(())
}

/// Inverted-dropout multipliers (0 or `1/(1-p)`) for one injection point.
fn dropout_mask(mode: Mode, p: f32, block: usize, site: u64, len: usize) -> Option<Vec<f32>> {
    match mode {
        Mode::Train { dropout_key } if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let base = ((block as u64) * 2 + site) << 32;
            Some(
                (0..len as u64)
                    .map(|i| if uniform_at(dropout_key, base + i) < p as f64 { 0.0 } else { keep })
                    .collect(),
            )
        }
        _ => None,
    }
}

fn apply_mask(y: &mut Tensor, mask: &Option<Vec<f32>>, fmt: HalfFormat) {
    if let Some(m) = mask {
        y.data_mut().iter_mut().zip(m).for_each(|(v, &k)| *v = emulate_half(*v * k, fmt));
    }
}

fn residual_add(x: &mut Tensor, y: &Tensor, fmt: HalfFormat) {
    x.data_mut().iter_mut().zip(y.data()).for_each(|(a, &b)| *a = emulate_half(*a + b, fmt));
}

/// Causal multi-head attention over a packed `[t x 3d]` q|k|v tensor.
fn attention(qkv: &Tensor, cfg: &ModelConfig, fmt: HalfFormat) -> Result<(Tensor, Vec<Tensor>)> {
    let (t, d, dh) = (qkv.rows(), cfg.d_model, cfg.d_head());
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = Tensor::zeros(t, d);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for head in 0..cfg.n_heads {
        let q = qkv.column_slice(head * dh, dh);
        let k = qkv.column_slice(d + head * dh, dh);
        let v = qkv.column_slice(2 * d + head * dh, dh);
        let mut s = matmul(&q, &k.transpose(), fmt)?;
        for i in 0..t {
            let row = s.row_mut(i);
            for (j, z) in row.iter_mut().enumerate() {
                *z = if j > i { f32::NEG_INFINITY } else { emulate_half(*z * scale, fmt) };
            }
            let m = row[..=i].iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0f32;
            for z in row.iter_mut() {
                *z = (*z - m).exp();
                sum += *z;
            }
            for z in row.iter_mut() {
                *z = emulate_half(*z / sum, fmt);
            }
        }
        let o = matmul(&s, &v, fmt)?;
        out.set_column_slice(head * dh, &o);
        probs.push(s);
    }
    Ok((out, probs))
}

pub(crate) fn forward_impl(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    mode: Mode,
    fmt: HalfFormat,
    kernel: &dyn LinearKernel,
    capture: bool,
    keep_cache: bool,
) -> Result<(ForwardOutput, Option<ForwardCache>)> {
    check_tokens(cfg, tokens)?;
    params.check_matches(cfg)?;
    let ln_fmt = fmt.layernorm_format();
    let (t, d) = (tokens.len(), cfg.d_model);

    let mut x = Tensor::zeros(t, d);
    for (i, &tok) in tokens.iter().enumerate() {
        let e = params.input_embedding.row(tok as usize);
        let p = params.positional_embedding.row(i);
        for ((dst, &a), &b) in x.row_mut(i).iter_mut().zip(e).zip(p) {
            *dst = emulate_half(emulate_half(a, fmt) + emulate_half(b, fmt), fmt);
        }
    }

    let mut caches = Vec::new();
    let mut layers = Vec::new();
    for (l, bp) in params.blocks.iter().enumerate() {
        let ln1 = layer_norm(&x, &bp.ln1_gain, &bp.ln1_bias, cfg.ln_eps, ln_fmt);
        let a_in = ln1.out.to_half(fmt);
        let qkv = kernel.linear(l, LinearSite::AttnKqv, &a_in, &bp.attn_kqv_w, &bp.attn_kqv_b)?;
        let (attn, probs) = attention(&qkv, cfg, fmt)?;
        let mut y = kernel.linear(l, LinearSite::AttnOut, &attn, &bp.attn_out_w, &bp.attn_out_b)?;
        let mask1 = dropout_mask(mode, cfg.dropout_p, l, 0, t * d);
        apply_mask(&mut y, &mask1, fmt);
        residual_add(&mut x, &y, fmt);

        let ln2 = layer_norm(&x, &bp.ln2_gain, &bp.ln2_bias, cfg.ln_eps, ln_fmt);
        let m_in = ln2.out.to_half(fmt);
        let up = kernel.linear(l, LinearSite::MlpUp, &m_in, &bp.mlp_up_w, &bp.mlp_up_b)?;
        let act = up.map(|u| emulate_half(gelu(u), fmt));
        let mut down = kernel.linear(l, LinearSite::MlpDown, &act, &bp.mlp_down_w, &bp.mlp_down_b)?;
        let mask2 = dropout_mask(mode, cfg.dropout_p, l, 1, t * d);
        apply_mask(&mut down, &mask2, fmt);
        residual_add(&mut x, &down, fmt);

        if capture {
            layers.push(LayerCapture { block: l, site: LinearSite::AttnKqv, input: a_in });
            layers.push(LayerCapture { block: l, site: LinearSite::MlpUp, input: m_in });
        }
        if keep_cache {
            caches.push(BlockCache { ln1, qkv, probs, attn, mask1, ln2, up, act, mask2 });
        }
    }

    let lnf = layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias, cfg.ln_eps, ln_fmt);
    let logits = kernel.output_projection(&lnf.out.to_half(fmt), &params.output_embedding)?;
    let trace = capture.then(|| ActivationTrace { sample_id: 0, layers });
    let cache = keep_cache.then_some(ForwardCache { blocks: caches, lnf });
    Ok((ForwardOutput { logits, trace }, cache))
}

/// Float forward pass (half emulation per `fmt`).
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    mode: Mode,
    fmt: HalfFormat,
    capture: bool,
) -> Result<ForwardOutput> {
    forward_with(params, cfg, tokens, mode, fmt, &FloatKernel { fmt }, capture)
}

/// Forward pass with a caller-supplied linear kernel.
pub fn forward_with(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    mode: Mode,
    fmt: HalfFormat,
    kernel: &dyn LinearKernel,
    capture: bool,
) -> Result<ForwardOutput> {
    forward_impl(params, cfg, tokens, mode, fmt, kernel, capture, false).map(|(o, _)| o)
}
