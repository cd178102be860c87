//! Tiny pre-norm GPT decoder with untied embeddings.

mod backward;
mod forward;
mod quantized;

pub use backward::{backward, backward_into};
pub use forward::{
    forward, forward_with, gelu, layer_norm, nll_loss, token_log_probs, ActivationTrace, FloatKernel,
    ForwardOutput, LayerCapture, LayerNormOutput, LinearKernel, LinearSite, Mode,
};
pub use quantized::{forward_quantized, QuantScheme, QuantizedModel};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub ln_eps: f32,
    pub dropout_p: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 256,
            max_seq: 128,
            ln_eps: 1e-5,
            dropout_p: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("all model dimensions must be at least 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout_p must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// What a parameter tensor is, which decides weight-decay eligibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Embedding,
    Weight,
    Bias,
    LayerNormGain,
    LayerNormBias,
}

impl TensorRole {
    pub fn is_decayed(self) -> bool {
        matches!(self, TensorRole::Embedding | TensorRole::Weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn_kqv_w: Tensor,
    pub attn_kqv_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_up_w: Tensor,
    pub mlp_up_b: Tensor,
    pub mlp_down_w: Tensor,
    pub mlp_down_b: Tensor,
}

/// All learned weights. Also used as the gradient and optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub input_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub output_embedding: Tensor,
}

const BLOCK_FIELDS: [(&str, TensorRole); 12] = [
    ("ln1.gain", TensorRole::LayerNormGain),
    ("ln1.bias", TensorRole::LayerNormBias),
    ("attn_kqv_proj.weight", TensorRole::Weight),
    ("attn_kqv_proj.bias", TensorRole::Bias),
    ("attn_out_proj.weight", TensorRole::Weight),
    ("attn_out_proj.bias", TensorRole::Bias),
    ("ln2.gain", TensorRole::LayerNormGain),
    ("ln2.bias", TensorRole::LayerNormBias),
    ("mlp_up.weight", TensorRole::Weight),
    ("mlp_up.bias", TensorRole::Bias),
    ("mlp_down.weight", TensorRole::Weight),
    ("mlp_down.bias", TensorRole::Bias),
];

impl BlockParams {
    fn fields(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.attn_kqv_w,
            &self.attn_kqv_b,
            &self.attn_out_w,
            &self.attn_out_b,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_up_w,
            &self.mlp_up_b,
            &self.mlp_down_w,
            &self.mlp_down_b,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.attn_kqv_w,
            &mut self.attn_kqv_b,
            &mut self.attn_out_w,
            &mut self.attn_out_b,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_up_w,
            &mut self.mlp_up_b,
            &mut self.mlp_down_w,
            &mut self.mlp_down_b,
        ]
    }
}

/// Name and role of every parameter tensor, in canonical order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, TensorRole)> {
    let mut out = vec![
        ("input_embedding".to_string(), TensorRole::Embedding),
        ("positional_embedding".to_string(), TensorRole::Embedding),
    ];
    for l in 0..cfg.n_layers {
        for (name, role) in BLOCK_FIELDS {
            out.push((format!("blocks.{l}.{name}"), role));
        }
    }
    out.push(("final_ln.gain".into(), TensorRole::LayerNormGain));
    out.push(("final_ln.bias".into(), TensorRole::LayerNormBias));
    out.push(("output_embedding".into(), TensorRole::Embedding));
    out
}

impl Parameters {
    /// Every tensor zero, with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let block = || BlockParams {
            ln1_gain: Tensor::zeros(1, d),
            ln1_bias: Tensor::zeros(1, d),
            attn_kqv_w: Tensor::zeros(d, 3 * d),
            attn_kqv_b: Tensor::zeros(1, 3 * d),
            attn_out_w: Tensor::zeros(d, d),
            attn_out_b: Tensor::zeros(1, d),
            ln2_gain: Tensor::zeros(1, d),
            ln2_bias: Tensor::zeros(1, d),
            mlp_up_w: Tensor::zeros(d, f),
            mlp_up_b: Tensor::zeros(1, f),
            mlp_down_w: Tensor::zeros(f, d),
            mlp_down_b: Tensor::zeros(1, d),
        };
        Self {
            input_embedding: Tensor::zeros(v, d),
            positional_embedding: Tensor::zeros(cfg.max_seq, d),
            blocks: (0..cfg.n_layers).map(|_| block()).collect(),
            final_ln_gain: Tensor::zeros(1, d),
            final_ln_bias: Tensor::zeros(1, d),
            output_embedding: Tensor::zeros(d, v),
        }
    }

    /// Normal(0, 0.02) weights and embeddings, residual output projections
    /// scaled by `1/sqrt(2 n_layers)`, zero biases, unit layernorm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(cfg, seed, 0.02)
    }

    pub fn init_with_std(cfg: &ModelConfig, seed: u64, std: f32) -> Result<Self> {
        cfg.validate()?;
        let mut p = Self::zeros(cfg);
        let layout = parameter_layout(cfg);
        let resid_scale = 1.0 / (2.0 * cfg.n_layers as f32).sqrt();
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
        for (idx, ((name, role), t)) in layout.iter().zip(p.tensors_mut()).enumerate() {
            match role {
                TensorRole::Embedding | TensorRole::Weight => {
                    let mut rng = SplitMix64::stream(seed, "init", idx as u64);
                    let scale = if name.ends_with("attn_out_proj.weight") || name.ends_with("mlp_down.weight") {
                        resid_scale
                    } else {
                        1.0
                    };
                    t.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng) * scale);
                }
                TensorRole::LayerNormGain => t.data_mut().fill(1.0),
                TensorRole::Bias | TensorRole::LayerNormBias => {}
            }
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_embedding, &self.positional_embedding];
        for b in &self.blocks {
            out.extend(b.fields());
        }
        out.extend([&self.final_ln_gain, &self.final_ln_bias, &self.output_embedding]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_embedding, &mut self.positional_embedding];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.extend([&mut self.final_ln_gain, &mut self.final_ln_bias, &mut self.output_embedding]);
        out
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let cfg = self.config_shape();
        parameter_layout(&cfg).into_iter().map(|(n, _)| n).zip(self.tensors()).collect()
    }

    pub fn roles(&self) -> Vec<TensorRole> {
        parameter_layout(&self.config_shape()).into_iter().map(|(_, r)| r).collect()
    }

    /// Shape-only config recovered from the tensors (dropout and eps are not stored).
    fn config_shape(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.blocks.len(),
            d_model: self.input_embedding.cols(),
            n_heads: 1,
            d_ff: self.blocks.first().map_or(1, |b| b.mlp_up_w.cols()),
            vocab_size: self.input_embedding.rows(),
            max_seq: self.positional_embedding.rows(),
            ln_eps: 1e-5,
            dropout_p: 0.0,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn check_matches(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Parameters::zeros(cfg);
        for ((name, a), b) in want.named_tensors().into_iter().zip(self.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if want.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("layer count differs from config".into()));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }
}
