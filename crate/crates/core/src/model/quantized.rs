use serde::{Deserialize, Serialize};

use super::forward::{add_bias_rows, forward_with, ForwardOutput, LinearKernel, LinearSite, Mode};
use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::quant::{
    dequantize, quantize_symmetric, quantize_weights_int4, quantized_matmul_prepared, QuantAxis, QuantBits,
    QuantizedTensor,
};
use crate::tensor::{matmul, HalfFormat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuantScheme {
    /// INT8 vector-wise weights and activations.
    #[serde(rename = "int8-w8a8")]
    Int8W8A8,
    /// INT4 column-wise weights, float activations.
    #[serde(rename = "int4-weight-only")]
    Int4WeightOnly,
}

impl QuantScheme {
    pub const ALL: [QuantScheme; 2] = [QuantScheme::Int8W8A8, QuantScheme::Int4WeightOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantScheme::Int8W8A8 => "int8-w8a8",
            QuantScheme::Int4WeightOnly => "int4-weight-only",
        }
    }

    /// Quantize one weight matrix the way this scheme stores it.
    pub fn quantize_weight(self, w: &Tensor) -> Result<QuantizedTensor> {
        match self {
            QuantScheme::Int8W8A8 => quantize_symmetric(w, QuantAxis::PerColumn, QuantBits::Int8),
            QuantScheme::Int4WeightOnly => quantize_weights_int4(w),
        }
    }
}

impl std::fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "int8-w8a8" | "int8" | "w8a8" => Ok(QuantScheme::Int8W8A8),
            "int4-weight-only" | "int4" | "w4" => Ok(QuantScheme::Int4WeightOnly),
            other => Err(Error::Config(format!("unknown quantization scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
enum PreparedWeight {
    Int8(QuantizedTensor),
    /// INT4 codes expanded back to float once, for weight-only matmuls.
    Dequantized(Tensor),
}

impl PreparedWeight {
    fn new(scheme: QuantScheme, w: &Tensor) -> Result<Self> {
        let q = scheme.quantize_weight(w)?;
        Ok(match scheme {
            QuantScheme::Int8W8A8 => PreparedWeight::Int8(q),
            QuantScheme::Int4WeightOnly => PreparedWeight::Dequantized(dequantize(&q)),
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            PreparedWeight::Int8(q) => quantized_matmul_prepared(x, q),
            PreparedWeight::Dequantized(w) => matmul(x, w, HalfFormat::None),
        }
    }
}

/// Quantized weights of the four per-block linears, prepared once and then
/// used as a [`LinearKernel`]. The logit projection stays float unless
/// requested.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    scheme: QuantScheme,
    blocks: Vec<[PreparedWeight; 4]>,
    output: Option<PreparedWeight>,
}

impl QuantizedModel {
    pub fn new(params: &Parameters, scheme: QuantScheme) -> Result<Self> {
        let blocks = params
            .blocks
            .iter()
            .map(|b| {
                Ok([
                    PreparedWeight::new(scheme, &b.attn_kqv_w)?,
                    PreparedWeight::new(scheme, &b.attn_out_w)?,
                    PreparedWeight::new(scheme, &b.mlp_up_w)?,
                    PreparedWeight::new(scheme, &b.mlp_down_w)?,
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scheme, blocks, output: None })
    }

    /// Also quantize the logit projection.
    pub fn with_output_projection(mut self, params: &Parameters) -> Result<Self> {
        self.output = Some(PreparedWeight::new(self.scheme, &params.output_embedding)?);
        Ok(self)
    }

    pub fn scheme(&self) -> QuantScheme {
        self.scheme
    }

    pub fn forward(
        &self,
        params: &Parameters,
        cfg: &ModelConfig,
        tokens: &[u32],
        capture: bool,
    ) -> Result<ForwardOutput> {
        if self.blocks.len() != params.blocks.len() {
            return Err(Error::Shape("quantized model and parameters differ in depth".into()));
        }
        forward_with(params, cfg, tokens, Mode::Eval, HalfFormat::None, self, capture)
    }
}

impl LinearKernel for QuantizedModel {
    fn linear(&self, block: usize, site: LinearSite, x: &Tensor, _w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let mut y = self.blocks[block][site.index()].apply(x)?;
        add_bias_rows(&mut y, b, HalfFormat::None);
        Ok(y)
    }

    fn output_projection(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        match &self.output {
            Some(p) => p.apply(x),
            None => matmul(x, w, HalfFormat::None),
        }
    }
}

/// Eval-mode forward pass with the four block linears quantized per `scheme`.
pub fn forward_quantized(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[u32],
    scheme: QuantScheme,
    capture: bool,
) -> Result<ForwardOutput> {
    QuantizedModel::new(params, scheme)?.forward(params, cfg, tokens, capture)
}
