//! Quantization-sensitivity diagnostics: RMSE, per-token spread, layernorm
//! gain spread, spectral norm, weight histograms and outlier-dimension census.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::model::{forward, ActivationTrace, LinearSite, Mode, ModelConfig, Parameters};
use crate::quant::{dequantize, quantize_symmetric, QuantAxis, QuantBits};
use crate::tensor::{HalfFormat, Tensor};

/// Root-mean-square difference of two same-shape tensors.
pub fn rmse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = x.data().iter().zip(x_hat.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok((ss / x.len() as f64).sqrt())
}

fn population_std(v: &[f32]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    (v.iter().map(|&a| (a as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean_and_std(v: &[f32]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().map(|&a| a as f64).sum::<f64>() / n;
    (mean, population_std(v))
}

/// Mean over rows of the population standard deviation across each row.
pub fn mean_token_std(x: &Tensor) -> f64 {
    if x.rows() == 0 {
        return 0.0;
    }
    (0..x.rows()).map(|i| population_std(x.row(i))).sum::<f64>() / x.rows() as f64
}

/// Population standard deviation of a layernorm gain vector.
pub fn gain_std(g: &[f32]) -> f64 {
    population_std(g)
}

pub const SPECTRAL_ITERS: usize = 1000;
pub const SPECTRAL_TOL: f64 = 1e-9;

/// Largest singular value by power iteration on `WᵀW`, started from the
/// normalized all-ones vector. Stops after `iters` iterations or when two
/// successive estimates differ by less than `tol`.
pub fn spectral_norm(w: &Tensor, iters: usize, tol: f64) -> Result<f64> {
    if w.is_empty() {
        return domain_err("spectral norm of an empty matrix");
    }
    if iters == 0 {
        return domain_err("power iteration needs at least one iteration");
    }
    let (r, c) = w.shape();
    let a: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut v = vec![1.0 / (c as f64).sqrt(); c];
    let mut u = vec![0.0f64; r];
    let mut sigma = 0.0;
    for _ in 0..iters {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = a[i * c..(i + 1) * c].iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let est = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut z = vec![0.0f64; c];
        for (i, &ui) in u.iter().enumerate() {
            for (zj, &aij) in z.iter_mut().zip(&a[i * c..(i + 1) * c]) {
                *zj += aij * ui;
            }
        }
        let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if zn == 0.0 {
            return Ok(est);
        }
        v.iter_mut().zip(&z).for_each(|(vj, zj)| *vj = zj / zn);
        let done = (est - sigma).abs() < tol;
        sigma = est;
        if done {
            break;
        }
    }
    Ok(sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ThresholdMode {
    /// `|α| > tau`.
    Constant { tau: f32 },
    /// `|α − μ_token| > c · σ_token`.
    Zscore { c: f32 },
}

/// Denominator of the token fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenFraction {
    /// Tokens counted over all captured layers together.
    #[default]
    Global,
    /// A layer counts only if its own token fraction is exceeded.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierCriteria {
    pub mode: ThresholdMode,
    pub layer_fraction: f64,
    pub token_fraction: f64,
    pub sample_count: usize,
    #[serde(default)]
    pub token_denominator: TokenFraction,
}

impl OutlierCriteria {
    pub fn constant(tau: f32) -> Self {
        Self {
            mode: ThresholdMode::Constant { tau },
            layer_fraction: 0.25,
            token_fraction: 0.06,
            sample_count: 20,
            token_denominator: TokenFraction::Global,
        }
    }

    pub fn zscore(c: f32) -> Self {
        Self { mode: ThresholdMode::Zscore { c }, ..Self::constant(1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        if !frac_ok(self.layer_fraction) || !frac_ok(self.token_fraction) {
            return Err(Error::Config("outlier fractions must lie in (0, 1]".into()));
        }
        let positive = match self.mode {
            ThresholdMode::Constant { tau } => tau > 0.0,
            ThresholdMode::Zscore { c } => c > 0.0,
        };
        if !positive {
            return Err(Error::Config("outlier threshold must be positive".into()));
        }
        if self.sample_count == 0 {
            return Err(Error::Config("sample_count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.mode {
            ThresholdMode::Constant { tau } => format!("tau={tau}"),
            ThresholdMode::Zscore { c } => format!("zscore={c}"),
        }
    }
}

/// Per-token exceedance masks of one captured layer, `[token][dim]`.
fn exceed_mask(x: &Tensor, mode: ThresholdMode) -> Vec<Vec<bool>> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            match mode {
                ThresholdMode::Constant { tau } => row.iter().map(|&a| a.abs() > tau).collect(),
                ThresholdMode::Zscore { c } => {
                    let (mu, sigma) = mean_and_std(row);
                    row.iter().map(|&a| (a as f64 - mu).abs() > c as f64 * sigma).collect()
                }
            }
        })
        .collect()
}

fn trace_width(trace: &ActivationTrace) -> Result<usize> {
    let first = trace.layers.first().ok_or_else(|| Error::Shape("trace has no captured layers".into()))?;
    let w = first.input.cols();
    if trace.layers.iter().any(|l| l.input.cols() != w) {
        return shape_err("captured layers differ in width");
    }
    Ok(w)
}

/// Dimensions flagged in a single trace.
pub fn flagged_dimensions(trace: &ActivationTrace, crit: &OutlierCriteria) -> Result<Vec<usize>> {
    let width = trace_width(trace)?;
    let n_layers = trace.layers.len();
    let masks: Vec<_> = trace.layers.iter().map(|l| exceed_mask(&l.input, crit.mode)).collect();
    let total_tokens: usize = trace.layers.iter().map(|l| l.input.rows()).sum();
    let mut out = Vec::new();
    for d in 0..width {
        let per_layer: Vec<usize> = masks.iter().map(|m| m.iter().filter(|row| row[d]).count()).collect();
        let (layer_hits, token_ok) = match crit.token_denominator {
            TokenFraction::Global => {
                let hits = per_layer.iter().filter(|&&n| n > 0).count();
                let tokens: usize = per_layer.iter().sum();
                (hits, total_tokens > 0 && tokens as f64 / total_tokens as f64 > crit.token_fraction)
            }
            TokenFraction::PerLayer => {
                let hits = per_layer
                    .iter()
                    .zip(&trace.layers)
                    .filter(|(&n, l)| l.input.rows() > 0 && n as f64 / l.input.rows() as f64 > crit.token_fraction)
                    .count();
                (hits, true)
            }
        };
        if layer_hits as f64 / n_layers as f64 > crit.layer_fraction && token_ok {
            out.push(d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierCensus {
    /// Dimensions flagged in every sample.
    pub dimensions: Vec<usize>,
    /// Mean over samples of the percentage of token positions where some
    /// outlier dimension exceeds the threshold in some layer.
    pub pct_seq_affected: f64,
    /// Mean over samples of the percentage of captured layers where some
    /// outlier dimension exceeds the threshold at some token.
    pub pct_layers_affected: f64,
    pub samples: usize,
}

/// Outlier dimensions common to all `traces`.
pub fn detect_outliers(traces: &[ActivationTrace], crit: &OutlierCriteria) -> Result<OutlierCensus> {
    crit.validate()?;
    if traces.len() < crit.sample_count {
        return domain_err(format!("{} traces given, criteria need {}", traces.len(), crit.sample_count));
    }
    let width = trace_width(&traces[0])?;
    let n_layers = traces[0].layers.len();
    for t in traces {
        if trace_width(t)? != width || t.layers.len() != n_layers {
            return shape_err("traces differ in layer count or width");
        }
    }
    let mut common: Option<Vec<usize>> = None;
    for t in traces {
        let f = flagged_dimensions(t, crit)?;
        common = Some(match common {
            None => f,
            Some(c) => c.into_iter().filter(|d| f.contains(d)).collect(),
        });
    }
    let dimensions = common.unwrap_or_default();
    let (mut seq, mut layers) = (0.0, 0.0);
    if !dimensions.is_empty() {
        for t in traces {
            let masks: Vec<_> = t.layers.iter().map(|l| exceed_mask(&l.input, crit.mode)).collect();
            let hit = |row: &Vec<bool>| dimensions.iter().any(|&d| row[d]);
            let positions = t.layers.iter().map(|l| l.input.rows()).max().unwrap_or(0);
            let affected_pos = (0..positions)
                .filter(|&p| masks.iter().any(|m| m.get(p).is_some_and(hit)))
                .count();
            let affected_layers = masks.iter().filter(|m| m.iter().any(hit)).count();
            if positions > 0 {
                seq += affected_pos as f64 / positions as f64;
            }
            layers += affected_layers as f64 / n_layers as f64;
        }
        seq = 100.0 * seq / traces.len() as f64;
        layers = 100.0 * layers / traces.len() as f64;
    }
    Ok(OutlierCensus { dimensions, pct_seq_affected: seq, pct_layers_affected: layers, samples: traces.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` equal-width edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Equal-width histogram over the value range of `w`.
pub fn weight_histogram(w: &Tensor, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return domain_err("histogram needs at least one bin");
    }
    if !w.all_finite() {
        return domain_err("histogram of non-finite values");
    }
    let (lo, hi) = w
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    if w.is_empty() {
        return Ok(Histogram { edges: vec![0.0; bins + 1], counts: vec![0; bins] });
    }
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| if k == bins { hi } else { lo + width * k as f64 }).collect();
    let mut counts = vec![0u64; bins];
    for &v in w.data() {
        let k = if width == 0.0 { 0 } else { (((v as f64 - lo) / width) as usize).min(bins - 1) };
        counts[k] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// `count` evenly spaced windows of `len` bytes from a held-out corpus.
pub fn probe_windows(corpus: &[u8], count: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    if count == 0 || len == 0 || corpus.len() < len {
        return domain_err(format!("cannot cut {count} windows of {len} bytes from {} bytes", corpus.len()));
    }
    let slack = corpus.len() - len;
    Ok((0..count)
        .map(|k| {
            let s = if count == 1 { 0 } else { slack * k / (count - 1) };
            corpus[s..s + len].iter().map(|&b| b as u32).collect()
        })
        .collect())
}

/// Eval-mode traces for a probe set, labelled by probe index.
pub fn probe_traces(params: &Parameters, cfg: &ModelConfig, probe: &[Vec<u32>]) -> Result<Vec<ActivationTrace>> {
    probe
        .iter()
        .enumerate()
        .map(|(i, seq)| {
            let out = forward(params, cfg, seq, Mode::Eval, HalfFormat::None, true)?;
            let mut trace = out.trace.expect("capture requested");
            trace.sample_id = i as u64;
            Ok(trace)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub block: usize,
    /// INT8 per-token quantization RMSE of the attn-kqv-proj input.
    pub rmse: f64,
    pub mean_token_std: f64,
    pub gain_std_ln1: f64,
    pub gain_std_ln2: f64,
    pub spectral_norm_kqv: f64,
    pub kqv_histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusEntry {
    pub criteria: OutlierCriteria,
    pub census: OutlierCensus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub blocks: Vec<BlockDiagnostics>,
    pub censuses: Vec<CensusEntry>,
}

impl DiagnosticsReport {
    /// Block-averaged `(rmse, mean_token_std, gain_std_ln1, gain_std_ln2, spectral_norm_kqv)`.
    pub fn averages(&self) -> [f64; 5] {
        let n = self.blocks.len().max(1) as f64;
        let mut s = [0.0; 5];
        for b in &self.blocks {
            for (acc, v) in s.iter_mut().zip([b.rmse, b.mean_token_std, b.gain_std_ln1, b.gain_std_ln2, b.spectral_norm_kqv]) {
                *acc += v / n;
            }
        }
        s
    }
}

/// The default outlier rules: constant 6.0, constant 4.2 and z-score 4.
pub fn default_criteria(sample_count: usize) -> Vec<OutlierCriteria> {
    [OutlierCriteria::constant(6.0), OutlierCriteria::constant(4.2), OutlierCriteria::zscore(4.0)]
        .into_iter()
        .map(|c| OutlierCriteria { sample_count, ..c })
        .collect()
}

/// Full diagnostics of one checkpoint over a probe set.
pub fn diagnose_model(
    params: &Parameters,
    cfg: &ModelConfig,
    probe: &[Vec<u32>],
    criteria: &[OutlierCriteria],
    hist_bins: usize,
) -> Result<DiagnosticsReport> {
    if probe.is_empty() {
        return domain_err("empty probe set");
    }
    let traces = probe_traces(params, cfg, probe)?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for (l, bp) in params.blocks.iter().enumerate() {
        let (mut ss, mut n, mut std_sum, mut tokens) = (0.0f64, 0usize, 0.0f64, 0usize);
        for t in &traces {
            let x = &t
                .layers
                .iter()
                .find(|c| c.block == l && c.site == LinearSite::AttnKqv)
                .expect("every block is captured")
                .input;
            let x_hat = dequantize(&quantize_symmetric(x, QuantAxis::PerRow, QuantBits::Int8)?);
            ss += rmse(x, &x_hat)?.powi(2) * x.len() as f64;
            n += x.len();
            std_sum += mean_token_std(x) * x.rows() as f64;
            tokens += x.rows();
        }
        blocks.push(BlockDiagnostics {
            block: l,
            rmse: (ss / n as f64).sqrt(),
            mean_token_std: std_sum / tokens as f64,
            gain_std_ln1: gain_std(bp.ln1_gain.data()),
            gain_std_ln2: gain_std(bp.ln2_gain.data()),
            spectral_norm_kqv: spectral_norm(&bp.attn_kqv_w, SPECTRAL_ITERS, SPECTRAL_TOL)?,
            kqv_histogram: weight_histogram(&bp.attn_kqv_w, hist_bins)?,
        });
    }
    let censuses = criteria
        .iter()
        .map(|c| Ok(CensusEntry { criteria: *c, census: detect_outliers(&traces, c)? }))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticsReport { blocks, censuses })
}
