//! AdamW training loop with the experimental axes: weight decay, gradient
//! clipping, dropout and emulated half precision.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::model::{backward_into, Mode, ModelConfig, Parameters};
use crate::rng::{mix64, stream_key, SplitMix64};
use crate::tensor::HalfFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub weight_decay: f32,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub grad_clip: Option<f32>,
    pub dropout_p: f32,
    pub half: HalfFormat,
    pub peak_lr: f32,
    pub min_lr: f32,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    /// Training window length in tokens.
    pub seq_len: usize,
    pub betas: (f32, f32),
    pub adam_eps: f32,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.01,
            grad_clip: None,
            dropout_p: 0.0,
            half: HalfFormat::None,
            peak_lr: 3e-4,
            min_lr: 3e-5,
            warmup_steps: 100,
            total_steps: 3000,
            batch_size: 16,
            seq_len: 128,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive when set");
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if !(self.peak_lr >= 0.0 && self.min_lr >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return bad("batch_size and seq_len must be at least 1");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    /// The model configuration used for training under this config.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig { dropout_p: self.dropout_p, ..base.clone() }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at_step(step: u64, cfg: &TrainConfig) -> Result<f32> {
    if step > cfg.total_steps {
        return domain_err(format!("step {step} beyond total_steps {}", cfg.total_steps));
    }
    let (peak, min) = (cfg.peak_lr as f64, cfg.min_lr as f64);
    let lr = if step < cfg.warmup_steps {
        peak * step as f64 / cfg.warmup_steps as f64
    } else {
        let tau = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        min + (peak - min) * (1.0 + (std::f64::consts::PI * tau).cos()) / 2.0
    };
    Ok(lr as f32)
}

/// Squared-sum global norm over every gradient tensor.
pub fn global_norm(grads: &Parameters) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place when their global norm exceeds `threshold`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Parameters, threshold: f32) -> f64 {
    let norm = global_norm(grads);
    if norm.is_finite() && norm > threshold as f64 {
        let s = (threshold as f64 / norm) as f32;
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Adam moments for every parameter tensor. Master weights are the 32-bit
/// [`Parameters`] themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Parameters,
    pub v: Parameters,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self { m: Parameters::zeros(cfg), v: Parameters::zeros(cfg), step: 0 }
    }
}

/// One AdamW update. Decay is decoupled and applied multiplicatively, so a
/// decayed weight with zero gradient is scaled by exactly `1 - lr * wd`.
/// Layernorm parameters and biases are not decayed.
pub fn adamw_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut OptimizerState,
    lr: f32,
    cfg: &TrainConfig,
) -> Result<()> {
    let roles = params.roles();
    if grads.tensors().len() != roles.len() || state.m.tensors().len() != roles.len() {
        return Err(Error::Shape("gradient and optimizer state layout differ from parameters".into()));
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let (c1, c2) = ((1.0 - b1 as f64) as f32, (1.0 - b2 as f64) as f32);
    let bc1 = (1.0 - (b1 as f64).powi(state.step as i32)) as f32;
    let bc2 = (1.0 - (b2 as f64).powi(state.step as i32)) as f32;
    let decay = (1.0 - lr as f64 * cfg.weight_decay as f64) as f32;
    let g_all = grads.tensors();
    let mut m_all = state.m.tensors_mut();
    let mut v_all = state.v.tensors_mut();
    for (i, w) in params.tensors_mut().into_iter().enumerate() {
        let (g, m, v) = (g_all[i], &mut m_all[i], &mut v_all[i]);
        if g.shape() != w.shape() || m.shape() != w.shape() || v.shape() != w.shape() {
            return Err(Error::Shape(format!("tensor {i} shape mismatch in optimizer")));
        }
        let f = if roles[i].is_decayed() { decay } else { 1.0 };
        let (w, m, v) = (w.data_mut(), m.data_mut(), v.data_mut());
        for k in 0..w.len() {
            let gk = g.data()[k];
            m[k] = b1 * m[k] + c1 * gk;
            v[k] = b2 * v[k] + c2 * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            w[k] = w[k] * f - lr * (mh / (vh.sqrt() + cfg.adam_eps));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepEvent {
    Ok,
    Diverged,
}

/// Diverged iff the loss or any gradient is NaN or infinite.
pub fn detect_divergence(loss: f64, grads: &Parameters) -> StepEvent {
    if loss.is_finite() && grads.all_finite() {
        StepEvent::Ok
    } else {
        StepEvent::Diverged
    }
}

/// Random training windows of `seq_len + 1` bytes drawn for `step`.
pub fn sample_batch(corpus: &[u8], cfg: &TrainConfig, step: u64) -> Result<Vec<Vec<u32>>> {
    let span = cfg.seq_len + 1;
    if corpus.len() < span {
        return domain_err(format!("corpus of {} bytes shorter than window {span}", corpus.len()));
    }
    let mut rng = SplitMix64::stream(cfg.seed, "data", step);
    let starts = (corpus.len() - span + 1) as u64;
    Ok((0..cfg.batch_size)
        .map(|_| {
            let s = rng.below(starts) as usize;
            corpus[s..s + span].iter().map(|&b| b as u32).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: u64,
    pub loss: f64,
    pub lr: f32,
    pub grad_norm: f64,
    pub event: StepEvent,
}

/// Forward, backward, optional clipping and one AdamW update on `batch`.
/// `step` is the number of completed steps; the learning rate used is the
/// schedule value at `step + 1`. On divergence the parameters are left
/// untouched.
pub fn train_step(
    params: &mut Parameters,
    state: &mut OptimizerState,
    batch: &[Vec<u32>],
    step: u64,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return domain_err("empty batch");
    }
    let lr = lr_at_step(step + 1, cfg)?;
    let mut grads = Parameters::zeros(model_cfg);
    let scale = 1.0 / batch.len() as f32;
    let step_key = stream_key(cfg.seed, "dropout", step);
    let mut loss = 0.0;
    for (b, seq) in batch.iter().enumerate() {
        if seq.len() < 2 {
            return domain_err("training sequence needs at least two tokens");
        }
        let (tokens, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let mode = if model_cfg.dropout_p > 0.0 {
            Mode::Train { dropout_key: mix64(step_key ^ b as u64) }
        } else {
            Mode::Eval
        };
        loss += backward_into(params, model_cfg, tokens, targets, mode, cfg.half, scale, &mut grads)?;
    }
    loss /= batch.len() as f64;
    let event = detect_divergence(loss, &grads);
    let mut grad_norm = global_norm(&grads);
    if event == StepEvent::Diverged {
        return Ok(StepOutcome { step, loss, lr, grad_norm, event });
    }
    if let Some(c) = cfg.grad_clip {
        grad_norm = clip_global_norm(&mut grads, c);
    }
    let snapshot = (params.clone(), state.clone());
    adamw_step(params, &grads, state, lr, cfg)?;
    if !params.all_finite() {
        (*params, *state) = snapshot;
        return Ok(StepOutcome { step, loss, lr, grad_norm, event: StepEvent::Diverged });
    }
    Ok(StepOutcome { step, loss, lr, grad_norm, event })
}

/// A model, its optimizer state and the loss history of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub params: Parameters,
    pub state: OptimizerState,
    pub history: Vec<StepOutcome>,
    pub diverged_at: Option<u64>,
}

impl Trainer {
    /// Fresh run: parameters initialized from `cfg.seed`.
    pub fn new(base: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.model_config(base);
        model_cfg.validate()?;
        if cfg.seq_len > model_cfg.max_seq {
            return Err(Error::Config(format!("seq_len {} exceeds max_seq {}", cfg.seq_len, model_cfg.max_seq)));
        }
        let params = Parameters::init(&model_cfg, cfg.seed)?;
        let state = OptimizerState::new(&model_cfg);
        Ok(Self { model_cfg, cfg, params, state, history: Vec::new(), diverged_at: None })
    }

    /// Resume from saved parameters and optimizer state.
    pub fn resume(base: &ModelConfig, cfg: TrainConfig, params: Parameters, state: OptimizerState) -> Result<Self> {
        let mut t = Self::new(base, cfg)?;
        params.check_matches(&t.model_cfg)?;
        state.m.check_matches(&t.model_cfg)?;
        state.v.check_matches(&t.model_cfg)?;
        t.params = params;
        t.state = state;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    pub fn is_finished(&self) -> bool {
        self.diverged_at.is_some() || self.state.step >= self.cfg.total_steps
    }

    /// Run one step; a divergence halts the run.
    pub fn advance(&mut self, corpus: &[u8]) -> Result<StepOutcome> {
        if let Some(s) = self.diverged_at {
            return domain_err(format!("run diverged at step {s}"));
        }
        let step = self.state.step;
        let batch = sample_batch(corpus, &self.cfg, step)?;
        let out = train_step(&mut self.params, &mut self.state, &batch, step, &self.model_cfg, &self.cfg)?;
        if out.event == StepEvent::Diverged {
            self.diverged_at = Some(step);
        }
        self.history.push(out);
        Ok(out)
    }

    /// Train to `total_steps` (or divergence), calling `on_checkpoint` at
    /// step 0, every `checkpoint_every` steps and at the end.
    pub fn run<E: From<Error>>(
        &mut self,
        corpus: &[u8],
        mut on_checkpoint: impl FnMut(&Trainer) -> std::result::Result<(), E>,
    ) -> std::result::Result<(), E> {
        if self.state.step == 0 {
            on_checkpoint(self)?;
        }
        while !self.is_finished() {
            self.advance(corpus)?;
            let s = self.state.step;
            if self.diverged_at.is_none() && (s % self.cfg.checkpoint_every == 0 || s == self.cfg.total_steps) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TensorRole;

    fn cfg() -> TrainConfig {
        TrainConfig { warmup_steps: 10, total_steps: 110, peak_lr: 1e-3, min_lr: 1e-4, ..Default::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        assert_eq!(lr_at_step(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at_step(10, &c).unwrap(), 1e-3);
        assert!((lr_at_step(110, &c).unwrap() - 1e-4).abs() < 1e-10);
        assert!((lr_at_step(60, &c).unwrap() - 5.5e-4).abs() < 1e-9);
        assert!(matches!(lr_at_step(111, &c), Err(Error::Domain(_))));
        let before = lr_at_step(9, &c).unwrap();
        let after = lr_at_step(11, &c).unwrap();
        assert!((before - 1e-3).abs() <= 1.01e-4 && (after - 1e-3).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { weight_decay: -0.1, ..Default::default() },
            TrainConfig { grad_clip: Some(0.0), ..Default::default() },
            TrainConfig { dropout_p: 1.0, ..Default::default() },
            TrainConfig { warmup_steps: 3000, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, d_model: 4, n_heads: 1, d_ff: 4, vocab_size: 8, max_seq: 4, ln_eps: 1e-5, dropout_p: 0.0 }
    }

    #[test]
    fn first_adam_step() {
        let mc = tiny();
        let mut p = Parameters::zeros(&mc);
        let mut g = Parameters::zeros(&mc);
        g.output_embedding.data_mut().fill(1.0);
        let mut s = OptimizerState::new(&mc);
        let c = TrainConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut p, &g, &mut s, 0.1, &c).unwrap();
        for &w in p.output_embedding.data() {
            assert!((w as f64 + 0.1 / (1.0 + 1e-8)).abs() < 1e-7);
        }
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_gradient_decay_is_exact_and_excludes_norms() {
        let mc = tiny();
        let mut p = Parameters::init_with_std(&mc, 1, 0.5).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        let g = Parameters::zeros(&mc);
        let mut s = OptimizerState::new(&mc);
        let c = TrainConfig { weight_decay: 0.1, ..Default::default() };
        let before = p.clone();
        adamw_step(&mut p, &g, &mut s, 0.1, &c).unwrap();
        let f = (1.0f64 - 0.01) as f32;
        for ((a, b), role) in before.tensors().iter().zip(p.tensors()).zip(p.roles()) {
            for (&x, &y) in a.data().iter().zip(b.data()) {
                match role {
                    TensorRole::Embedding | TensorRole::Weight => assert_eq!(y, x * f),
                    _ => assert_eq!(y, x),
                }
            }
        }
    }

    #[test]
    fn clipping_examples() {
        let mc = tiny();
        let mut g = Parameters::zeros(&mc);
        g.final_ln_bias.data_mut()[..2].copy_from_slice(&[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.final_ln_bias.data()[0] - 0.6).abs() < 1e-7);
        assert!((g.final_ln_bias.data()[1] - 0.8).abs() < 1e-7);
        let mut h = Parameters::zeros(&mc);
        h.final_ln_gain.data_mut()[0] = 0.5;
        let copy = h.clone();
        assert_eq!(clip_global_norm(&mut h, 1.0), 0.5);
        assert_eq!(h, copy);
    }

    #[test]
    fn divergence_detection() {
        let mc = tiny();
        let mut g = Parameters::zeros(&mc);
        assert_eq!(detect_divergence(1.0, &g), StepEvent::Ok);
        assert_eq!(detect_divergence(f64::NAN, &g), StepEvent::Diverged);
        g.blocks[0].mlp_up_w.data_mut()[3] = f32::INFINITY;
        assert_eq!(detect_divergence(1.0, &g), StepEvent::Diverged);
    }

    #[test]
    fn batches_are_windows_of_the_corpus() {
        let corpus: Vec<u8> = (0..=255u8).collect();
        let c = TrainConfig { seq_len: 8, batch_size: 4, ..Default::default() };
        let b = sample_batch(&corpus, &c, 3).unwrap();
        assert_eq!(b.len(), 4);
        for w in &b {
            assert_eq!(w.len(), 9);
            assert!(w.windows(2).all(|p| p[1] == p[0] + 1));
        }
        assert_eq!(b, sample_batch(&corpus, &c, 3).unwrap());
        assert_ne!(b, sample_batch(&corpus, &c, 4).unwrap());
        assert!(sample_batch(&corpus[..8], &c, 0).is_err());
    }
}
