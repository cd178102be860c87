//! Experiment specification: a JSON file describing a variant grid, seeds,
//! model and training base configuration, corpus and output locations.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ptq_core::train::TrainConfig;
use ptq_core::{HalfFormat, ModelConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

/// One point of the optimization grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub weight_decay: f32,
    pub grad_clip: Option<f32>,
    pub dropout_p: f32,
    pub half: HalfFormat,
}

fn fmt_clip(c: Option<f32>) -> String {
    c.map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl Variant {
    pub fn of(train: &TrainConfig) -> Self {
        Self { weight_decay: train.weight_decay, grad_clip: train.grad_clip, dropout_p: train.dropout_p, half: train.half }
    }

    /// Human-readable name, e.g. `wd=0.1,gc=none,dropout=0,half=bf16`.
    pub fn name(&self) -> String {
        format!(
            "wd={},gc={},dropout={},half={}",
            self.weight_decay,
            fmt_clip(self.grad_clip),
            self.dropout_p,
            self.half
        )
    }

    /// Filesystem-safe id of this variant trained with `seed`.
    pub fn run_id(&self, seed: u64) -> String {
        format!(
            "wd{}-gc{}-do{}-{}-s{seed}",
            self.weight_decay,
            fmt_clip(self.grad_clip),
            self.dropout_p,
            self.half
        )
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            dropout_p: self.dropout_p,
            half: self.half,
            seed,
            ..base.clone()
        }
    }
}

/// Axis lists of a cartesian grid. A missing axis takes the base training value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub weight_decay: Option<Vec<f32>>,
    pub grad_clip: Option<Vec<Option<f32>>>,
    pub dropout_p: Option<Vec<f32>>,
    pub half: Option<Vec<HalfFormat>>,
}

/// A single grid or a union of grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    One(GridAxes),
    Many(Vec<GridAxes>),
}

impl Default for Grid {
    fn default() -> Self {
        Grid::One(GridAxes::default())
    }
}

/// Evaluation and diagnostics settings applied at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Tail fraction of the corpus held out from training.
    pub heldout_fraction: f64,
    /// Bytes of the held-out split scored for perplexity and accuracy.
    pub heldout_eval_bytes: usize,
    pub mc_items: usize,
    pub mc_prompt_len: usize,
    pub mc_choice_len: usize,
    pub mc_choices: usize,
    pub mc_seed: u64,
    /// Number of probe windows for activation diagnostics.
    pub probe_windows: usize,
    pub hist_bins: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.05,
            heldout_eval_bytes: 16384,
            mc_items: 64,
            mc_prompt_len: 48,
            mc_choice_len: 8,
            mc_choices: 4,
            mc_seed: 0,
            probe_windows: 8,
            hist_bins: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub grid: Grid,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub corpus: PathBuf,
    /// Steps between checkpoints; overrides `train.checkpoint_every` when set.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    pub output_dir: PathBuf,
    /// Maximum concurrent runs.
    #[serde(default = "one")]
    pub jobs: usize,
    /// Store optimizer moments in every checkpoint, not only the last.
    #[serde(default)]
    pub checkpoint_optimizer: bool,
    /// Reuse runs whose directory already holds a summary and results table.
    #[serde(default)]
    pub resume: bool,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn one() -> usize {
    1
}

/// A planned run: one variant trained with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub variant: Variant,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut spec = Self::from_json(&text)?;
        // Relative paths in the file are relative to the file.
        if let Some(dir) = path.parent() {
            if spec.corpus.is_relative() {
                spec.corpus = dir.join(&spec.corpus);
            }
            if spec.output_dir.is_relative() {
                spec.output_dir = dir.join(&spec.output_dir);
            }
        }
        Ok(spec)
    }

    /// Base training config with the checkpoint cadence applied.
    pub fn base_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if let Some(c) = self.checkpoint_every {
            t.checkpoint_every = c;
        }
        t
    }

    /// Distinct variants in grid order.
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let base = Variant::of(&self.train);
        let grids = match &self.grid {
            Grid::One(g) => std::slice::from_ref(g),
            Grid::Many(gs) => gs.as_slice(),
        };
        let mut out: Vec<Variant> = Vec::new();
        for g in grids {
            let wds = g.weight_decay.clone().unwrap_or_else(|| vec![base.weight_decay]);
            let gcs = g.grad_clip.clone().unwrap_or_else(|| vec![base.grad_clip]);
            let dps = g.dropout_p.clone().unwrap_or_else(|| vec![base.dropout_p]);
            let halves = g.half.clone().unwrap_or_else(|| vec![base.half]);
            for &weight_decay in &wds {
                for &grad_clip in &gcs {
                    for &dropout_p in &dps {
                        for &half in &halves {
                            let v = Variant { weight_decay, grad_clip, dropout_p, half };
                            if !out.contains(&v) {
                                out.push(v);
                            }
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(LabError::Config("variant grid is empty".into()));
        }
        Ok(out)
    }

    /// Every (variant, seed) run, validated, with unique ids.
    pub fn plan(&self) -> Result<Vec<RunPlan>> {
        if self.seeds.is_empty() {
            return Err(LabError::Config("seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(LabError::Config("jobs must be at least 1".into()));
        }
        if self.checkpoint_every == Some(0) || self.train.checkpoint_every == 0 {
            return Err(LabError::Config("checkpoint cadence must be at least 1".into()));
        }
        let e = &self.eval;
        if !(e.heldout_fraction > 0.0 && e.heldout_fraction < 1.0) {
            return Err(LabError::Config("eval.heldout_fraction must lie in (0, 1)".into()));
        }
        if e.probe_windows == 0 || e.hist_bins == 0 || e.heldout_eval_bytes < 2 {
            return Err(LabError::Config("eval probe_windows, hist_bins and heldout_eval_bytes must be positive".into()));
        }
        self.model.validate()?;
        let base = self.base_train();
        let mut ids = HashSet::new();
        let mut plans = Vec::new();
        for v in self.variants()? {
            for &seed in &self.seeds {
                let train = v.apply(&base, seed);
                train.validate().map_err(|err| {
                    let msg = match err {
                        ptq_core::Error::Config(m) => m,
                        other => other.to_string(),
                    };
                    LabError::Config(format!("variant {}: {msg}", v.name()))
                })?;
                let model_cfg = train.model_config(&self.model);
                model_cfg.validate()?;
                if train.seq_len > model_cfg.max_seq {
                    return Err(LabError::Config(format!(
                        "train.seq_len {} exceeds model.max_seq {}",
                        train.seq_len, model_cfg.max_seq
                    )));
                }
                let run_id = v.run_id(seed);
                if !ids.insert(run_id.clone()) {
                    return Err(LabError::Config(format!("duplicate run {run_id}")));
                }
                plans.push(RunPlan { run_id, variant: v, seed, train });
            }
        }
        Ok(plans)
    }
}
