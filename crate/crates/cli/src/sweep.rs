//! Sweep runner: trains every planned run, checkpoints at the configured
//! cadence and evaluates each checkpoint in float, INT8 and INT4 modes plus
//! the diagnostics suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use ptq_core::diagnose::{default_criteria, diagnose_model, probe_windows, DiagnosticsReport};
use ptq_core::evalrun::{evaluate_tasks, generate_mc_items, McItem};
use ptq_core::train::{StepOutcome, Trainer};
use ptq_core::{ModelConfig, Parameters, QuantScheme};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::config::{EvalSettings, ExperimentSpec, RunPlan};
use crate::error::{io_err, LabError, Result};
use crate::report::{canonicalize, emit_report, from_csv, run_averages, to_csv, ReportFormat, ResultRow};

pub const FLOAT_SCHEME: &str = "float";
pub const DIAGNOSTICS_SCHEME: &str = "diagnostics";
pub const STATUS_SCHEME: &str = "status";

/// Training and held-out splits of a byte corpus. The held-out split is the tail.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

impl CorpusSplit {
    pub fn new(corpus: Vec<u8>, heldout_fraction: f64) -> Result<Self> {
        let n = corpus.len();
        let h = ((n as f64) * heldout_fraction).round() as usize;
        if h < 2 || h >= n {
            return Err(LabError::Config(format!("corpus of {n} bytes is too small to split")));
        }
        let mut train = corpus;
        let heldout = train.split_off(n - h);
        Ok(Self { train, heldout })
    }

    pub fn load(path: &Path, heldout_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::new(bytes, heldout_fraction)
    }
}

/// Fixed evaluation inputs shared by every checkpoint of a sweep.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub heldout: Vec<u8>,
    pub items: Vec<McItem>,
    pub probe: Vec<Vec<u32>>,
    pub hist_bins: usize,
}

impl EvalContext {
    pub fn new(split: &CorpusSplit, settings: &EvalSettings, model: &ModelConfig) -> Result<Self> {
        let n = settings.heldout_eval_bytes.min(split.heldout.len());
        let heldout = split.heldout[..n].to_vec();
        let items = if settings.mc_items == 0 {
            Vec::new()
        } else {
            generate_mc_items(
                &split.heldout,
                settings.mc_items,
                settings.mc_prompt_len,
                settings.mc_choice_len,
                settings.mc_choices,
                settings.mc_seed,
            )?
        };
        let probe = probe_windows(&split.heldout, settings.probe_windows, model.max_seq)?;
        Ok(Self { heldout, items, probe, hist_bins: settings.hist_bins })
    }
}

/// Identity of the run a row belongs to.
#[derive(Debug, Clone)]
pub struct RowContext<'a> {
    pub run_id: &'a str,
    pub variant: &'a str,
    pub seed: u64,
    pub step: u64,
}

impl RowContext<'_> {
    fn row(&self, scheme: &str, task: &str, pre: f64, post: Option<f64>, pct: Option<f64>) -> ResultRow {
        ResultRow {
            run_id: self.run_id.to_string(),
            variant: self.variant.to_string(),
            seed: self.seed,
            step: self.step,
            scheme: scheme.to_string(),
            task: task.to_string(),
            pre_value: pre,
            post_value: post,
            pct_diff: pct,
        }
    }
}

/// Result rows and full diagnostics for one checkpoint.
pub fn evaluate_checkpoint(
    params: &Parameters,
    cfg: &ModelConfig,
    ctx: &EvalContext,
    id: &RowContext,
) -> Result<(Vec<ResultRow>, DiagnosticsReport)> {
    let mut rows = Vec::new();
    let float = evaluate_tasks(params, cfg, &ctx.heldout, &ctx.items, None)?;
    for (task, v) in float.named() {
        rows.push(id.row(FLOAT_SCHEME, task, v, None, None));
    }
    for scheme in QuantScheme::ALL {
        let q = evaluate_tasks(params, cfg, &ctx.heldout, &ctx.items, Some(scheme))?;
        for ((task, pre), (_, post)) in float.named().into_iter().zip(q.named()) {
            let pct = ptq_core::evalrun::percent_degradation(pre, post).ok();
            rows.push(id.row(scheme.as_str(), task, pre, Some(post), pct));
        }
    }
    let criteria = default_criteria(ctx.probe.len());
    let diag = diagnose_model(params, cfg, &ctx.probe, &criteria, ctx.hist_bins)?;
    let names = ["rmse", "mean_token_std", "gain_std_ln1", "gain_std_ln2", "spectral_norm_kqv"];
    for (name, v) in names.iter().zip(diag.averages()) {
        rows.push(id.row(DIAGNOSTICS_SCHEME, name, v, None, None));
    }
    for c in &diag.censuses {
        let label = c.criteria.label();
        let census = &c.census;
        rows.push(id.row(DIAGNOSTICS_SCHEME, &format!("outliers[{label}].dims"), census.dimensions.len() as f64, None, None));
        rows.push(id.row(DIAGNOSTICS_SCHEME, &format!("outliers[{label}].pct_seq"), census.pct_seq_affected, None, None));
        rows.push(id.row(
            DIAGNOSTICS_SCHEME,
            &format!("outliers[{label}].pct_layers"),
            census.pct_layers_affected,
            None,
            None,
        ));
    }
    Ok((rows, diag))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub steps_completed: u64,
    pub diverged_at: Option<u64>,
    pub checkpoints: Vec<u64>,
    pub final_loss: Option<f64>,
    /// Average percent difference at the last evaluated checkpoint, per scheme.
    pub final_avg_pct_diff: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub rows: Vec<ResultRow>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("step-{step:06}.ckpt"))
}

/// Train one run to completion or divergence, checkpointing and evaluating
/// along the way. Files go to `run_dir`.
pub fn run_one(
    plan: &RunPlan,
    model: &ModelConfig,
    split: &CorpusSplit,
    ctx: &EvalContext,
    run_dir: &Path,
    all_optimizer: bool,
) -> Result<RunOutput> {
    std::fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    let variant = plan.variant.name();
    let mut trainer = Trainer::new(model, plan.train.clone())?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let total = plan.train.total_steps;

    let checkpoint = |t: &Trainer, rows: &mut Vec<ResultRow>, checkpoints: &mut Vec<u64>| -> Result<()> {
        let step = t.step();
        let meta = CheckpointMeta {
            run_id: plan.run_id.clone(),
            step,
            model: t.model_cfg.clone(),
            train: t.cfg.clone(),
            diverged_at: t.diverged_at,
        };
        let last = step == total || t.diverged_at.is_some();
        let state = (all_optimizer || last).then_some(&t.state);
        save_checkpoint(&t.params, state, &meta, &checkpoint_path(run_dir, step))?;
        let id = RowContext { run_id: &plan.run_id, variant: &variant, seed: plan.seed, step };
        let (r, diag) = evaluate_checkpoint(&t.params, &t.model_cfg, ctx, &id)?;
        write_json(&run_dir.join(format!("diagnostics-{step:06}.json")), &diag)?;
        rows.extend(r);
        checkpoints.push(step);
        info!("{} step {step}: checkpoint evaluated", plan.run_id);
        Ok(())
    };

    trainer.run(&split.train, |t| checkpoint(t, &mut rows, &mut checkpoints))?;

    if let Some(d) = trainer.diverged_at {
        // Parameters are untouched by the diverging step, so they are the
        // last finite state of the run.
        if checkpoints.last() != Some(&trainer.step()) {
            checkpoint(&trainer, &mut rows, &mut checkpoints)?;
        }
        let id = RowContext { run_id: &plan.run_id, variant: &variant, seed: plan.seed, step: trainer.step() };
        rows.push(id.row(STATUS_SCHEME, "diverged_at_step", d as f64, None, None));
        info!("{} diverged at step {d}", plan.run_id);
    }

    write_json(&run_dir.join("history.json"), &trainer.history)?;
    let last_step = checkpoints.last().copied();
    let final_avg_pct_diff = run_averages(&rows)
        .into_iter()
        .filter(|((_, _, step, _), _)| Some(*step) == last_step)
        .map(|((scheme, ..), v)| (scheme, v))
        .collect();
    let summary = RunSummary {
        run_id: plan.run_id.clone(),
        variant,
        seed: plan.seed,
        steps_completed: trainer.step(),
        diverged_at: trainer.diverged_at,
        checkpoints,
        final_loss: trainer.history.last().map(|o: &StepOutcome| o.loss),
        final_avg_pct_diff,
    };
    std::fs::write(run_dir.join("results.csv"), to_csv(&rows)?).map_err(io_err(run_dir))?;
    write_json(&run_dir.join("summary.json"), &summary)?;
    Ok(RunOutput { summary, rows })
}

/// Outputs of a run finished by an earlier invocation, if present.
fn load_finished(run_dir: &Path) -> Result<Option<RunOutput>> {
    let (summary_path, rows_path) = (run_dir.join("summary.json"), run_dir.join("results.csv"));
    if !(summary_path.exists() && rows_path.exists()) {
        return Ok(None);
    }
    let summary = serde_json::from_slice(&std::fs::read(&summary_path).map_err(io_err(&summary_path))?)?;
    let rows = from_csv(&std::fs::read(&rows_path).map_err(io_err(&rows_path))?)?;
    Ok(Some(RunOutput { summary, rows }))
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub summaries: Vec<RunSummary>,
    pub rows: Vec<ResultRow>,
}

/// Run every (variant, seed) of `spec` with up to `spec.jobs` runs at once and
/// write `runs/<run_id>/…`, `results.csv`, `results.json`, plot series and
/// `runs.json` under the output directory.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<SweepOutcome> {
    let plans = spec.plan()?;
    let split = CorpusSplit::load(&spec.corpus, spec.eval.heldout_fraction)?;
    let ctx = EvalContext::new(&split, &spec.eval, &spec.model)?;
    let out = &spec.output_dir;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("spec.json"), spec)?;
    info!("sweep: {} runs, {} at a time", plans.len(), spec.jobs);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))?;
    let one = |p: &RunPlan| {
        let dir = out.join("runs").join(&p.run_id);
        if spec.resume {
            if let Some(done) = load_finished(&dir)? {
                info!("{}: reusing finished run", p.run_id);
                return Ok(done);
            }
        }
        run_one(p, &spec.model, &split, &ctx, &dir, spec.checkpoint_optimizer)
    };
    let outputs: Vec<RunOutput> = if spec.jobs == 1 {
        plans.iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        pool.install(|| plans.par_iter().map(one).collect::<Result<Vec<_>>>())?
    };

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut summaries = Vec::new();
    for o in outputs {
        rows.extend(o.rows);
        summaries.push(o.summary);
    }
    canonicalize(&mut rows);
    summaries.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    emit_report(&rows, ReportFormat::Csv, out)?;
    emit_report(&rows, ReportFormat::Json, out)?;
    write_json(&out.join("runs.json"), &summaries)?;
    Ok(SweepOutcome { summaries, rows })
}
