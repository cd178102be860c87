use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ptq_core::diagnose::{default_criteria, diagnose_model, probe_windows, OutlierCriteria};
use ptq_core::evalrun::{evaluate_tasks, percent_degradation, generate_mc_items, parse_mc_items, McItem};
use ptq_core::quant::dequantize;
use ptq_core::{HalfFormat, QuantScheme};
use ptq_lab::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use ptq_lab::config::{ExperimentSpec, Grid, GridAxes};
use ptq_lab::report::{emit_report, read_results, ReportFormat};
use ptq_lab::sweep::{run_one, run_sweep, CorpusSplit, EvalContext};
use serde_json::json;

#[derive(Parser)]
#[command(name = "ptq-lab", version, about = "Train small GPT models under controlled optimization variants and measure post-training quantization degradation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Int8,
    Int4,
    All,
}

impl SchemeArg {
    fn schemes(self) -> Vec<QuantScheme> {
        match self {
            SchemeArg::Int8 => vec![QuantScheme::Int8W8A8],
            SchemeArg::Int4 => vec![QuantScheme::Int4WeightOnly],
            SchemeArg::All => QuantScheme::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run: the spec's first grid variant and first seed, with overrides.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        weight_decay: Option<f32>,
        /// Global gradient-norm threshold, or `none`.
        #[arg(long)]
        grad_clip: Option<String>,
        #[arg(long)]
        dropout: Option<f32>,
        #[arg(long)]
        half: Option<HalfFormat>,
        #[arg(long)]
        steps: Option<u64>,
        /// Run directory; defaults to `<output_dir>/runs/<run_id>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quantize a checkpoint's linear weights and write the dequantized model.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "int8")]
        scheme: SchemeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint in float and quantized modes on a held-out text.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        scheme: SchemeArg,
        /// Multiple-choice items as TSV (prompt, answer index, choices...).
        #[arg(long)]
        mc_items: Option<PathBuf>,
        /// Generate this many multiple-choice items from the corpus instead.
        #[arg(long, default_value_t = 0)]
        mc_generate: usize,
        #[arg(long, default_value_t = 16384)]
        max_bytes: usize,
    },
    /// Run the diagnostics suite on a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        probes: usize,
        #[arg(long, default_value_t = 32)]
        bins: usize,
        /// Constant outlier thresholds; replaces the defaults when given.
        #[arg(long)]
        tau: Vec<f32>,
        /// Z-score outlier multipliers; replaces the defaults when given.
        #[arg(long)]
        zscore: Vec<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (variant, seed) of an experiment spec.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        /// Reuse runs already finished in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-emit a results table as CSV and/or JSON with plot series.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        format: FormatArg,
    },
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn parse_clip(s: &str) -> Result<Option<f32>> {
    if s == "none" {
        return Ok(None);
    }
    Ok(Some(s.parse().with_context(|| format!("bad grad clip `{s}`"))?))
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    seed: Option<u64>,
    weight_decay: Option<f32>,
    grad_clip: Option<String>,
    dropout: Option<f32>,
    half: Option<HalfFormat>,
    steps: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut spec = ExperimentSpec::load(config)?;
    let mut v = spec.variants()?[0];
    if let Some(w) = weight_decay {
        v.weight_decay = w;
    }
    if let Some(c) = grad_clip {
        v.grad_clip = parse_clip(&c)?;
    }
    if let Some(d) = dropout {
        v.dropout_p = d;
    }
    if let Some(h) = half {
        v.half = h;
    }
    if let Some(s) = steps {
        spec.train.total_steps = s;
    }
    spec.grid = Grid::One(GridAxes {
        weight_decay: Some(vec![v.weight_decay]),
        grad_clip: Some(vec![v.grad_clip]),
        dropout_p: Some(vec![v.dropout_p]),
        half: Some(vec![v.half]),
    });
    spec.seeds = vec![seed.or(spec.seeds.first().copied()).unwrap_or(spec.train.seed)];
    let plan = spec.plan()?.remove(0);
    let split = CorpusSplit::load(&spec.corpus, spec.eval.heldout_fraction)?;
    let ctx = EvalContext::new(&split, &spec.eval, &spec.model)?;
    let dir = out.unwrap_or_else(|| spec.output_dir.join("runs").join(&plan.run_id));
    let output = run_one(&plan, &spec.model, &split, &ctx, &dir, spec.checkpoint_optimizer)?;
    print_json(&output.summary)
}

fn quantize(checkpoint: &Path, scheme: SchemeArg, out: &Path) -> Result<()> {
    let schemes = scheme.schemes();
    let [scheme] = schemes.as_slice() else { bail!("quantize takes a single scheme (int8 or int4)") };
    let ck = load_checkpoint(checkpoint)?;
    let mut params = ck.params.clone();
    let mut stats = Vec::new();
    for b in &mut params.blocks {
        for w in [&mut b.attn_kqv_w, &mut b.attn_out_w, &mut b.mlp_up_w, &mut b.mlp_down_w] {
            let q = scheme.quantize_weight(w)?;
            let d = dequantize(&q);
            let rmse = ptq_core::diagnose::rmse(w, &d)?;
            stats.push(json!({
                "shape": [w.rows(), w.cols()],
                "float_bytes": w.len() * 4,
                "quantized_bytes": q.payload_bytes(),
                "weight_rmse": rmse,
            }));
            *w = d;
        }
    }
    let meta = CheckpointMeta { run_id: format!("{}+{}", ck.meta.run_id, scheme), ..ck.meta };
    save_checkpoint(&params, None, &meta, out)?;
    print_json(&json!({ "scheme": scheme.as_str(), "output": out, "linears": stats }))
}

fn eval(
    checkpoint: &Path,
    corpus: &Path,
    scheme: SchemeArg,
    mc_items: Option<PathBuf>,
    mc_generate: usize,
    max_bytes: usize,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let text = read_corpus(corpus)?;
    let items: Vec<McItem> = match (mc_items, mc_generate) {
        (Some(p), _) => parse_mc_items(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
        (None, 0) => Vec::new(),
        (None, n) => generate_mc_items(&text, n, 48, 8, 4, 0)?,
    };
    let heldout = &text[..max_bytes.min(text.len())];
    let cfg = ck.meta.model;
    let float = evaluate_tasks(&ck.params, &cfg, heldout, &items, None)?;
    let mut reports = Vec::new();
    for s in scheme.schemes() {
        let q = evaluate_tasks(&ck.params, &cfg, heldout, &items, Some(s))?;
        let tasks: Vec<_> = float
            .named()
            .into_iter()
            .zip(q.named())
            .map(|((task, pre), (_, post))| {
                json!({ "task": task, "pre": pre, "post": post, "pct_diff": percent_degradation(pre, post).ok() })
            })
            .collect();
        let defined: Vec<f64> = tasks.iter().filter_map(|t| t["pct_diff"].as_f64()).collect();
        let average = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        reports.push(json!({ "scheme": s, "tasks": tasks, "average_pct_diff": average }));
    }
    print_json(&json!({ "run_id": ck.meta.run_id, "step": ck.meta.step, "float": float, "quantized": reports }))
}

fn diagnose(
    checkpoint: &Path,
    corpus: &Path,
    probes: usize,
    bins: usize,
    tau: Vec<f32>,
    zscore: Vec<f32>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let text = read_corpus(corpus)?;
    let cfg = ck.meta.model;
    let probe = probe_windows(&text, probes, cfg.max_seq)?;
    let criteria: Vec<OutlierCriteria> = if tau.is_empty() && zscore.is_empty() {
        default_criteria(probes)
    } else {
        tau.iter()
            .map(|&t| OutlierCriteria::constant(t))
            .chain(zscore.iter().map(|&c| OutlierCriteria::zscore(c)))
            .map(|c| OutlierCriteria { sample_count: probes, ..c })
            .collect()
    };
    let report = diagnose_model(&ck.params, &cfg, &probe, &criteria, bins)?;
    match out {
        Some(p) => std::fs::write(&p, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", p.display())),
        None => print_json(&report),
    }
}

fn sweep(config: &Path, out: Option<PathBuf>, jobs: Option<usize>, resume: bool) -> Result<()> {
    let mut spec = ExperimentSpec::load(config)?;
    spec.resume |= resume;
    if let Some(o) = out {
        spec.output_dir = o;
    }
    if let Some(j) = jobs {
        spec.jobs = j;
    }
    let outcome = run_sweep(&spec)?;
    print_json(&outcome.summaries)
}

fn report(results: &Path, out: &Path, format: FormatArg) -> Result<()> {
    let rows = read_results(results)?;
    let formats = match format {
        FormatArg::Csv => vec![ReportFormat::Csv],
        FormatArg::Json => vec![ReportFormat::Json],
        FormatArg::Both => vec![ReportFormat::Csv, ReportFormat::Json],
    };
    for f in formats {
        for p in emit_report(&rows, f, out)? {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train { config, seed, weight_decay, grad_clip, dropout, half, steps, out } => {
            train(&config, seed, weight_decay, grad_clip, dropout, half, steps, out)
        }
        Command::Quantize { checkpoint, scheme, out } => quantize(&checkpoint, scheme, &out),
        Command::Eval { checkpoint, corpus, scheme, mc_items, mc_generate, max_bytes } => {
            eval(&checkpoint, &corpus, scheme, mc_items, mc_generate, max_bytes)
        }
        Command::Diagnose { checkpoint, corpus, probes, bins, tau, zscore, out } => {
            diagnose(&checkpoint, &corpus, probes, bins, tau, zscore, out)
        }
        Command::Sweep { config, out, jobs, resume } => sweep(&config, out, jobs, resume),
        Command::Report { results, out, format } => report(&results, &out, format),
    }
}
