//! Evaluation proxies (held-out perplexity, next-token accuracy,
//! likelihood-scored multiple choice) and percent-degradation arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, Error, Result};
use crate::model::{forward, token_log_probs, Mode, ModelConfig, Parameters, QuantScheme, QuantizedModel};
use crate::rng::SplitMix64;
use crate::tensor::{HalfFormat, Tensor};

/// A model ready for evaluation: float, or with its weights quantized once.
pub struct Evaluator<'a> {
    params: &'a Parameters,
    cfg: &'a ModelConfig,
    quantized: Option<QuantizedModel>,
}

impl<'a> Evaluator<'a> {
    pub fn new(params: &'a Parameters, cfg: &'a ModelConfig, scheme: Option<QuantScheme>) -> Result<Self> {
        params.check_matches(cfg)?;
        let quantized = scheme.map(|s| QuantizedModel::new(params, s)).transpose()?;
        Ok(Self { params, cfg, quantized })
    }

    pub fn scheme(&self) -> Option<QuantScheme> {
        self.quantized.as_ref().map(|q| q.scheme())
    }

    pub fn max_seq(&self) -> usize {
        self.cfg.max_seq
    }

    pub fn logits(&self, tokens: &[u32]) -> Result<Tensor> {
        let out = match &self.quantized {
            Some(q) => q.forward(self.params, self.cfg, tokens, false)?,
            None => forward(self.params, self.cfg, tokens, Mode::Eval, HalfFormat::None, false)?,
        };
        Ok(out.logits)
    }
}

fn bytes_to_tokens(b: &[u8]) -> Vec<u32> {
    b.iter().map(|&x| x as u32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmMetrics {
    /// Number of predicted tokens.
    pub tokens: usize,
    pub mean_nll: f64,
    pub perplexity: f64,
    /// Top-1 next-token accuracy (ties resolved to the lowest id).
    pub accuracy: f64,
}

/// Language-model metrics over consecutive windows of at most `max_seq`
/// predictions covering `corpus`.
pub fn lm_metrics(ev: &Evaluator, corpus: &[u8]) -> Result<LmMetrics> {
    if corpus.len() < 2 {
        return domain_err("evaluation corpus needs at least two bytes");
    }
    let w = ev.max_seq();
    let (mut nll, mut correct, mut count) = (0.0f64, 0usize, 0usize);
    let mut start = 0;
    while start + 1 < corpus.len() {
        let end = (start + w + 1).min(corpus.len());
        let seq = bytes_to_tokens(&corpus[start..end]);
        let (tokens, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let logits = ev.logits(tokens)?;
        nll -= token_log_probs(&logits, targets)?.iter().sum::<f64>();
        for (i, &t) in targets.iter().enumerate() {
            let row = logits.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc })
                .0;
            correct += (best == t as usize) as usize;
        }
        count += targets.len();
        start = end - 1;
    }
    let mean_nll = nll / count as f64;
    Ok(LmMetrics { tokens: count, mean_nll, perplexity: mean_nll.exp(), accuracy: correct as f64 / count as f64 })
}

/// `exp(mean NLL)` over a held-out corpus, float or quantized.
pub fn perplexity(params: &Parameters, cfg: &ModelConfig, corpus: &[u8], scheme: Option<QuantScheme>) -> Result<f64> {
    Ok(lm_metrics(&Evaluator::new(params, cfg, scheme)?, corpus)?.perplexity)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub prompt: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

impl McItem {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return domain_err("multiple-choice prompt is empty");
        }
        if self.choices.len() < 2 {
            return domain_err("multiple-choice item needs at least two choices");
        }
        if self.choices.iter().any(|c| c.is_empty()) {
            return domain_err("empty multiple-choice continuation");
        }
        if self.answer >= self.choices.len() {
            return domain_err(format!("answer index {} out of {} choices", self.answer, self.choices.len()));
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return domain_err(format!("bad escape sequence \\{}", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

/// One item per line: `prompt \t choice_0 … \t choice_k \t answer_index`,
/// with `\\`, `\t`, `\n`, `\r` escaped inside fields.
pub fn format_mc_items(items: &[McItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&escape(&it.prompt));
        for c in &it.choices {
            out.push('\t');
            out.push_str(&escape(c));
        }
        out.push('\t');
        out.push_str(&it.answer.to_string());
        out.push('\n');
    }
    out
}

pub fn parse_mc_items(text: &str) -> Result<Vec<McItem>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 4 {
                return domain_err(format!("line {}: expected prompt, two or more choices and an answer", n + 1));
            }
            let answer = fields[fields.len() - 1]
                .trim()
                .parse::<usize>()
                .map_err(|e| Error::Domain(format!("line {}: bad answer index: {e}", n + 1)))?;
            let item = McItem {
                prompt: unescape(fields[0])?,
                choices: fields[1..fields.len() - 1].iter().map(|f| unescape(f)).collect::<Result<_>>()?,
                answer,
            };
            item.validate().map_err(|e| Error::Domain(format!("line {}: {e}", n + 1)))?;
            Ok(item)
        })
        .collect()
}

/// Summed log-likelihood of `choice` following `prompt`. The prompt is
/// truncated from the left when the pair exceeds the context.
pub fn continuation_log_likelihood(ev: &Evaluator, prompt: &[u8], choice: &[u8]) -> Result<f64> {
    if prompt.is_empty() || choice.is_empty() {
        return domain_err("prompt and continuation must be non-empty");
    }
    if choice.len() > ev.max_seq() {
        return domain_err("continuation longer than the model context");
    }
    let keep = (ev.max_seq() + 1 - choice.len()).min(prompt.len());
    let mut seq = bytes_to_tokens(&prompt[prompt.len() - keep..]);
    seq.extend(bytes_to_tokens(choice));
    let (tokens, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let lp = token_log_probs(&ev.logits(tokens)?, targets)?;
    Ok(lp[keep - 1..].iter().sum())
}

/// Index of the highest-likelihood choice, lowest index on ties.
pub fn mc_predict(ev: &Evaluator, item: &McItem) -> Result<usize> {
    item.validate()?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, c) in item.choices.iter().enumerate() {
        let s = continuation_log_likelihood(ev, item.prompt.as_bytes(), c.as_bytes())?;
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

pub fn mc_accuracy(ev: &Evaluator, items: &[McItem]) -> Result<f64> {
    if items.is_empty() {
        return domain_err("no multiple-choice items");
    }
    let mut correct = 0usize;
    for it in items {
        correct += (mc_predict(ev, it)? == it.answer) as usize;
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Fraction of items whose highest-likelihood choice is the answer.
pub fn mc_choice_accuracy(
    params: &Parameters,
    cfg: &ModelConfig,
    items: &[McItem],
    scheme: Option<QuantScheme>,
) -> Result<f64> {
    mc_accuracy(&Evaluator::new(params, cfg, scheme)?, items)
}

/// Items cut from held-out text: the true continuation of a random prefix
/// against equal-length continuations taken from elsewhere in the text.
/// Only all-ASCII windows are used.
pub fn generate_mc_items(
    corpus: &[u8],
    n_items: usize,
    prompt_len: usize,
    choice_len: usize,
    n_choices: usize,
    seed: u64,
) -> Result<Vec<McItem>> {
    let span = prompt_len + choice_len;
    if n_choices < 2 || prompt_len == 0 || choice_len == 0 {
        return domain_err("need a prompt, a continuation and at least two choices");
    }
    if corpus.len() < span * 2 {
        return domain_err("corpus too short for multiple-choice generation");
    }
    let text = |b: &[u8]| b.iter().map(|&c| c as char).collect::<String>();
    let mut rng = SplitMix64::stream(seed, "mc-items", 0);
    let starts = (corpus.len() - span + 1) as u64;
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let mut s = rng.below(starts) as usize;
        let mut tries = 0;
        while !corpus[s..s + span].is_ascii() {
            tries += 1;
            if tries > 1000 {
                return domain_err("corpus has too few ASCII windows for multiple-choice generation");
            }
            s = rng.below(starts) as usize;
        }
        let prompt = &corpus[s..s + prompt_len];
        let truth = &corpus[s + prompt_len..s + span];
        let answer = rng.below(n_choices as u64) as usize;
        let mut choices: Vec<String> = Vec::with_capacity(n_choices);
        let mut attempts = 0;
        while choices.len() < n_choices - 1 {
            attempts += 1;
            if attempts > 1000 {
                return domain_err("corpus too repetitive to draw distinct distractors");
            }
            let d = rng.below((corpus.len() - choice_len + 1) as u64) as usize;
            let raw = &corpus[d..d + choice_len];
            let cand = text(raw);
            if raw.is_ascii() && raw != truth && !choices.contains(&cand) {
                choices.push(cand);
            }
        }
        choices.insert(answer, text(truth));
        items.push(McItem { prompt: text(prompt), choices, answer });
    }
    Ok(items)
}

/// `100 · (post − pre) / pre`; negative means degradation.
pub fn percent_degradation(pre: f64, post: f64) -> Result<f64> {
    if pre == 0.0 || !pre.is_finite() || !post.is_finite() {
        return domain_err(format!("percent degradation undefined for pre={pre}, post={post}"));
    }
    Ok(100.0 * (post - pre) / pre)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub pre: f64,
    pub post: f64,
    pub pct_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationReport {
    pub scheme: QuantScheme,
    pub tasks: Vec<TaskResult>,
    /// Unweighted mean of the per-task percent differences.
    pub average_pct_diff: f64,
}

impl DegradationReport {
    pub fn new(scheme: QuantScheme, tasks: &[(&str, f64, f64)]) -> Result<Self> {
        if tasks.is_empty() {
            return domain_err("degradation report needs at least one task");
        }
        let tasks = tasks
            .iter()
            .map(|&(name, pre, post)| {
                Ok(TaskResult { task: name.to_string(), pre, post, pct_diff: percent_degradation(pre, post)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let average_pct_diff = tasks.iter().map(|t| t.pct_diff).sum::<f64>() / tasks.len() as f64;
        Ok(Self { scheme, tasks, average_pct_diff })
    }
}

/// Scores of the proxy task suite, all higher-is-better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub lm: LmMetrics,
    pub mc_accuracy: Option<f64>,
}

impl TaskScores {
    /// `(task name, score)` pairs: geometric-mean token probability
    /// (`1 / perplexity`), next-token accuracy and, when items were given,
    /// multiple-choice accuracy.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("token_prob", 1.0 / self.lm.perplexity), ("next_token_acc", self.lm.accuracy)];
        if let Some(a) = self.mc_accuracy {
            v.push(("mc_acc", a));
        }
        v
    }
}

pub fn evaluate_tasks(
    params: &Parameters,
    cfg: &ModelConfig,
    heldout: &[u8],
    items: &[McItem],
    scheme: Option<QuantScheme>,
) -> Result<TaskScores> {
    let ev = Evaluator::new(params, cfg, scheme)?;
    let lm = lm_metrics(&ev, heldout)?;
    let mc_accuracy = if items.is_empty() { None } else { Some(mc_accuracy(&ev, items)?) };
    Ok(TaskScores { lm, mc_accuracy })
}

/// Float vs quantized scores on identical inputs.
pub fn degradation(pre: &TaskScores, post: &TaskScores, scheme: QuantScheme) -> Result<DegradationReport> {
    if pre.lm.tokens != post.lm.tokens {
        return domain_err("float and quantized evaluation consumed different token streams");
    }
    let (a, b) = (pre.named(), post.named());
    if a.len() != b.len() {
        return domain_err("float and quantized evaluation ran different task sets");
    }
    let rows: Vec<(&str, f64, f64)> = a.iter().zip(&b).map(|(&(n, x), &(_, y))| (n, x, y)).collect();
    DegradationReport::new(scheme, &rows)
}
