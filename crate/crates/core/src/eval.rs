//! Accuracy on freshly sampled addition problems with percentile-bootstrap
//! confidence intervals.

use crate::error::{Error, Result};
use crate::model::{generate_batch, GenerationConfig, Params, Scalar};
use crate::scratchpad::{
    max_doc_len, parse_answer, sample_identical, sample_varying, verify_answer, AdditionProblem, Verdict, Vocabulary,
};
use crate::seed::{derive_seed, rng_from};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Identical,
    Varying,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(EvalMode::Identical),
            "varying" => Ok(EvalMode::Varying),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub digit_length: usize,
    pub n_examples: usize,
    pub n_resamples: usize,
    pub confidence: f64,
    pub seed: u64,
    /// Prompts decoded together.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Identical,
            digit_length: 3,
            n_examples: 1000,
            n_resamples: 10_000,
            confidence: 0.95,
            seed: 0,
            batch_size: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 || self.digit_length == 0 || self.batch_size == 0 {
            return Err(Error::Config("eval: n_examples, digit_length and batch_size must be positive".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("eval: confidence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub a: String,
    pub b: String,
    pub verdict: Verdict,
    /// Parsed answer, if any.
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub digit_length: usize,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_examples: usize,
    pub n_correct: usize,
    pub outcomes: Vec<ExampleOutcome>,
}

/// Anything that continues a batch of prompts with generated token ids.
pub trait Policy {
    fn complete(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<u32>>>;
}

/// Greedy decoding with a transformer.
pub struct GreedyPolicy<'a, F> {
    pub params: &'a Params<F>,
    pub eos: u32,
    pub max_new_tokens: usize,
}

impl<F: Scalar> Policy for GreedyPolicy<'_, F> {
    fn complete(&self, prompts: &[Vec<u32>]) -> Result<Vec<Vec<u32>>> {
        let refs: Vec<&[u32]> = prompts.iter().map(|p| p.as_slice()).collect();
        let seeds = vec![0; prompts.len()];
        let cfg = GenerationConfig::greedy(self.max_new_tokens);
        Ok(generate_batch(self.params, &refs, &seeds, self.eos, &cfg)?
            .into_iter()
            .map(|g| g.tokens)
            .collect())
    }
}

/// Token budget for a document whose longer operand has `digits` digits,
/// with a little slack for malformed output.
pub fn generation_budget(digits: usize, context_len: usize, prompt_len: usize) -> usize {
    (max_doc_len(digits) + 16).min(context_len).saturating_sub(prompt_len)
}

pub fn sample_eval_problems(cfg: &EvalConfig) -> Vec<AdditionProblem> {
    let mut rng = rng_from(derive_seed(cfg.seed, &format!("eval/{:?}/{}", cfg.mode, cfg.digit_length)));
    (0..cfg.n_examples)
        .map(|_| match cfg.mode {
            EvalMode::Identical => sample_identical(cfg.digit_length, &mut rng),
            EvalMode::Varying => sample_varying(cfg.digit_length, &mut rng),
        })
        .collect()
}

/// Verdicts for `problems`. A batch that fails to decode is retried one prompt
/// at a time; prompts that still fail count as malformed.
pub fn score_problems(policy: &dyn Policy, problems: &[AdditionProblem], batch_size: usize) -> Vec<ExampleOutcome> {
    let vocab = Vocabulary::scratchpad();
    let mut out = Vec::with_capacity(problems.len());
    for chunk in problems.chunks(batch_size.max(1)) {
        let prompts: Vec<Option<Vec<u32>>> = chunk.iter().map(|p| vocab.encode(&p.prompt()).ok()).collect();
        let completions: Vec<Option<Vec<u32>>> = match prompts.iter().cloned().collect::<Option<Vec<_>>>() {
            Some(ps) => match policy.complete(&ps) {
                Ok(c) if c.len() == ps.len() => c.into_iter().map(Some).collect(),
                _ => ps.into_iter().map(|p| one(policy, p)).collect(),
            },
            None => prompts.into_iter().map(|p| p.and_then(|p| one(policy, p))).collect(),
        };
        for (p, c) in chunk.iter().zip(completions) {
            let text = c.and_then(|ids| vocab.decode(&ids).ok());
            let (verdict, answer) = match text {
                Some(t) => (verify_answer(&t, p), parse_answer(&t).map(|n| n.to_string())),
                None => (Verdict::Malformed, None),
            };
            out.push(ExampleOutcome {
                a: p.a.to_string(),
                b: p.b.to_string(),
                verdict,
                answer,
            });
        }
    }
    out
}

fn one(policy: &dyn Policy, prompt: Vec<u32>) -> Option<Vec<u32>> {
    policy.complete(std::slice::from_ref(&prompt)).ok()?.pop()
}

pub fn evaluate(policy: &dyn Policy, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let problems = sample_eval_problems(cfg);
    let outcomes = score_problems(policy, &problems, cfg.batch_size);
    let hits: Vec<bool> = outcomes.iter().map(|o| o.verdict == Verdict::Correct).collect();
    let n_correct = hits.iter().filter(|&&h| h).count();
    let accuracy = n_correct as f64 / hits.len() as f64;
    let (lo, hi) = bootstrap_ci(&hits, cfg.n_resamples, cfg.confidence, derive_seed(cfg.seed, "eval/bootstrap"));
    Ok(EvalReport {
        mode: cfg.mode,
        digit_length: cfg.digit_length,
        accuracy,
        ci_low: lo.min(accuracy),
        ci_high: hi.max(accuracy),
        n_examples: hits.len(),
        n_correct,
        outcomes,
    })
}

pub fn evaluate_params<F: Scalar>(params: &Params<F>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let vocab = Vocabulary::scratchpad();
    let policy = GreedyPolicy {
        params,
        eos: vocab.eos_id(),
        max_new_tokens: generation_budget(cfg.digit_length, params.config().context_len, 2 * cfg.digit_length + 3),
    };
    evaluate(&policy, cfg)
}

/// Percentile bootstrap of the mean of binary outcomes.
pub fn bootstrap_ci(outcomes: &[bool], n_resamples: usize, confidence: f64, seed: u64) -> (f64, f64) {
    assert!(!outcomes.is_empty(), "bootstrap needs at least one outcome");
    assert!(n_resamples > 0);
    let n = outcomes.len();
    let mut rng = rng_from(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    (quantile(&means, tail), quantile(&means, 1.0 - tail))
}

/// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One table row per pre-training length, one column per evaluated length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub n_pretrain: usize,
    pub reports: Vec<EvalReport>,
}

/// Plain-text accuracy table: rows are pre-training lengths, columns the
/// evaluated digit lengths, cells `acc% ± half-width%`.
pub fn format_accuracy_table(title: &str, rows: &[AccuracyRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let width = rows.iter().map(|r| r.reports.len()).max().unwrap_or(0);
    let _ = write!(s, "{:>4}", "N");
    for k in 0..width {
        let _ = write!(s, " | {:>17}", format!("N+{k}"));
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{:>4}", row.n_pretrain);
        for r in &row.reports {
            let half = (r.ci_high - r.ci_low) / 2.0;
            let cell = format!("{:.1}% ± {:.1}%", 100.0 * r.accuracy, 100.0 * half);
            let _ = write!(s, " | {cell:>17}");
        }
        s.push('\n');
    }
    s
}
