//! Supervised next-token training on scratchpad documents.

use crate::error::{Error, Result};
use crate::eval::{evaluate_params, EvalConfig, EvalMode};
use crate::metrics::{read_json, MetricsWriter};
use crate::model::{backward, forward_train, save_checkpoint, ModelConfig, Params, Scalar};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::scratchpad::{dataset::manifest_path, read_dataset, DatasetManifest, DatasetRecord, Vocabulary};
use crate::seed::{derive_seed, rng_from};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear warm-up, then cosine decay to `final_ratio * learning_rate`.
    WarmupCosine { warmup_steps: usize, final_ratio: f64 },
}

impl LrSchedule {
    /// Rate for 0-based `step` out of `total`.
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupCosine { warmup_steps, final_ratio } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1);
                let frac = ((step - warmup_steps) as f64 / span as f64).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
                base * (final_ratio + (1.0 - final_ratio) * cos)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Ignored inside experiment configs, which build their own datasets.
    #[serde(default)]
    pub dataset: PathBuf,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    #[serde(default = "default_eval_examples")]
    pub eval_examples: usize,
    /// Digit length of the held-out identical-digit check; defaults to the
    /// dataset's `n_max`.
    #[serde(default)]
    pub eval_digits: Option<usize>,
    /// Train on the first batch over and over.
    #[serde(default)]
    pub overfit: bool,
    pub seed: u64,
}

fn default_eval_examples() -> usize {
    200
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_examples == 0 {
            return Err(Error::Config("pretrain: batch_size, eval_every and eval_examples must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretrain: learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_accuracy: Option<f64>,
}

/// A tokenized document; the loss covers targets from `prompt_len` on.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
}

pub fn encode_records(records: &[DatasetRecord], vocab: &Vocabulary) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            if !r.text.starts_with(&r.prompt) {
                return Err(Error::Config(format!("record text does not start with its prompt {:?}", r.prompt)));
            }
            Ok(Example {
                tokens: vocab.encode(&r.text)?,
                prompt_len: r.prompt.chars().count(),
            })
        })
        .collect()
}

/// Summed negative log-likelihood of `targets[i]` under `logits` row `i`, for
/// rows `first..`. Writes `scale * (softmax - onehot)` into those rows of
/// `dlogits`; other rows are left untouched.
pub fn masked_cross_entropy<F: Scalar>(
    logits: &[F],
    vocab: usize,
    targets: &[u32],
    first: usize,
    scale: f64,
    dlogits: &mut [F],
) -> f64 {
    let mut nll = 0.0;
    for (i, &tgt) in targets.iter().enumerate().skip(first) {
        let row = &logits[i * vocab..(i + 1) * vocab];
        let lp = crate::model::log_softmax(row);
        nll -= lp[tgt as usize];
        let d = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (j, (dj, l)) in d.iter_mut().zip(&lp).enumerate() {
            let onehot = if j == tgt as usize { 1.0 } else { 0.0 };
            *dj = F::from_f64_lossy(scale * (l.exp() - onehot));
        }
    }
    nll
}

/// Number of supervised targets in an example.
fn n_targets(ex: &Example) -> usize {
    ex.tokens.len().saturating_sub(ex.prompt_len.max(1))
}

/// Mean masked cross-entropy over `batch`, accumulating its gradient into
/// `grads`.
pub fn batch_loss_and_grad<F: Scalar, R: rand::Rng>(
    params: &Params<F>,
    batch: &[&Example],
    grads: &mut [F],
    mut dropout: Option<&mut R>,
) -> Result<f64> {
    let v = params.config().vocab_size;
    let total: usize = batch.iter().map(|e| n_targets(e)).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / total as f64;
    let mut nll = 0.0;
    for ex in batch {
        let n = ex.tokens.len();
        if n < 2 {
            continue;
        }
        let acts = forward_train(params, &ex.tokens[..n - 1], dropout.as_deref_mut())?;
        let mut dlogits = vec![F::zero(); (n - 1) * v];
        let first = ex.prompt_len.max(1) - 1;
        nll += masked_cross_entropy(&acts.output.logits, v, &ex.tokens[1..], first, scale, &mut dlogits);
        let dvalues = vec![F::zero(); n - 1];
        backward(params, &acts, &dlogits, &dvalues, grads);
    }
    Ok(nll * scale)
}

pub struct PretrainResult {
    pub best: Params<f32>,
    pub best_step: usize,
    pub best_accuracy: Option<f64>,
    pub last: Params<f32>,
    pub history: Vec<PretrainRecord>,
}

/// Runs the training loop on already-encoded examples, writing one record per
/// step. The best parameters by held-out accuracy are kept (earliest on ties).
pub fn train(
    model: &ModelConfig,
    examples: &[Example],
    eval_digits: usize,
    cfg: &PretrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<PretrainResult> {
    cfg.validate()?;
    if examples.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("pretrain: the dataset is empty".into()));
    }
    let mut params = Params::<f32>::init(model.clone())?;
    let mut opt = Adam::new(params.len(), cfg.adam.clone());
    let mut grads = params.zeros_like();
    let mut order_rng = rng_from(derive_seed(cfg.seed, "pretrain/order"));
    let mut dropout_rng = rng_from(derive_seed(cfg.seed, "pretrain/dropout"));
    let eval_cfg = EvalConfig {
        mode: EvalMode::Identical,
        digit_length: eval_digits,
        n_examples: cfg.eval_examples,
        n_resamples: 200,
        seed: derive_seed(cfg.seed, "pretrain/eval"),
        ..EvalConfig::default()
    };

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut cursor = order.len();
    let mut best = params.clone();
    let (mut best_step, mut best_acc) = (0, None::<f64>);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<&Example> = if cfg.overfit {
            examples.iter().take(cfg.batch_size).collect()
        } else {
            let mut b = Vec::with_capacity(cfg.batch_size);
            while b.len() < cfg.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                b.push(&examples[order[cursor]]);
                cursor += 1;
            }
            b
        };
        grads.fill(0.0);
        let loss = batch_loss_and_grad(&params, &batch, &mut grads, Some(&mut dropout_rng))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { component: "loss", step: step + 1 });
        }
        if let Some(max) = cfg.grad_clip {
            clip_grad_norm(&mut grads, max);
        }
        opt.step(&mut params.data, &grads, cfg.lr_schedule.rate(cfg.learning_rate, step, cfg.steps));
        if params.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { component: "parameters", step: step + 1 });
        }

        let done = step + 1;
        let eval_accuracy = if done % cfg.eval_every == 0 || done == cfg.steps {
            let acc = evaluate_params(&params, &eval_cfg)?.accuracy;
            if best_acc.is_none_or(|b| acc > b) {
                best_acc = Some(acc);
                best_step = done;
                best = params.clone();
            }
            Some(acc)
        } else {
            None
        };
        let rec = PretrainRecord { step: done, loss, eval_accuracy };
        metrics.write(&rec)?;
        history.push(rec);
    }
    Ok(PretrainResult {
        best,
        best_step,
        best_accuracy: best_acc,
        last: params,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub best_step: usize,
    pub best_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_DIR: &str = "checkpoint";
pub const LAST_DIR: &str = "last";

/// Reads the dataset at `cfg.dataset`, trains, and writes `metrics.jsonl`, the
/// selected checkpoint under `checkpoint/` and the final one under `last/`.
pub fn pretrain(model: &ModelConfig, cfg: &PretrainConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    model.validate()?;
    let vocab = Vocabulary::scratchpad();
    if model.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the scratchpad vocabulary ({})",
            model.vocab_size,
            vocab.size()
        )));
    }
    let manifest: DatasetManifest = read_json(&manifest_path(&cfg.dataset))?;
    let eval_digits = cfg.eval_digits.unwrap_or(manifest.n_max);
    model.check_fits(manifest.n_max.max(eval_digits))?;
    let examples = encode_records(&read_dataset(&cfg.dataset)?, &vocab)?;
    let mut metrics = MetricsWriter::create(&out_dir.join(METRICS_FILE))?;
    let res = train(model, &examples, eval_digits, cfg, &mut metrics)?;
    let ckpt = out_dir.join(BEST_DIR);
    save_checkpoint(&res.best, &ckpt, res.best_step as u64, cfg.seed, None)?;
    save_checkpoint(&res.last, &out_dir.join(LAST_DIR), cfg.steps as u64, cfg.seed, None)?;
    Ok(PretrainOutcome {
        checkpoint: ckpt,
        best_step: res.best_step,
        best_accuracy: res.best_accuracy,
        final_loss: res.history.last().map(|r| r.loss),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scratchpad::{dataset::generate_records, DatasetSpec, Split};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            context_len: 128,
            vocab_size: Vocabulary::scratchpad().size(),
            dropout_rate: 0.0,
            parameter_init_seed: 1,
        }
    }

    fn cfg(steps: usize) -> PretrainConfig {
        PretrainConfig {
            dataset: PathBuf::new(),
            batch_size: 4,
            steps,
            learning_rate: 3e-3,
            lr_schedule: LrSchedule::Constant,
            adam: AdamConfig::default(),
            grad_clip: Some(1.0),
            eval_every: 1000,
            eval_examples: 4,
            eval_digits: None,
            overfit: false,
            seed: 5,
        }
    }

    fn examples(n: usize) -> Vec<Example> {
        let recs = generate_records(&DatasetSpec { n_max: 1, n_examples: n, seed: 2, split: Split::Train });
        encode_records(&recs, &Vocabulary::scratchpad()).unwrap()
    }

    #[test]
    fn zero_steps_returns_the_initialisation() {
        let mut m = MetricsWriter::memory();
        let r = train(&tiny_model(), &examples(8), 1, &cfg(0), &mut m).unwrap();
        assert_eq!(r.best.data, Params::<f32>::init(tiny_model()).unwrap().data);
        assert!(m.lines().is_empty());
    }

    #[test]
    fn overfits_a_single_batch() {
        let mut c = cfg(300);
        c.overfit = true;
        c.eval_every = 300;
        let mut m = MetricsWriter::memory();
        let r = train(&tiny_model(), &examples(8), 1, &c, &mut m).unwrap();
        let losses: Vec<f64> = r.history.iter().map(|h| h.loss).collect();
        assert!(*losses.last().unwrap() < 0.01, "final loss {}", losses.last().unwrap());
        // 20-step moving average never rises
        let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
        let rises = ma.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
        assert_eq!(rises, 0, "{ma:?}");
        assert_eq!(m.lines().len(), 300);
    }

    #[test]
    fn same_seed_same_run() {
        let mut c = cfg(6);
        c.eval_every = 3;
        let ex = examples(16);
        let a = train(&tiny_model(), &ex, 1, &c, &mut MetricsWriter::memory()).unwrap();
        let b = train(&tiny_model(), &ex, 1, &c, &mut MetricsWriter::memory()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.data, b.last.data);
    }

    #[test]
    fn divergence_reports_the_step() {
        let mut c = cfg(3);
        c.learning_rate = f64::MAX;
        c.grad_clip = None;
        let Err(err) = train(&tiny_model(), &examples(8), 1, &c, &mut MetricsWriter::memory()) else {
            panic!("expected divergence");
        };
        assert!(matches!(err, Error::NonFinite { step: 1..=3, .. }), "{err}");
    }

    #[test]
    fn schedule_shapes() {
        let s = LrSchedule::WarmupCosine { warmup_steps: 10, final_ratio: 0.1 };
        assert!((s.rate(1.0, 0, 100) - 0.1).abs() < 1e-12);
        assert!((s.rate(1.0, 9, 100) - 1.0).abs() < 1e-12);
        assert!((s.rate(1.0, 100, 100) - 0.1).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.rate(0.5, 77, 100), 0.5);
    }

    #[test]
    fn loss_mask_skips_the_prompt() {
        let ex = &examples(1)[0];
        let v = Vocabulary::scratchpad().size();
        let n = ex.tokens.len() - 1;
        let logits = vec![0.0f64; n * v];
        let mut d = vec![0.0f64; n * v];
        let first = ex.prompt_len - 1;
        let nll = masked_cross_entropy(&logits, v, &ex.tokens[1..], first, 1.0, &mut d);
        assert!((nll - (n - first) as f64 * (v as f64).ln()).abs() < 1e-9);
        assert!(d[..first * v].iter().all(|&x| x == 0.0));
        assert!(d[first * v..].iter().any(|&x| x != 0.0));
    }
}
