//! Advantage actor-critic with a KL penalty toward the frozen pre-trained
//! policy. The penalty is either plain or weighted per token by the old
//! policy's certainty raised to `beta`.

use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;
use crate::model::{backward, forward_train, log_softmax, GenerationConfig, Params, Scalar};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::rlenv::{collect, discounted_returns, Trajectory};
use crate::seed::derive_seed;
use crate::token_analysis::ProbeSet;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlMode {
    Standard,
    Prioritized,
}

impl std::str::FromStr for KlMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(KlMode::Standard),
            "prioritized" => Ok(KlMode::Prioritized),
            _ => Err(Error::Config(format!("unknown kl mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RLConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    /// alpha
    pub kl_coef: f64,
    pub kl_mode: KlMode,
    pub beta: f64,
    pub episodes_per_collect: usize,
    pub repeats_per_collect: usize,
    pub episodes_per_test: usize,
    /// Collect rounds between greedy test evaluations.
    pub test_every: usize,
    pub collect_rounds: usize,
    /// Set per run by experiment configs.
    #[serde(default = "four")]
    pub rl_digits: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Problems whose critical positions are probed at every test.
    #[serde(default)]
    pub n_probes: usize,
}

fn one() -> f64 {
    1.0
}

fn four() -> usize {
    4
}

impl RLConfig {
    /// Reference settings with the standard penalty.
    pub fn standard_reference() -> Self {
        RLConfig {
            learning_rate: 1e-6,
            gamma: 1.0,
            vf_coef: 0.1,
            ent_coef: 0.0005,
            kl_coef: 10.0,
            kl_mode: KlMode::Standard,
            beta: 0.0,
            episodes_per_collect: 50,
            repeats_per_collect: 1,
            episodes_per_test: 100,
            test_every: 1,
            collect_rounds: 100,
            rl_digits: 4,
            seed: 0,
            temperature: 1.0,
            max_grad_norm: None,
            adam: AdamConfig::default(),
            n_probes: 0,
        }
    }

    /// Reference settings with the certainty-weighted penalty.
    pub fn prioritized_reference() -> Self {
        RLConfig {
            kl_coef: 5.0,
            kl_mode: KlMode::Prioritized,
            beta: 150.0,
            ..Self::standard_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("rl: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.kl_coef >= 0.0 && self.beta >= 0.0 && self.vf_coef >= 0.0 && self.ent_coef >= 0.0) {
            return bad("kl_coef, beta, vf_coef and ent_coef must be non-negative");
        }
        if self.episodes_per_collect == 0
            || self.repeats_per_collect == 0
            || self.episodes_per_test == 0
            || self.test_every == 0
            || self.rl_digits == 0
        {
            return bad("episode counts, repeats, test interval and rl_digits must be positive");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    fn coefs(&self) -> Coefs {
        Coefs {
            vf: self.vf_coef,
            ent: self.ent_coef,
            kl: self.kl_coef,
            mode: self.kl_mode,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pg_loss: f64,
    pub value_loss: f64,
    pub entropy_term: f64,
    pub kl_term: f64,
    pub total: f64,
    /// Mean per-token weight applied to the KL estimator (1 when standard).
    pub mean_certainty_weight: f64,
}

/// `G_t` and `A_t = G_t - V(s_t)` from the values recorded at collection.
pub fn returns_and_advantages(traj: &Trajectory, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let g = discounted_returns(traj.reward, traj.len(), gamma);
    let a = g.iter().zip(&traj.values).map(|(g, v)| g - v).collect();
    (g, a)
}

pub fn kl_term_standard(logp_new: f64, logp_old: f64) -> f64 {
    let d = logp_new - logp_old;
    0.5 * d * d
}

pub fn certainty_weight(certainty_old: f64, beta: f64) -> f64 {
    certainty_old.powf(beta)
}

pub fn kl_term_prioritized(logp_new: f64, logp_old: f64, certainty_old: f64, beta: f64) -> f64 {
    certainty_weight(certainty_old, beta) * kl_term_standard(logp_new, logp_old)
}

#[derive(Debug, Clone, Copy)]
struct Coefs {
    vf: f64,
    ent: f64,
    kl: f64,
    mode: KlMode,
    beta: f64,
}

/// Everything the loss needs about one visited state besides the network's
/// current outputs there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTarget {
    pub action: u32,
    pub logp_old: f64,
    pub certainty_old: f64,
    pub ret: f64,
    pub advantage: f64,
}

pub fn step_targets(traj: &Trajectory, gamma: f64) -> Vec<StepTarget> {
    let (g, a) = returns_and_advantages(traj, gamma);
    (0..traj.len())
        .map(|t| StepTarget {
            action: traj.actions[t],
            logp_old: traj.logp_old[t],
            certainty_old: traj.certainty_old[t],
            ret: g[t],
            advantage: a[t],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    pg: f64,
    value: f64,
    entropy: f64,
    kl: f64,
    weight: f64,
}

/// Adds one state's loss terms to `sums` and writes the gradient of
/// `total / n` with respect to the logits and the value.
fn step_loss<F: Scalar>(
    logits: &[F],
    value: F,
    tgt: &StepTarget,
    c: &Coefs,
    n: f64,
    sums: &mut Sums,
    dlogits: &mut [F],
    dvalue: &mut F,
) {
    let lp = log_softmax(logits);
    let a = tgt.action as usize;
    let h: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
    let v = value.as_f64();
    let w = match c.mode {
        KlMode::Standard => 1.0,
        KlMode::Prioritized => certainty_weight(tgt.certainty_old, c.beta),
    };
    let diff = lp[a] - tgt.logp_old;
    sums.pg -= lp[a] * tgt.advantage;
    sums.value += (v - tgt.ret) * (v - tgt.ret);
    sums.entropy += h;
    sums.kl += w * 0.5 * diff * diff;
    sums.weight += w;

    // d/dz of log p_a is onehot_a - p; of H is -p (log p + H)
    let coef_a = (-tgt.advantage + c.kl * w * diff) / n;
    for (j, (dz, &l)) in dlogits.iter_mut().zip(&lp).enumerate() {
        let p = l.exp();
        let dlogp_a = if j == a { 1.0 - p } else { -p };
        let dh = -p * (l + h);
        *dz = F::from_f64_lossy(coef_a * dlogp_a - c.ent * dh / n);
    }
    *dvalue = F::from_f64_lossy(c.vf * 2.0 * (v - tgt.ret) / n);
}

fn breakdown(s: Sums, n: f64, c: &Coefs) -> LossBreakdown {
    let (pg, value, entropy, kl) = (s.pg / n, s.value / n, s.entropy / n, s.kl / n);
    LossBreakdown {
        pg_loss: pg,
        value_loss: value,
        entropy_term: entropy,
        kl_term: kl,
        total: pg + c.vf * value - c.ent * entropy + c.kl * kl,
        mean_certainty_weight: s.weight / n,
    }
}

/// Loss breakdown from per-state logits and values given directly, with the
/// gradient of `total` with respect to them. Means run over all states.
pub fn loss_from_outputs(
    logits: &[Vec<f64>],
    values: &[f64],
    targets: &[StepTarget],
    cfg: &RLConfig,
) -> (LossBreakdown, Vec<Vec<f64>>, Vec<f64>) {
    let c = cfg.coefs();
    let n = targets.len() as f64;
    let mut sums = Sums::default();
    let mut dl = Vec::with_capacity(targets.len());
    let mut dv = Vec::with_capacity(targets.len());
    for ((z, &v), t) in logits.iter().zip(values).zip(targets) {
        let mut d = vec![0.0; z.len()];
        let mut g = 0.0;
        step_loss(z, v, t, &c, n, &mut sums, &mut d, &mut g);
        dl.push(d);
        dv.push(g);
    }
    (breakdown(sums, n, &c), dl, dv)
}

/// Evaluates the loss over `batch` under `params` and accumulates its
/// gradient into `grads`.
pub fn a2c_loss_and_grad<F: Scalar>(
    params: &Params<F>,
    batch: &[Trajectory],
    cfg: &RLConfig,
    grads: &mut [F],
) -> Result<LossBreakdown> {
    let c = cfg.coefs();
    let v = params.config().vocab_size;
    let n = batch.iter().map(|t| t.len()).sum::<usize>();
    if n == 0 {
        return Err(Error::Config("a2c update needs at least one action".into()));
    }
    let nf = n as f64;
    let mut sums = Sums::default();
    for traj in batch.iter().filter(|t| !t.is_empty()) {
        let input = traj.scored_input();
        let acts = forward_train::<F, crate::seed::Rng>(params, &input, None)?;
        let rows = input.len();
        let mut dlogits = vec![F::zero(); rows * v];
        let mut dvalues = vec![F::zero(); rows];
        let p = traj.prompt.len();
        for (t, tgt) in step_targets(traj, cfg.gamma).iter().enumerate() {
            let pos = p - 1 + t;
            step_loss(
                acts.output.logits_at(pos),
                acts.output.values[pos],
                tgt,
                &c,
                nf,
                &mut sums,
                &mut dlogits[pos * v..(pos + 1) * v],
                &mut dvalues[pos],
            );
        }
        backward(params, &acts, &dlogits, &dvalues, grads);
    }
    Ok(breakdown(sums, nf, &c))
}

fn check_finite(b: &LossBreakdown, step: usize) -> Result<()> {
    for (component, x) in [
        ("pg_loss", b.pg_loss),
        ("value_loss", b.value_loss),
        ("entropy_term", b.entropy_term),
        ("kl_term", b.kl_term),
        ("total", b.total),
    ] {
        if !x.is_finite() {
            return Err(Error::NonFinite { component, step });
        }
    }
    Ok(())
}

/// `repeats_per_collect` gradient passes over `batch`. Returns the breakdown
/// measured at the start of the last pass.
pub fn a2c_update<F: Scalar>(
    params: &mut Params<F>,
    opt: &mut Adam<F>,
    batch: &[Trajectory],
    cfg: &RLConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("a2c update needs a non-empty batch".into()));
    }
    let mut grads = params.zeros_like();
    let mut last = LossBreakdown::default();
    for _ in 0..cfg.repeats_per_collect {
        grads.fill(F::zero());
        last = a2c_loss_and_grad(params, batch, cfg, &mut grads)?;
        check_finite(&last, opt.steps_taken() as usize + 1)?;
        if let Some(max) = cfg.max_grad_norm {
            clip_grad_norm(&mut grads, max);
        }
        opt.step(&mut params.data, &grads, cfg.learning_rate);
    }
    Ok(last)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub collect_round: usize,
    pub success_rate: f64,
    pub pg_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub mean_certainty_weight: f64,
    pub total_loss: f64,
    pub n_episodes: usize,
    pub failed_episodes: usize,
    pub test_success_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub collect_round: usize,
    pub label: String,
    pub probability: f64,
}

pub struct FinetuneResult {
    pub params: Params<f32>,
    pub records: Vec<FinetuneRecord>,
    pub traces: Vec<TraceRecord>,
    /// Greedy test success before the first update.
    pub initial_test_success: f64,
}

/// Fixed greedy test episodes for a run.
pub fn test_success<F: Scalar>(params: &Params<F>, cfg: &RLConfig) -> Result<f64> {
    let eval = crate::eval::EvalConfig {
        mode: crate::eval::EvalMode::Varying,
        digit_length: cfg.rl_digits,
        n_examples: cfg.episodes_per_test,
        n_resamples: 1,
        seed: derive_seed(cfg.seed, "finetune/test"),
        ..crate::eval::EvalConfig::default()
    };
    Ok(crate::eval::evaluate_params(params, &eval)?.accuracy)
}

/// Called after each collect round with the round number and current
/// parameters; an error stops training.
pub type RoundHook<'a> = dyn FnMut(usize, &Params<f32>) -> Result<()> + 'a;

/// Fine-tunes a copy of `pretrained`, which itself stays frozen as the KL
/// reference and certainty source.
pub fn finetune(
    pretrained: &Params<f32>,
    cfg: &RLConfig,
    probes: Option<&ProbeSet>,
    metrics: &mut MetricsWriter,
    traces: &mut MetricsWriter,
    hook: &mut RoundHook<'_>,
) -> Result<FinetuneResult> {
    cfg.validate()?;
    let old = pretrained;
    let mut params = pretrained.clone();
    let mut opt = Adam::new(params.len(), cfg.adam.clone());
    let ctx = params.config().context_len;
    let prompt_len = 2 * cfg.rl_digits + 3;
    let gen = GenerationConfig {
        mode: crate::model::Decoding::Sample,
        temperature: cfg.temperature,
        max_new_tokens: crate::eval::generation_budget(cfg.rl_digits, ctx, prompt_len),
        seed: 0,
    };

    let mut all_traces = Vec::new();
    let mut record_traces = |round: usize, p: &Params<f32>, traces: &mut MetricsWriter| -> Result<()> {
        if let Some(ps) = probes {
            for (label, probability) in ps.measure(p)? {
                let r = TraceRecord { collect_round: round, label, probability };
                traces.write(&r)?;
                all_traces.push(r);
            }
        }
        Ok(())
    };

    let initial_test_success = if cfg.collect_rounds > 0 { test_success(&params, cfg)? } else { 0.0 };
    record_traces(0, &params, traces)?;
    let mut records = Vec::with_capacity(cfg.collect_rounds);
    for round in 1..=cfg.collect_rounds {
        let seed = derive_seed(cfg.seed, &format!("finetune/collect/{round}"));
        let batch = collect(&params, old, cfg.episodes_per_collect, cfg.rl_digits, &gen, cfg.gamma, seed)?;
        let loss = if batch.trajectories.is_empty() {
            return Err(Error::Config(format!("round {round}: every episode failed")));
        } else {
            a2c_update(&mut params, &mut opt, &batch.trajectories, cfg)?
        };
        let tested = round % cfg.test_every == 0 || round == cfg.collect_rounds;
        let test_success_rate = if tested { Some(test_success(&params, cfg)?) } else { None };
        if tested {
            record_traces(round, &params, traces)?;
        }
        let rec = FinetuneRecord {
            collect_round: round,
            success_rate: batch.success_rate(),
            pg_loss: loss.pg_loss,
            value_loss: loss.value_loss,
            entropy: loss.entropy_term,
            kl: loss.kl_term,
            mean_certainty_weight: loss.mean_certainty_weight,
            total_loss: loss.total,
            n_episodes: batch.trajectories.len(),
            failed_episodes: batch.failures.len(),
            test_success_rate,
        };
        metrics.write(&rec)?;
        records.push(rec);
        hook(round, &params)?;
    }
    Ok(FinetuneResult {
        params,
        records,
        traces: all_traces,
        initial_test_success,
    })
}

/// Mean greedy test success over the run, counting the pre-update measurement
/// as the first point.
pub fn success_auc(initial: f64, records: &[FinetuneRecord]) -> f64 {
    let pts: Vec<f64> = std::iter::once(initial)
        .chain(records.iter().filter_map(|r| r.test_success_rate))
        .collect();
    pts.iter().sum::<f64>() / pts.len() as f64
}
