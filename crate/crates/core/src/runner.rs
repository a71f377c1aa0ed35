//! Experiment orchestration: config files, run directories, manifests that
//! are enough to re-run a job, and the three comparison experiments.

use crate::a2c::{finetune, success_auc, FinetuneRecord, KlMode, RLConfig, TraceRecord};
use crate::error::{Error, Result};
use crate::eval::{evaluate_params, format_accuracy_table, AccuracyRow, EvalConfig, EvalMode, EvalReport};
use crate::metrics::{read_json, read_records, write_json, write_records, MetricsWriter};
use crate::model::{load_checkpoint, params_digest, save_checkpoint, ModelConfig, Params};
use crate::pretrain::{pretrain, PretrainConfig};
use crate::scratchpad::{build_dataset, DatasetSpec, Split};
use crate::seed::derive_seed;
use crate::token_analysis::{traces_from_records, ProbeSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PretrainCompare,
    KlCompare,
    BetaSweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_examples: usize,
    pub seed: u64,
}

/// Schema of `sweep --config` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    #[serde(default = "default_n_pretrain")]
    pub n_pretrain: Vec<usize>,
    /// RL digit length is `n_pretrain + rl_offset`.
    #[serde(default = "default_offset")]
    pub rl_offset: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub betas: Vec<f64>,
    /// Shared pre-trained checkpoint; pre-trained from scratch when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    /// Standard arm, and the base config of the other experiments.
    pub rl: RLConfig,
    /// Second arm of `kl_compare`.
    #[serde(default)]
    pub rl_prioritized: Option<RLConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_n_pretrain() -> Vec<usize> {
    vec![3]
}

fn default_offset() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment: seeds must not be empty".into()));
        }
        if self.n_pretrain.is_empty() || self.n_pretrain.contains(&0) {
            return Err(Error::Config("experiment: n_pretrain must list positive lengths".into()));
        }
        if !(1..=2).contains(&self.rl_offset) {
            return Err(Error::Config("experiment: rl_offset must be 1 or 2".into()));
        }
        match self.kind {
            ExperimentKind::KlCompare if self.rl_prioritized.is_none() => {
                return Err(Error::Config("kl_compare needs an [rl_prioritized] section".into()))
            }
            ExperimentKind::BetaSweep if self.betas.is_empty() => {
                return Err(Error::Config("beta_sweep needs a non-empty betas list".into()))
            }
            _ => {}
        }
        if let Some(c) = &self.checkpoint {
            if !c.join(crate::model::CHECKPOINT_MANIFEST).exists() {
                return Err(Error::Config(format!("checkpoint {} not found", c.display())));
            }
        }
        self.model.validate()?;
        self.rl.validate()?;
        if let Some(p) = &self.rl_prioritized {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunCommand {
    Pretrain {
        model: ModelConfig,
        pretrain: PretrainConfig,
    },
    Finetune {
        checkpoint: PathBuf,
        checkpoint_sha256: String,
        n_pretrain: usize,
        rl: RLConfig,
    },
    Experiment {
        config: ExperimentConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub code_version: String,
    pub seed: u64,
    pub command: RunCommand,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// Every file the run wrote, relative to its directory.
    pub artifacts: Vec<Artifact>,
}

fn now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// All files below `dir` except the manifest itself, sorted by path.
pub fn index_artifacts(dir: &Path) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                files.push(path);
            }
        }
    }
    files.sort();
    files
        .iter()
        .map(|p| {
            Ok(Artifact {
                path: p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn with_manifest<T>(dir: &Path, seed: u64, command: RunCommand, job: impl FnOnce() -> Result<T>) -> Result<T> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = RunManifest {
        format: 1,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        command,
        started_unix: now(),
        finished_unix: None,
        artifacts: Vec::new(),
    };
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    let out = job()?;
    m.finished_unix = Some(now());
    m.artifacts = index_artifacts(dir)?;
    write_json(&dir.join(MANIFEST_FILE), &m)?;
    Ok(out)
}

// ---- single jobs -----------------------------------------------------------

/// `pretrain --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainJob {
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
}

/// `rl-finetune --config` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneJob {
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Longest operand seen in pre-training; defaults to `rl_digits - 1`.
    #[serde(default)]
    pub n_pretrain: Option<usize>,
    pub rl: RLConfig,
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn run_pretrain_job(job: &PretrainJob) -> Result<crate::pretrain::PretrainOutcome> {
    let cmd = RunCommand::Pretrain {
        model: job.model.clone(),
        pretrain: job.pretrain.clone(),
    };
    with_manifest(&job.out_dir, job.pretrain.seed, cmd, || {
        pretrain(&job.model, &job.pretrain, &job.out_dir)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub checkpoint_sha256: String,
    pub kl_mode: KlMode,
    pub beta: f64,
    pub seed: u64,
    pub initial_test_success: f64,
    pub final_test_success: Option<f64>,
    pub success_auc: f64,
    pub rounds: usize,
}

/// Fine-tunes into `dir`: `metrics.jsonl`, `traces.jsonl`, `summary.json` and
/// the final checkpoint under `final/`. On failure the last good parameters
/// are saved under `abort/`.
pub fn finetune_into(pretrained: &Params<f32>, rl: &RLConfig, n_pretrain: usize, dir: &Path) -> Result<FinetuneSummary> {
    rl.validate()?;
    rl_fits(pretrained.config(), rl.rl_digits)?;
    let probes = if rl.n_probes > 0 {
        Some(ProbeSet::sample(rl.n_probes, rl.rl_digits, n_pretrain, rl.seed)?)
    } else {
        None
    };
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let mut traces = MetricsWriter::create(&dir.join("traces.jsonl"))?;
    let mut last_good: Option<(usize, Params<f32>)> = None;
    let mut hook = |round: usize, p: &Params<f32>| -> Result<()> {
        last_good = Some((round, p.clone()));
        Ok(())
    };
    let res = finetune(pretrained, rl, probes.as_ref(), &mut metrics, &mut traces, &mut hook);
    let res = match res {
        Ok(r) => r,
        Err(e) => {
            let (round, p) = last_good.unwrap_or((0, pretrained.clone()));
            save_checkpoint(&p, &dir.join("abort"), round as u64, rl.seed, None)?;
            return Err(e);
        }
    };
    save_checkpoint(&res.params, &dir.join("final"), rl.collect_rounds as u64, rl.seed, None)?;
    let summary = FinetuneSummary {
        checkpoint_sha256: params_digest(pretrained),
        kl_mode: rl.kl_mode,
        beta: rl.beta,
        seed: rl.seed,
        initial_test_success: res.initial_test_success,
        final_test_success: res.records.iter().rev().find_map(|r| r.test_success_rate),
        success_auc: success_auc(res.initial_test_success, &res.records),
        rounds: rl.collect_rounds,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn rl_fits(model: &ModelConfig, digits: usize) -> Result<()> {
    model.check_fits(digits)
}

pub fn run_finetune_job(job: &FinetuneJob) -> Result<FinetuneSummary> {
    let (params, _) = load_checkpoint::<f32>(&job.checkpoint, None)?;
    let n_pretrain = job.n_pretrain.unwrap_or(job.rl.rl_digits.saturating_sub(1).max(1));
    let cmd = RunCommand::Finetune {
        checkpoint: job.checkpoint.clone(),
        checkpoint_sha256: params_digest(&params),
        n_pretrain,
        rl: job.rl.clone(),
    };
    with_manifest(&job.out_dir, job.rl.seed, cmd, || finetune_into(&params, &job.rl, n_pretrain, &job.out_dir))
}

// ---- aggregation -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

/// Mean with a normal-approximation 95% interval over seeds.
pub fn mean_ci(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    if n == 0 {
        return MeanCi { mean: f64::NAN, ci_low: f64::NAN, ci_high: f64::NAN, n };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let half = if n > 1 {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        1.959964 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanCi { mean, ci_low: mean - half, ci_high: mean + half, n }
}

/// One cross-seed point of a learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub arm: String,
    pub collect_round: usize,
    pub test_success: MeanCi,
}

fn test_points(initial: f64, records: &[FinetuneRecord]) -> Vec<(usize, f64)> {
    std::iter::once((0, initial))
        .chain(records.iter().filter_map(|r| r.test_success_rate.map(|s| (r.collect_round, s))))
        .collect()
}

/// Cross-seed mean curve over the rounds every run tested at.
fn aggregate_curve(arm: &str, runs: &[(f64, Vec<FinetuneRecord>)]) -> Vec<CurvePoint> {
    let series: Vec<Vec<(usize, f64)>> = runs.iter().map(|(i, r)| test_points(*i, r)).collect();
    let Some(first) = series.first() else { return Vec::new() };
    first
        .iter()
        .map(|&(round, _)| {
            let xs: Vec<f64> = series
                .iter()
                .filter_map(|s| s.iter().find(|(r, _)| *r == round).map(|&(_, x)| x))
                .collect();
            CurvePoint {
                arm: arm.to_string(),
                collect_round: round,
                test_success: mean_ci(&xs),
            }
        })
        .collect()
}

/// Probability below which a critical position counts as initially uncertain.
pub const UNCERTAIN_BELOW: f64 = 0.5;

/// Mean final-minus-final probability gap (`a - b`) over labels whose initial
/// probability under both runs is below [`UNCERTAIN_BELOW`]. `None` when no
/// label qualifies.
pub fn final_trace_gap(a: &[TraceRecord], b: &[TraceRecord]) -> Option<f64> {
    let ta = traces_from_records(a);
    let tb = traces_from_records(b);
    let mut gaps = Vec::new();
    for x in &ta {
        let Some(y) = tb.iter().find(|t| t.label == x.label) else { continue };
        let (Some(x0), Some(xf), Some(yf)) = (x.points.first(), x.points.last(), y.points.last()) else {
            continue;
        };
        if x0.1 < UNCERTAIN_BELOW {
            gaps.push(xf.1 - yf.1);
        }
    }
    (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
}

// ---- experiments -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: String,
    pub summary: Option<FinetuneSummary>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedResult {
    pub seed: u64,
    pub auc_standard: f64,
    pub auc_prioritized: f64,
    pub prioritized_wins: bool,
    /// Prioritized minus standard final probability on initially uncertain
    /// critical positions.
    pub trace_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaAggregate {
    pub beta: f64,
    pub success_auc: MeanCi,
    pub final_test_success: MeanCi,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentSummary {
    pub runs: Vec<RunOutcome>,
    pub accuracy: Vec<(EvalMode, Vec<AccuracyRow>)>,
    pub paired: Vec<PairedResult>,
    pub betas: Vec<BetaAggregate>,
    pub failures: Vec<String>,
}

fn run_dir(out: &Path, name: &str) -> PathBuf {
    out.join("runs").join(name)
}

fn rl_for(base: &RLConfig, digits: usize, seed: u64) -> RLConfig {
    RLConfig {
        rl_digits: digits,
        seed: derive_seed(seed, "finetune"),
        ..base.clone()
    }
}

/// Builds the dataset under `cfg.out_dir` and pre-trains at `n`. Returns the
/// best checkpoint directory.
pub fn pretrain_at(cfg: &ExperimentConfig, n: usize) -> Result<PathBuf> {
    let data = cfg.out_dir.join("data").join(format!("n{n}.jsonl"));
    build_dataset(
        &DatasetSpec {
            n_max: n,
            n_examples: cfg.data.n_examples,
            seed: cfg.data.seed,
            split: Split::Train,
        },
        &data,
    )?;
    let pcfg = PretrainConfig {
        dataset: data,
        eval_digits: Some(n),
        ..cfg.pretrain.clone()
    };
    let dir = cfg.out_dir.join("pretrain").join(format!("n{n}"));
    Ok(pretrain(&cfg.model, &pcfg, &dir)?.checkpoint)
}

/// The configured shared checkpoint, or a fresh pre-training run at `n`.
fn pretrained_for(cfg: &ExperimentConfig, n: usize) -> Result<Params<f32>> {
    let dir = match &cfg.checkpoint {
        Some(c) => c.clone(),
        None => pretrain_at(cfg, n)?,
    };
    Ok(load_checkpoint::<f32>(&dir, None)?.0)
}

fn run_one(pre: &Params<f32>, rl: &RLConfig, n: usize, out: &Path, name: &str) -> (RunOutcome, Option<(f64, Vec<FinetuneRecord>, Vec<TraceRecord>)>) {
    let dir = run_dir(out, name);
    match finetune_into(pre, rl, n, &dir) {
        Ok(s) => {
            let recs = read_records::<FinetuneRecord>(&dir.join("metrics.jsonl")).unwrap_or_default();
            let traces = read_records::<TraceRecord>(&dir.join("traces.jsonl")).unwrap_or_default();
            let init = s.initial_test_success;
            (
                RunOutcome { run: name.to_string(), summary: Some(s), error: None },
                Some((init, recs, traces)),
            )
        }
        Err(e) => (
            RunOutcome { run: name.to_string(), summary: None, error: Some(e.to_string()) },
            None,
        ),
    }
}

fn run_pretrain_compare(cfg: &ExperimentConfig, summary: &mut ExperimentSummary) -> Result<()> {
    let mut rows_id = Vec::new();
    let mut rows_var = Vec::new();
    let mut curves = Vec::new();
    for &n in &cfg.n_pretrain {
        let pre = match pretrained_for(cfg, n) {
            Ok(p) => p,
            Err(e) => {
                summary.failures.push(format!("n={n}: {e}"));
                continue;
            }
        };
        for (mode, rows) in [(EvalMode::Identical, &mut rows_id), (EvalMode::Varying, &mut rows_var)] {
            let mut reports: Vec<EvalReport> = Vec::new();
            for k in 0..4 {
                let ec = EvalConfig {
                    mode,
                    digit_length: n + k,
                    seed: derive_seed(cfg.eval.seed, &format!("n{n}")),
                    ..cfg.eval.clone()
                };
                match pre.config().check_fits(n + k).and_then(|_| evaluate_params(&pre, &ec)) {
                    Ok(r) => reports.push(r),
                    Err(e) => summary.failures.push(format!("n={n} eval {mode:?} {}: {e}", n + k)),
                }
            }
            rows.push(AccuracyRow { n_pretrain: n, reports });
        }
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let name = format!("n{n}-seed{seed}");
            let (o, data) = run_one(&pre, &rl_for(&cfg.rl, n + cfg.rl_offset, seed), n, &cfg.out_dir, &name);
            if let Some((i, r, _)) = data {
                runs.push((i, r));
            }
            summary.runs.push(o);
        }
        curves.extend(aggregate_curve(&format!("n{n}"), &runs));
    }
    let tables = cfg.out_dir.join("tables");
    for (mode, rows) in [(EvalMode::Identical, rows_id), (EvalMode::Varying, rows_var)] {
        let name = format!("{mode:?}").to_lowercase();
        let text = format_accuracy_table(&format!("{name} digit lengths"), &rows);
        std::fs::create_dir_all(&tables).map_err(|e| Error::io(&tables, e))?;
        let path = tables.join(format!("accuracy_{name}.txt"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let slim: Vec<AccuracyRow> = rows
            .into_iter()
            .map(|mut r| {
                r.reports.iter_mut().for_each(|x| x.outcomes.clear());
                r
            })
            .collect();
        summary.accuracy.push((mode, slim));
    }
    write_records(&cfg.out_dir.join("curves.jsonl"), &curves)
}

fn run_kl_compare(cfg: &ExperimentConfig, summary: &mut ExperimentSummary) -> Result<()> {
    let n = cfg.n_pretrain[0];
    let pre = pretrained_for(cfg, n)?;
    let prio = cfg.rl_prioritized.as_ref().expect("validated");
    let digits = n + cfg.rl_offset;
    let mut std_runs = Vec::new();
    let mut pri_runs = Vec::new();
    for &seed in &cfg.seeds {
        let (os, ds) = run_one(&pre, &rl_for(&cfg.rl, digits, seed), n, &cfg.out_dir, &format!("standard-seed{seed}"));
        let (op, dp) = run_one(&pre, &rl_for(prio, digits, seed), n, &cfg.out_dir, &format!("prioritized-seed{seed}"));
        if let (Some(a), Some(b)) = (&os.summary, &op.summary) {
            let gap = match (&ds, &dp) {
                (Some(x), Some(y)) => final_trace_gap(&y.2, &x.2),
                _ => None,
            };
            summary.paired.push(PairedResult {
                seed,
                auc_standard: a.success_auc,
                auc_prioritized: b.success_auc,
                prioritized_wins: b.success_auc > a.success_auc,
                trace_gap: gap,
            });
        }
        if let Some((i, r, _)) = ds {
            std_runs.push((i, r));
        }
        if let Some((i, r, _)) = dp {
            pri_runs.push((i, r));
        }
        summary.runs.push(os);
        summary.runs.push(op);
    }
    let mut curves = aggregate_curve("standard", &std_runs);
    curves.extend(aggregate_curve("prioritized", &pri_runs));
    write_records(&cfg.out_dir.join("curves.jsonl"), &curves)?;
    write_records(&cfg.out_dir.join("paired.jsonl"), &summary.paired)
}

fn run_beta_sweep(cfg: &ExperimentConfig, summary: &mut ExperimentSummary) -> Result<()> {
    let n = cfg.n_pretrain[0];
    let pre = pretrained_for(cfg, n)?;
    let digits = n + cfg.rl_offset;
    let mut curves = Vec::new();
    for &beta in &cfg.betas {
        let base = RLConfig {
            kl_mode: KlMode::Prioritized,
            beta,
            ..cfg.rl.clone()
        };
        let mut runs = Vec::new();
        for &seed in &cfg.seeds {
            let (o, d) = run_one(&pre, &rl_for(&base, digits, seed), n, &cfg.out_dir, &format!("beta{beta}-seed{seed}"));
            if let Some((i, r, _)) = d {
                runs.push((i, r));
            }
            summary.runs.push(o);
        }
        let aucs: Vec<f64> = runs.iter().map(|(i, r)| success_auc(*i, r)).collect();
        let finals: Vec<f64> = runs
            .iter()
            .filter_map(|(_, r)| r.iter().rev().find_map(|x| x.test_success_rate))
            .collect();
        summary.betas.push(BetaAggregate {
            beta,
            success_auc: mean_ci(&aucs),
            final_test_success: mean_ci(&finals),
            n_seeds: runs.len(),
        });
        curves.extend(aggregate_curve(&format!("beta{beta}"), &runs));
    }
    write_records(&cfg.out_dir.join("curves.jsonl"), &curves)?;
    write_records(&cfg.out_dir.join("sweep.jsonl"), &summary.betas)
}

/// Runs an experiment into `cfg.out_dir`. Failures of single runs are
/// recorded in the summary and do not stop the others.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let cmd = RunCommand::Experiment { config: cfg.clone() };
    with_manifest(&cfg.out_dir, cfg.seeds[0], cmd, || {
        let mut summary = ExperimentSummary::default();
        match cfg.kind {
            ExperimentKind::PretrainCompare => run_pretrain_compare(cfg, &mut summary)?,
            ExperimentKind::KlCompare => run_kl_compare(cfg, &mut summary)?,
            ExperimentKind::BetaSweep => run_beta_sweep(cfg, &mut summary)?,
        }
        write_json(&cfg.out_dir.join("summary.json"), &summary)?;
        Ok(summary)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerunReport {
    pub compared: usize,
    pub mismatched: Vec<String>,
    pub missing: Vec<String>,
}

impl RerunReport {
    pub fn identical(&self) -> bool {
        self.mismatched.is_empty() && self.missing.is_empty()
    }
}

/// Re-executes the job recorded in a manifest into `out_dir` and compares
/// every artifact digest with the original.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<RerunReport> {
    let m: RunManifest = read_json(manifest_path)?;
    match &m.command {
        RunCommand::Pretrain { model, pretrain } => {
            run_pretrain_job(&PretrainJob {
                out_dir: out_dir.to_path_buf(),
                model: model.clone(),
                pretrain: pretrain.clone(),
            })?;
        }
        RunCommand::Finetune { checkpoint, checkpoint_sha256, n_pretrain, rl } => {
            let (p, _) = load_checkpoint::<f32>(checkpoint, None)?;
            if &params_digest(&p) != checkpoint_sha256 {
                return Err(Error::Checkpoint(format!("{} changed since the run", checkpoint.display())));
            }
            run_finetune_job(&FinetuneJob {
                out_dir: out_dir.to_path_buf(),
                checkpoint: checkpoint.clone(),
                n_pretrain: Some(*n_pretrain),
                rl: rl.clone(),
            })?;
        }
        RunCommand::Experiment { config } => {
            run_experiment(&ExperimentConfig {
                out_dir: out_dir.to_path_buf(),
                ..config.clone()
            })?;
        }
    }
    let fresh: RunManifest = read_json(&out_dir.join(MANIFEST_FILE))?;
    let mut report = RerunReport { compared: 0, mismatched: Vec::new(), missing: Vec::new() };
    for a in &m.artifacts {
        match fresh.artifacts.iter().find(|b| b.path == a.path) {
            Some(b) => {
                report.compared += 1;
                if b.sha256 != a.sha256 {
                    report.mismatched.push(a.path.clone());
                }
            }
            None => report.missing.push(a.path.clone()),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretrain::LrSchedule;
    use crate::scratchpad::Vocabulary;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            context_len: 200,
            vocab_size: Vocabulary::scratchpad().size(),
            dropout_rate: 0.0,
            parameter_init_seed: 1,
        }
    }

    fn tiny_pretrain(dataset: PathBuf) -> PretrainConfig {
        PretrainConfig {
            dataset,
            batch_size: 2,
            steps: 3,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Constant,
            adam: Default::default(),
            grad_clip: Some(1.0),
            eval_every: 2,
            eval_examples: 2,
            eval_digits: None,
            overfit: false,
            seed: 4,
        }
    }

    fn tiny_rl() -> RLConfig {
        RLConfig {
            learning_rate: 1e-3,
            episodes_per_collect: 2,
            episodes_per_test: 2,
            collect_rounds: 2,
            rl_digits: 2,
            n_probes: 2,
            ..RLConfig::standard_reference()
        }
    }

    #[test]
    fn mean_ci_matches_hand_values() {
        let m = mean_ci(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        // sample variance 5/3, standard error sqrt(5/12)
        assert!((m.ci_high - 2.5 - 1.959964 * (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_ci(&[0.7]).ci_low, 0.7);
        assert!(mean_ci(&[]).mean.is_nan());
    }

    #[test]
    fn trace_gap_uses_initially_uncertain_labels_only() {
        let rec = |round, label: &str, p| TraceRecord { collect_round: round, label: label.into(), probability: p };
        let a = vec![rec(0, "x", 0.2), rec(0, "y", 0.9), rec(5, "x", 0.8), rec(5, "y", 0.95)];
        let b = vec![rec(0, "x", 0.2), rec(0, "y", 0.9), rec(5, "x", 0.5), rec(5, "y", 0.1)];
        assert!((final_trace_gap(&a, &b).unwrap() - 0.3).abs() < 1e-12);
        let c = vec![rec(0, "y", 0.9)];
        assert_eq!(final_trace_gap(&c, &c), None);
    }

    #[test]
    fn experiment_validation_names_the_missing_piece() {
        let base = ExperimentConfig {
            kind: ExperimentKind::KlCompare,
            out_dir: PathBuf::from("unused"),
            n_pretrain: vec![1],
            rl_offset: 1,
            seeds: vec![0],
            betas: vec![],
            checkpoint: None,
            model: tiny_model(),
            data: DataConfig { n_examples: 4, seed: 0 },
            pretrain: tiny_pretrain(PathBuf::new()),
            rl: tiny_rl(),
            rl_prioritized: None,
            eval: EvalConfig::default(),
        };
        let msg = base.validate().unwrap_err().to_string();
        assert!(msg.contains("rl_prioritized"), "{msg}");
        let sweep = ExperimentConfig { kind: ExperimentKind::BetaSweep, ..base.clone() };
        assert!(sweep.validate().unwrap_err().to_string().contains("betas"));
        let no_seeds = ExperimentConfig { kind: ExperimentKind::PretrainCompare, seeds: vec![], ..base };
        assert!(no_seeds.validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::BetaSweep,
            out_dir: PathBuf::from("runs/beta"),
            n_pretrain: vec![3],
            rl_offset: 1,
            seeds: vec![0, 1],
            betas: vec![0.0, 150.0],
            checkpoint: None,
            model: tiny_model(),
            data: DataConfig { n_examples: 10, seed: 3 },
            pretrain: tiny_pretrain(PathBuf::new()),
            rl: tiny_rl(),
            rl_prioritized: None,
            eval: EvalConfig::default(),
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn pretrain_and_finetune_jobs_rerun_bit_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("d.jsonl");
        build_dataset(&DatasetSpec { n_max: 2, n_examples: 8, seed: 0, split: Split::Train }, &data).unwrap();
        let job = PretrainJob {
            out_dir: tmp.path().join("pt"),
            model: tiny_model(),
            pretrain: tiny_pretrain(data),
        };
        let out = run_pretrain_job(&job).unwrap();
        let m: RunManifest = read_json(&job.out_dir.join(MANIFEST_FILE)).unwrap();
        assert!(m.finished_unix.is_some());
        assert!(m.artifacts.iter().any(|a| a.path == "metrics.jsonl"));
        assert!(m.artifacts.iter().any(|a| a.path == "checkpoint/params.bin"));
        let r = rerun(&job.out_dir.join(MANIFEST_FILE), &tmp.path().join("pt2")).unwrap();
        assert!(r.identical() && r.compared == m.artifacts.len(), "{r:?}");

        let ft = FinetuneJob {
            out_dir: tmp.path().join("ft"),
            checkpoint: out.checkpoint,
            n_pretrain: Some(1),
            rl: tiny_rl(),
        };
        let s = run_finetune_job(&ft).unwrap();
        assert!(s.final_test_success.is_some());
        for f in ["metrics.jsonl", "traces.jsonl", "summary.json", "final/params.bin"] {
            assert!(ft.out_dir.join(f).exists(), "{f}");
        }
        let traces: Vec<TraceRecord> = read_records(&ft.out_dir.join("traces.jsonl")).unwrap();
        assert!(!traces.is_empty());
        let r = rerun(&ft.out_dir.join(MANIFEST_FILE), &tmp.path().join("ft2")).unwrap();
        assert!(r.identical(), "{r:?}");
    }

    #[test]
    fn a_failing_length_does_not_stop_the_others() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            kind: ExperimentKind::PretrainCompare,
            out_dir: tmp.path().to_path_buf(),
            // 9-digit documents do not fit a 340-token context.
            n_pretrain: vec![9, 1],
            rl_offset: 1,
            seeds: vec![0],
            betas: vec![],
            checkpoint: None,
            model: ModelConfig { context_len: 340, ..tiny_model() },
            data: DataConfig { n_examples: 6, seed: 0 },
            pretrain: tiny_pretrain(PathBuf::new()),
            rl: RLConfig { collect_rounds: 1, n_probes: 0, ..tiny_rl() },
            rl_prioritized: None,
            eval: EvalConfig { n_examples: 3, n_resamples: 50, ..EvalConfig::default() },
        };
        let s = run_experiment(&cfg).unwrap();
        assert!(s.failures.iter().any(|f| f.starts_with("n=9")), "{:?}", s.failures);
        assert_eq!(s.runs.len(), 1);
        assert!(s.runs[0].error.is_none(), "{:?}", s.runs[0].error);
        let table = std::fs::read_to_string(tmp.path().join("tables/accuracy_varying.txt")).unwrap();
        assert!(table.contains("N+3"), "{table}");
        let curves: Vec<CurvePoint> = read_records(&tmp.path().join("curves.jsonl")).unwrap();
        assert_eq!(curves.len(), 2);
    }

    #[test]
    fn failed_finetune_leaves_an_abort_checkpoint() {
        let tmp = tempfile::tempdir().unwrap();
        let pre = Params::<f32>::init(tiny_model()).unwrap();
        let rl = RLConfig { learning_rate: 1e30, collect_rounds: 3, n_probes: 0, ..tiny_rl() };
        let err = finetune_into(&pre, &rl, 1, tmp.path()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
        assert!(tmp.path().join("abort/params.bin").exists());
    }
}
