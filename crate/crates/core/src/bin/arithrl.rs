use arithrl::a2c::KlMode;
use arithrl::eval::{evaluate_params, EvalConfig, EvalMode};
use arithrl::metrics::write_json;
use arithrl::model::{load_checkpoint, Decoding};
use arithrl::runner::{self, ExperimentConfig, FinetuneJob, PretrainJob};
use arithrl::scratchpad::{build_dataset, DatasetSpec, Split};
use arithrl::token_analysis::{analyze, format_stats_table, render_certainty_transcript, AnalysisConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "arithrl", version, about = "Scratchpad addition: pre-training, A2C fine-tuning and token analysis")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a stratified scratchpad dataset and its manifest.
    GenData {
        #[arg(long)]
        n_max: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Pre-train from a TOML job file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a checkpoint with A2C from a TOML job file.
    RlFinetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kl_mode: Option<KlMode>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy accuracy with a bootstrap interval.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "varying")]
        mode: EvalMode,
        #[arg(long)]
        digits: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the full report, with per-example outcomes, as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certainty profiles and critical-token statistics.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_pretrain: usize,
        #[arg(long)]
        digits: usize,
        #[arg(long, default_value_t = 50)]
        generations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample at temperature 1 instead of decoding greedily.
        #[arg(long)]
        sample: bool,
        /// Directory for `analysis.json` and `transcript.html`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a pretrain_compare, kl_compare or beta_sweep experiment.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-run a recorded job and compare its artifacts with the original.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

fn run(cli: Cli) -> arithrl::Result<()> {
    match cli.cmd {
        Cmd::GenData { n_max, count, seed, out, split } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let m = build_dataset(&DatasetSpec { n_max, n_examples: count, seed, split }, &out)?;
            println!("wrote {} examples to {}", m.n_examples, out.display());
        }
        Cmd::Pretrain { config } => {
            let job: PretrainJob = runner::load_toml(&config)?;
            let out = runner::run_pretrain_job(&job)?;
            println!(
                "best checkpoint {} (step {}, accuracy {})",
                out.checkpoint.display(),
                out.best_step,
                out.best_accuracy.map_or("n/a".into(), |a| format!("{:.3}", a))
            );
        }
        Cmd::RlFinetune { config, kl_mode, beta, seed, out } => {
            let mut job: FinetuneJob = runner::load_toml(&config)?;
            if let Some(m) = kl_mode {
                job.rl.kl_mode = m;
            }
            if let Some(b) = beta {
                job.rl.beta = b;
            }
            if let Some(s) = seed {
                job.rl.seed = s;
            }
            if let Some(o) = out {
                job.out_dir = o;
            }
            let s = runner::run_finetune_job(&job)?;
            println!(
                "initial {:.3}  final {}  auc {:.3}",
                s.initial_test_success,
                s.final_test_success.map_or("n/a".into(), |x| format!("{x:.3}")),
                s.success_auc
            );
        }
        Cmd::Eval { checkpoint, mode, digits, n, seed, out } => {
            let (params, _) = load_checkpoint::<f32>(&checkpoint, None)?;
            let cfg = EvalConfig {
                mode,
                digit_length: digits,
                n_examples: n,
                seed,
                ..EvalConfig::default()
            };
            let r = evaluate_params(&params, &cfg)?;
            println!(
                "{mode:?} {digits}-digit: {:.1}% ({}/{}), 95% CI [{:.1}%, {:.1}%]",
                100.0 * r.accuracy,
                r.n_correct,
                r.n_examples,
                100.0 * r.ci_low,
                100.0 * r.ci_high
            );
            if let Some(o) = out {
                write_json(&o, &r)?;
            }
        }
        Cmd::Analyze { checkpoint, n_pretrain, digits, generations, seed, sample, out } => {
            let (params, _) = load_checkpoint::<f32>(&checkpoint, None)?;
            let cfg = AnalysisConfig {
                n_pretrain,
                digits,
                generations,
                decoding: if sample { Decoding::Sample } else { Decoding::Greedy },
                seed,
            };
            let report = analyze(&params, &cfg)?;
            print!("{}", format_stats_table(&[(n_pretrain, report.stats.clone())]));
            for d in &report.diagnostics {
                eprintln!("note: {d}");
            }
            if let Some(first) = report.profiles.first() {
                let t = render_certainty_transcript(first);
                println!("{}", t.ansi);
                if let Some(dir) = &out {
                    std::fs::create_dir_all(dir).map_err(|e| arithrl::Error::io(dir, e))?;
                    let path = dir.join("transcript.html");
                    std::fs::write(&path, t.html).map_err(|e| arithrl::Error::io(&path, e))?;
                }
            }
            if let Some(dir) = &out {
                write_json(&dir.join("analysis.json"), &report)?;
            }
        }
        Cmd::Sweep { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = runner::run_experiment(&cfg)?;
            let failed = s.runs.iter().filter(|r| r.error.is_some()).count();
            println!("{} runs, {failed} failed; results in {}", s.runs.len(), cfg.out_dir.display());
            for f in s.failures.iter().chain(s.runs.iter().filter_map(|r| r.error.as_ref())) {
                eprintln!("failure: {f}");
            }
        }
        Cmd::Rerun { manifest, out } => {
            let r = runner::rerun(&manifest, &out)?;
            if r.identical() {
                println!("all {} artifacts identical", r.compared);
            } else {
                for p in &r.mismatched {
                    println!("differs: {p}");
                }
                for p in &r.missing {
                    println!("missing: {p}");
                }
                return Err(arithrl::Error::Config("re-run did not reproduce the original artifacts".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
