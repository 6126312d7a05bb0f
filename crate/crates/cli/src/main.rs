use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use saei_core::grpo::Mode;
use saei_core::harness::{self, charts, RunConfig, RunRecord, Summary};
use saei_core::rollout::Selection;
use saei_core::task::Manifest;
use saei_core::PolicyParams;

#[derive(Parser)]
#[command(name = "saei", version, about = "Entropy-guided adversarial rollout sampling experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct SweepArgs {
    /// Base run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the number of training steps.
    #[arg(long)]
    steps_per_run: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pass@1 accuracy of a checkpoint on the test records of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Entropy and accuracy charts from one or more metrics.csv files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        ema: f64,
    },
    /// SaEI runs with the attack objective restricted to one entropy tercile.
    AblateTsec {
        #[arg(long, value_parser = parse_selection)]
        tercile: Selection,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// SaEI runs with a given number of attack iterations.
    AblateAttackIters {
        #[arg(long = "T", value_parser = clap::value_parser!(u64).range(1..=2))]
        iterations: u64,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Random-noise baseline over several noise step counts, plus a SaEI reference.
    SweepNoise {
        #[arg(long, value_delimiter = ',', default_value = "200,300,400,500")]
        steps: Vec<usize>,
        #[arg(long)]
        skip_saei: bool,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Write a frozen train/test manifest.
    MakeManifest {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = saei_core::task::DEFAULT_TRAIN)]
        train: usize,
        #[arg(long, default_value_t = saei_core::task::DEFAULT_TEST)]
        test: usize,
        #[arg(long, default_value_t = saei_core::ModelConfig::default().num_questions)]
        questions: usize,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected grpo, saei or noise)"))
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    Selection::parse(s).ok_or_else(|| format!("unknown tercile `{s}` (expected low, mid, high or all)"))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn report(record: &RunRecord) {
    println!(
        "{} seed {}: best eval accuracy {:.4} at step {} ({})",
        record.config.mode.name(),
        record.config.seed,
        record.best_accuracy,
        record.best_step,
        record.best_checkpoint.display()
    );
}

fn run_sweep(sweep: &SweepArgs, default_out: &str, variants: Vec<(String, RunConfig)>) -> Result<()> {
    let out = sweep.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    let variants = variants
        .into_iter()
        .map(|(label, mut cfg)| {
            if let Some(n) = sweep.steps_per_run {
                cfg.total_steps = n;
            }
            (label, cfg)
        })
        .collect::<Vec<_>>();
    let results = harness::sweep(&out, &variants, &sweep.seeds)?;
    let mut series = Vec::new();
    for (summary, records) in &results {
        print_summary(summary);
        for r in records {
            series.push((format!("{} s{}", summary.label, r.config.seed), r));
        }
    }
    let series: Vec<charts::Series> = series
        .iter()
        .map(|(label, r)| charts::Series {
            label: label.clone(),
            metrics: &r.metrics,
        })
        .collect();
    let ema = variants.first().map_or(0.9, |v| v.1.ema);
    charts::emit_charts(&series, ema, &out.join("charts"))?;
    println!("summary written to {}", out.join("summary.csv").display());
    Ok(())
}

fn print_summary(s: &Summary) {
    println!(
        "{:<12} runs {}  best accuracy {:.4} +/- {:.4}",
        s.label, s.runs, s.mean_best_accuracy, s.std_best_accuracy
    );
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, mode, seed, out } => {
            let mut cfg = load_config(Some(&config))?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let record = harness::run(&cfg)?;
            report(&record);
        }
        Command::Eval {
            checkpoint,
            split,
            temperature,
            seed,
        } => {
            let params = PolicyParams::load(&checkpoint)?;
            let manifest = Manifest::load(&split)?;
            let records = if manifest.test.is_empty() { &manifest.train } else { &manifest.test };
            if records.is_empty() {
                bail!("{} lists no samples", split.display());
            }
            let items = Manifest::materialize(records, params.config())?;
            let acc = harness::evaluate(&params, &items, temperature, seed, 0)?;
            println!("pass@1 accuracy {acc:.4} over {} items", items.len());
        }
        Command::Plot { runs, out, ema } => {
            for p in charts::emit_charts_from_csv(&runs, ema, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::AblateTsec { tercile, sweep } => {
            let mut cfg = load_config(sweep.config.as_deref())?;
            cfg.mode = Mode::Saei;
            cfg.tercile = tercile;
            run_sweep(&sweep, "runs/ablate-tsec", vec![(tercile.name().to_string(), cfg)])?;
        }
        Command::AblateAttackIters { iterations, sweep } => {
            let mut cfg = load_config(sweep.config.as_deref())?;
            cfg.mode = Mode::Saei;
            cfg.attack_iters = iterations as usize;
            run_sweep(&sweep, "runs/ablate-attack-iters", vec![(format!("T{iterations}"), cfg)])?;
        }
        Command::SweepNoise { steps, skip_saei, sweep } => {
            let base = load_config(sweep.config.as_deref())?;
            let mut variants: Vec<(String, RunConfig)> = steps
                .iter()
                .map(|&s| {
                    let cfg = RunConfig {
                        mode: Mode::Noise,
                        noise_steps: s,
                        ..base.clone()
                    };
                    (format!("noise-{s}"), cfg)
                })
                .collect();
            if !skip_saei {
                variants.push((
                    "saei".to_string(),
                    RunConfig {
                        mode: Mode::Saei,
                        ..base
                    },
                ));
            }
            run_sweep(&sweep, "runs/sweep-noise", variants)?;
        }
        Command::MakeManifest {
            out,
            seed,
            train,
            test,
            questions,
        } => {
            Manifest::generate(seed, train, test, questions).save(&out)?;
            println!("wrote {} ({train} train, {test} test)", out.display());
        }
    }
    Ok(())
}
