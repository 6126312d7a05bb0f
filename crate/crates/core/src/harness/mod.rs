//! Training runs, evaluation, persisted outputs and multi-seed sweeps.
//!
//! A run directory contains:
//!
//! ```text
//! config.lock     resolved configuration (TOML)
//! manifest.txt    frozen splits used by the run
//! metrics.csv     one row per training step
//! eval.csv        step,accuracy for every evaluation
//! ckpt/best       checkpoint with the highest eval accuracy
//! charts/*.svg    entropy and accuracy dynamics
//! ```

pub mod charts;
mod config;

pub use config::RunConfig;

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grpo::{train_step, StepMetrics};
use crate::parallel;
use crate::policy::PolicyParams;
use crate::rng;
use crate::task::{reward, Manifest, TaskSample};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: RunConfig,
    pub metrics: Vec<StepMetrics>,
    pub evals: Vec<EvalRow>,
    pub best_step: usize,
    pub best_accuracy: f64,
    pub best_checkpoint: PathBuf,
}

/// Pass@1 accuracy: one sample per item at `temperature`.
///
/// Item `i` draws from the stream `(seed, EVAL, tag, i)`.
pub fn evaluate(params: &PolicyParams, items: &[TaskSample], temperature: f64, seed: u64, tag: u64) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let max_len = params.config().max_len;
    let indexed: Vec<(usize, &TaskSample)> = items.iter().enumerate().collect();
    let hits = parallel::try_map(&indexed, |&(i, s)| {
        let mut rng = rng::stream(seed, &[rng::EVAL, tag, i as u64]);
        params
            .sample_response(s, temperature, max_len, &mut rng)
            .map(|r| reward(&r.tokens, s).accuracy)
    })?;
    Ok(hits.iter().sum::<f64>() / items.len() as f64)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Loads the manifest named by the config, or generates one from `data_seed`.
pub fn resolve_manifest(config: &RunConfig) -> Result<Manifest> {
    match &config.manifest {
        Some(path) => Manifest::load(path),
        None => Ok(Manifest::generate(
            config.data_seed,
            config.train_size,
            config.test_size,
            config.num_questions,
        )),
    }
}

/// Positions into the train split for `step` (1-based): consecutive slices of
/// a per-epoch permutation.
fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch)
        .map(|k| {
            let pos = (step - 1) * batch + k;
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::stream(seed, &[rng::BATCH, epoch as u64]));
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// Runs `total_steps` training steps with periodic evaluation.
pub fn run(config: &RunConfig) -> Result<RunRecord> {
    config.validate()?;
    let out = &config.out;
    create_dir(out)?;
    create_dir(&out.join("ckpt"))?;
    let lock = out.join("config.lock");
    std::fs::write(&lock, config.to_toml()).map_err(|e| Error::io(&lock, e))?;

    let model = config.model();
    let trainer = config.trainer();
    let manifest = resolve_manifest(config)?;
    manifest.save(&out.join("manifest.txt"))?;
    let train = Manifest::materialize(&manifest.train, &model)?;
    let test = Manifest::materialize(&manifest.test, &model)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("manifest needs non-empty train and test splits".into()));
    }

    let mut theta = PolicyParams::init(&model, &mut rng::stream(config.seed, &[rng::INIT]))?;
    let reference = theta.clone();

    let metrics_path = out.join("metrics.csv");
    let eval_path = out.join("eval.csv");
    let mut metrics_csv = csv_writer(&metrics_path)?;
    let mut eval_csv = csv_writer(&eval_path)?;
    let best_checkpoint = out.join("ckpt").join("best");

    let mut record = RunRecord {
        config: config.clone(),
        metrics: Vec::with_capacity(config.total_steps),
        evals: Vec::new(),
        best_step: 0,
        best_accuracy: f64::NEG_INFINITY,
        best_checkpoint: best_checkpoint.clone(),
    };

    for step in 1..=config.total_steps {
        let batch: Vec<TaskSample> = batch_indices(config.seed, step, trainer.batch_size, train.len())
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        let outcome = train_step(&mut theta, &reference, &batch, &trainer, config.seed, step)?;
        let mut m = outcome.metrics;
        if config.deterministic {
            m.wall_ms = 0;
        }
        let finite = [m.mean_reward, m.entropy_eq3, m.entropy_eq7, m.kl_mean, m.mean_abs_pixel_delta]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !theta.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("metrics or parameters ({m:?})"),
            });
        }
        metrics_csv.serialize(&m).map_err(|e| csv_err(&metrics_path, e))?;
        metrics_csv.flush().map_err(|e| Error::io(&metrics_path, e))?;
        record.metrics.push(m);

        if step % config.eval_every == 0 || step == config.total_steps {
            let accuracy = evaluate(&theta, &test, config.eval_temperature, config.seed, step as u64)?;
            let row = EvalRow { step, accuracy };
            eval_csv.serialize(row).map_err(|e| csv_err(&eval_path, e))?;
            eval_csv.flush().map_err(|e| Error::io(&eval_path, e))?;
            record.evals.push(row);
            if accuracy > record.best_accuracy {
                record.best_accuracy = accuracy;
                record.best_step = step;
                theta.save(&best_checkpoint)?;
            }
        }
    }

    let series = [charts::Series {
        label: format!("{} seed {}", config.mode.name(), config.seed),
        metrics: &record.metrics,
    }];
    charts::emit_charts(&series, config.ema, &out.join("charts"))?;
    Ok(record)
}

/// Mean and population standard deviation of best accuracies.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub label: String,
    pub runs: usize,
    pub mean_best_accuracy: f64,
    pub std_best_accuracy: f64,
}

pub fn summarize(label: &str, records: &[RunRecord]) -> Summary {
    let n = records.len().max(1) as f64;
    let mean = records.iter().map(|r| r.best_accuracy).sum::<f64>() / n;
    let var = records.iter().map(|r| (r.best_accuracy - mean).powi(2)).sum::<f64>() / n;
    Summary {
        label: label.to_string(),
        runs: records.len(),
        mean_best_accuracy: mean,
        std_best_accuracy: var.sqrt(),
    }
}

/// One run per seed under `base.out/<label>/seed-<seed>`.
pub fn run_seeds(base: &RunConfig, label: &str, seeds: &[u64]) -> Result<Vec<RunRecord>> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig {
                seed,
                out: base.out.join(label).join(format!("seed-{seed}")),
                ..base.clone()
            };
            run(&cfg)
        })
        .collect()
}

/// Runs every labelled configuration over `seeds`, writes `summary.csv` into
/// `out` and returns the per-label summaries.
pub fn sweep(out: &Path, variants: &[(String, RunConfig)], seeds: &[u64]) -> Result<Vec<(Summary, Vec<RunRecord>)>> {
    create_dir(out)?;
    let mut results = Vec::new();
    for (label, cfg) in variants {
        let base = RunConfig {
            out: out.to_path_buf(),
            ..cfg.clone()
        };
        let records = run_seeds(&base, label, seeds)?;
        results.push((summarize(label, &records), records));
    }
    let path = out.join("summary.csv");
    let mut w = csv_writer(&path)?;
    for (s, _) in &results {
        w.serialize(s).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(results)
}
