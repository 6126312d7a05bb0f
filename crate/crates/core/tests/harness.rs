use saei_core::grpo::Mode;
use saei_core::harness::{self, charts, evaluate, RunConfig};
use saei_core::policy::tokens;
use saei_core::task::{reward, Manifest};
use saei_core::{rng, Error, ModelConfig, PolicyParams, TaskSample};

fn small(dir: &std::path::Path, mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        hidden_dim: 8,
        batch_size: 4,
        train_size: 30,
        test_size: 20,
        total_steps: 1,
        learning_rate: 1.0,
        out: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

/// A policy that always answers `OPEN digit CLOSE END`, whatever the image.
fn scripted(config: &ModelConfig, digit: usize) -> PolicyParams {
    let mut p = PolicyParams::zeros(config).unwrap();
    let (h, v) = (config.hidden_dim, config.vocab_size);
    for i in 0..h {
        p.input_w.data_mut()[i * h + i] = 1.0;
    }
    let mut embed = |token: usize, unit: usize| p.token_emb.data_mut()[token * h + unit] = 3.0;
    embed(v, 0);
    embed(tokens::OPEN, 1);
    for d in 0..10 {
        embed(tokens::digit(d), 2);
    }
    embed(tokens::CLOSE, 3);
    for (unit, next) in [(0, tokens::OPEN), (1, tokens::digit(digit)), (2, tokens::CLOSE), (3, tokens::END)] {
        p.out_w.data_mut()[unit * v + next] = 100.0;
    }
    p
}

#[test]
fn one_step_run_writes_one_metrics_and_one_eval_row() {
    let dir = tempfile::tempdir().unwrap();
    let record = harness::run(&small(dir.path(), Mode::Saei)).unwrap();
    assert_eq!(record.metrics.len(), 1);
    assert_eq!(record.evals.len(), 1);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.starts_with(
        "step,mode,mean_reward,train_accuracy,entropy_eq3,entropy_eq7,clip_fraction,kl_mean,mean_abs_pixel_delta,wall_ms"
    ));
    let evals = std::fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(evals.lines().count(), 2);
    assert!(PolicyParams::load(&record.best_checkpoint).is_ok());
    let lock = std::fs::read_to_string(dir.path().join("config.lock")).unwrap();
    assert_eq!(RunConfig::from_toml(&lock).unwrap(), record.config);
}

#[test]
fn best_checkpoint_tracks_maximum_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        total_steps: 7,
        eval_every: 2,
        ..small(dir.path(), Mode::Grpo)
    };
    let record = harness::run(&cfg).unwrap();
    let steps: Vec<usize> = record.evals.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![2, 4, 6, 7]);
    let best = record.evals.iter().map(|e| e.accuracy).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(record.best_accuracy, best);
    assert!(record.metrics.windows(2).all(|w| w[0].step < w[1].step));
    let first_best = record.evals.iter().find(|e| e.accuracy == best).unwrap().step;
    assert_eq!(record.best_step, first_best);
}

#[test]
fn metrics_csv_round_trips_through_chart_reader() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        total_steps: 3,
        ..small(dir.path(), Mode::Noise)
    };
    let record = harness::run(&cfg).unwrap();
    let back = charts::read_metrics(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(back, record.metrics);
}

#[test]
fn malformed_metrics_report_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    std::fs::write(
        &path,
        "step,mode,mean_reward,train_accuracy,entropy_eq3,entropy_eq7,clip_fraction,kl_mean,mean_abs_pixel_delta,wall_ms\n\
         1,grpo,0.1,0,2.7,2.7,0,0,0,0\n\
         2,grpo,oops,0,2.7,2.7,0,0,0,0\n",
    )
    .unwrap();
    match charts::read_metrics(&path) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn non_finite_weights_stop_training() {
    let config = ModelConfig::default();
    let mut theta = PolicyParams::init(&config, &mut rng::stream(0, &[])).unwrap();
    theta.out_b.data_mut()[0] = f64::NAN;
    let reference = theta.clone();
    let batch: Vec<TaskSample> = (0..2)
        .map(|i| TaskSample::generate(i, 0, &config).unwrap())
        .collect();
    let trainer = saei_core::TrainerConfig::default();
    let err = saei_core::grpo::train_step(&mut theta, &reference, &batch, &trainer, 0, 1).unwrap_err();
    assert!(
        matches!(err, Error::NonFinite { .. } | Error::InvalidLogits),
        "unexpected error {err}"
    );
}

#[test]
fn evaluate_scripted_policies() {
    let config = ModelConfig::default();
    let manifest = Manifest::generate(5, 0, 400, config.num_questions);
    let items = Manifest::materialize(&manifest.test, &config).unwrap();
    let threes: Vec<TaskSample> = items.iter().filter(|s| s.answer == 3).cloned().collect();
    let others: Vec<TaskSample> = items.iter().filter(|s| s.answer != 3).cloned().collect();
    assert!(!threes.is_empty() && !others.is_empty());
    let policy = scripted(&config, 3);
    let mut r = rng::stream(0, &[]);
    let rollout = policy.sample_response(&threes[0], 0.6, config.max_len, &mut r).unwrap();
    assert_eq!(rollout.tokens, vec![tokens::OPEN, tokens::digit(3), tokens::CLOSE, tokens::END]);
    assert_eq!(reward(&rollout.tokens, &threes[0]).total, 1.0);
    assert_eq!(evaluate(&policy, &threes, 0.6, 0, 0).unwrap(), 1.0);
    assert_eq!(evaluate(&policy, &others, 0.6, 0, 0).unwrap(), 0.0);
}

#[test]
fn uniform_policy_rarely_answers() {
    let config = ModelConfig::default();
    let manifest = Manifest::generate(6, 0, 500, config.num_questions);
    let items = Manifest::materialize(&manifest.test, &config).unwrap();
    let uniform = PolicyParams::zeros(&config).unwrap();
    let acc = evaluate(&uniform, &items, 0.6, 0, 0).unwrap();
    assert!(acc < 0.02, "{acc}");
}

#[test]
fn evaluate_rejects_empty_split() {
    let config = ModelConfig::default();
    let p = PolicyParams::zeros(&config).unwrap();
    assert!(evaluate(&p, &[], 0.6, 0, 0).is_err());
}
