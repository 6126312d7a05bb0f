//! Acceptance suite. Every test writes one `criterion N: PASS|FAIL` line to
//! stdout, uncaptured, and then asserts the same condition.
//!
//! Criteria 8-10 share one set of 200-step training runs (27 runs, several
//! minutes on one core). Their outputs stay under the cargo target tmpdir.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saei_core::autodiff::numeric_gradient;
use saei_core::egas::{egas_attack, entropy_and_image_grad, max_abs_diff, teacher_forced_entropy, AttackConfig};
use saei_core::grpo::{build_group, normalize_advantages, policy_objective, train_step, Mode, TrainerConfig};
use saei_core::harness::{self, charts, RunConfig, RunRecord};
use saei_core::rollout::{sample_group, tsec_select, Origin, Selection, StreamKey};
use saei_core::task::TaskSample;
use saei_core::{rng, ModelConfig, PolicyParams};

const SEEDS: [u64; 3] = [0, 1, 2];
const WARMUP: usize = 20;

fn report(criterion: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {criterion:>2}: {verdict}  {detail}").unwrap();
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_height: 12,
        image_width: 12,
        hidden_dim: 8,
        max_len: 6,
        ..ModelConfig::default()
    }
}

fn random_instance(config: &ModelConfig, seed: u64, scale: f64) -> (PolicyParams, TaskSample) {
    let params = PolicyParams::random(config, scale, &mut rng::stream(seed, &[100])).unwrap();
    let sample = TaskSample::sample(&mut rng::stream(seed, &[101]), config).unwrap();
    (params, sample)
}

fn clean_rollouts(params: &PolicyParams, sample: &TaskSample, n: usize, seed: u64) -> Vec<saei_core::Rollout> {
    let key = StreamKey { seed, step: 0, sample: 0 };
    sample_group(params, sample, &sample.image, n, 0, 1.0, Origin::Clean, key).unwrap()
}

#[test]
fn c01_entropy_image_gradient_matches_finite_differences() {
    let start = std::time::Instant::now();
    let config = tiny_model();
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let (params, sample) = random_instance(&config, seed, 0.5);
        let rollouts = clean_rollouts(&params, &sample, 3, seed);
        let qid = sample.question_id;
        let (_, analytic) =
            entropy_and_image_grad(&params, &sample.image, qid, &rollouts, Selection::Mid, 1.0).unwrap();
        let f = |px: &[f64]| {
            let img = saei_core::Tensor::new(sample.image.shape().to_vec(), px.to_vec()).unwrap();
            teacher_forced_entropy(&params, &img, qid, &rollouts, Selection::Mid, 1.0).unwrap()
        };
        let numeric = numeric_gradient(f, sample.image.data(), 1e-5);
        // Relative to the larger of the two magnitudes, floored at 1 so that
        // near-zero components are judged on absolute error.
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1.0));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-5 && secs < 60.0;
    report(1, pass, &format!("max rel err {worst:.3e} over 100 instances in {secs:.1}s"));
    assert!(pass);
}

#[test]
fn c02_attack_raises_selective_entropy() {
    let start = std::time::Instant::now();
    let config = ModelConfig::default();
    let attack = AttackConfig::default();
    let (mut increased, mut total_change) = (0, 0.0);
    let instances = 200;
    for seed in 0..instances as u64 {
        let (params, sample) = random_instance(&config, 1000 + seed, 0.3);
        let rollouts = clean_rollouts(&params, &sample, 4, seed);
        let adv = egas_attack(&params, &sample, &rollouts, &attack, 1.0).unwrap();
        let qid = sample.question_id;
        let before = teacher_forced_entropy(&params, &sample.image, qid, &rollouts, Selection::Mid, 1.0).unwrap();
        let after = teacher_forced_entropy(&params, &adv, qid, &rollouts, Selection::Mid, 1.0).unwrap();
        if after > before {
            increased += 1;
        }
        total_change += after - before;
    }
    let rate = increased as f64 / instances as f64;
    let mean = total_change / instances as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = rate >= 0.8 && mean > 0.0 && secs < 120.0;
    report(2, pass, &format!("increase in {rate:.3} of instances, mean change {mean:.3e}, {secs:.1}s"));
    assert!(pass);
}

#[test]
fn c03_perturbation_within_budget() {
    let config = tiny_model();
    let mut invocations = 0;
    let mut violations = 0;
    let mut check = |clean: &saei_core::Tensor, adv: &saei_core::Tensor, budget: f64| {
        invocations += 1;
        let in_range = adv.data().iter().all(|&p| (0.0..=1.0).contains(&p));
        if max_abs_diff(clean, adv) > budget || !in_range {
            violations += 1;
        }
    };
    for seed in 0..150u64 {
        let (params, sample) = random_instance(&config, 2000 + seed, 0.5);
        let rollouts = clean_rollouts(&params, &sample, 2, seed);
        for (alpha, iterations) in [(-2.0 / 255.0, 1), (-2.0 / 255.0, 2), (-0.05, 3), (-0.3, 2), (-0.7, 1)] {
            let attack = AttackConfig {
                alpha,
                iterations,
                ..AttackConfig::default()
            };
            let adv = egas_attack(&params, &sample, &rollouts, &attack, 1.0).unwrap();
            check(&sample.image, &adv, attack.budget());
        }
    }
    // Every attack inside a short training run as well.
    let mut theta = PolicyParams::init(&config, &mut rng::stream(3, &[rng::INIT])).unwrap();
    let reference = theta.clone();
    let trainer = TrainerConfig {
        learning_rate: 3.0,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let batch_rng = &mut rng::stream(3, &[rng::BATCH]);
    for step in 1..=10 {
        let batch: Vec<TaskSample> = (0..8).map(|_| TaskSample::sample(batch_rng, &config).unwrap()).collect();
        let outcome = train_step(&mut theta, &reference, &batch, &trainer, 3, step).unwrap();
        for g in &outcome.groups {
            check(&g.sample.image, g.adv_image.as_ref().unwrap(), trainer.attack.budget());
        }
    }
    let pass = violations == 0;
    report(3, pass, &format!("{violations} violations in {invocations} attack invocations"));
    assert!(pass);
}

fn population_std(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[test]
fn c04_advantage_invariants() {
    let floor = TrainerConfig::default().std_floor;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let levels = [0.0, 0.1, 1.0];
    let (mut worst_mean, mut worst_std, mut nonzero_constant, mut shift_breaks) = (0.0f64, 0.0f64, 0, 0);
    let mut shift_drift: f64 = 0.0;
    for _ in 0..10_000 {
        let n = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..n).map(|_| levels[rng.random_range(0..3)]).collect();
        let adv = normalize_advantages(&rewards, floor).unwrap();
        if population_std(&rewards) >= floor {
            worst_mean = worst_mean.max((adv.iter().sum::<f64>() / n as f64).abs());
            worst_std = worst_std.max((population_std(&adv) - 1.0).abs());
        } else if adv.iter().any(|&a| a != 0.0) {
            nonzero_constant += 1;
        }
        // Shifts of dyadic rewards by integers are exact in binary floating
        // point, so the advantages must agree bit for bit.
        let dyadic: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let c = rng.random_range(-64..=64) as f64;
        let shifted: Vec<f64> = dyadic.iter().map(|r| r + c).collect();
        if normalize_advantages(&dyadic, floor).unwrap() != normalize_advantages(&shifted, floor).unwrap() {
            shift_breaks += 1;
        }
        // For the task's own reward levels the shift is exact up to rounding.
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        for (a, b) in adv.iter().zip(normalize_advantages(&shifted, floor).unwrap()) {
            shift_drift = shift_drift.max((a - b).abs());
        }
    }
    for v in [0.0, 0.1, 1.0, 7.5] {
        if normalize_advantages(&[v; 6], floor).unwrap().iter().any(|&a| a != 0.0) {
            nonzero_constant += 1;
        }
    }
    let pass = worst_mean < 1e-9 && worst_std < 1e-6 && nonzero_constant == 0 && shift_breaks == 0 && shift_drift < 1e-12;
    report(
        4,
        pass,
        &format!(
            "max |mean| {worst_mean:.2e}, max |std-1| {worst_std:.2e}, constant-group failures {nonzero_constant}, \
             dyadic shift mismatches {shift_breaks}, shift drift on task rewards {shift_drift:.2e}"
        ),
    );
    assert!(pass);
}

/// Independent oracle: sort positions by (entropy, position) and keep ranks
/// `[L/3, 2L/3)`; fewer than three tokens keep everything.
fn tercile_oracle(entropies: &[f64]) -> BTreeSet<usize> {
    let len = entropies.len();
    if len < 3 {
        return (0..len).collect();
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    order[len / 3..2 * len / 3].iter().copied().collect()
}

#[test]
fn c05_tsec_matches_sort_and_slice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for case in 0..1000 {
        let len = rng.random_range(1..=50);
        // Every fourth vector is coarsely quantized to force ties.
        let v: Vec<f64> = (0..len)
            .map(|_| {
                let x: f64 = rng.random_range(0.0..2.8);
                if case % 4 == 0 {
                    (x * 4.0).floor() / 4.0
                } else {
                    x
                }
            })
            .collect();
        let got: BTreeSet<usize> = tsec_select(&v).into_iter().collect();
        if got != tercile_oracle(&v) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(5, pass, &format!("{mismatches} mismatches over 1000 vectors of length 1-50"));
    assert!(pass);
}

#[test]
fn c06_on_policy_ratios_are_one() {
    let config = ModelConfig::default();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_clip: f64 = 0.0;
    let mut worst_clean_saei: f64 = 0.0;
    let batch_rng = &mut rng::stream(6, &[rng::BATCH]);
    for mode in [Mode::Grpo, Mode::Saei] {
        let mut theta = PolicyParams::init(&config, &mut rng::stream(6, &[rng::INIT])).unwrap();
        let reference = theta.clone();
        let trainer = TrainerConfig {
            mode,
            n1: if mode == Mode::Grpo { 8 } else { 4 },
            n2: if mode == Mode::Grpo { 0 } else { 4 },
            learning_rate: 3.0,
            batch_size: 8,
            ..TrainerConfig::default()
        };
        for step in 1..=25 {
            let batch: Vec<TaskSample> = (0..8).map(|_| TaskSample::sample(batch_rng, &config).unwrap()).collect();
            if mode == Mode::Saei {
                // Clean-origin tokens are on-policy even when mixed with
                // adversarial ones.
                let groups: Vec<_> = batch
                    .iter()
                    .enumerate()
                    .map(|(i, s)| build_group(&theta, s, i, &trainer, 6, step).unwrap())
                    .collect();
                let out = policy_objective(&theta, &reference, &groups, &trainer, true).unwrap();
                for t in out.trace.iter().filter(|t| t.origin == Origin::Clean) {
                    worst_clean_saei = worst_clean_saei.max((t.ratio - 1.0).abs());
                }
            }
            let outcome = train_step(&mut theta, &reference, &batch, &trainer, 6, step).unwrap();
            if mode == Mode::Grpo {
                worst_ratio = worst_ratio.max(outcome.objective.max_ratio_error);
                worst_clip = worst_clip.max(outcome.metrics.clip_fraction);
            }
        }
    }
    let pass = worst_ratio <= 1e-12 && worst_clip == 0.0 && worst_clean_saei <= 1e-12;
    report(
        6,
        pass,
        &format!(
            "grpo: max |ratio-1| {worst_ratio:.2e}, max clip fraction {worst_clip}; \
             saei clean tokens: max |ratio-1| {worst_clean_saei:.2e}"
        ),
    );
    assert!(pass);
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn short_run(mode: Mode, name: &str) -> RunConfig {
    RunConfig {
        mode,
        learning_rate: 3.0,
        total_steps: 12,
        eval_every: 4,
        train_size: 200,
        test_size: 100,
        seed: 17,
        out: scratch(name),
        ..RunConfig::default()
    }
}

#[test]
fn c07_mixed_denominators_and_zero_step_attack() {
    let config = ModelConfig::default();
    let trainer = TrainerConfig {
        learning_rate: 3.0,
        ..TrainerConfig::default()
    };
    let theta = PolicyParams::random(&config, 0.3, &mut rng::stream(7, &[])).unwrap();
    let reference = theta.clone();
    let batch: Vec<TaskSample> = (0..6)
        .map(|_| TaskSample::sample(&mut rng::stream(7, &[rng::DATA]), &config).unwrap())
        .collect();
    let groups: Vec<_> = batch
        .iter()
        .enumerate()
        .map(|(i, s)| build_group(&theta, s, i, &trainer, 7, 1).unwrap())
        .collect();
    let out = policy_objective(&theta, &reference, &groups, &trainer, true).unwrap();
    let (mut adv_tokens, mut bad_numerators, mut bad_denominators, mut distinguishable) = (0, 0, 0, 0);
    for t in out.trace.iter().filter(|t| t.origin == Origin::Adversarial) {
        adv_tokens += 1;
        let g = &groups[t.group];
        let r = g.rollouts().nth(t.rollout).unwrap();
        let qid = g.sample.question_id;
        let on_clean = theta.sequence_logprobs(&g.sample.image, qid, &r.tokens, 1.0).unwrap()[t.position];
        let adv_image = g.adv_image.as_ref().unwrap();
        let on_adv = theta.sequence_logprobs(adv_image, qid, &r.tokens, 1.0).unwrap()[t.position];
        if t.logp_theta != on_clean {
            bad_numerators += 1;
        }
        if t.old_logprob != on_adv {
            bad_denominators += 1;
        }
        if on_clean != on_adv {
            distinguishable += 1;
        }
    }
    let instrumented = adv_tokens > 0 && bad_numerators == 0 && bad_denominators == 0 && distinguishable > 0;

    let grpo = harness::run(&RunConfig {
        n1: 4,
        n2: 4,
        ..short_run(Mode::Grpo, "c07-grpo")
    })
    .unwrap();
    let saei = harness::run(&RunConfig {
        alpha: 0.0,
        ..short_run(Mode::Saei, "c07-saei-alpha0")
    })
    .unwrap();
    let strip_mode = |r: &RunRecord| {
        r.metrics
            .iter()
            .map(|m| saei_core::StepMetrics { mode: Mode::Grpo, ..m.clone() })
            .collect::<Vec<_>>()
    };
    let bits = |r: &RunRecord| {
        strip_mode(r)
            .iter()
            .flat_map(|m| {
                [m.mean_reward, m.train_accuracy, m.entropy_eq3, m.entropy_eq7, m.clip_fraction, m.kl_mean]
                    .map(f64::to_bits)
            })
            .collect::<Vec<_>>()
    };
    let ckpt = |r: &RunRecord| std::fs::read(&r.best_checkpoint).unwrap();
    let bitwise = bits(&grpo) == bits(&saei) && grpo.evals == saei.evals && ckpt(&grpo) == ckpt(&saei);

    let pass = instrumented && bitwise;
    report(
        7,
        pass,
        &format!(
            "{adv_tokens} adversarial tokens: {bad_numerators} numerators off the clean image, \
             {bad_denominators} denominators off the adversarial image, {distinguishable} where the two differ; \
             saei(alpha=0) == grpo(n=8) bitwise: {bitwise}"
        ),
    );
    assert!(pass);
}

/// Learning rate for the 200-step comparisons. Chosen by tuning plain GRPO
/// alone on seeds 10 and 11 (best eval accuracy over 1, 2, 3 and 5); the
/// acceptance seeds played no part.
const STUDY_LR: f64 = 3.0;

struct Study {
    grpo: Vec<RunRecord>,
    saei: Vec<RunRecord>,
    noise: Vec<(usize, Vec<RunRecord>)>,
    low: Vec<RunRecord>,
    high: Vec<RunRecord>,
    all: Vec<RunRecord>,
}

fn study() -> &'static Study {
    static STUDY: OnceLock<Study> = OnceLock::new();
    STUDY.get_or_init(|| {
        let root = scratch("study");
        let base = RunConfig {
            learning_rate: STUDY_LR,
            n1: 4,
            n2: 4,
            total_steps: 200,
            out: root,
            ..RunConfig::default()
        };
        let runs = |label: &str, cfg: RunConfig| harness::run_seeds(&cfg, label, &SEEDS).unwrap();
        let saei_with = |selection| RunConfig {
            mode: Mode::Saei,
            tercile: selection,
            ..base.clone()
        };
        Study {
            grpo: runs("grpo", RunConfig { mode: Mode::Grpo, ..base.clone() }),
            saei: runs("saei", saei_with(Selection::Mid)),
            noise: [200, 300, 400, 500]
                .into_iter()
                .map(|steps| {
                    let cfg = RunConfig {
                        mode: Mode::Noise,
                        noise_steps: steps,
                        ..base.clone()
                    };
                    (steps, runs(&format!("noise-{steps}"), cfg))
                })
                .collect(),
            low: runs("tsec-low", saei_with(Selection::Low)),
            high: runs("tsec-high", saei_with(Selection::High)),
            all: runs("tsec-all", saei_with(Selection::All)),
        }
    })
}

fn mean_best(records: &[RunRecord]) -> f64 {
    harness::summarize("", records).mean_best_accuracy
}

/// Seed-averaged EMA of the per-step policy entropy.
fn mean_entropy_ema(records: &[RunRecord]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let raw: Vec<f64> = r.metrics.iter().map(|m| m.entropy_eq3).collect();
            charts::ema(&raw, r.config.ema)
        })
        .collect();
    (0..curves[0].len())
        .map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64)
        .collect()
}

#[test]
fn c08_saei_keeps_entropy_higher_without_losing_accuracy() {
    let s = study();
    let (g, a) = (mean_entropy_ema(&s.grpo), mean_entropy_ema(&s.saei));
    let after = WARMUP..g.len();
    let above = after.clone().filter(|&i| a[i] > g[i]).count() as f64 / after.len() as f64;
    let per_seed: Vec<(f64, f64)> = s
        .grpo
        .iter()
        .zip(&s.saei)
        .map(|(g, a)| (g.best_accuracy, a.best_accuracy))
        .collect();
    let accuracy_ok = per_seed.iter().all(|&(g, a)| a >= g - 0.02);
    let pass = above >= 0.7 && accuracy_ok;
    report(
        8,
        pass,
        &format!(
            "saei EMA entropy above grpo at {above:.3} of steps after warmup; best accuracy per seed \
             (grpo, saei) {per_seed:?}; means grpo {:.4} saei {:.4}",
            mean_best(&s.grpo),
            mean_best(&s.saei)
        ),
    );
    assert!(pass);
}

#[test]
fn c09_random_noise_is_sensitive_and_saei_matches_best_noise() {
    let s = study();
    let means: Vec<(usize, f64)> = s.noise.iter().map(|(k, r)| (*k, mean_best(r))).collect();
    let largest = means.iter().find(|m| m.0 == 500).unwrap().1;
    let best_moderate = means.iter().filter(|m| m.0 < 500).map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let best_noise = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    let saei = mean_best(&s.saei);
    let pass = largest < best_moderate && saei >= best_noise;
    report(
        9,
        pass,
        &format!("mean best accuracy by noise steps {means:?}; saei {saei:.4}"),
    );
    assert!(pass);
}

#[test]
fn c10_mid_tercile_is_best_attack_objective() {
    let s = study();
    let mid = mean_best(&s.saei);
    let others = [("low", mean_best(&s.low)), ("high", mean_best(&s.high)), ("all", mean_best(&s.all))];
    let pass = others.iter().all(|o| mid >= o.1);
    report(10, pass, &format!("mean best accuracy mid {mid:.4} vs {others:?}"));
    assert!(pass);
}

#[test]
fn c11_runs_are_byte_reproducible() {
    let mut identical = true;
    for mode in [Mode::Grpo, Mode::Saei, Mode::Noise] {
        let a = harness::run(&short_run(mode, &format!("c11-{}-a", mode.name()))).unwrap();
        let b = harness::run(&short_run(mode, &format!("c11-{}-b", mode.name()))).unwrap();
        for file in ["metrics.csv", "eval.csv", "ckpt/best"] {
            let read = |r: &RunRecord| std::fs::read(r.config.out.join(file)).unwrap();
            identical &= read(&a) == read(&b);
        }
    }
    report(11, identical, &format!("metrics.csv, eval.csv and ckpt/best identical across reruns: {identical}"));
    assert!(identical);
}
