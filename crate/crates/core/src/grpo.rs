//! Group-relative policy optimization with optional second rollout groups
//! sampled on adversarial or noised images.
//!
//! Every rollout caches `log pi_old` at sampling time under the image it was
//! drawn on, while the current policy is always evaluated on the clean image.
//! The ratio of an adversarial-origin token therefore pairs a clean numerator
//! with an adversarial denominator without any recomputation.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::egas::{egas_attack, mean_abs_diff, AttackConfig};
use crate::parallel;
use crate::policy::{ParamGrads, PolicyParams, PolicyTape};
use crate::rng;
use crate::rollout::{
    entropies, group_entropy, sample_group, selective_group_entropy, Origin, RolloutGroup, Selection, StreamKey,
};
use crate::task::{reward, TaskSample};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Grpo,
    Saei,
    Noise,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grpo" => Some(Self::Grpo),
            "saei" => Some(Self::Saei),
            "noise" => Some(Self::Noise),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Grpo => "grpo",
            Self::Saei => "saei",
            Self::Noise => "noise",
        }
    }
}

/// How per-token objective terms are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    /// One global mean over every token in the batch.
    #[default]
    TokenMean,
    /// Mean over tokens within a response, then over responses, then groups.
    SequenceMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub n1: usize,
    pub n2: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub rollout_temperature: f64,
    pub batch_size: usize,
    pub noise_steps: usize,
    pub noise_sigma: f64,
    pub std_floor: f64,
    pub loss_aggregation: LossAggregation,
    pub attack: AttackConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Saei,
            n1: 4,
            n2: 4,
            clip_eps: 0.2,
            kl_beta: 1e-2,
            learning_rate: 1e-3,
            rollout_temperature: 1.0,
            batch_size: 16,
            noise_steps: 300,
            noise_sigma: 0.01,
            std_floor: 1e-6,
            loss_aggregation: LossAggregation::TokenMean,
            attack: AttackConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail("clip_eps must be in (0, 1)");
        }
        if self.kl_beta.is_nan() || self.kl_beta < 0.0 {
            return fail("kl_beta must be >= 0");
        }
        if self.n1 == 0 {
            return fail("n1 must be >= 1");
        }
        if self.mode == Mode::Grpo && self.n2 != 0 {
            return fail("grpo mode samples a single group: set n2 = 0 and put the group size in n1");
        }
        if self.n1 + self.n2 < 2 {
            return fail("joint group needs at least 2 rollouts");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and >= 0");
        }
        if self.rollout_temperature.is_nan() || self.rollout_temperature <= 0.0 {
            return fail("rollout_temperature must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1");
        }
        if [self.noise_sigma, self.std_floor].iter().any(|v| v.is_nan() || *v < 0.0) {
            return fail("noise_sigma and std_floor must be >= 0");
        }
        self.attack.validate()
    }

    /// Size of the second rollout group actually sampled.
    fn second_group(&self) -> usize {
        match self.mode {
            Mode::Grpo => 0,
            Mode::Saei | Mode::Noise => self.n2,
        }
    }
}

/// Z-scores of a group's rewards with the population standard deviation;
/// all zeros when the deviation is below `std_floor`.
pub fn normalize_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    // Offsets from the first reward: a common shift of every reward cancels
    // here exactly whenever the shifted rewards are representable.
    let pivot = rewards[0];
    let offsets: Vec<f64> = rewards.iter().map(|r| r - pivot).collect();
    let n = rewards.len() as f64;
    let mean = offsets.iter().sum::<f64>() / n;
    let var = offsets.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(offsets.iter().map(|d| (d - mean) / std).collect())
}

/// `min(ratio * A, clamp(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the clipped branch is the (strict) minimum, which zeroes the gradient.
pub fn clip_active(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    clipped * advantage < ratio * advantage
}

/// Derivative of [`clipped_term`] with respect to `log pi_theta`.
fn clipped_term_dlogp(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    if clip_active(ratio, advantage, clip_eps) {
        0.0
    } else {
        ratio * advantage
    }
}

/// k3 estimator `r - ln r - 1` with `r = pi_ref / pi_theta` at the realized token.
pub fn kl_term(logp_theta: f64, logp_ref: f64) -> f64 {
    let log_r = logp_ref - logp_theta;
    log_r.exp() - log_r - 1.0
}

fn kl_term_dlogp(logp_theta: f64, logp_ref: f64) -> f64 {
    1.0 - (logp_ref - logp_theta).exp()
}

/// One token's contribution to the objective, for instrumentation.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTrace {
    pub group: usize,
    pub rollout: usize,
    pub position: usize,
    pub origin: Origin,
    /// `log pi_theta`, evaluated on the clean image.
    pub logp_theta: f64,
    /// Cached `log pi_old`, recorded on the image the rollout was sampled on.
    pub old_logprob: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    /// Value of the (maximized) objective.
    pub objective: f64,
    /// Gradient of `-objective` with respect to every parameter.
    pub grads: ParamGrads,
    pub tokens: usize,
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub max_ratio_error: f64,
    pub trace: Vec<TokenTrace>,
}

struct GroupTerms {
    objective: f64,
    grads: ParamGrads,
    clipped: usize,
    kl_sum: f64,
    max_ratio_error: f64,
    trace: Vec<TokenTrace>,
}

/// Clipped surrogate with KL penalty over every token of every group, and
/// its parameter gradient.
///
/// The per-token objective is differentiated in closed form with respect to
/// `log pi_theta`; the tape then carries those weights back to the parameters.
pub fn policy_objective(
    theta: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    config: &TrainerConfig,
    trace: bool,
) -> Result<ObjectiveOutput> {
    let total_tokens: usize = groups.iter().flat_map(|g| g.rollouts()).map(|r| r.len()).sum();
    if total_tokens == 0 {
        return Err(Error::EmptyResponse);
    }
    for r in groups.iter().flat_map(|g| g.rollouts()) {
        if r.old_logprobs.len() != r.tokens.len() {
            return Err(Error::MissingOldLogprobs);
        }
    }
    let temperature = config.rollout_temperature;
    let indexed: Vec<(usize, &RolloutGroup)> = groups.iter().enumerate().collect();

    let per_group = parallel::try_map(&indexed, |&(gi, group)| -> Result<GroupTerms> {
        let sample = &group.sample;
        let mut tape = PolicyTape::new(theta, true);
        let x = tape.image(&sample.image, false)?;
        let ctx = tape.encode(x, sample.question_id)?;
        let mut loss: Option<Var> = None;
        let mut terms = GroupTerms {
            objective: 0.0,
            grads: ParamGrads(Vec::new()),
            clipped: 0,
            kl_sum: 0.0,
            max_ratio_error: 0.0,
            trace: Vec::new(),
        };
        for (ri, (rollout, &adv)) in group.rollouts().zip(&group.advantages).enumerate() {
            let coef = match config.loss_aggregation {
                LossAggregation::TokenMean => 1.0 / total_tokens as f64,
                LossAggregation::SequenceMean => {
                    1.0 / (groups.len() * group.len() * rollout.len()) as f64
                }
            };
            let ref_lp = reference.sequence_logprobs(&sample.image, sample.question_id, &rollout.tokens, temperature)?;
            let positions = tape.teacher_forced(ctx, &rollout.tokens, temperature)?;
            for (t, (&pos, &token)) in positions.iter().zip(&rollout.tokens).enumerate() {
                let lp = tape.log_prob(pos, token);
                let logp = tape.graph.value(lp).item();
                let ratio = (logp - rollout.old_logprobs[t]).exp();
                let kl = kl_term(logp, ref_lp[t]);
                terms.objective += coef * (clipped_term(ratio, adv, config.clip_eps) - config.kl_beta * kl);
                terms.kl_sum += kl;
                terms.max_ratio_error = terms.max_ratio_error.max((ratio - 1.0).abs());
                if clip_active(ratio, adv, config.clip_eps) {
                    terms.clipped += 1;
                }
                let dlogp = clipped_term_dlogp(ratio, adv, config.clip_eps)
                    - config.kl_beta * kl_term_dlogp(logp, ref_lp[t]);
                let weighted = tape.graph.scale(lp, -coef * dlogp);
                loss = Some(match loss {
                    Some(acc) => tape.graph.add(acc, weighted),
                    None => weighted,
                });
                if trace {
                    terms.trace.push(TokenTrace {
                        group: gi,
                        rollout: ri,
                        position: t,
                        origin: rollout.origin,
                        logp_theta: logp,
                        old_logprob: rollout.old_logprobs[t],
                        ratio,
                    });
                }
            }
        }
        terms.grads = match loss {
            Some(l) => {
                tape.graph.backward(l)?;
                tape.param_grads()
            }
            None => ParamGrads::zeros_like(theta),
        };
        Ok(terms)
    })?;

    let mut out = ObjectiveOutput {
        objective: 0.0,
        grads: ParamGrads::zeros_like(theta),
        tokens: total_tokens,
        clip_fraction: 0.0,
        kl_mean: 0.0,
        max_ratio_error: 0.0,
        trace: Vec::new(),
    };
    let mut clipped = 0;
    let mut kl_sum = 0.0;
    for g in per_group {
        out.objective += g.objective;
        out.grads.add_assign(&g.grads);
        clipped += g.clipped;
        kl_sum += g.kl_sum;
        out.max_ratio_error = out.max_ratio_error.max(g.max_ratio_error);
        out.trace.extend(g.trace);
    }
    out.clip_fraction = clipped as f64 / total_tokens as f64;
    out.kl_mean = kl_sum / total_tokens as f64;
    Ok(out)
}

/// `image + N(0, steps * sigma^2)` per pixel, clamped to `[0, 1]`.
pub fn random_noise_image<R: Rng>(image: &Tensor, steps: usize, sigma: f64, rng: &mut R) -> Tensor {
    let mut out = image.clone();
    if steps == 0 || sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, (steps as f64).sqrt() * sigma).expect("finite std");
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

/// One CSV row of training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: Mode,
    pub mean_reward: f64,
    pub train_accuracy: f64,
    pub entropy_eq3: f64,
    pub entropy_eq7: f64,
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub mean_abs_pixel_delta: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub metrics: StepMetrics,
    pub groups: Vec<RolloutGroup>,
    pub objective: ObjectiveOutput,
}

/// Samples the joint group for one task sample under the frozen `old` policy.
pub fn build_group(
    old: &PolicyParams,
    sample: &TaskSample,
    index: usize,
    config: &TrainerConfig,
    seed: u64,
    step: usize,
) -> Result<RolloutGroup> {
    let key = StreamKey {
        seed,
        step: step as u64,
        sample: index as u64,
    };
    let t = config.rollout_temperature;
    let clean = sample_group(old, sample, &sample.image, config.n1, 0, t, Origin::Clean, key)?;
    let n2 = config.second_group();
    let adv_image = match config.mode {
        _ if n2 == 0 => None,
        Mode::Grpo => None,
        Mode::Saei => Some(egas_attack(old, sample, &clean, &config.attack, t)?),
        Mode::Noise => {
            let mut rng = rng::stream(seed, &[rng::NOISE, step as u64, index as u64]);
            Some(random_noise_image(&sample.image, config.noise_steps, config.noise_sigma, &mut rng))
        }
    };
    let adversarial = match &adv_image {
        Some(img) => sample_group(old, sample, img, n2, config.n1, t, Origin::Adversarial, key)?,
        None => Vec::new(),
    };
    let mut group = RolloutGroup {
        sample: sample.clone(),
        clean,
        adversarial,
        adv_image,
        advantages: Vec::new(),
    };
    for r in group.clean.iter_mut().chain(group.adversarial.iter_mut()) {
        r.reward = Some(reward(&r.tokens, sample));
    }
    let rewards: Vec<f64> = group.rollouts().map(|r| r.reward.unwrap().total).collect();
    group.advantages = normalize_advantages(&rewards, config.std_floor)?;
    Ok(group)
}

/// Samples, scores and applies one SGD update to `theta`.
pub fn train_step(
    theta: &mut PolicyParams,
    reference: &PolicyParams,
    batch: &[TaskSample],
    config: &TrainerConfig,
    seed: u64,
    step: usize,
) -> Result<StepOutcome> {
    config.validate()?;
    let start = Instant::now();
    let old = theta.clone();
    let indexed: Vec<(usize, &TaskSample)> = batch.iter().enumerate().collect();
    let groups = parallel::try_map(&indexed, |&(i, s)| build_group(&old, s, i, config, seed, step))?;

    let n = groups.len() as f64;
    let rollouts = || groups.iter().flat_map(|g| g.rollouts());
    let count = rollouts().count() as f64;
    let mean_reward = rollouts().map(|r| r.reward.unwrap().total).sum::<f64>() / count;
    let train_accuracy = rollouts().map(|r| r.reward.unwrap().accuracy).sum::<f64>() / count;
    let mut eq3 = 0.0;
    let mut eq7 = 0.0;
    let mut pixel_delta = 0.0;
    for g in &groups {
        eq3 += group_entropy(entropies(g.rollouts()))?;
        eq7 += selective_group_entropy(entropies(g.rollouts()), Selection::Mid)?;
        if let Some(img) = &g.adv_image {
            pixel_delta += mean_abs_diff(img, &g.sample.image);
        }
    }

    let objective = policy_objective(theta, reference, &groups, config, false)?;
    if !objective.grads.is_finite() || !objective.objective.is_finite() {
        return Err(Error::NonFinite {
            step,
            what: "policy gradient".into(),
        });
    }
    theta.sgd_step(&objective.grads, config.learning_rate);

    let metrics = StepMetrics {
        step,
        mode: config.mode,
        mean_reward,
        train_accuracy,
        entropy_eq3: eq3 / n,
        entropy_eq7: eq7 / n,
        clip_fraction: objective.clip_fraction,
        kl_mean: objective.kl_mean,
        mean_abs_pixel_delta: pixel_delta / n,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    Ok(StepOutcome {
        metrics,
        groups,
        objective,
    })
}
