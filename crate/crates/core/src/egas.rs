//! Entropy-guided adversarial images.
//!
//! The clean rollouts' tokens are held fixed and teacher-forced on the image;
//! their (optionally tercile-restricted) group entropy `H` is differentiated
//! with respect to the pixels, and each iteration moves every pixel by
//! `alpha * sign(grad(-H))` before clamping to the valid range. `alpha` is
//! negative, so pixels climb `H`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::policy::{PolicyParams, PolicyTape};
use crate::rollout::{selective_group_entropy, select_tokens, Rollout, Selection};
use crate::task::TaskSample;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Step size; negative for entropy ascent, zero disables the attack.
    pub alpha: f64,
    pub iterations: usize,
    pub pixel_min: f64,
    pub pixel_max: f64,
    pub selection: Selection,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: -2.0 / 255.0,
            iterations: 1,
            pixel_min: 0.0,
            pixel_max: 1.0,
            selection: Selection::Mid,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha <= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be <= 0, got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be >= 1".into()));
        }
        if self.pixel_min.is_nan() || self.pixel_max.is_nan() || self.pixel_min >= self.pixel_max {
            return Err(Error::Config("pixel_min must be below pixel_max".into()));
        }
        Ok(())
    }

    /// Whether only the moderate-entropy tercile drives the attack.
    pub fn selective(&self) -> bool {
        self.selection == Selection::Mid
    }

    /// Largest possible per-pixel displacement.
    pub fn budget(&self) -> f64 {
        self.iterations as f64 * self.alpha.abs()
    }
}

fn check_rollouts(sample: &TaskSample, rollouts: &[Rollout]) -> Result<()> {
    if rollouts.is_empty() || rollouts.iter().any(|r| !r.belongs_to(sample)) {
        return Err(Error::RolloutSampleMismatch);
    }
    if rollouts.iter().any(Rollout::is_empty) {
        return Err(Error::EmptyResponse);
    }
    Ok(())
}

/// Teacher-forced group entropy of `rollouts` on `image` and its pixel gradient.
pub fn entropy_and_image_grad(
    params: &PolicyParams,
    image: &Tensor,
    question_id: usize,
    rollouts: &[Rollout],
    selection: Selection,
    temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    if rollouts.is_empty() {
        return Err(Error::EmptyResponse);
    }
    let mut tape = PolicyTape::new(params, false);
    let x = tape.image(image, true)?;
    let ctx = tape.encode(x, question_id)?;
    let mut per_response: Vec<Var> = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        if r.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let positions = tape.teacher_forced(ctx, &r.tokens, temperature)?;
        let ents: Vec<Var> = positions.iter().map(|&p| tape.entropy(p)).collect();
        let values: Vec<f64> = ents.iter().map(|&e| tape.graph.value(e).item()).collect();
        let picked = select_tokens(&values, selection);
        let mut acc = ents[picked[0]];
        for &i in &picked[1..] {
            acc = tape.graph.add(acc, ents[i]);
        }
        per_response.push(tape.graph.scale(acc, 1.0 / picked.len() as f64));
    }
    let mut total = per_response[0];
    for &v in &per_response[1..] {
        total = tape.graph.add(total, v);
    }
    let h = tape.graph.scale(total, 1.0 / rollouts.len() as f64);
    tape.graph.backward(h)?;
    let value = tape.graph.value(h).item();
    Ok((value, tape.graph.grad(x).unwrap().to_vec()))
}

/// Gradient-free version of the attack objective.
pub fn teacher_forced_entropy(
    params: &PolicyParams,
    image: &Tensor,
    question_id: usize,
    rollouts: &[Rollout],
    selection: Selection,
    temperature: f64,
) -> Result<f64> {
    let mut ents = Vec::with_capacity(rollouts.len());
    for r in rollouts {
        let dists = params.teacher_forced_dists(image, question_id, &r.tokens, temperature)?;
        ents.push(dists.iter().map(|d| crate::autodiff::kernels::entropy(d)).collect::<Vec<_>>());
    }
    selective_group_entropy(ents.iter().map(Vec::as_slice), selection)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamps `v` into the pixel range and the `budget` ball around `orig`, so
/// that `|v - orig| <= budget` holds as computed in floating point.
fn project(v: f64, orig: f64, budget: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v.clamp(orig - budget, orig + budget).clamp(lo, hi);
    while (v - orig).abs() > budget {
        v = if v > orig { v.next_down() } else { v.next_up() };
    }
    v
}

/// Adversarial image for `sample` from its clean rollouts.
pub fn egas_attack(
    params: &PolicyParams,
    sample: &TaskSample,
    clean_rollouts: &[Rollout],
    config: &AttackConfig,
    temperature: f64,
) -> Result<Tensor> {
    config.validate()?;
    check_rollouts(sample, clean_rollouts)?;
    let mut image = sample.image.clone();
    if config.alpha == 0.0 {
        return Ok(image);
    }
    let budget = config.budget();
    for _ in 0..config.iterations {
        let (_, grad_h) = entropy_and_image_grad(
            params,
            &image,
            sample.question_id,
            clean_rollouts,
            config.selection,
            temperature,
        )?;
        for ((px, g), &orig) in image.data_mut().iter_mut().zip(&grad_h).zip(sample.image.data()) {
            let stepped = *px + config.alpha * sign(-g);
            *px = project(stepped, orig, budget, config.pixel_min, config.pixel_max);
        }
    }
    Ok(image)
}

/// `max |a - b|` over pixels.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn write_ppm(path: &Path, image: &Tensor, map: impl Fn(f64) -> f64) -> Result<()> {
    let shape = image.shape();
    let mut bytes = format!("P6\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (map(v).clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `clean.ppm`, `adversarial.ppm` and `difference.ppm` into `dir`.
/// The difference image maps `-budget..budget` onto black..white.
pub fn dump_attack(dir: &Path, clean: &Tensor, adversarial: &Tensor, budget: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ppm(&dir.join("clean.ppm"), clean, |v| v)?;
    write_ppm(&dir.join("adversarial.ppm"), adversarial, |v| v)?;
    let diff: Vec<f64> = adversarial.data().iter().zip(clean.data()).map(|(a, c)| a - c).collect();
    let diff = Tensor::new(clean.shape().to_vec(), diff)?;
    let scale = if budget > 0.0 { budget } else { 1.0 };
    write_ppm(&dir.join("difference.ppm"), &diff, |d| 0.5 + 0.5 * d / scale)
}
