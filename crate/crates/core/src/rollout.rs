//! Rollout groups, group policy entropy and tercile token selection.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::parallel;
use crate::policy::PolicyParams;
use crate::rng;
use crate::task::{Reward, TaskSample};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Clean,
    Adversarial,
}

/// One sampled response with the sampler's per-token statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// `log pi_old(token_t | image, prefix)` under the image it was sampled on.
    pub old_logprobs: Vec<f64>,
    /// Full-distribution entropy at every position.
    pub token_entropies: Vec<f64>,
    pub origin: Origin,
    pub reward: Option<Reward>,
    /// `(rng_seed, question_id)` of the task sample, once bound.
    pub source: Option<(u64, usize)>,
}

impl Rollout {
    pub fn new(origin: Origin) -> Self {
        Self {
            tokens: Vec::new(),
            old_logprobs: Vec::new(),
            token_entropies: Vec::new(),
            origin,
            reward: None,
            source: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bind(&mut self, sample: &TaskSample) {
        self.source = Some((sample.rng_seed, sample.question_id));
    }

    pub fn belongs_to(&self, sample: &TaskSample) -> bool {
        self.source == Some((sample.rng_seed, sample.question_id))
    }
}

/// The joint group for one task sample: `n1` clean then `n2` adversarial.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub sample: TaskSample,
    pub clean: Vec<Rollout>,
    pub adversarial: Vec<Rollout>,
    /// Image the second group was sampled on (adversarial or noised).
    pub adv_image: Option<Tensor>,
    /// One advantage per rollout, clean first; shared by all its tokens.
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rollouts(&self) -> impl Iterator<Item = &Rollout> {
        self.clean.iter().chain(&self.adversarial)
    }

    pub fn len(&self) -> usize {
        self.clean.len() + self.adversarial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a group's rollouts draw their randomness from.
#[derive(Clone, Copy, Debug)]
pub struct StreamKey {
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

/// Samples `n` rollouts on `image`; rollout `k` uses stream index
/// `first_index + k`, so a split group reproduces an unsplit one.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    params: &PolicyParams,
    sample: &TaskSample,
    image: &Tensor,
    n: usize,
    first_index: usize,
    temperature: f64,
    origin: Origin,
    key: StreamKey,
) -> Result<Vec<Rollout>> {
    let max_len = params.config().max_len;
    let out = parallel::map_range(n, |k| {
        let mut rng = rng::stream(
            key.seed,
            &[rng::SAMPLING, key.step, key.sample, (first_index + k) as u64],
        );
        params
            .sample_on_image(image, sample.question_id, temperature, max_len, &mut rng)
            .map(|mut r| {
                r.origin = origin;
                r.bind(sample);
                r
            })
    });
    out.into_iter().collect()
}

/// Mean over responses of the mean per-token entropy.
pub fn group_entropy<'a, I>(responses: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    selective_group_entropy(responses, Selection::All)
}

/// Which entropy tercile of a response enters the entropy objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    All,
    Low,
    #[default]
    Mid,
    High,
}

impl Selection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(Self::All),
            "low" => Some(Self::Low),
            "mid" => Some(Self::Mid),
            "high" => Some(Self::High),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::All => "all",
            Self::Low => "low",
            Self::Mid => "mid",
            Self::High => "high",
        }
    }
}

/// Positions whose entropy rank falls in the requested tercile.
///
/// Positions are ranked ascending by entropy, ties by position. With `L`
/// positions the terciles are the rank windows `[0, L/3)`, `[L/3, 2L/3)` and
/// `[2L/3, L)` (integer division). Responses shorter than 3 keep every
/// position. The result is sorted by position.
pub fn select_tokens(entropies: &[f64], selection: Selection) -> Vec<usize> {
    let len = entropies.len();
    if selection == Selection::All || len < 3 {
        return (0..len).collect();
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    let (lo, hi) = (len / 3, 2 * len / 3);
    let window = match selection {
        Selection::Low => 0..lo,
        Selection::Mid => lo..hi,
        Selection::High => hi..len,
        Selection::All => unreachable!(),
    };
    let mut picked = order[window].to_vec();
    picked.sort_unstable();
    picked
}

/// The moderate-entropy tercile.
pub fn tsec_select(entropies: &[f64]) -> Vec<usize> {
    select_tokens(entropies, Selection::Mid)
}

/// Group entropy restricted to the selected positions of each response,
/// each response normalized by its own selected count.
pub fn selective_group_entropy<'a, I>(responses: I, selection: Selection) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for ent in responses {
        if ent.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let picked = select_tokens(ent, selection);
        total += picked.iter().map(|&i| ent[i]).sum::<f64>() / picked.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyResponse);
    }
    Ok(total / n as f64)
}

/// Entropy lists of a set of rollouts, for the group-entropy functions.
pub fn entropies<'a>(rollouts: impl IntoIterator<Item = &'a Rollout>) -> impl Iterator<Item = &'a [f64]> {
    rollouts.into_iter().map(|r| r.token_entropies.as_slice())
}
