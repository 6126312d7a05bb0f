//! Synthetic visual counting task with a rule-based reward.
//!
//! Images are a grid of 4x4-pixel cells. The queried color occupies `k` cells
//! (`k` uniform in `0..=9`); a few distractor cells use the other palette
//! colors; the rest is background. The answer is the single digit `k`, which
//! the policy must emit inside an `OPEN d CLOSE` span.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::policy::{tokens, ModelConfig};
use crate::rng;
use crate::{Error, Result};

pub const CELL: usize = 4;
pub const MAX_COUNT: usize = 9;
pub const MAX_DISTRACTORS: usize = 6;

pub const PALETTE: [[f64; 3]; 4] = [
    [0.875, 0.125, 0.125],
    [0.125, 0.75, 0.25],
    [0.25, 0.25, 0.875],
    [0.875, 0.75, 0.125],
];
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];

pub const ACCURACY_WEIGHT: f64 = 0.9;
pub const FORMAT_WEIGHT: f64 = 0.1;

/// Color queried by a question id; ids beyond the palette are paraphrases.
pub fn question_color(question_id: usize) -> usize {
    question_id % PALETTE.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSample {
    pub image: Tensor,
    pub question_id: usize,
    /// Ground-truth count.
    pub answer: usize,
    pub rng_seed: u64,
}

impl TaskSample {
    /// Regenerates the sample for `(rng_seed, question_id)` bit-exactly.
    pub fn generate(rng_seed: u64, question_id: usize, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        if question_id >= config.num_questions {
            return Err(Error::QuestionOutOfRange {
                id: question_id,
                count: config.num_questions,
            });
        }
        let (h, w, c) = config.image_shape();
        let (rows, cols) = (h / CELL, w / CELL);
        let cells = rows * cols;
        let color = question_color(question_id);

        let mut rng = rng::stream(rng_seed, &[rng::DATA]);
        let k = rng.random_range(0..=MAX_COUNT);
        let distractors = rng.random_range(0..=MAX_DISTRACTORS.min(cells - k));
        let mut order: Vec<usize> = (0..cells).collect();
        order.shuffle(&mut rng);

        let mut cell_color = vec![None; cells];
        for &cell in &order[..k] {
            cell_color[cell] = Some(color);
        }
        for &cell in &order[k..k + distractors] {
            let other = (color + rng.random_range(1..PALETTE.len())) % PALETTE.len();
            cell_color[cell] = Some(other);
        }

        let mut data = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                let cell = (y / CELL).min(rows - 1) * cols + (x / CELL).min(cols - 1);
                let rgb = cell_color[cell].map_or(BACKGROUND, |i| PALETTE[i]);
                let base = (y * w + x) * c;
                data[base..base + c].copy_from_slice(&rgb[..c]);
            }
        }
        Ok(Self {
            image: Tensor::new(vec![h, w, c], data)?,
            question_id,
            answer: k,
            rng_seed,
        })
    }

    /// Draws a fresh seed and question from `rng`.
    pub fn sample<R: Rng>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let seed = rng.random();
        let question = rng.random_range(0..config.num_questions);
        Self::generate(seed, question, config)
    }

    pub fn answer_tokens(&self) -> Vec<usize> {
        vec![tokens::digit(self.answer)]
    }
}

/// Number of grid cells filled with palette color `color`.
pub fn count_cells(image: &Tensor, color: usize) -> usize {
    let shape = image.shape();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (rows, cols) = (h / CELL, w / CELL);
    let mut count = 0;
    for r in 0..rows {
        for col in 0..cols {
            let base = ((r * CELL) * w + col * CELL) * c;
            if image.data()[base..base + c] == PALETTE[color][..c] {
                count += 1;
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Reward {
    pub accuracy: f64,
    pub format: f64,
    pub total: f64,
}

/// Scores a response. Only tokens before the first `END` count.
///
/// `format` is 1 iff there is exactly one `OPEN d CLOSE` span with `d` a digit;
/// `accuracy` is 1 iff that digit is the ground truth.
pub fn reward(response: &[usize], sample: &TaskSample) -> Reward {
    let end = response
        .iter()
        .position(|&t| t == tokens::END)
        .unwrap_or(response.len());
    let body = &response[..end];
    let spans: Vec<usize> = body
        .windows(3)
        .filter_map(|w| match w {
            [tokens::OPEN, d, tokens::CLOSE] => tokens::as_digit(*d),
            _ => None,
        })
        .collect();
    let (format, accuracy) = match spans.as_slice() {
        [d] => (1.0, if *d == sample.answer { 1.0 } else { 0.0 }),
        _ => (0.0, 0.0),
    };
    Reward {
        accuracy,
        format,
        total: ACCURACY_WEIGHT * accuracy + FORMAT_WEIGHT * format,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub seed: u64,
    pub question_id: usize,
}

/// Frozen train/test splits.
///
/// Text, one record per line: `train <seed> <question_id>` or
/// `test <seed> <question_id>`. Blank lines and `#` comments are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Manifest {
    pub train: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

pub const DEFAULT_TRAIN: usize = 2000;
pub const DEFAULT_TEST: usize = 500;

impl Manifest {
    pub fn generate(seed: u64, train: usize, test: usize, num_questions: usize) -> Self {
        let split = |tag: u64, n: usize| {
            let mut rng = rng::stream(seed, &[rng::DATA, tag]);
            (0..n)
                .map(|_| ManifestRecord {
                    seed: rng.random(),
                    question_id: rng.random_range(0..num_questions),
                })
                .collect()
        };
        Self {
            train: split(0, train),
            test: split(1, test),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# saei manifest v1: <split> <seed> <question_id>\n");
        for (name, records) in [("train", &self.train), ("test", &self.test)] {
            for r in records {
                writeln!(out, "{name} {} {}", r.seed, r.question_id).unwrap();
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut manifest = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [split, seed, question] = fields[..] else {
                return Err(err(format!("expected 3 fields, got {}", fields.len())));
            };
            let record = ManifestRecord {
                seed: seed.parse().map_err(|e| err(format!("seed: {e}")))?,
                question_id: question.parse().map_err(|e| err(format!("question_id: {e}")))?,
            };
            match split {
                "train" => manifest.train.push(record),
                "test" => manifest.test.push(record),
                other => return Err(err(format!("unknown split {other:?}"))),
            }
        }
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn materialize(records: &[ManifestRecord], config: &ModelConfig) -> Result<Vec<TaskSample>> {
        records
            .iter()
            .map(|r| TaskSample::generate(r.seed, r.question_id, config))
            .collect()
    }
}
