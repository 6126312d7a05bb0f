//! Tiny image-conditioned autoregressive policy.
//!
//! ```text
//! context   = tanh(flatten(image) W_img + b_img + Q[question])
//! hidden_t  = tanh(hidden_{t-1} W_rec + E[token_{t-1}] W_in + context)
//! logits_t  = hidden_t W_out + b_out
//! ```
//!
//! `hidden_0` is zero and position 0 reads a dedicated begin-of-sequence row
//! of `E`. The same arithmetic runs either on a [`Graph`] (for gradients with
//! respect to parameters or pixels) or on plain vectors (for sampling); both
//! call the shared kernels, so their outputs agree bit for bit.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{entropy_node, kernels, Graph, Tensor, Var};
use crate::rollout::{Origin, Rollout};
use crate::task::{TaskSample, CELL, MAX_COUNT, PALETTE};
use crate::{Error, Result};

/// Vocabulary layout: digits first, then the format tokens and end token.
/// Ids from `FIRST_FILLER` up to the vocabulary size carry no meaning.
pub mod tokens {
    pub const OPEN: usize = 10;
    pub const CLOSE: usize = 11;
    pub const END: usize = 12;
    pub const FIRST_FILLER: usize = 13;
    /// Smallest vocabulary that holds every meaningful token.
    pub const MIN_VOCAB: usize = 13;

    pub fn digit(d: usize) -> usize {
        assert!(d <= 9, "not a digit: {d}");
        d
    }

    pub fn as_digit(token: usize) -> Option<usize> {
        (token <= 9).then_some(token)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
    pub num_questions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            image_height: 16,
            image_width: 16,
            channels: 3,
            hidden_dim: 64,
            max_len: 12,
            num_questions: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < tokens::MIN_VOCAB {
            return fail(format!("vocab_size must be >= {}", tokens::MIN_VOCAB));
        }
        if self.max_len < 4 {
            return fail("max_len must be >= 4".into());
        }
        if self.channels != PALETTE[0].len() {
            return fail(format!("channels must be {}", PALETTE[0].len()));
        }
        let cells = (self.image_height / CELL) * (self.image_width / CELL);
        if cells < MAX_COUNT {
            return fail(format!("image must hold at least {MAX_COUNT} cells of {CELL}x{CELL}"));
        }
        if self.hidden_dim == 0 || self.num_questions == 0 {
            return fail("hidden_dim and num_questions must be positive".into());
        }
        Ok(())
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.image_height, self.image_width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.image_height * self.image_width * self.channels
    }

    /// Entropy of the uniform distribution over the vocabulary.
    pub fn max_entropy(&self) -> f64 {
        (self.vocab_size as f64).ln()
    }

    fn bos(&self) -> usize {
        self.vocab_size
    }
}

/// All policy weights. Three copies live during training: the policy being
/// optimized, the frozen sampler snapshot, and the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    config: ModelConfig,
    pub image_w: Tensor,
    pub image_b: Tensor,
    pub question_emb: Tensor,
    pub token_emb: Tensor,
    pub recur_w: Tensor,
    pub input_w: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const INIT_SCALE: f64 = 0.08;
const NUM_TENSORS: usize = 8;

/// Gradients in [`PolicyParams::tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self(params.tensors().iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }
}

impl PolicyParams {
    fn shapes(config: &ModelConfig) -> [Vec<usize>; NUM_TENSORS] {
        let (h, v) = (config.hidden_dim, config.vocab_size);
        [
            vec![config.pixels(), h],
            vec![1, h],
            vec![config.num_questions, h],
            vec![v + 1, h],
            vec![h, h],
            vec![h, h],
            vec![h, v],
            vec![1, v],
        ]
    }

    fn from_fn(config: &ModelConfig, mut fill: impl FnMut(usize) -> f64) -> Result<Self> {
        config.validate()?;
        let mut ts = Self::shapes(config).into_iter().enumerate().map(|(i, shape)| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| fill(i)).collect()).unwrap()
        });
        let mut next = || ts.next().unwrap();
        Ok(Self {
            config: config.clone(),
            image_w: next(),
            image_b: next(),
            question_emb: next(),
            token_emb: next(),
            recur_w: next(),
            input_w: next(),
            out_w: next(),
            out_b: next(),
        })
    }

    /// Uniform in `[-0.08, 0.08]` with a zero output head, so a fresh policy
    /// is exactly uniform over the vocabulary.
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::from_fn(config, |i| {
            if i >= 6 {
                0.0
            } else {
                rng.random_range(-INIT_SCALE..=INIT_SCALE)
            }
        })
    }

    /// Every weight uniform in `[-scale, scale]`, output head included.
    pub fn random<R: Rng>(config: &ModelConfig, scale: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(config, |_| rng.random_range(-scale..=scale))
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::from_fn(config, |_| 0.0)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> [&Tensor; NUM_TENSORS] {
        [
            &self.image_w,
            &self.image_b,
            &self.question_emb,
            &self.token_emb,
            &self.recur_w,
            &self.input_w,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; NUM_TENSORS] {
        [
            &mut self.image_w,
            &mut self.image_b,
            &mut self.question_emb,
            &mut self.token_emb,
            &mut self.recur_w,
            &mut self.input_w,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Plain SGD step: `w -= lr * g`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64) {
        for (t, g) in self.tensors_mut().into_iter().zip(&grads.0) {
            for (w, g) in t.data_mut().iter_mut().zip(g) {
                *w -= lr * g;
            }
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.image_shape();
        if image.shape() != [h, w, c] {
            return Err(Error::BadImageShape {
                expected: vec![h, w, c],
                got: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn check_question(&self, question_id: usize) -> Result<()> {
        if question_id >= self.config.num_questions {
            return Err(Error::QuestionOutOfRange {
                id: question_id,
                count: self.config.num_questions,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, toks: &[usize]) -> Result<()> {
        match toks.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    fn row(t: &Tensor, r: usize) -> &[f64] {
        let c = t.cols();
        &t.data()[r * c..(r + 1) * c]
    }

    /// Context vector for `(image, question)`.
    pub fn encode(&self, image: &Tensor, question_id: usize) -> Result<Vec<f64>> {
        self.check_image(image)?;
        self.check_question(question_id)?;
        let h = self.config.hidden_dim;
        let mut pre = kernels::matmul(image.data(), self.image_w.data(), 1, self.config.pixels(), h);
        add_assign(&mut pre, self.image_b.data());
        add_assign(&mut pre, Self::row(&self.question_emb, question_id));
        Ok(pre.into_iter().map(f64::tanh).collect())
    }

    /// One recurrence step; `prev` is a token id or the BOS row.
    fn step(&self, context: &[f64], hidden: &[f64], prev: usize) -> (Vec<f64>, Vec<f64>) {
        let (h, v) = (self.config.hidden_dim, self.config.vocab_size);
        let mut s = kernels::matmul(hidden, self.recur_w.data(), 1, h, h);
        let inp = kernels::matmul(Self::row(&self.token_emb, prev), self.input_w.data(), 1, h, h);
        add_assign(&mut s, &inp);
        add_assign(&mut s, context);
        let hidden: Vec<f64> = s.into_iter().map(f64::tanh).collect();
        let mut logits = kernels::matmul(&hidden, self.out_w.data(), 1, h, v);
        add_assign(&mut logits, self.out_b.data());
        (hidden, logits)
    }

    fn dist(logits: &[f64], temperature: f64) -> Vec<f64> {
        let inv = 1.0 / temperature;
        let mut p: Vec<f64> = logits.iter().map(|&z| inv * z).collect();
        kernels::softmax_in_place(&mut p);
        p
    }

    /// Next-token distribution after `prev_tokens`, replayed from BOS.
    pub fn next_token_dist(&self, context: &[f64], prev_tokens: &[usize], temperature: f64) -> Result<Vec<f64>> {
        check_temperature(temperature)?;
        self.check_tokens(prev_tokens)?;
        if prev_tokens.len() >= self.config.max_len {
            return Err(Error::Config(format!(
                "prefix of {} tokens reaches max_len {}",
                prev_tokens.len(),
                self.config.max_len
            )));
        }
        let mut hidden = vec![0.0; self.config.hidden_dim];
        let mut prev = self.config.bos();
        let mut logits = Vec::new();
        for &t in prev_tokens.iter().chain(std::iter::once(&usize::MAX)) {
            let (h, l) = self.step(context, &hidden, prev);
            hidden = h;
            logits = l;
            prev = t;
        }
        Ok(Self::dist(&logits, temperature))
    }

    /// Ancestral sampling until `END` or `max_len` tokens.
    pub fn sample_on_image<R: Rng>(
        &self,
        image: &Tensor,
        question_id: usize,
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Rollout> {
        check_temperature(temperature)?;
        let context = self.encode(image, question_id)?;
        let mut hidden = vec![0.0; self.config.hidden_dim];
        let mut prev = self.config.bos();
        let mut rollout = Rollout::new(Origin::Clean);
        while rollout.tokens.len() < max_len {
            let (h, logits) = self.step(&context, &hidden, prev);
            hidden = h;
            let p = Self::dist(&logits, temperature);
            let token = draw(&p, rng);
            rollout.tokens.push(token);
            rollout.old_logprobs.push(kernels::floored_ln(p[token]));
            rollout.token_entropies.push(kernels::entropy(&p));
            if token == tokens::END {
                break;
            }
            prev = token;
        }
        Ok(rollout)
    }

    pub fn sample_response<R: Rng>(
        &self,
        sample: &TaskSample,
        temperature: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Rollout> {
        let mut r = self.sample_on_image(&sample.image, sample.question_id, temperature, max_len, rng)?;
        r.bind(sample);
        Ok(r)
    }

    /// Per-position distributions along a fixed token sequence.
    pub fn teacher_forced_dists(
        &self,
        image: &Tensor,
        question_id: usize,
        toks: &[usize],
        temperature: f64,
    ) -> Result<Vec<Vec<f64>>> {
        check_temperature(temperature)?;
        self.check_tokens(toks)?;
        let context = self.encode(image, question_id)?;
        let mut hidden = vec![0.0; self.config.hidden_dim];
        let mut prev = self.config.bos();
        let mut out = Vec::with_capacity(toks.len());
        for &t in toks {
            let (h, logits) = self.step(&context, &hidden, prev);
            hidden = h;
            out.push(Self::dist(&logits, temperature));
            prev = t;
        }
        Ok(out)
    }

    /// Log-probabilities of `toks` under teacher forcing.
    pub fn sequence_logprobs(
        &self,
        image: &Tensor,
        question_id: usize,
        toks: &[usize],
        temperature: f64,
    ) -> Result<Vec<f64>> {
        let dists = self.teacher_forced_dists(image, question_id, toks, temperature)?;
        Ok(dists
            .iter()
            .zip(toks)
            .map(|(p, &t)| kernels::floored_ln(p[t]))
            .collect())
    }
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(t))
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn draw<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        cum += pi;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the total; take the last token with mass
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

/// Nodes for one teacher-forced position.
#[derive(Clone, Copy, Debug)]
pub struct Position {
    pub probs: Var,
    pub log_probs: Var,
}

/// The policy recorded on a [`Graph`].
pub struct PolicyTape<'p> {
    pub graph: Graph,
    params: &'p PolicyParams,
    vars: [Var; NUM_TENSORS],
}

impl<'p> PolicyTape<'p> {
    /// `trainable` decides whether parameter leaves receive gradients.
    pub fn new(params: &'p PolicyParams, trainable: bool) -> Self {
        let mut graph = Graph::new();
        let vars = params.tensors().map(|t| {
            if trainable {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            }
        });
        Self { graph, params, vars }
    }

    pub fn params(&self) -> &PolicyParams {
        self.params
    }

    /// Adds the image as a `[1, pixels]` row.
    pub fn image(&mut self, image: &Tensor, differentiable: bool) -> Result<Var> {
        self.params.check_image(image)?;
        let row = image.clone().reshape(vec![1, image.len()])?;
        Ok(if differentiable {
            self.graph.leaf(row)
        } else {
            self.graph.constant(row)
        })
    }

    pub fn encode(&mut self, image: Var, question_id: usize) -> Result<Var> {
        self.params.check_question(question_id)?;
        let [image_w, image_b, question_emb, ..] = self.vars;
        let g = &mut self.graph;
        let pre = g.matmul(image, image_w);
        let pre = g.add(pre, image_b);
        let q = g.select_rows(question_emb, &[question_id]);
        let pre = g.add(pre, q);
        Ok(g.tanh(pre))
    }

    pub fn teacher_forced(&mut self, context: Var, toks: &[usize], temperature: f64) -> Result<Vec<Position>> {
        check_temperature(temperature)?;
        self.params.check_tokens(toks)?;
        let [_, _, _, token_emb, recur_w, input_w, out_w, out_b] = self.vars;
        let inv = 1.0 / temperature;
        let g = &mut self.graph;
        let mut hidden = g.constant(Tensor::row(vec![0.0; self.params.config.hidden_dim]));
        let mut prev = self.params.config.bos();
        let mut out = Vec::with_capacity(toks.len());
        for &t in toks {
            let s = g.matmul(hidden, recur_w);
            let e = g.select_rows(token_emb, &[prev]);
            let inp = g.matmul(e, input_w);
            let s = g.add(s, inp);
            let s = g.add(s, context);
            hidden = g.tanh(s);
            let logits = g.matmul(hidden, out_w);
            let logits = g.add(logits, out_b);
            let scaled = g.scale(logits, inv);
            let probs = g.softmax(scaled);
            let log_probs = g.log(probs);
            out.push(Position { probs, log_probs });
            prev = t;
        }
        Ok(out)
    }

    pub fn entropy(&mut self, pos: Position) -> Var {
        entropy_node(&mut self.graph, pos.probs, pos.log_probs)
    }

    /// Log-probability node of `token` at `pos`.
    pub fn log_prob(&mut self, pos: Position, token: usize) -> Var {
        self.graph.gather(pos.log_probs, vec![token], vec![1])
    }

    /// Parameter gradients after `graph.backward`.
    pub fn param_grads(&self) -> ParamGrads {
        ParamGrads(
            self.vars
                .iter()
                .zip(self.params.tensors())
                .map(|(&v, t)| {
                    self.graph
                        .grad(v)
                        .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
                })
                .collect(),
        )
    }
}

const CKPT_MAGIC: &str = "saei-ckpt";
const CKPT_VERSION: u32 = 1;

impl PolicyParams {
    /// Checkpoint layout:
    ///
    /// ```text
    /// saei-ckpt 1\n
    /// vocab_size=V image_height=H image_width=W channels=C hidden_dim=D max_len=L num_questions=Q values=N\n
    /// N little-endian f64 values, tensors in `tensors()` order, row-major
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let c = &self.config;
        writeln!(w, "{CKPT_MAGIC} {CKPT_VERSION}")?;
        writeln!(
            w,
            "vocab_size={} image_height={} image_width={} channels={} hidden_dim={} max_len={} num_questions={} values={}",
            c.vocab_size,
            c.image_height,
            c.image_width,
            c.channels,
            c.hidden_dim,
            c.max_len,
            c.num_questions,
            self.num_params()
        )?;
        for t in self.tensors() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
        if line.trim_end() != format!("{CKPT_MAGIC} {CKPT_VERSION}") {
            return Err(bad("unrecognized header"));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| bad(&e.to_string()))?;
        let mut fields = std::collections::HashMap::new();
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("malformed config line"))?;
            let v: usize = v.parse().map_err(|_| bad("malformed config value"))?;
            fields.insert(k.to_string(), v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let config = ModelConfig {
            vocab_size: get("vocab_size")?,
            image_height: get("image_height")?,
            image_width: get("image_width")?,
            channels: get("channels")?,
            hidden_dim: get("hidden_dim")?,
            max_len: get("max_len")?,
            num_questions: get("num_questions")?,
        };
        let mut params = Self::zeros(&config)?;
        if get("values")? != params.num_params() {
            return Err(bad("value count does not match config"));
        }
        let mut buf = [0u8; 8];
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                *v = f64::from_le_bytes(buf);
            }
        }
        if r.read(&mut buf).map_err(|e| bad(&e.to_string()))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(f)
    }
}
