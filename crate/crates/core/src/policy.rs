//! Compact autoregressive categorical policy over response tokens.
//!
//! The vocabulary holds `K²` joint waypoint tokens (one per grid cell), the
//! structural tokens of the response template and a small reasoning lexicon.
//! Every step is conditioned on the scene context, the step's slot in the
//! template, the previously emitted token and the mean embedding `m_t` of the
//! reasoning words emitted so far (zero before the first word):
//!
//! ```text
//! h_ctx  = tanh(W_ctx · c + b_ctx)                       (once per sequence)
//! h_t    = tanh(W_hid · h_ctx + pos[s_t] + mix[s_t] · emb[prev_t] + W_mem · m_t + b_hid)
//! logits = W_out · h_t + b_out
//! ```
//!
//! Gradients are derived by hand; see [`PolicyParams::backward`].

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::PolicyError;
use crate::geometry::{Point2, Resolution, Trajectory};
use crate::parsing::{format_point, ANSWER_CLOSE, ANSWER_OPEN, THINK_CLOSE, THINK_OPEN};

/// Words the synthetic generator uses in reasoning text.
pub const REASONING_LEXICON: &[&str] = &[
    "road", "clear", "ahead.", "cones", "barrels", "barrier", "worker", "work", "vehicle", "sign",
    "on", "left", "right", "side", "of", "road.", "sidewalk.", "lane", "closed", "curve", "to",
    "the", "left.", "right.", "keep", "straight.", "shift", "turn",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Special {
    ThinkOpen,
    ThinkClose,
    AnswerOpen,
    AnswerClose,
    Eos,
}

const SPECIALS: [Special; 5] = [
    Special::ThinkOpen,
    Special::ThinkClose,
    Special::AnswerOpen,
    Special::AnswerClose,
    Special::Eos,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Waypoint { cx: usize, cy: usize },
    Special(Special),
    Word(usize),
}

/// Token layout: `[0, K²)` waypoints (`id = cy·K + cx`), then the five
/// structural tokens, then the reasoning words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub grid_size: usize,
    pub n_waypoints: usize,
    pub words: Vec<String>,
    #[serde(skip)]
    word_index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn new(grid_size: usize, n_waypoints: usize, words: Vec<String>) -> Result<Self, PolicyError> {
        if grid_size < 2 {
            return Err(PolicyError::Shape(format!("grid_size must be >= 2, got {grid_size}")));
        }
        if n_waypoints < 1 {
            return Err(PolicyError::Shape("n_waypoints must be >= 1".into()));
        }
        let mut word_index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) || w.contains('<') {
                return Err(PolicyError::Shape(format!("invalid vocabulary word {w:?}")));
            }
            if word_index.insert(w.clone(), i).is_some() {
                return Err(PolicyError::Shape(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self {
            grid_size,
            n_waypoints,
            words,
            word_index,
        })
    }

    pub fn with_default_lexicon(grid_size: usize, n_waypoints: usize) -> Result<Self, PolicyError> {
        Self::new(
            grid_size,
            n_waypoints,
            REASONING_LEXICON.iter().map(|s| s.to_string()).collect(),
        )
    }

    fn reindex(&mut self) {
        self.word_index = self.words.iter().cloned().enumerate().map(|(i, w)| (w, i)).collect();
    }

    pub fn n_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn size(&self) -> usize {
        self.n_cells() + SPECIALS.len() + self.words.len()
    }

    pub fn special(&self, s: Special) -> usize {
        self.n_cells() + SPECIALS.iter().position(|x| *x == s).unwrap_or(0)
    }

    pub fn waypoint(&self, cx: usize, cy: usize) -> usize {
        cy * self.grid_size + cx
    }

    pub fn word(&self, w: &str) -> Option<usize> {
        self.word_index.get(w).map(|i| self.n_cells() + SPECIALS.len() + i)
    }

    pub fn kind(&self, token: usize) -> Option<TokenKind> {
        let cells = self.n_cells();
        if token < cells {
            Some(TokenKind::Waypoint {
                cx: token % self.grid_size,
                cy: token / self.grid_size,
            })
        } else if token < cells + SPECIALS.len() {
            Some(TokenKind::Special(SPECIALS[token - cells]))
        } else if token < self.size() {
            Some(TokenKind::Word(token - cells - SPECIALS.len()))
        } else {
            None
        }
    }

    pub fn cell_center(&self, cx: usize, cy: usize, res: Resolution) -> Point2 {
        let k = self.grid_size as f64;
        Point2::new(
            (cx as f64 + 0.5) * res.width / k,
            (cy as f64 + 0.5) * res.height / k,
        )
    }

    /// Map each point to its grid cell. Returns the tokens and how many
    /// points fell outside the image and were clamped.
    pub fn tokenize(&self, traj: &Trajectory, res: Resolution) -> (Vec<usize>, usize) {
        let k = self.grid_size;
        let cell = |v: f64, extent: f64| {
            let c = (v / extent * k as f64).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(k - 1)
            }
        };
        let tokens = traj
            .points()
            .iter()
            .map(|p| cell(p.y, res.height) * k + cell(p.x, res.width))
            .collect();
        let clamped = traj.points().iter().filter(|p| !res.contains(p)).count();
        (tokens, clamped)
    }

    pub fn detokenize(&self, tokens: &[usize], res: Resolution) -> Result<Trajectory, PolicyError> {
        tokens
            .iter()
            .map(|&t| match self.kind(t) {
                Some(TokenKind::Waypoint { cx, cy }) => Ok(self.cell_center(cx, cy, res)),
                _ => Err(PolicyError::TokenOutOfRange {
                    token: t,
                    vocab: self.n_cells(),
                }),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Trajectory::new)
    }

    /// Full target sequence for a (reasoning, trajectory) pair, ending in EOS.
    pub fn encode_response(
        &self,
        reasoning: &str,
        traj: &Trajectory,
        res: Resolution,
        include_reasoning: bool,
    ) -> Result<Vec<usize>, PolicyError> {
        if traj.len() != self.n_waypoints {
            return Err(PolicyError::WaypointCount {
                expected: self.n_waypoints,
                got: traj.len(),
            });
        }
        let mut out = vec![self.special(Special::ThinkOpen)];
        if include_reasoning {
            for w in reasoning.split_whitespace() {
                out.push(self.word(w).ok_or_else(|| PolicyError::UnknownWord(w.to_string()))?);
            }
        }
        out.push(self.special(Special::ThinkClose));
        out.push(self.special(Special::AnswerOpen));
        out.extend(self.tokenize(traj, res).0);
        out.push(self.special(Special::AnswerClose));
        out.push(self.special(Special::Eos));
        Ok(out)
    }

    /// Text form of a token sequence. Rendering stops at EOS.
    pub fn render(&self, tokens: &[usize], res: Resolution) -> String {
        let mut out = String::new();
        let mut prev_word = false;
        let mut in_answer = false;
        let mut answer_items = 0usize;
        for &t in tokens {
            let kind = match self.kind(t) {
                Some(k) => k,
                None => continue,
            };
            let mut is_word = false;
            match kind {
                TokenKind::Special(Special::Eos) => break,
                TokenKind::Special(Special::ThinkOpen) => out.push_str(THINK_OPEN),
                TokenKind::Special(Special::ThinkClose) => out.push_str(THINK_CLOSE),
                TokenKind::Special(Special::AnswerOpen) => {
                    out.push_str(ANSWER_OPEN);
                    out.push('[');
                    in_answer = true;
                    answer_items = 0;
                }
                TokenKind::Special(Special::AnswerClose) => {
                    out.push(']');
                    out.push_str(ANSWER_CLOSE);
                    in_answer = false;
                }
                TokenKind::Word(i) => {
                    if prev_word {
                        out.push(' ');
                    }
                    out.push_str(&self.words[i]);
                    is_word = true;
                }
                TokenKind::Waypoint { cx, cy } => {
                    if in_answer && answer_items > 0 {
                        out.push_str(", ");
                    }
                    answer_items += 1;
                    out.push_str(&format_point(&self.cell_center(cx, cy, res)));
                }
            }
            prev_word = is_word;
        }
        out
    }

    /// Template slot of the token following `prefix`. Slots `[0, think_slots)`
    /// cover the think block, the rest count tokens after `</think>`.
    fn next_slot(&self, state: &SlotState, think_slots: usize) -> usize {
        match state.since_close {
            None => state.len.min(think_slots - 1),
            Some(n) => think_slots + n.min(self.n_waypoints + 2),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct SlotState {
    len: usize,
    since_close: Option<usize>,
    /// Reasoning words inside the think block, in emission order.
    words: Vec<usize>,
}

impl SlotState {
    fn push(&mut self, token: usize, vocab: &TokenVocab) {
        self.len += 1;
        match self.since_close.as_mut() {
            Some(n) => *n += 1,
            None if token == vocab.special(Special::ThinkClose) => self.since_close = Some(0),
            None => {
                if matches!(vocab.kind(token), Some(TokenKind::Word(_))) {
                    self.words.push(token);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub context_dim: usize,
    pub hidden: usize,
    pub think_slots: usize,
    pub vocab: TokenVocab,
}

impl PolicyShape {
    pub fn new(context_dim: usize, hidden: usize, vocab: TokenVocab) -> Result<Self, PolicyError> {
        if context_dim == 0 || hidden == 0 {
            return Err(PolicyError::Shape("context_dim and hidden must be positive".into()));
        }
        Ok(Self {
            context_dim,
            hidden,
            think_slots: 24,
            vocab,
        })
    }

    pub fn n_slots(&self) -> usize {
        self.think_slots + self.vocab.n_waypoints + 3
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    /// BOS has an embedding row but is never emitted.
    pub fn bos(&self) -> usize {
        self.vocab_size()
    }

    fn layout(&self) -> Layout {
        let (d, h, v, s) = (self.context_dim, self.hidden, self.vocab_size(), self.n_slots());
        let sizes = [
            ("w_ctx", h, d),
            ("b_ctx", h, 1),
            ("w_hid", h, h),
            ("b_hid", h, 1),
            ("pos", s, h),
            ("mix", s, 1),
            ("embed", v + 1, h),
            ("w_out", v, h),
            ("b_out", v, 1),
            ("w_mem", h, h),
        ];
        let mut offset = 0;
        let mut entries = Vec::with_capacity(sizes.len());
        for (name, rows, cols) in sizes {
            entries.push(TensorSpec {
                name,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        }
        Layout { entries, len: offset }
    }
}

#[derive(Debug, Clone, Copy)]
struct TensorSpec {
    name: &'static str,
    rows: usize,
    cols: usize,
    offset: usize,
}

impl TensorSpec {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<TensorSpec>,
    len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w_ctx: usize,
    b_ctx: usize,
    w_hid: usize,
    b_hid: usize,
    pos: usize,
    mix: usize,
    embed: usize,
    w_out: usize,
    b_out: usize,
    w_mem: usize,
}

impl Layout {
    fn offsets(&self) -> Offsets {
        let o = |i: usize| self.entries[i].offset;
        Offsets {
            w_ctx: o(0),
            b_ctx: o(1),
            w_hid: o(2),
            b_hid: o(3),
            pos: o(4),
            mix: o(5),
            embed: o(6),
            w_out: o(7),
            b_out: o(8),
            w_mem: o(9),
        }
    }
}

/// Scene features standing in for an image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneContext(pub Vec<f64>);

impl SceneContext {
    pub fn features(&self) -> &[f64] {
        &self.0
    }
}

/// Policy weights as a flat vector with a shared shape descriptor. The same
/// type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: Arc<PolicyShape>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub repetition_penalty: f64,
    pub max_len: usize,
    pub seed: u64,
    /// Per-step probability of replacing the sampled token with a uniformly
    /// random one. Used to produce malformed rollouts on purpose.
    #[serde(default)]
    pub corruption_prob: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 1.2,
            repetition_penalty: 1.2,
            max_len: 64,
            seed: 0,
            corruption_prob: 0.0,
        }
    }
}

impl SamplingConfig {
    pub fn plain(max_len: usize, seed: u64) -> Self {
        Self {
            top_p: 1.0,
            temperature: 1.0,
            repetition_penalty: 1.0,
            max_len,
            seed,
            corruption_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::Sampling(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Sampling(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(PolicyError::Sampling(format!(
                "repetition_penalty must be >= 1, got {}",
                self.repetition_penalty
            )));
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return Err(PolicyError::Sampling("corruption_prob must be in [0, 1]".into()));
        }
        if self.max_len == 0 {
            return Err(PolicyError::Sampling("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// A sampled response with the log-probability of each realized token under
/// the unmodified policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|z| z - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Draw from a probability vector (not necessarily normalized).
fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Distribution used for sampling: temperature, repetition penalty on
/// already-emitted tokens, then nucleus truncation. Returned unnormalized.
pub fn sampling_distribution(logits: &[f64], emitted: &[bool], cfg: &SamplingConfig) -> Vec<f64> {
    let adjusted: Vec<f64> = logits
        .iter()
        .zip(emitted)
        .map(|(&z, &seen)| {
            let z = z / cfg.temperature;
            if seen && cfg.repetition_penalty != 1.0 {
                if z > 0.0 {
                    z / cfg.repetition_penalty
                } else {
                    z * cfg.repetition_penalty
                }
            } else {
                z
            }
        })
        .collect();
    let max = adjusted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = adjusted.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    if cfg.top_p < 1.0 {
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
        let mut cum = 0.0;
        let mut keep = order.len();
        for (rank, &i) in order.iter().enumerate() {
            cum += probs[i];
            if cum >= cfg.top_p {
                keep = rank + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            probs[i] = 0.0;
        }
    }
    probs
}

struct StepInput {
    slot: usize,
    prev: usize,
    n_words: usize,
}

struct Forward {
    h_ctx: Vec<f64>,
    words: Vec<usize>,
    steps: Vec<StepCache>,
}

struct StepCache {
    slot: usize,
    prev: usize,
    n_words: usize,
    memory: Vec<f64>,
    hidden: Vec<f64>,
    logp: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: PolicyShape) -> Self {
        let len = shape.layout().len;
        Self {
            shape: Arc::new(shape),
            data: vec![0.0; len],
        }
    }

    /// Random hidden layers, zero output and memory weights: the initial
    /// distribution is exactly uniform at every step.
    pub fn init(shape: PolicyShape, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = p.shape.layout();
        for spec in &layout.entries {
            let scale = match spec.name {
                "w_ctx" | "w_hid" => (6.0 / (spec.rows + spec.cols) as f64).sqrt(),
                "pos" | "embed" => 0.5,
                _ => 0.0,
            };
            for v in &mut p.data[spec.range()] {
                *v = if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 };
            }
            if spec.name == "mix" {
                p.data[spec.range()].fill(1.0);
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: Arc::clone(&self.shape),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn vocab(&self) -> &TokenVocab {
        &self.shape.vocab
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let layout = self.shape.layout();
        layout
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.data[e.range()])
    }

    pub fn tensor_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.shape
            .layout()
            .entries
            .iter()
            .find(|e| e.name == name)
            .map(TensorSpec::range)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_context(&self, ctx: &SceneContext) -> Result<(), PolicyError> {
        if ctx.0.len() != self.shape.context_dim {
            return Err(PolicyError::ContextDim {
                expected: self.shape.context_dim,
                got: ctx.0.len(),
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<(), PolicyError> {
        let vocab = self.shape.vocab_size();
        match tokens.iter().find(|&&t| t >= vocab) {
            Some(&token) => Err(PolicyError::TokenOutOfRange { token, vocab }),
            None => Ok(()),
        }
    }

    fn context_hidden(&self, ctx: &[f64]) -> Vec<f64> {
        let (d, h) = (self.shape.context_dim, self.shape.hidden);
        let o = self.shape.layout().offsets();
        (0..h)
            .map(|i| {
                let row = &self.data[o.w_ctx + i * d..o.w_ctx + (i + 1) * d];
                let z = self.data[o.b_ctx + i] + row.iter().zip(ctx).map(|(w, c)| w * c).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    /// Context-only part of the step pre-activation: `W_hid · h_ctx + b_hid`.
    fn context_drive(&self, h_ctx: &[f64], o: &Offsets) -> Vec<f64> {
        let h = self.shape.hidden;
        (0..h)
            .map(|i| {
                let row = &self.data[o.w_hid + i * h..o.w_hid + (i + 1) * h];
                self.data[o.b_hid + i] + row.iter().zip(h_ctx).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Mean embedding of `words`, zero when empty.
    fn memory(&self, words: &[usize], o: &Offsets) -> Vec<f64> {
        let h = self.shape.hidden;
        let mut m = vec![0.0; h];
        if words.is_empty() {
            return m;
        }
        for &w in words {
            for (mi, e) in m.iter_mut().zip(&self.data[o.embed + w * h..o.embed + (w + 1) * h]) {
                *mi += e;
            }
        }
        let inv = 1.0 / words.len() as f64;
        m.iter_mut().for_each(|x| *x *= inv);
        m
    }

    fn step_hidden(&self, drive: &[f64], input: &StepInput, memory: &[f64], o: &Offsets) -> Vec<f64> {
        let h = self.shape.hidden;
        let (slot, prev) = (input.slot, input.prev);
        let pos = &self.data[o.pos + slot * h..o.pos + (slot + 1) * h];
        let emb = &self.data[o.embed + prev * h..o.embed + (prev + 1) * h];
        let mix = self.data[o.mix + slot];
        (0..h)
            .map(|i| {
                let mut z = drive[i] + pos[i] + mix * emb[i];
                if input.n_words > 0 {
                    let row = &self.data[o.w_mem + i * h..o.w_mem + (i + 1) * h];
                    z += row.iter().zip(memory).map(|(w, m)| w * m).sum::<f64>();
                }
                z.tanh()
            })
            .collect()
    }

    fn logits(&self, hidden: &[f64], o: &Offsets) -> Vec<f64> {
        let (h, v) = (self.shape.hidden, self.shape.vocab_size());
        (0..v)
            .map(|j| {
                let row = &self.data[o.w_out + j * h..o.w_out + (j + 1) * h];
                self.data[o.b_out + j] + row.iter().zip(hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }

    /// Per-step inputs for `tokens` and the reasoning words they contain.
    fn step_inputs(&self, tokens: &[usize]) -> (Vec<StepInput>, Vec<usize>) {
        let mut state = SlotState::default();
        let mut prev = self.shape.bos();
        let inputs = tokens
            .iter()
            .map(|&t| {
                let input = StepInput {
                    slot: self.vocab().next_slot(&state, self.shape.think_slots),
                    prev,
                    n_words: state.words.len(),
                };
                state.push(t, self.vocab());
                prev = t;
                input
            })
            .collect();
        (inputs, state.words)
    }

    /// Log-probabilities over the vocabulary for the token after `prefix`.
    pub fn token_logprobs(&self, ctx: &SceneContext, prefix: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_context(ctx)?;
        self.check_tokens(prefix)?;
        let o = self.shape.layout().offsets();
        let h_ctx = self.context_hidden(&ctx.0);
        let drive = self.context_drive(&h_ctx, &o);
        let mut with_next = prefix.to_vec();
        with_next.push(0);
        let (inputs, words) = self.step_inputs(&with_next);
        let input = inputs.last().expect("non-empty");
        let memory = self.memory(&words[..input.n_words], &o);
        let hidden = self.step_hidden(&drive, input, &memory, &o);
        Ok(log_softmax(&self.logits(&hidden, &o)))
    }

    fn forward(&self, ctx: &[f64], tokens: &[usize]) -> Forward {
        let o = self.shape.layout().offsets();
        let h_ctx = self.context_hidden(ctx);
        let drive = self.context_drive(&h_ctx, &o);
        let (inputs, words) = self.step_inputs(tokens);
        let steps = inputs
            .into_iter()
            .map(|input| {
                let memory = self.memory(&words[..input.n_words], &o);
                let hidden = self.step_hidden(&drive, &input, &memory, &o);
                let logp = log_softmax(&self.logits(&hidden, &o));
                StepCache {
                    slot: input.slot,
                    prev: input.prev,
                    n_words: input.n_words,
                    memory,
                    hidden,
                    logp,
                }
            })
            .collect();
        Forward { h_ctx, words, steps }
    }

    /// Log-probability of each realized token.
    pub fn sequence_logprobs(&self, ctx: &SceneContext, tokens: &[usize]) -> Result<Vec<f64>, PolicyError> {
        self.check_context(ctx)?;
        self.check_tokens(tokens)?;
        let fwd = self.forward(&ctx.0, tokens);
        Ok(fwd.steps.iter().zip(tokens).map(|(s, &t)| s.logp[t]).collect())
    }

    /// Full log-probability vector at every step of `tokens`.
    pub fn step_logprobs(&self, ctx: &SceneContext, tokens: &[usize]) -> Result<Vec<Vec<f64>>, PolicyError> {
        self.check_context(ctx)?;
        self.check_tokens(tokens)?;
        let fwd = self.forward(&ctx.0, tokens);
        Ok(fwd.steps.into_iter().map(|s| s.logp).collect())
    }

    /// Backpropagate through one sequence. `seed(t, logp, dlogits)` writes the
    /// gradient of the objective with respect to the step-`t` logits given the
    /// step's log-probabilities; the result is accumulated into `grad`.
    pub fn backward<F>(
        &self,
        ctx: &SceneContext,
        tokens: &[usize],
        grad: &mut PolicyParams,
        mut seed: F,
    ) -> Result<(), PolicyError>
    where
        F: FnMut(usize, &[f64], &mut [f64]),
    {
        self.check_context(ctx)?;
        self.check_tokens(tokens)?;
        let (d, h, v) = (self.shape.context_dim, self.shape.hidden, self.shape.vocab_size());
        let o = self.shape.layout().offsets();
        let Forward { h_ctx, words, steps } = self.forward(&ctx.0, tokens);
        let g = &mut grad.data;
        let mut dlogits = vec![0.0; v];
        let mut dh = vec![0.0; h];
        let mut dz = vec![0.0; h];
        let mut d_drive = vec![0.0; h];
        let mut dm = vec![0.0; h];

        for (t, step) in steps.iter().enumerate() {
            dlogits.fill(0.0);
            seed(t, &step.logp, &mut dlogits);
            dh.fill(0.0);
            for j in 0..v {
                let gj = dlogits[j];
                if gj == 0.0 {
                    continue;
                }
                g[o.b_out + j] += gj;
                let w = &self.data[o.w_out + j * h..o.w_out + (j + 1) * h];
                let gw = &mut g[o.w_out + j * h..o.w_out + (j + 1) * h];
                for i in 0..h {
                    gw[i] += gj * step.hidden[i];
                    dh[i] += gj * w[i];
                }
            }
            let mix = self.data[o.mix + step.slot];
            let emb_off = o.embed + step.prev * h;
            let mut dmix = 0.0;
            for i in 0..h {
                dz[i] = dh[i] * (1.0 - step.hidden[i] * step.hidden[i]);
                d_drive[i] += dz[i];
                g[o.pos + step.slot * h + i] += dz[i];
                dmix += dz[i] * self.data[emb_off + i];
                g[emb_off + i] += mix * dz[i];
            }
            g[o.mix + step.slot] += dmix;

            // memory = mean(embed[words[..n]]), enters through W_mem
            let n = step.n_words;
            if n > 0 {
                dm.fill(0.0);
                for i in 0..h {
                    let row = o.w_mem + i * h;
                    for k in 0..h {
                        g[row + k] += dz[i] * step.memory[k];
                        dm[k] += dz[i] * self.data[row + k];
                    }
                }
                let inv = 1.0 / n as f64;
                for &w in &words[..n] {
                    for k in 0..h {
                        g[o.embed + w * h + k] += dm[k] * inv;
                    }
                }
            }
        }

        // drive = W_hid h_ctx + b_hid
        let mut dh_ctx = vec![0.0; h];
        for i in 0..h {
            let gi = d_drive[i];
            g[o.b_hid + i] += gi;
            for k in 0..h {
                g[o.w_hid + i * h + k] += gi * h_ctx[k];
                dh_ctx[k] += gi * self.data[o.w_hid + i * h + k];
            }
        }
        for i in 0..h {
            let da = dh_ctx[i] * (1.0 - h_ctx[i] * h_ctx[i]);
            g[o.b_ctx + i] += da;
            for k in 0..d {
                g[o.w_ctx + i * d + k] += da * ctx.0[k];
            }
        }
        Ok(())
    }

    /// Gradient of `Σ_t weights[t] · log π(tokens[t] | ctx, tokens[..t])`,
    /// accumulated into `grad`.
    pub fn accumulate_weighted_logprob_grad(
        &self,
        ctx: &SceneContext,
        tokens: &[usize],
        weights: &[f64],
        grad: &mut PolicyParams,
    ) -> Result<(), PolicyError> {
        assert_eq!(tokens.len(), weights.len(), "one weight per token");
        self.backward(ctx, tokens, grad, |t, logp, dl| {
            let w = weights[t];
            if w == 0.0 {
                return;
            }
            for (d, lp) in dl.iter_mut().zip(logp) {
                *d = -w * lp.exp();
            }
            dl[tokens[t]] += w;
        })
    }

    /// Gradient of the summed log-likelihood of `tokens`.
    pub fn grad_logprob(&self, ctx: &SceneContext, tokens: &[usize]) -> Result<PolicyParams, PolicyError> {
        let mut grad = self.zeros_like();
        let weights = vec![1.0; tokens.len()];
        self.accumulate_weighted_logprob_grad(ctx, tokens, &weights, &mut grad)?;
        Ok(grad)
    }

    pub fn sample_sequence(
        &self,
        ctx: &SceneContext,
        cfg: &SamplingConfig,
        rng: &mut impl Rng,
    ) -> Result<SampledSequence, PolicyError> {
        cfg.validate()?;
        self.check_context(ctx)?;
        self.generate(ctx, cfg.max_len, |logits, logp, emitted, rng: &mut _| {
            let probs = sampling_distribution(logits, emitted, cfg);
            let mut token = draw(&probs, rng);
            if cfg.corruption_prob > 0.0 && rng.gen::<f64>() < cfg.corruption_prob {
                token = rng.gen_range(0..logp.len());
            }
            token
        }, rng)
    }

    /// Argmax decoding under the unmodified policy.
    pub fn greedy_sequence(&self, ctx: &SceneContext, max_len: usize) -> Result<SampledSequence, PolicyError> {
        self.check_context(ctx)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.generate(ctx, max_len, |_, logp, _, _| argmax(logp), &mut unused)
    }

    fn generate<R, F>(&self, ctx: &SceneContext, max_len: usize, mut choose: F, rng: &mut R) -> Result<SampledSequence, PolicyError>
    where
        R: Rng,
        F: FnMut(&[f64], &[f64], &[bool], &mut R) -> usize,
    {
        let o = self.shape.layout().offsets();
        let vocab = self.vocab();
        let eos = vocab.special(Special::Eos);
        let h_ctx = self.context_hidden(&ctx.0);
        let drive = self.context_drive(&h_ctx, &o);
        let mut emitted = vec![false; self.shape.vocab_size()];
        let mut state = SlotState::default();
        let mut prev = self.shape.bos();
        let mut tokens = Vec::new();
        let mut logprobs = Vec::new();
        let mut memory = vec![0.0; self.shape.hidden];
        let mut n_memory = 0;
        while tokens.len() < max_len {
            let input = StepInput {
                slot: vocab.next_slot(&state, self.shape.think_slots),
                prev,
                n_words: state.words.len(),
            };
            if input.n_words != n_memory {
                memory = self.memory(&state.words, &o);
                n_memory = input.n_words;
            }
            let hidden = self.step_hidden(&drive, &input, &memory, &o);
            let logits = self.logits(&hidden, &o);
            let logp = log_softmax(&logits);
            let token = choose(&logits, &logp, &emitted, rng);
            tokens.push(token);
            logprobs.push(logp[token]);
            emitted[token] = true;
            state.push(token, vocab);
            prev = token;
            if token == eos {
                break;
            }
        }
        Ok(SampledSequence { tokens, logprobs })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let layout = self.shape.layout();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            shape: (*self.shape).clone(),
            tensors: layout
                .entries
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.to_string(),
                    shape: [e.rows, e.cols],
                    data: self.data[e.range()].to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self, PolicyError> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(PolicyError::Checkpoint(format!("unknown format {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let mut shape = ck.shape;
        shape.vocab.reindex();
        let mut params = PolicyParams::zeros(shape);
        let layout = params.shape.layout();
        if ck.tensors.len() != layout.entries.len() {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.entries.len(),
                ck.tensors.len()
            )));
        }
        for (spec, rec) in layout.entries.iter().zip(ck.tensors) {
            if rec.name != spec.name || rec.shape != [spec.rows, spec.cols] || rec.data.len() != spec.rows * spec.cols {
                return Err(PolicyError::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {} [{}, {}]",
                    rec.name, rec.shape, spec.name, spec.rows, spec.cols
                )));
            }
            params.data[spec.range()].copy_from_slice(&rec.data);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let json = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| PolicyError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "planlab-policy";
pub const CHECKPOINT_VERSION: u32 = 2;

/// On-disk checkpoint: shape metadata plus named row-major tensors in
/// layout order (`w_ctx, b_ctx, w_hid, b_hid, pos, mix, embed, w_out, b_out`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub shape: PolicyShape,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_shape(k: usize, n: usize) -> PolicyShape {
        PolicyShape::new(4, 8, TokenVocab::with_default_lexicon(k, n).unwrap()).unwrap()
    }

    fn ctx() -> SceneContext {
        SceneContext(vec![0.3, -0.2, 0.9, 0.1])
    }

    #[test]
    fn zero_params_are_uniform() {
        let p = PolicyParams::zeros(small_shape(4, 3));
        let v = p.shape().vocab_size() as f64;
        let lp = p.token_logprobs(&ctx(), &[]).unwrap();
        assert!(lp.iter().all(|x| (x + v.ln()).abs() < 1e-12));
        let lp = PolicyParams::init(small_shape(4, 3), 7).token_logprobs(&ctx(), &[1, 2]).unwrap();
        assert!(lp.iter().all(|x| (x + v.ln()).abs() < 1e-12));
    }

    #[test]
    fn distributions_normalized() {
        let mut p = PolicyParams::init(small_shape(4, 3), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for x in p.as_mut_slice() {
            *x += rng.gen_range(-1.0..1.0);
        }
        for prefix in [vec![], vec![16], vec![16, 30, 17, 18, 3]] {
            let lp = p.token_logprobs(&ctx(), &prefix).unwrap();
            let s: f64 = lp.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_model_bias_gradient() {
        let p = PolicyParams::zeros(small_shape(4, 3));
        let v = p.shape().vocab_size();
        let g = p.grad_logprob(&ctx(), &[5]).unwrap();
        let b = g.tensor("b_out").unwrap();
        for (j, gj) in b.iter().enumerate() {
            let expect = if j == 5 { 1.0 } else { 0.0 } - 1.0 / v as f64;
            assert!((gj - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_geometry() {
        let vocab = TokenVocab::with_default_lexicon(32, 20).unwrap();
        let res = Resolution::new(640.0, 480.0);
        let t = vocab.detokenize(&[vocab.waypoint(0, 0)], res).unwrap();
        assert_eq!(t.points()[0], Point2::new(10.0, 7.5));
        let tokens: Vec<usize> = (0..1024).step_by(37).collect();
        let back = vocab.tokenize(&vocab.detokenize(&tokens, res).unwrap(), res).0;
        assert_eq!(back, tokens);
    }

    #[test]
    fn tokenize_clamps() {
        let vocab = TokenVocab::with_default_lexicon(4, 2).unwrap();
        let res = Resolution::new(100.0, 100.0);
        let (tok, clamped) = vocab.tokenize(&Trajectory::from_xy(&[(-5.0, 50.0), (100.0, 120.0)]), res);
        assert_eq!(clamped, 2);
        assert_eq!(tok, vec![vocab.waypoint(0, 2), vocab.waypoint(3, 3)]);
    }

    #[test]
    fn render_round_trip() {
        let vocab = TokenVocab::with_default_lexicon(8, 3).unwrap();
        let res = Resolution::new(80.0, 80.0);
        let traj = vocab.detokenize(&[3, 11, 20], res).unwrap();
        let seq = vocab.encode_response("cones on right side of road.", &traj, res, true).unwrap();
        let text = vocab.render(&seq, res);
        assert_eq!(
            text,
            "<think>cones on right side of road.</think><answer>[{'x': 35.00, 'y': 5.00}, {'x': 35.00, 'y': 15.00}, {'x': 45.00, 'y': 25.00}]</answer>"
        );
        let parsed = crate::parsing::parse_response(&text, 3).unwrap();
        assert_eq!(parsed.trajectory, traj);
        assert!(matches!(
            vocab.encode_response("unknownword", &traj, res, true),
            Err(PolicyError::UnknownWord(_))
        ));
        let bare = vocab.encode_response("ignored words", &traj, res, false).unwrap();
        assert!(vocab.render(&bare, res).starts_with("<think></think><answer>"));
    }

    #[test]
    fn slots_follow_template() {
        let p = PolicyParams::zeros(small_shape(4, 2));
        let v = p.vocab();
        let seq = vec![
            v.special(Special::ThinkOpen),
            v.word("cones").unwrap(),
            v.special(Special::ThinkClose),
            v.special(Special::AnswerOpen),
            1,
            2,
            v.special(Special::AnswerClose),
            v.special(Special::Eos),
        ];
        let slots: Vec<usize> = p.step_inputs(&seq).0.iter().map(|x| x.slot).collect();
        let t = p.shape().think_slots;
        assert_eq!(slots, vec![0, 1, 2, t, t + 1, t + 2, t + 3, t + 4]);
        assert!(slots.iter().all(|s| *s < p.shape().n_slots()));
    }

    #[test]
    fn memory_gradient_matches_finite_differences() {
        let mut p = PolicyParams::init(small_shape(4, 3), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for x in p.as_mut_slice() {
            *x += rng.gen_range(-0.5..0.5);
        }
        let v = p.vocab().clone();
        let (cones, right) = (v.word("cones").unwrap(), v.word("right").unwrap());
        let seq = vec![
            v.special(Special::ThinkOpen),
            cones,
            right,
            cones,
            v.special(Special::ThinkClose),
            v.special(Special::AnswerOpen),
            4,
            9,
            15,
            v.special(Special::AnswerClose),
        ];
        let g = p.grad_logprob(&ctx(), &seq).unwrap();
        let h = p.shape().hidden;
        let embed = p.tensor_range("embed").unwrap();
        let mut coords: Vec<usize> = p.tensor_range("w_mem").unwrap().collect();
        coords.extend((0..h).map(|k| embed.start + cones * h + k));
        coords.extend((0..h).map(|k| embed.start + right * h + k));
        let f = |q: &PolicyParams| q.sequence_logprobs(&ctx(), &seq).unwrap().iter().sum::<f64>();
        let eps = 1e-5;
        for i in coords {
            let mut a = p.clone();
            a.as_mut_slice()[i] += eps;
            let mut b = p.clone();
            b.as_mut_slice()[i] -= eps;
            let fd = (f(&a) - f(&b)) / (2.0 * eps);
            let an = g.as_slice()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "coord {i}: fd {fd} analytic {an}");
        }
        assert!(g.tensor("w_mem").unwrap().iter().any(|x| x.abs() > 1e-6));
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        let bad = SamplingConfig { top_p: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SamplingConfig { repetition_penalty: 0.9, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn repetition_penalty_and_nucleus() {
        let cfg = SamplingConfig {
            top_p: 1.0,
            temperature: 1.0,
            repetition_penalty: 2.0,
            ..Default::default()
        };
        let logits = [2.0, -1.0, 0.0];
        let probs = sampling_distribution(&logits, &[true, true, false], &cfg);
        let z: [f64; 3] = [1.0, -2.0, 0.0];
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        for (p, zi) in probs.iter().zip(z) {
            assert!((p - zi.exp() / total).abs() < 1e-12);
        }
        let nucleus = SamplingConfig { top_p: 0.5, repetition_penalty: 1.0, ..cfg };
        let probs = sampling_distribution(&[3.0, 0.0, 0.0], &[false; 3], &nucleus);
        assert!(probs[0] > 0.0 && probs[1] == 0.0 && probs[2] == 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = PolicyParams::init(small_shape(4, 3), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for x in p.as_mut_slice() {
            *x += rng.gen::<f64>() * 1e-3 + 1.0 / 3.0;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        p.save(&path).unwrap();
        let q = PolicyParams::load(&path).unwrap();
        assert_eq!(q.shape(), p.shape());
        assert!(p.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(q.vocab().word("cones"), p.vocab().word("cones"));
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let p = PolicyParams::init(small_shape(4, 3), 3);
        let mut ck = p.to_checkpoint();
        ck.tensors[0].data.pop();
        assert!(PolicyParams::from_checkpoint(ck).is_err());
        let mut ck = p.to_checkpoint();
        ck.version = 99;
        assert!(PolicyParams::from_checkpoint(ck).is_err());
    }
}
