//! Samples, variance-aware SFT/RFT splitting, easy/hard validation sets, the
//! synthetic scene generator and JSONL ingestion.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::DataError;
use crate::geometry::{AABox, Point2, Resolution, Trajectory};
use crate::parsing::{self, serialize_response};
use crate::policy::SceneContext;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    SftStraight,
    SftTurn,
    RftStraight,
    RftTurn,
    ValEasy,
    ValHard,
    #[default]
    Unassigned,
}

impl SplitTag {
    pub fn is_sft(self) -> bool {
        matches!(self, SplitTag::SftStraight | SplitTag::SftTurn)
    }

    pub fn is_rft(self) -> bool {
        matches!(self, SplitTag::RftStraight | SplitTag::RftTurn)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::SftStraight => "sft_straight",
            SplitTag::SftTurn => "sft_turn",
            SplitTag::RftStraight => "rft_straight",
            SplitTag::RftTurn => "rft_turn",
            SplitTag::ValEasy => "val_easy",
            SplitTag::ValHard => "val_hard",
            SplitTag::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub context: SceneContext,
    pub width: f64,
    pub height: f64,
    pub reasoning: String,
    pub trajectory: Trajectory,
    #[serde(default)]
    pub tag: SplitTag,
}

impl Sample {
    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodScene {
    pub id: String,
    pub context: SceneContext,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<AABox>,
}

impl OodScene {
    pub fn resolution(&self) -> Resolution {
        Resolution::new(self.width, self.height)
    }
}

/// Population variance of the x coordinates.
pub fn x_variance(traj: &Trajectory) -> f64 {
    let n = traj.len();
    if n == 0 {
        return 0.0;
    }
    let mean = traj.points().iter().map(|p| p.x).sum::<f64>() / n as f64;
    traj.points().iter().map(|p| (p.x - mean).powi(2)).sum::<f64>() / n as f64
}

/// x-variance (px²) separating straight from turning trajectories for the
/// synthetic generator: `(0.03 · width)²`.
pub fn straight_variance_threshold(width: f64) -> f64 {
    (0.03 * width).powi(2)
}

/// A two-part ratio such as `4:1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratio {
    pub first: f64,
    pub second: f64,
}

impl Ratio {
    pub const fn new(first: f64, second: f64) -> Self {
        Self { first, second }
    }

    /// Share of the second part.
    pub fn second_fraction(&self) -> f64 {
        self.second / (self.first + self.second)
    }

    pub fn first_fraction(&self) -> f64 {
        self.first / (self.first + self.second)
    }

    fn validate(&self, what: &str) -> Result<(), DataError> {
        let ok = self.first.is_finite() && self.second.is_finite() && self.first >= 0.0 && self.second >= 0.0;
        if !ok || self.first + self.second <= 0.0 {
            return Err(DataError::Infeasible(format!("{what} ratio {self} must be non-negative with a positive sum")));
        }
        Ok(())
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.first, self.second)
    }
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(':').ok_or_else(|| format!("ratio {s:?} must look like A:B"))?;
        let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("ratio {s:?}: {e}"));
        Ok(Ratio::new(parse(a)?, parse(b)?))
    }
}

impl Serialize for Ratio {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub sft_rft: Ratio,
    /// straight:turn inside the SFT share.
    pub sft_straight_turn: Ratio,
    /// straight:turn (easy:hard) inside the RFT share.
    pub rft_straight_turn: Ratio,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            sft_rft: Ratio::new(4.0, 1.0),
            sft_straight_turn: Ratio::new(6.0, 4.0),
            rft_straight_turn: Ratio::new(6.0, 4.0),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub rft_turn: usize,
    pub sft_turn: usize,
    pub sft_straight: usize,
    pub rft_straight: usize,
}

impl SplitCounts {
    pub fn sft(&self) -> usize {
        self.sft_turn + self.sft_straight
    }

    pub fn rft(&self) -> usize {
        self.rft_turn + self.rft_straight
    }
}

impl SplitPlan {
    pub fn counts(&self, n: usize) -> Result<SplitCounts, DataError> {
        self.sft_rft.validate("sft:rft")?;
        self.sft_straight_turn.validate("sft straight:turn")?;
        self.rft_straight_turn.validate("rft straight:turn")?;
        let n_rft = (n as f64 * self.sft_rft.second_fraction()).round() as usize;
        let n_sft = n - n_rft;
        if self.sft_rft.first > 0.0 && n_sft == 0 || self.sft_rft.second > 0.0 && n_rft == 0 {
            return Err(DataError::Infeasible(format!(
                "{n} samples cannot honour sft:rft {} (would leave an empty side)",
                self.sft_rft
            )));
        }
        let turn_total = (n_rft as f64 * self.rft_straight_turn.second_fraction()
            + n_sft as f64 * self.sft_straight_turn.second_fraction())
        .round() as usize;
        let rft_turn = ((n_rft as f64 * self.rft_straight_turn.second_fraction()).round() as usize)
            .min(turn_total)
            .min(n_rft);
        let sft_turn = turn_total - rft_turn;
        if sft_turn > n_sft {
            return Err(DataError::Infeasible(format!(
                "need {sft_turn} SFT turn samples but SFT share is only {n_sft}"
            )));
        }
        Ok(SplitCounts {
            rft_turn,
            sft_turn,
            sft_straight: n_sft - sft_turn,
            rft_straight: n_rft - rft_turn,
        })
    }
}

/// Indices sorted by descending x-variance. Ties are broken by a seeded
/// shuffle so the order is reproducible.
pub fn sort_by_variance_desc(samples: &[Sample], seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let var: Vec<f64> = samples.iter().map(|s| x_variance(&s.trajectory)).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]));
    order
}

/// Tag every sample SFT/RFT × straight/turn. The highest-variance samples
/// are turns; the first of them go to RFT-turn, the rest to SFT-turn; the
/// straight samples go first to SFT-straight, then RFT-straight.
pub fn split_sft_rft(mut dataset: Vec<Sample>, plan: &SplitPlan) -> Result<(Vec<Sample>, SplitCounts), DataError> {
    if dataset.is_empty() {
        return Err(DataError::Infeasible("empty dataset".into()));
    }
    let counts = plan.counts(dataset.len())?;
    let order = sort_by_variance_desc(&dataset, plan.seed);
    let bounds = [
        (counts.rft_turn, SplitTag::RftTurn),
        (counts.sft_turn, SplitTag::SftTurn),
        (counts.sft_straight, SplitTag::SftStraight),
        (counts.rft_straight, SplitTag::RftStraight),
    ];
    let mut it = order.into_iter();
    for (n, tag) in bounds {
        for idx in it.by_ref().take(n) {
            dataset[idx].tag = tag;
        }
    }
    Ok((dataset, counts))
}

pub fn tag_counts(samples: &[Sample]) -> BTreeMap<SplitTag, usize> {
    let mut out = BTreeMap::new();
    for s in samples {
        *out.entry(s.tag).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationPlan {
    pub easy_size: usize,
    pub hard_top_count: usize,
    pub hard_bottom_count: usize,
    pub top_fraction: f64,
    pub bottom_fraction: f64,
    pub seed: u64,
}

impl Default for ValidationPlan {
    fn default() -> Self {
        Self {
            easy_size: 1000,
            hard_top_count: 700,
            hard_bottom_count: 300,
            top_fraction: 0.7,
            bottom_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Easy set: a median-centred slice of the variance-sorted candidates.
/// Hard set: random draws from the top (highest variance) and bottom
/// fractions of the same list. Candidates are `dense` minus any id present
/// in `standard`.
pub fn build_validation_sets(
    dense: &[Sample],
    standard: &[Sample],
    plan: &ValidationPlan,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    let excluded: HashSet<&str> = standard.iter().map(|s| s.id.as_str()).collect();
    let candidates: Vec<Sample> = dense.iter().filter(|s| !excluded.contains(s.id.as_str())).cloned().collect();
    let n = candidates.len();
    let order = sort_by_variance_desc(&candidates, plan.seed);

    if plan.easy_size > n {
        return Err(DataError::Infeasible(format!("easy set of {} needs at least that many candidates, have {n}", plan.easy_size)));
    }
    let start = n / 2 - (plan.easy_size / 2).min(n / 2);
    let start = start.min(n - plan.easy_size);
    let easy = order[start..start + plan.easy_size]
        .iter()
        .map(|&i| Sample { tag: SplitTag::ValEasy, ..candidates[i].clone() })
        .collect();

    let top_len = (plan.top_fraction * n as f64).floor() as usize;
    let bottom_len = (plan.bottom_fraction * n as f64).floor() as usize;
    if plan.hard_top_count > top_len || plan.hard_bottom_count > bottom_len {
        return Err(DataError::Infeasible(format!(
            "hard set wants {} of top {top_len} and {} of bottom {bottom_len} ({n} candidates)",
            plan.hard_top_count, plan.hard_bottom_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed ^ 0x5eed_4a2d);
    let mut top: Vec<usize> = index::sample(&mut rng, top_len, plan.hard_top_count).into_vec();
    let mut bottom: Vec<usize> = index::sample(&mut rng, bottom_len, plan.hard_bottom_count)
        .into_iter()
        .map(|i| n - bottom_len + i)
        .collect();
    top.sort_unstable();
    bottom.sort_unstable();
    let hard = top
        .into_iter()
        .chain(bottom)
        .map(|pos| Sample { tag: SplitTag::ValHard, ..candidates[order[pos]].clone() })
        .collect();
    Ok((easy, hard))
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub val_count: usize,
    /// Fraction of the validation pool also listed as "standard" annotations.
    pub standard_fraction: f64,
    pub ood_count: usize,
    pub width: f64,
    pub height: f64,
    pub n_waypoints: usize,
    pub context_dim: usize,
    /// Probability that a scene belongs to the turning family.
    pub turn_fraction: f64,
    /// Multiplier on turn curvature; 0 makes every scene straight.
    pub curvature_scale: f64,
    /// Half-width of the uniform per-coordinate noise, in pixels.
    pub noise_px: f64,
    /// Mean number of obstacle boxes per OOD scene.
    pub obstacle_density: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_count: 5430,
            val_count: 3400,
            standard_fraction: 0.1,
            ood_count: 300,
            width: 640.0,
            height: 480.0,
            n_waypoints: 20,
            context_dim: 16,
            turn_fraction: 0.4,
            curvature_scale: 1.0,
            noise_px: 2.0,
            obstacle_density: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<Sample>,
    pub val_dense: Vec<Sample>,
    pub val_standard: Vec<Sample>,
    pub ood: Vec<OodScene>,
}

const HAZARDS: [&str; 6] = ["cones", "barrels", "barrier", "worker", "work vehicle", "sign"];

#[derive(Debug, Clone, Copy)]
struct Latent {
    curvature: f64,
    length: f64,
    x_offset: f64,
    /// -1 left, 0 none, +1 right
    hazard_side: i32,
    hazard: usize,
    lane_closed: bool,
}

fn draw_latent(cfg: &SyntheticConfig, rng: &mut impl Rng, ood: bool) -> Latent {
    let turning = rng.gen::<f64>() < cfg.turn_fraction;
    let magnitude = if ood { rng.gen_range(0.5..1.25) } else { rng.gen_range(0.5..1.0) };
    let curvature = if turning {
        magnitude * cfg.curvature_scale * if rng.gen::<bool>() { 1.0 } else { -1.0 }
    } else {
        0.0
    };
    let hazard_side = match rng.gen_range(0..3) {
        0 => 0,
        1 => -1,
        _ => 1,
    };
    Latent {
        curvature,
        length: rng.gen_range(0.35..0.75),
        x_offset: rng.gen_range(-0.1..0.1),
        hazard_side,
        hazard: rng.gen_range(0..HAZARDS.len()),
        lane_closed: hazard_side != 0 && rng.gen::<f64>() < 0.3,
    }
}

fn lateral_shift(l: &Latent) -> f64 {
    let base = if l.lane_closed { 0.07 } else { 0.045 };
    -(l.hazard_side as f64) * base
}

fn context_of(l: &Latent, dim: usize, rng: &mut impl Rng, ood: bool) -> SceneContext {
    let spread = if ood { 2.0 } else { 1.0 };
    let mut f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-spread..spread)).collect();
    let informative = [
        l.curvature + rng.gen_range(-0.02..0.02),
        (l.length - 0.55) / 0.2,
        l.x_offset * 10.0,
        l.hazard_side as f64,
        if l.lane_closed { 1.0 } else { -1.0 },
        l.hazard as f64 / (HAZARDS.len() - 1) as f64 * 2.0 - 1.0,
    ];
    for (slot, v) in f.iter_mut().zip(informative) {
        *slot = v;
    }
    SceneContext(f)
}

fn smoothstep(s: f64) -> f64 {
    s * s * (3.0 - 2.0 * s)
}

fn nominal_path(l: &Latent, cfg: &SyntheticConfig) -> Vec<Point2> {
    let (w, h) = (cfg.width, cfg.height);
    let n = cfg.n_waypoints;
    (1..=n)
        .map(|i| {
            let s = i as f64 / n as f64;
            let x = w * (0.5 + l.x_offset + lateral_shift(l) * smoothstep(s) + 0.3 * l.curvature * s * s);
            let y = h * (0.96 - l.length * s);
            Point2::new(x, y)
        })
        .collect()
}

fn reasoning_of(l: &Latent) -> String {
    let mut parts = Vec::new();
    if l.hazard_side == 0 {
        parts.push("road clear ahead.".to_string());
    } else {
        let side = if l.hazard_side < 0 { "left" } else { "right" };
        let place = if l.hazard % 2 == 0 { "side of road." } else { "sidewalk." };
        let place = if HAZARDS[l.hazard] == "worker" { "sidewalk." } else { place };
        parts.push(format!("{} on {side} {place}", HAZARDS[l.hazard]));
        if l.lane_closed {
            parts.push(format!("{side} lane closed"));
            parts.push(format!("shift {}", if l.hazard_side < 0 { "right." } else { "left." }));
        }
    }
    if l.curvature > 0.0 {
        parts.push("road curve to the right.".into());
    } else if l.curvature < 0.0 {
        parts.push("road curve to the left.".into());
    } else {
        parts.push("keep straight.".into());
    }
    parts.join(" ")
}

fn make_sample(id: String, cfg: &SyntheticConfig, rng: &mut impl Rng) -> Sample {
    let latent = draw_latent(cfg, rng, false);
    let context = context_of(&latent, cfg.context_dim, rng, false);
    let noise = cfg.noise_px.max(0.0);
    let points = nominal_path(&latent, cfg)
        .into_iter()
        .map(|p| {
            let (dx, dy) = if noise > 0.0 {
                (rng.gen_range(-noise..=noise), rng.gen_range(-noise..=noise))
            } else {
                (0.0, 0.0)
            };
            Point2::new((p.x + dx).clamp(0.0, cfg.width), (p.y + dy).clamp(0.0, cfg.height))
        })
        .collect();
    Sample {
        id,
        context,
        width: cfg.width,
        height: cfg.height,
        reasoning: reasoning_of(&latent),
        trajectory: Trajectory::new(points),
        tag: SplitTag::Unassigned,
    }
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64, cfg: &SyntheticConfig) -> Option<AABox> {
    let x0 = (cx - w / 2.0).clamp(0.0, cfg.width);
    let x1 = (cx + w / 2.0).clamp(0.0, cfg.width);
    let y0 = (cy - h / 2.0).clamp(0.0, cfg.height);
    let y1 = (cy + h / 2.0).clamp(0.0, cfg.height);
    AABox::new(x0, y0, x1, y1).ok()
}

fn make_ood_scene(id: String, cfg: &SyntheticConfig, rng: &mut impl Rng) -> OodScene {
    let latent = draw_latent(cfg, rng, true);
    let context = context_of(&latent, cfg.context_dim, rng, true);
    let path = nominal_path(&latent, cfg);
    let n_boxes = 1 + rng.gen_range(0.0..2.0 * (cfg.obstacle_density - 1.0).max(0.0)).round() as usize;
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let (bw, bh) = (rng.gen_range(20.0..70.0), rng.gen_range(15.0..50.0));
        let b = if rng.gen::<f64>() < 0.4 {
            // on the nominal path, in its far half
            let p = path[rng.gen_range(path.len() / 2..path.len())];
            clamp_box(p.x + rng.gen_range(-10.0..10.0), p.y, bw, bh, cfg)
        } else {
            let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let p = path[rng.gen_range(0..path.len())];
            clamp_box(p.x + side * rng.gen_range(80.0..200.0), p.y, bw, bh, cfg)
        };
        boxes.extend(b);
    }
    OodScene {
        id,
        context,
        width: cfg.width,
        height: cfg.height,
        boxes,
    }
}

/// Deterministic in `(cfg, seed)`. Training and validation scenes share a
/// distribution; OOD scenes use wider context features and sharper turns.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..cfg.train_count)
        .map(|i| make_sample(format!("train-{i:05}"), cfg, &mut rng))
        .collect();
    let val_dense: Vec<Sample> = (0..cfg.val_count)
        .map(|i| make_sample(format!("val-{i:05}"), cfg, &mut rng))
        .collect();
    let n_std = (cfg.standard_fraction * cfg.val_count as f64).round() as usize;
    let mut std_idx = index::sample(&mut rng, cfg.val_count, n_std.min(cfg.val_count)).into_vec();
    std_idx.sort_unstable();
    let val_standard = std_idx.into_iter().map(|i| val_dense[i].clone()).collect();
    let ood = (0..cfg.ood_count)
        .map(|i| make_ood_scene(format!("ood-{i:05}"), cfg, &mut rng))
        .collect();
    SyntheticData {
        train,
        val_dense,
        val_standard,
        ood,
    }
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

/// Instruction text paired with every converted sample.
pub const PLANNING_PROMPT: &str = "Predict the ego vehicle's future path from the image as a list of \
(x, y) image coordinates. Write your reasoning inside <think> </think> and the path inside \
<answer> </answer> as [{'x': x1, 'y': y1}, ...].";

/// Instruction-following record: image reference, prompt and a
/// reasoning + answer response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub image: String,
    pub prompt: String,
    pub response: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub context: Option<SceneContext>,
    #[serde(default)]
    pub tag: SplitTag,
}

impl InstructionRecord {
    pub fn from_sample(s: &Sample) -> Result<Self, DataError> {
        let response = serialize_response(&s.reasoning, &s.trajectory).map_err(|e| DataError::Schema {
            path: Default::default(),
            line: 0,
            field: format!("{}.reasoning", s.id),
            message: e.to_string(),
        })?;
        Ok(Self {
            id: s.id.clone(),
            image: format!("images/{}.png", s.id),
            prompt: PLANNING_PROMPT.to_string(),
            response,
            width: s.width,
            height: s.height,
            context: Some(s.context.clone()),
            tag: s.tag,
        })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn schema_err(path: &Path, line: usize, field: impl Into<String>, message: impl Into<String>) -> DataError {
    DataError::Schema {
        path: path.to_path_buf(),
        line,
        field: field.into(),
        message: message.into(),
    }
}

/// JSONL records, or (compatibility) a single JSON array. For arrays the
/// reported `line` is the 1-based record index.
fn read_values(path: &Path) -> Result<Vec<(usize, Value)>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim_start().starts_with('[') {
        let values: Vec<Value> =
            serde_json::from_str(&text).map_err(|e| schema_err(path, e.line(), "$", e.to_string()))?;
        return Ok(values.into_iter().enumerate().map(|(i, v)| (i + 1, v)).collect());
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| schema_err(path, i + 1, "$", e.to_string()))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

fn decode<T: DeserializeOwned>(path: &Path, line: usize, v: Value) -> Result<T, DataError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let field = e.path().to_string();
        schema_err(path, line, field, e.into_inner().to_string())
    })
}

fn validate_frame(path: &Path, line: usize, width: f64, height: f64, context: &SceneContext) -> Result<(), DataError> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(schema_err(path, line, "width", "must be positive"));
    }
    if !(height > 0.0 && height.is_finite()) {
        return Err(schema_err(path, line, "height", "must be positive"));
    }
    if let Some(i) = context.0.iter().position(|v| !v.is_finite()) {
        return Err(schema_err(path, line, format!("context[{i}]"), "not finite"));
    }
    Ok(())
}

fn validate_sample(path: &Path, line: usize, s: &Sample, expected_n: Option<usize>) -> Result<(), DataError> {
    validate_frame(path, line, s.width, s.height, &s.context)?;
    if s.trajectory.is_empty() {
        return Err(schema_err(path, line, "trajectory", "must not be empty"));
    }
    if let Some(n) = expected_n {
        if s.trajectory.len() != n {
            return Err(schema_err(path, line, "trajectory", format!("expected {n} points, got {}", s.trajectory.len())));
        }
    }
    let res = s.resolution();
    for (i, p) in s.trajectory.points().iter().enumerate() {
        if !p.is_finite() || !res.contains(p) {
            return Err(schema_err(
                path,
                line,
                format!("trajectory[{i}]"),
                format!("({}, {}) outside {}x{}", p.x, p.y, s.width, s.height),
            ));
        }
    }
    Ok(())
}

fn record_to_sample(path: &Path, line: usize, r: InstructionRecord) -> Result<Sample, DataError> {
    let parsed = parsing::parse_blocks(&r.response)
        .map_err(|f| schema_err(path, line, "response", format!("unparseable response: {f}")))?;
    Ok(Sample {
        id: r.id,
        context: r.context.unwrap_or(SceneContext(Vec::new())),
        width: r.width,
        height: r.height,
        reasoning: parsed.reasoning,
        trajectory: parsed.trajectory,
        tag: r.tag,
    })
}

/// Load samples from JSONL (or a JSON array). Records may use the sample
/// schema or the instruction-following schema (`response` field).
pub fn load_samples(path: &Path, expected_n: Option<usize>) -> Result<Vec<Sample>, DataError> {
    let mut out = Vec::new();
    for (line, v) in read_values(path)? {
        let is_instruction = v.get("response").is_some();
        let sample = if is_instruction {
            record_to_sample(path, line, decode::<InstructionRecord>(path, line, v)?)?
        } else {
            decode::<Sample>(path, line, v)?
        };
        validate_sample(path, line, &sample, expected_n)?;
        out.push(sample);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path)(e.into()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_samples(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    write_jsonl(samples, path)
}

pub fn save_ood_scenes(scenes: &[OodScene], path: &Path) -> Result<(), DataError> {
    write_jsonl(scenes, path)
}

pub fn load_ood_scenes(path: &Path) -> Result<Vec<OodScene>, DataError> {
    let mut out = Vec::new();
    for (line, v) in read_values(path)? {
        let scene: OodScene = decode(path, line, v)?;
        validate_frame(path, line, scene.width, scene.height, &scene.context)?;
        let res = scene.resolution();
        for (i, b) in scene.boxes.iter().enumerate() {
            let inside = res.contains(&Point2::new(b.x_min(), b.y_min())) && res.contains(&Point2::new(b.x_max(), b.y_max()));
            if !inside {
                return Err(schema_err(path, line, format!("boxes[{i}]"), "box outside the image"));
            }
        }
        out.push(scene);
    }
    Ok(out)
}

/// Write samples as a JSON array of instruction-following records.
pub fn save_instruction_json(samples: &[Sample], path: &Path) -> Result<(), DataError> {
    let records = samples.iter().map(InstructionRecord::from_sample).collect::<Result<Vec<_>, _>>()?;
    let text = serde_json::to_string_pretty(&records).map_err(|e| io_err(path)(e.into()))?;
    fs::write(path, text).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_with_xs(id: &str, xs: &[f64]) -> Sample {
        Sample {
            id: id.into(),
            context: SceneContext(vec![0.0; 2]),
            width: 640.0,
            height: 480.0,
            reasoning: "keep straight.".into(),
            trajectory: Trajectory::new(xs.iter().enumerate().map(|(i, &x)| Point2::new(x, 400.0 - i as f64)).collect()),
            tag: SplitTag::Unassigned,
        }
    }

    #[test]
    fn variance_examples() {
        assert_eq!(x_variance(&sample_with_xs("a", &[5.0, 5.0, 5.0]).trajectory), 0.0);
        let v = x_variance(&sample_with_xs("a", &[0.0, 2.0, 4.0]).trajectory);
        assert!((v - 8.0 / 3.0).abs() < 1e-12);
        let shifted = x_variance(&sample_with_xs("a", &[100.0, 102.0, 104.0]).trajectory);
        assert!((shifted - v).abs() < 1e-9);
    }

    #[test]
    fn full_corpus_counts() {
        let c = SplitPlan::default().counts(5430).unwrap();
        assert_eq!(c.sft(), 4344);
        assert_eq!(c.rft(), 1086);
        assert_eq!(c.rft_turn, 434);
        assert_eq!(c.rft_straight, 652);
    }

    #[test]
    fn ten_samples_half_turn() {
        let data: Vec<Sample> = (0..10).map(|i| sample_with_xs(&format!("s{i}"), &[0.0, i as f64 * 3.0])).collect();
        let plan = SplitPlan {
            sft_rft: Ratio::new(1.0, 1.0),
            sft_straight_turn: Ratio::new(1.0, 1.0),
            rft_straight_turn: Ratio::new(1.0, 1.0),
            seed: 3,
        };
        let (tagged, counts) = split_sft_rft(data, &plan).unwrap();
        assert_eq!(counts.rft_turn + counts.sft_turn, 5);
        for s in &tagged {
            let turn = matches!(s.tag, SplitTag::RftTurn | SplitTag::SftTurn);
            let idx: usize = s.id[1..].parse().unwrap();
            assert_eq!(turn, idx >= 5, "{}", s.id);
        }
    }

    #[test]
    fn infeasible_ratios() {
        let data = vec![sample_with_xs("a", &[0.0, 1.0])];
        assert!(matches!(split_sft_rft(data.clone(), &SplitPlan::default()), Err(DataError::Infeasible(_))));
        let bad = SplitPlan { sft_rft: Ratio::new(-1.0, 1.0), ..Default::default() };
        assert!(split_sft_rft(data.clone(), &bad).is_err());
        assert!(split_sft_rft(Vec::new(), &SplitPlan::default()).is_err());
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("9:1".parse::<Ratio>().unwrap(), Ratio::new(9.0, 1.0));
        assert!("9-1".parse::<Ratio>().is_err());
        let json = serde_json::to_string(&Ratio::new(6.0, 4.0)).unwrap();
        assert_eq!(json, "\"6:4\"");
    }

    #[test]
    fn validation_sets_small() {
        let dense: Vec<Sample> = (0..100).map(|i| sample_with_xs(&format!("v{i}"), &[0.0, i as f64])).collect();
        let standard = dense[..10].to_vec();
        let plan = ValidationPlan {
            easy_size: 20,
            hard_top_count: 14,
            hard_bottom_count: 6,
            seed: 1,
            ..Default::default()
        };
        let (easy, hard) = build_validation_sets(&dense, &standard, &plan).unwrap();
        assert_eq!(easy.len(), 20);
        assert_eq!(hard.len(), 20);
        assert!(easy.iter().chain(&hard).all(|s| s.id[1..].parse::<usize>().unwrap() >= 10));
        // candidates v10..v99 sorted descending: median-centred slice
        let mut ids: Vec<usize> = easy.iter().map(|s| s.id[1..].parse().unwrap()).collect();
        ids.sort_unstable();
        assert_eq!(ids, (45..65).collect::<Vec<_>>());
        let too_big = ValidationPlan { hard_bottom_count: 10, ..plan };
        assert!(build_validation_sets(&dense, &standard, &too_big).is_err());
    }

    #[test]
    fn synthetic_shapes() {
        let cfg = SyntheticConfig {
            train_count: 50,
            val_count: 20,
            ood_count: 10,
            ..Default::default()
        };
        let data = generate_synthetic(&cfg, 11);
        assert_eq!(data.train.len(), 50);
        assert_eq!(data.val_standard.len(), 2);
        for s in data.train.iter().chain(&data.val_dense) {
            assert_eq!(s.trajectory.len(), 20);
            assert_eq!(s.context.0.len(), 16);
            assert!(s.trajectory.points().iter().all(|p| s.resolution().contains(p)));
        }
        assert!(data.ood.iter().all(|s| !s.boxes.is_empty()));
        assert_eq!(data, generate_synthetic(&cfg, 11));
    }

    #[test]
    fn reasoning_uses_lexicon() {
        let cfg = SyntheticConfig { train_count: 300, val_count: 0, ood_count: 0, ..Default::default() };
        let vocab = crate::policy::TokenVocab::with_default_lexicon(32, 20).unwrap();
        for s in generate_synthetic(&cfg, 2).train {
            for w in s.reasoning.split_whitespace() {
                assert!(vocab.word(w).is_some(), "{w} in {:?}", s.reasoning);
            }
        }
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { train_count: 5, val_count: 0, ood_count: 3, ..Default::default() };
        let data = generate_synthetic(&cfg, 4);
        let path = dir.path().join("s.jsonl");
        save_samples(&data.train, &path).unwrap();
        assert_eq!(load_samples(&path, Some(20)).unwrap(), data.train);

        let ood_path = dir.path().join("o.jsonl");
        save_ood_scenes(&data.ood, &ood_path).unwrap();
        assert_eq!(load_ood_scenes(&ood_path).unwrap(), data.ood);

        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut v: Value = serde_json::from_str(&lines[2]).unwrap();
        v.as_object_mut().unwrap().remove("trajectory");
        lines[2] = v.to_string();
        fs::write(&path, lines.join("\n")).unwrap();
        match load_samples(&path, None) {
            Err(DataError::Schema { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("trajectory"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_field_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            r#"{"id":"a","context":[0.1],"width":640,"height":480,"reasoning":"r","trajectory":[{"x":1,"y":"oops"}]}"#,
        )
        .unwrap();
        match load_samples(&path, None) {
            Err(DataError::Schema { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "trajectory[0].y");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn instruction_array_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { train_count: 4, val_count: 0, ood_count: 0, ..Default::default() };
        let data = generate_synthetic(&cfg, 9);
        let path = dir.path().join("sft.json");
        save_instruction_json(&data.train, &path).unwrap();
        let back = load_samples(&path, Some(20)).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in back.iter().zip(&data.train) {
            assert_eq!(a.reasoning, b.reasoning);
            for (p, q) in a.trajectory.points().iter().zip(b.trajectory.points()) {
                assert!((p.x - q.x).abs() <= 0.005 + 1e-9 && (p.y - q.y).abs() <= 0.005 + 1e-9);
            }
        }
    }
}
