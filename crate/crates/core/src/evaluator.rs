//! In-domain ADE/FDE reporting, OOD collision metrics and weighted safety
//! scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::{OodScene, Sample};
use crate::error::EvalError;
use crate::geometry::{clip_length, intersects, Point2, Polyline, Resolution, Trajectory};
use crate::parsing::{parse_response, serialize_response};
use crate::policy::{PolicyParams, SamplingConfig, SceneContext};
use crate::rewards::{ade, fde};

/// What a planner sees for one scene. `reference` is only consulted by
/// diagnostic planners that cheat on purpose.
#[derive(Debug, Clone, Copy)]
pub struct PlanQuery<'a> {
    pub id: &'a str,
    pub context: &'a SceneContext,
    pub resolution: Resolution,
    pub n_waypoints: usize,
    pub reference: Option<&'a Trajectory>,
}

/// Anything that maps a scene to a response text.
pub trait Planner: Sync {
    fn respond(&self, query: &PlanQuery<'_>) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Decoding {
    #[default]
    Greedy,
    Sampled { sampling: SamplingConfig },
}

/// Decodes a policy and renders its tokens.
pub struct PolicyPlanner<'a> {
    pub params: &'a PolicyParams,
    pub decoding: Decoding,
    pub max_len: usize,
}

impl<'a> PolicyPlanner<'a> {
    pub fn greedy(params: &'a PolicyParams, max_len: usize) -> Self {
        Self {
            params,
            decoding: Decoding::Greedy,
            max_len,
        }
    }
}

fn id_seed(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl Planner for PolicyPlanner<'_> {
    fn respond(&self, q: &PlanQuery<'_>) -> String {
        let seq = match self.decoding {
            Decoding::Greedy => self.params.greedy_sequence(q.context, self.max_len),
            Decoding::Sampled { sampling } => {
                let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed ^ id_seed(q.id));
                self.params.sample_sequence(q.context, &SamplingConfig { max_len: self.max_len, ..sampling }, &mut rng)
            }
        };
        match seq {
            Ok(s) => self.params.vocab().render(&s.tokens, q.resolution),
            Err(_) => String::new(),
        }
    }
}

fn respond_with(traj: &Trajectory) -> String {
    serialize_response("oracle", traj).unwrap_or_default()
}

/// Returns the reference trajectory shifted by a constant pixel offset.
#[derive(Debug, Clone, Copy)]
pub struct OffsetPlanner {
    pub dx: f64,
    pub dy: f64,
}

impl Planner for OffsetPlanner {
    fn respond(&self, q: &PlanQuery<'_>) -> String {
        match q.reference {
            Some(t) => respond_with(&Trajectory::new(t.points().iter().map(|p| p.translate(self.dx, self.dy)).collect())),
            None => String::new(),
        }
    }
}

/// Returns the reference trajectory unchanged.
pub struct OraclePlanner;

impl Planner for OraclePlanner {
    fn respond(&self, q: &PlanQuery<'_>) -> String {
        OffsetPlanner { dx: 0.0, dy: 0.0 }.respond(q)
    }
}

/// Extends the first observed step `p1 - p0` linearly: `p_k = p0 + k (p1 - p0)`.
pub struct StraightLinePlanner;

impl Planner for StraightLinePlanner {
    fn respond(&self, q: &PlanQuery<'_>) -> String {
        let pts = match q.reference {
            Some(t) if t.len() >= 2 => t.points(),
            _ => return String::new(),
        };
        let (p0, p1) = (pts[0], pts[1]);
        let traj = (0..q.n_waypoints)
            .map(|k| Point2::new(p0.x + k as f64 * (p1.x - p0.x), p0.y + k as f64 * (p1.y - p0.y)))
            .collect();
        respond_with(&Trajectory::new(traj))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetMetrics {
    pub count: usize,
    pub decoded: usize,
    pub decode_failures: usize,
    /// decoded / count
    pub coverage: f64,
    /// Mean ADE ×100 with x / width and y / height; `None` if nothing decoded.
    pub ade_pct: Option<f64>,
    pub fde_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanningEval {
    /// Keyed by split tag.
    pub subsets: BTreeMap<String, SubsetMetrics>,
}

impl PlanningEval {
    pub fn subset(&self, tag: &str) -> Option<&SubsetMetrics> {
        self.subsets.get(tag)
    }
}

/// Normalized (ADE, FDE) in percent for one response, or `None` on a decode
/// failure.
pub fn score_response(text: &str, gt: &Trajectory, res: Resolution) -> Option<(f64, f64)> {
    let parsed = parse_response(text, gt.len()).ok()?;
    let pred = parsed.trajectory.normalized(res.width, res.height);
    let gt = gt.normalized(res.width, res.height);
    Some((ade(&pred, &gt).ok()? * 100.0, fde(&pred, &gt).ok()? * 100.0))
}

pub fn eval_planning(planner: &dyn Planner, samples: &[Sample]) -> PlanningEval {
    let scored: Vec<Option<(f64, f64)>> = samples
        .par_iter()
        .map(|s| {
            let q = PlanQuery {
                id: &s.id,
                context: &s.context,
                resolution: s.resolution(),
                n_waypoints: s.trajectory.len(),
                reference: Some(&s.trajectory),
            };
            score_response(&planner.respond(&q), &s.trajectory, s.resolution())
        })
        .collect();
    let mut groups: BTreeMap<String, Vec<Option<(f64, f64)>>> = BTreeMap::new();
    for (s, r) in samples.iter().zip(scored) {
        groups.entry(s.tag.as_str().to_string()).or_default().push(r);
    }
    let subsets = groups
        .into_iter()
        .map(|(tag, rs)| {
            let ok: Vec<(f64, f64)> = rs.iter().flatten().copied().collect();
            let mean = |f: fn(&(f64, f64)) -> f64| (!ok.is_empty()).then(|| ok.iter().map(f).sum::<f64>() / ok.len() as f64);
            let m = SubsetMetrics {
                count: rs.len(),
                decoded: ok.len(),
                decode_failures: rs.len() - ok.len(),
                coverage: ok.len() as f64 / rs.len() as f64,
                ade_pct: mean(|r| r.0),
                fde_pct: mean(|r| r.1),
            };
            (tag, m)
        })
        .collect();
    PlanningEval { subsets }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyMetrics {
    /// Share of scenes with at least one box hit.
    pub fail_rate: f64,
    /// Boxes hit per scene.
    pub collision_count: f64,
    /// Penetration length per scene, pixels.
    pub penetration_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSceneResult {
    pub id: String,
    pub boxes_hit: usize,
    pub penetration: f64,
    pub decode_failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodEval {
    pub metrics: SafetyMetrics,
    pub scenes: usize,
    pub decode_failures: usize,
    pub per_scene: Vec<OodSceneResult>,
}

/// Boxes hit and total clipped length for one predicted trajectory.
pub fn collision_counts(traj: &Trajectory, boxes: &[crate::geometry::AABox]) -> (usize, f64) {
    let mut pts = traj.points().to_vec();
    if pts.len() == 1 {
        pts.push(pts[0]);
    }
    let poly = match Polyline::new(pts) {
        Ok(p) => p,
        Err(_) => return (0, 0.0),
    };
    let mut hit = 0;
    let mut pen = 0.0;
    for b in boxes {
        if intersects(&poly, b) {
            hit += 1;
            pen += clip_length(&poly, b);
        }
    }
    (hit, pen)
}

/// Decode failures count as failed scenes with no box or length
/// contribution.
pub fn eval_ood(planner: &dyn Planner, scenes: &[OodScene], n_waypoints: usize) -> Result<OodEval, EvalError> {
    if scenes.is_empty() {
        return Err(EvalError::NoScenes);
    }
    let per_scene: Vec<OodSceneResult> = scenes
        .par_iter()
        .map(|s| {
            let q = PlanQuery {
                id: &s.id,
                context: &s.context,
                resolution: s.resolution(),
                n_waypoints,
                reference: None,
            };
            let text = planner.respond(&q);
            match parse_response(&text, n_waypoints) {
                Ok(p) => {
                    let (boxes_hit, penetration) = collision_counts(&p.trajectory, &s.boxes);
                    OodSceneResult {
                        id: s.id.clone(),
                        boxes_hit,
                        penetration,
                        decode_failed: false,
                    }
                }
                Err(_) => OodSceneResult {
                    id: s.id.clone(),
                    boxes_hit: 0,
                    penetration: 0.0,
                    decode_failed: true,
                },
            }
        })
        .collect();
    let n = scenes.len() as f64;
    let (mut fails, mut boxes, mut pen) = (0usize, 0usize, 0.0);
    for r in &per_scene {
        if r.decode_failed || r.boxes_hit > 0 {
            fails += 1;
        }
        boxes += r.boxes_hit;
        pen += r.penetration;
    }
    Ok(OodEval {
        metrics: SafetyMetrics {
            fail_rate: fails as f64 / n,
            collision_count: boxes as f64 / n,
            penetration_length: pen / n,
        },
        scenes: scenes.len(),
        decode_failures: per_scene.iter().filter(|r| r.decode_failed).count(),
        per_scene,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub name: String,
    pub w_f: f64,
    pub w_c: f64,
    pub w_p: f64,
}

impl WeightScheme {
    pub fn new(name: &str, w_f: f64, w_c: f64, w_p: f64) -> Self {
        Self {
            name: name.to_string(),
            w_f,
            w_c,
            w_p,
        }
    }

    pub fn balanced() -> Self {
        Self::new("Balanced", 0.4, 0.3, 0.3)
    }

    pub fn safety_focused() -> Self {
        Self::new("Safety-Focused", 0.3, 0.2, 0.5)
    }

    pub fn performance_focused() -> Self {
        Self::new("Performance-Focused", 0.5, 0.3, 0.2)
    }

    pub fn equal() -> Self {
        Self::new("Equal", 0.33, 0.33, 0.34)
    }

    pub fn presets() -> Vec<Self> {
        vec![Self::balanced(), Self::safety_focused(), Self::performance_focused(), Self::equal()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyScoreRow {
    pub model: String,
    /// One score per scheme, in scheme order.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyScoreTable {
    pub schemes: Vec<String>,
    pub rows: Vec<SafetyScoreRow>,
}

/// Min-max normalize each metric across models and score
/// `Σ_j w_j (1 - norm_j)`. A metric on which all models tie contributes its
/// full weight.
pub fn safety_scores(models: &[(String, SafetyMetrics)], schemes: &[WeightScheme]) -> Result<SafetyScoreTable, EvalError> {
    if models.len() < 2 {
        return Err(EvalError::TooFewModels(models.len()));
    }
    if let Some(s) = schemes.iter().find(|s| s.w_f < 0.0 || s.w_c < 0.0 || s.w_p < 0.0) {
        return Err(EvalError::NegativeWeight(s.name.clone()));
    }
    let columns: [fn(&SafetyMetrics) -> f64; 3] = [|m| m.fail_rate, |m| m.collision_count, |m| m.penetration_length];
    let norm: Vec<[f64; 3]> = {
        let mut out = vec![[0.0; 3]; models.len()];
        for (j, col) in columns.iter().enumerate() {
            let vals: Vec<f64> = models.iter().map(|(_, m)| col(m)).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for (i, v) in vals.iter().enumerate() {
                out[i][j] = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            }
        }
        out
    };
    let rows = models
        .iter()
        .zip(&norm)
        .map(|((name, _), n)| SafetyScoreRow {
            model: name.clone(),
            scores: schemes
                .iter()
                .map(|s| s.w_f * (1.0 - n[0]) + s.w_c * (1.0 - n[1]) + s.w_p * (1.0 - n[2]))
                .collect(),
        })
        .collect();
    Ok(SafetyScoreTable {
        schemes: schemes.iter().map(|s| s.name.clone()).collect(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Easy/hard ADE and FDE percentages for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningRow {
    pub label: String,
    pub easy_ade: Option<f64>,
    pub easy_fde: Option<f64>,
    pub hard_ade: Option<f64>,
    pub hard_fde: Option<f64>,
}

impl PlanningRow {
    pub fn from_eval(label: &str, eval: &PlanningEval) -> Self {
        let get = |tag: &str, f: fn(&SubsetMetrics) -> Option<f64>| eval.subset(tag).and_then(f);
        Self {
            label: label.to_string(),
            easy_ade: get("val_easy", |m| m.ade_pct),
            easy_fde: get("val_easy", |m| m.fde_pct),
            hard_ade: get("val_hard", |m| m.ade_pct),
            hard_fde: get("val_hard", |m| m.fde_pct),
        }
    }

    fn values(&self) -> [Option<f64>; 4] {
        [self.easy_ade, self.easy_fde, self.hard_ade, self.hard_fde]
    }
}

/// Relative change in percent, `100 (new - base) / base`.
pub fn relative_change_pct(base: f64, new: f64) -> Option<f64> {
    (base != 0.0 && base.is_finite() && new.is_finite()).then(|| 100.0 * (new - base) / base)
}

/// Signed percentage with one decimal, e.g. `-12.1%`.
pub fn format_delta(pct: f64) -> String {
    format!("{pct:+.1}%")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub label: String,
    /// Per column, in PlanningRow order.
    pub pct: [Option<f64>; 4],
}

impl DeltaRow {
    pub fn between(base: &PlanningRow, new: &PlanningRow) -> Self {
        let (b, n) = (base.values(), new.values());
        let mut pct = [None; 4];
        for i in 0..4 {
            pct[i] = match (b[i], n[i]) {
                (Some(x), Some(y)) => relative_change_pct(x, y),
                _ => None,
            };
        }
        Self {
            label: format!("Δ {} vs {}", new.label, base.label),
            pct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanningTable {
    pub title: String,
    pub rows: Vec<PlanningRow>,
    pub deltas: Vec<DeltaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodModelRow {
    pub model: String,
    pub metrics: SafetyMetrics,
    pub decode_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct OodSection {
    pub rows: Vec<OodModelRow>,
    pub scores: Option<SafetyScoreTable>,
}

/// Everything a report shows; markdown and JSON are both rendered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Report {
    pub planning: Vec<PlanningTable>,
    pub ood: OodSection,
    /// Inputs that were missing when the report was built.
    pub gaps: Vec<String>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Results\n");
        for t in &self.planning {
            let _ = writeln!(md, "\n## {}\n", t.title);
            md.push_str("| Model | Easy ADE (%) | Easy FDE (%) | Hard ADE (%) | Hard FDE (%) |\n");
            md.push_str("|---|---|---|---|---|\n");
            for r in &t.rows {
                let v = r.values();
                let _ = writeln!(md, "| {} | {} | {} | {} | {} |", r.label, cell(v[0]), cell(v[1]), cell(v[2]), cell(v[3]));
            }
            for d in &t.deltas {
                let c: Vec<String> = d.pct.iter().map(|p| p.map_or_else(|| "n/a".into(), format_delta)).collect();
                let _ = writeln!(md, "| {} | {} | {} | {} | {} |", d.label, c[0], c[1], c[2], c[3]);
            }
        }
        md.push_str("\n## Out-of-distribution safety\n\n");
        if self.ood.rows.is_empty() {
            md.push_str("No OOD scenes evaluated.\n");
        } else {
            md.push_str("| Model | Fail rate | Collisions / scene | Penetration (px) / scene | Decode failures |\n");
            md.push_str("|---|---|---|---|---|\n");
            for r in &self.ood.rows {
                let m = &r.metrics;
                let _ = writeln!(
                    md,
                    "| {} | {:.4} | {:.4} | {:.2} | {} |",
                    r.model, m.fail_rate, m.collision_count, m.penetration_length, r.decode_failures
                );
            }
            if let Some(s) = &self.ood.scores {
                let _ = writeln!(md, "\n| Model | {} |", s.schemes.join(" | "));
                let _ = writeln!(md, "|---|{}", "---|".repeat(s.schemes.len()));
                for r in &s.rows {
                    let v: Vec<String> = r.scores.iter().map(|x| format!("{x:.4}")).collect();
                    let _ = writeln!(md, "| {} | {} |", r.model, v.join(" | "));
                }
            }
        }
        if !self.gaps.is_empty() {
            md.push_str("\n## Missing inputs\n\n");
            for g in &self.gaps {
                let _ = writeln!(md, "- {g}");
            }
        }
        md
    }
}
