//! Supervised fine-tuning and GRPO reinforcement fine-tuning.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::Sample;
use crate::error::{PolicyError, TrainError};
use crate::policy::{PolicyParams, SamplingConfig, SceneContext};
use crate::rewards::{total_reward, RewardBreakdown, RewardConfig};

/// Number of chunks a batch is split into for gradient accumulation. Fixed
/// so the summation order does not depend on the thread count.
const REDUCE_CHUNKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Train on the think block text; when false the think block is empty.
    pub include_reasoning: bool,
    /// Rescale the gradient when its global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-5,
            weight_decay: 0.1,
            epochs: 1,
            include_reasoning: true,
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("sft batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("sft learning_rate must be finite and >= 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config("sft weight_decay must be finite and >= 0".into()));
        }
        check_clip(self.max_grad_norm)
    }
}

fn check_clip(max_grad_norm: Option<f64>) -> Result<(), TrainError> {
    match max_grad_norm {
        Some(v) if !(v > 0.0 && v.is_finite()) => Err(TrainError::Config("max_grad_norm must be positive".into())),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// `exp(lr - lθ) - (lr - lθ) - 1` on the realized tokens.
    #[default]
    Estimator,
    /// Full-vocabulary KL(πθ ‖ π_ref) at every step.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OldPolicyRefresh {
    /// Snapshot π_old once per outer batch; one pass over its mini-batches.
    #[default]
    PerBatch,
    /// Fresh rollouts before every optimizer step (ratios stay at 1).
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RftConfig {
    pub group_size: usize,
    pub kl_coeff: f64,
    pub clip_eps: f64,
    /// Prompts per outer batch.
    pub batch_size: usize,
    /// Prompts per optimizer step.
    pub mini_batch: usize,
    pub learning_rate: f64,
    pub std_floor: f64,
    pub refresh: OldPolicyRefresh,
    pub kl_mode: KlMode,
    pub max_grad_norm: Option<f64>,
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            group_size: 4,
            kl_coeff: 0.04,
            clip_eps: 0.2,
            batch_size: 128,
            mini_batch: 4,
            learning_rate: 5e-6,
            std_floor: 1e-8,
            refresh: OldPolicyRefresh::PerBatch,
            kl_mode: KlMode::Estimator,
            max_grad_norm: None,
            epochs: 1,
            max_steps: None,
            seed: 0,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.group_size < 2 {
            return Err(TrainError::Config(format!(
                "group_size must be >= 2 for group-relative advantages, got {}",
                self.group_size
            )));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(TrainError::Config("kl_coeff must be finite and >= 0".into()));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(TrainError::Config(format!("clip_eps must be in (0, 1), got {}", self.clip_eps)));
        }
        if self.batch_size == 0 || self.mini_batch == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size, mini_batch and epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.std_floor > 0.0) {
            return Err(TrainError::Config("std_floor must be positive".into()));
        }
        check_clip(self.max_grad_norm)
    }
}

/// Split `items` into a fixed number of contiguous chunks, accumulate one
/// gradient per chunk in parallel and sum them in chunk order.
fn reduce_grads<T, F>(params: &PolicyParams, items: &[T], f: F) -> Result<PolicyParams, TrainError>
where
    T: Sync,
    F: Fn(&T, &mut PolicyParams) -> Result<(), TrainError> + Sync,
{
    let chunk = items.len().div_ceil(REDUCE_CHUNKS).max(1);
    let parts: Vec<PolicyParams> = items
        .par_chunks(chunk)
        .map(|c| {
            let mut g = params.zeros_like();
            for item in c {
                f(item, &mut g)?;
            }
            Ok(g)
        })
        .collect::<Result<_, TrainError>>()?;
    let mut total = params.zeros_like();
    for p in &parts {
        total.axpy(1.0, p);
    }
    Ok(total)
}

fn clip_grad(grad: &mut PolicyParams, max_norm: Option<f64>) -> f64 {
    let norm = grad.norm();
    if let Some(m) = max_norm {
        if norm > m {
            grad.scale(m / norm);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStepStats {
    /// Mean per-token negative log-likelihood before the update.
    pub loss: f64,
    pub tokens: usize,
    pub samples: usize,
    /// Ids of samples that could not be tokenized.
    pub skipped: Vec<String>,
    pub grad_norm: f64,
}

/// Mean per-token NLL of `batch` and its gradient.
pub fn sft_loss_and_grad(
    params: &PolicyParams,
    batch: &[Sample],
    include_reasoning: bool,
) -> Result<(f64, PolicyParams, SftStepStats), TrainError> {
    let vocab = params.vocab();
    let mut skipped = Vec::new();
    let mut encoded = Vec::new();
    for s in batch {
        match vocab.encode_response(&s.reasoning, &s.trajectory, s.resolution(), include_reasoning) {
            Ok(t) => encoded.push((&s.context, t)),
            Err(_) => skipped.push(s.id.clone()),
        }
    }
    if encoded.is_empty() {
        return Err(TrainError::EmptyBatch { skipped: skipped.len() });
    }
    let n_tokens: usize = encoded.iter().map(|(_, t)| t.len()).sum();
    let nll: f64 = encoded
        .par_iter()
        .map(|(ctx, t)| params.sequence_logprobs(ctx, t).map(|lp| -lp.iter().sum::<f64>()))
        .collect::<Result<Vec<f64>, PolicyError>>()?
        .into_iter()
        .sum();
    let loss = nll / n_tokens as f64;
    let w = -1.0 / n_tokens as f64;
    let grad = reduce_grads(params, &encoded, |(ctx, t), g| {
        let weights = vec![w; t.len()];
        Ok(params.accumulate_weighted_logprob_grad(ctx, t, &weights, g)?)
    })?;
    let stats = SftStepStats {
        loss,
        tokens: n_tokens,
        samples: encoded.len(),
        skipped,
        grad_norm: grad.norm(),
    };
    Ok((loss, grad, stats))
}

/// One gradient-descent step on the mean per-token NLL with weight decay:
/// `θ ← θ - lr (∇L + wd θ)`.
pub fn sft_step(params: &mut PolicyParams, batch: &[Sample], cfg: &SftConfig) -> Result<SftStepStats, TrainError> {
    cfg.validate()?;
    let (loss, mut grad, mut stats) = sft_loss_and_grad(params, batch, cfg.include_reasoning)?;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(TrainError::NonFinite {
            step: 0,
            dump: format!("sft batch {:?}", batch.iter().map(|s| &s.id).collect::<Vec<_>>()),
        });
    }
    stats.grad_norm = clip_grad(&mut grad, cfg.max_grad_norm);
    if cfg.learning_rate != 0.0 {
        grad.axpy(cfg.weight_decay, params);
        params.axpy(-cfg.learning_rate, &grad);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub tokens: usize,
    pub skipped: usize,
}

/// Shuffled mini-batch SFT. Writes one JSONL record per step to `log`.
pub fn train_sft(
    params: &mut PolicyParams,
    dataset: &[Sample],
    cfg: &SftConfig,
    log: &mut dyn Write,
) -> Result<Vec<SftLogRecord>, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut records = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let stats = match sft_step(params, &batch, cfg) {
                Err(TrainError::EmptyBatch { .. }) => continue,
                Err(TrainError::NonFinite { dump, .. }) => {
                    return Err(TrainError::NonFinite { step: records.len(), dump })
                }
                other => other?,
            };
            let rec = SftLogRecord {
                step: records.len(),
                epoch,
                loss: stats.loss,
                tokens: stats.tokens,
                skipped: stats.skipped.len(),
            };
            write_jsonl(log, &rec)?;
            records.push(rec);
        }
    }
    Ok(records)
}

fn write_jsonl<T: Serialize>(log: &mut dyn Write, rec: &T) -> Result<(), TrainError> {
    let line = serde_json::to_string(rec).map_err(|e| TrainError::Config(e.to_string()))?;
    writeln!(log, "{line}").map_err(|e| TrainError::Policy(PolicyError::Io(e)))
}

/// Standardize rewards within a group with the population std. Groups whose
/// std is below `std_floor` get all-zero advantages.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if !(std >= std_floor) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// Non-negative KL estimate on a realized token.
pub fn kl_per_token(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub tokens: Vec<usize>,
    /// Log-probabilities of `tokens` under π_old.
    pub old_logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

/// G responses to one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    pub sample_id: String,
    pub context: SceneContext,
    pub responses: Vec<Rollout>,
}

impl GroupRollout {
    /// Recompute the advantages from the stored rewards.
    pub fn assign_advantages(&mut self, std_floor: f64) {
        let rewards: Vec<f64> = self.responses.iter().map(|r| r.reward.r_total).collect();
        for (r, a) in self.responses.iter_mut().zip(group_advantages(&rewards, std_floor)) {
            r.advantage = a;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoOutput {
    pub objective: f64,
    /// Gradient of the objective (ascent direction).
    pub gradient: PolicyParams,
    /// Token-mean KL to the reference.
    pub mean_kl: f64,
    /// Share of tokens where the clipped branch of the min is active.
    pub clip_fraction: f64,
    pub tokens: usize,
}

struct GroupTerms {
    objective: f64,
    kl_sum: f64,
    clipped: usize,
    tokens: usize,
}

fn group_terms(
    group: &GroupRollout,
    theta: &PolicyParams,
    reference: &PolicyParams,
    cfg: &RftConfig,
    scale: f64,
    grad: &mut PolicyParams,
) -> Result<GroupTerms, TrainError> {
    let g = group.responses.len() as f64;
    let mut out = GroupTerms {
        objective: 0.0,
        kl_sum: 0.0,
        clipped: 0,
        tokens: 0,
    };
    for resp in &group.responses {
        let len = resp.tokens.len();
        if len == 0 {
            continue;
        }
        let w = scale / (g * len as f64);
        let lp_theta = theta.step_logprobs(&group.context, &resp.tokens)?;
        let lp_ref = reference.step_logprobs(&group.context, &resp.tokens)?;
        let a = resp.advantage;
        let mut coeff = vec![0.0; len];
        let mut kl_steps = vec![0.0; len];
        for t in 0..len {
            let tok = resp.tokens[t];
            let (lt, lr) = (lp_theta[t][tok], lp_ref[t][tok]);
            let ratio = (lt - resp.old_logprobs[t]).exp();
            let unclipped = ratio * a;
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a;
            let surrogate = unclipped.min(clipped);
            let use_unclipped = unclipped <= clipped;
            if !use_unclipped {
                out.clipped += 1;
            }
            let kl = match cfg.kl_mode {
                KlMode::Estimator => kl_per_token(lt, lr),
                KlMode::Exact => exact_kl(&lp_theta[t], &lp_ref[t]),
            };
            kl_steps[t] = kl;
            out.objective += w * (surrogate - cfg.kl_coeff * kl);
            out.kl_sum += kl;
            let mut c = if use_unclipped { unclipped } else { 0.0 };
            if cfg.kl_mode == KlMode::Estimator {
                c -= cfg.kl_coeff * (1.0 - (lr - lt).exp());
            }
            coeff[t] = w * c;
        }
        out.tokens += len;
        let tokens = &resp.tokens;
        let kl_w = w * cfg.kl_coeff;
        let exact = cfg.kl_mode == KlMode::Exact;
        theta.backward(&group.context, tokens, grad, |t, logp, dl| {
            let c = coeff[t];
            if c != 0.0 {
                for (d, lp) in dl.iter_mut().zip(logp) {
                    *d = -c * lp.exp();
                }
                dl[tokens[t]] += c;
            }
            if exact && kl_w != 0.0 {
                // d KL / d logits = p ⊙ (log p − log q − KL)
                for ((d, lp), lq) in dl.iter_mut().zip(logp).zip(&lp_ref[t]) {
                    *d -= kl_w * lp.exp() * (lp - lq - kl_steps[t]);
                }
            }
        })?;
    }
    Ok(out)
}

/// `Σ_v p_v (log p_v − log q_v)`
fn exact_kl(logp: &[f64], logq: &[f64]) -> f64 {
    logp.iter()
        .zip(logq)
        .map(|(lp, lq)| {
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (lp - lq)
            }
        })
        .sum()
}

fn check_group(group: &GroupRollout, offset: usize) -> Result<(), TrainError> {
    for (i, r) in group.responses.iter().enumerate() {
        if r.old_logprobs.len() != r.tokens.len() {
            return Err(TrainError::LengthMismatch {
                rollout: offset + i,
                logprobs: r.old_logprobs.len(),
                tokens: r.tokens.len(),
            });
        }
    }
    Ok(())
}

/// Clipped-surrogate objective with KL penalty, averaged over groups, and
/// its gradient. Old-policy log-probabilities come from the rollouts.
pub fn grpo_loss(
    groups: &[GroupRollout],
    theta: &PolicyParams,
    reference: &PolicyParams,
    cfg: &RftConfig,
) -> Result<GrpoOutput, TrainError> {
    if groups.is_empty() {
        return Err(TrainError::EmptyBatch { skipped: 0 });
    }
    let mut offset = 0;
    for g in groups {
        check_group(g, offset)?;
        offset += g.responses.len();
    }
    let scale = 1.0 / groups.len() as f64;
    let chunk = groups.len().div_ceil(REDUCE_CHUNKS).max(1);
    let parts = groups
        .par_chunks(chunk)
        .map(|c| {
            let mut grad = theta.zeros_like();
            let mut terms = Vec::with_capacity(c.len());
            for g in c {
                terms.push(group_terms(g, theta, reference, cfg, scale, &mut grad)?);
            }
            Ok((grad, terms))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;

    let mut gradient = theta.zeros_like();
    let (mut objective, mut kl_sum, mut clipped, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    let mut group_idx = 0;
    for (grad, terms) in &parts {
        gradient.axpy(1.0, grad);
        for t in terms {
            if !t.objective.is_finite() {
                return Err(TrainError::NonFinite {
                    step: 0,
                    dump: serde_json::to_string(&groups[group_idx]).unwrap_or_default(),
                });
            }
            objective += t.objective;
            kl_sum += t.kl_sum;
            clipped += t.clipped;
            tokens += t.tokens;
            group_idx += 1;
        }
    }
    let denom = tokens.max(1) as f64;
    Ok(GrpoOutput {
        objective,
        gradient,
        mean_kl: kl_sum / denom,
        clip_fraction: clipped as f64 / denom,
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftLogRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    /// Mean over parseable rollouts; `None` when none parsed.
    pub ade: Option<f64>,
    pub fde: Option<f64>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent RNG stream for one rollout.
pub fn rollout_seed(master: u64, batch: u64, prompt: u64, member: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(splitmix64(master) ^ batch) ^ prompt) ^ member)
}

/// Total reward of a rendered response against a sample's ground truth.
pub fn verifiable_reward(cfg: RewardConfig) -> impl Fn(&str, &Sample) -> RewardBreakdown + Sync {
    move |text, sample| total_reward(text, &sample.trajectory, sample.resolution(), &cfg)
}

/// Sample G responses per prompt under `policy` and score them.
pub fn collect_groups<F>(
    policy: &PolicyParams,
    prompts: &[&Sample],
    sampling: &SamplingConfig,
    group_size: usize,
    batch_index: u64,
    std_floor: f64,
    reward_fn: &F,
) -> Result<Vec<GroupRollout>, TrainError>
where
    F: Fn(&str, &Sample) -> RewardBreakdown + Sync,
{
    prompts
        .par_iter()
        .enumerate()
        .map(|(p, sample)| {
            let mut responses = Vec::with_capacity(group_size);
            for m in 0..group_size {
                let seed = rollout_seed(sampling.seed, batch_index, p as u64, m as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let seq = policy.sample_sequence(&sample.context, sampling, &mut rng)?;
                let text = policy.vocab().render(&seq.tokens, sample.resolution());
                responses.push(Rollout {
                    tokens: seq.tokens,
                    old_logprobs: seq.logprobs,
                    reward: reward_fn(&text, sample),
                    advantage: 0.0,
                });
            }
            let mut group = GroupRollout {
                sample_id: sample.id.clone(),
                context: sample.context.clone(),
                responses,
            };
            group.assign_advantages(std_floor);
            Ok(group)
        })
        .collect()
}

fn step_record(step: usize, groups: &[GroupRollout], out: &GrpoOutput) -> RftLogRecord {
    let rewards: Vec<&RewardBreakdown> = groups.iter().flat_map(|g| g.responses.iter().map(|r| &r.reward)).collect();
    let mean_reward = rewards.iter().map(|r| r.r_total).sum::<f64>() / rewards.len().max(1) as f64;
    let mean_of = |f: fn(&RewardBreakdown) -> Option<f64>| {
        let vals: Vec<f64> = rewards.iter().filter_map(|r| f(r)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    RftLogRecord {
        step,
        mean_reward,
        mean_kl: out.mean_kl,
        clip_fraction: out.clip_fraction,
        ade: mean_of(|r| r.ade),
        fde: mean_of(|r| r.fde),
    }
}

/// GRPO loop starting from `params_sft`, which is also the frozen reference.
/// One JSONL record per optimizer step goes to `log`.
pub fn train_rft<F>(
    params_sft: &PolicyParams,
    dataset: &[Sample],
    cfg: &RftConfig,
    sampling: &SamplingConfig,
    reward_fn: &F,
    log: &mut dyn Write,
) -> Result<(PolicyParams, Vec<RftLogRecord>), TrainError>
where
    F: Fn(&str, &Sample) -> RewardBreakdown + Sync,
{
    cfg.validate()?;
    sampling.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyBatch { skipped: 0 });
    }
    let reference = params_sft.clone();
    let mut theta = params_sft.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let outer = match cfg.refresh {
        OldPolicyRefresh::PerBatch => cfg.batch_size,
        OldPolicyRefresh::PerStep => cfg.mini_batch,
    };
    let mut records = Vec::new();
    let mut batch_index = 0u64;
    let sampling = SamplingConfig {
        seed: sampling.seed ^ cfg.seed,
        ..*sampling
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(outer) {
            let prompts: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let old = theta.clone();
            let groups = collect_groups(&old, &prompts, &sampling, cfg.group_size, batch_index, cfg.std_floor, reward_fn)?;
            batch_index += 1;
            for mini in groups.chunks(cfg.mini_batch) {
                if cfg.max_steps.is_some_and(|m| records.len() >= m) {
                    return Ok((theta, records));
                }
                let step = records.len();
                let mut out = grpo_loss(mini, &theta, &reference, cfg).map_err(|e| match e {
                    TrainError::NonFinite { dump, .. } => TrainError::NonFinite { step, dump },
                    other => other,
                })?;
                if !out.gradient.is_finite() {
                    return Err(TrainError::NonFinite {
                        step,
                        dump: serde_json::to_string(mini).unwrap_or_default(),
                    });
                }
                clip_grad(&mut out.gradient, cfg.max_grad_norm);
                theta.axpy(cfg.learning_rate, &out.gradient);
                let rec = step_record(step, mini, &out);
                write_jsonl(log, &rec)?;
                records.push(rec);
            }
        }
    }
    Ok((theta, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyShape, TokenVocab};

    fn tiny_policy(seed: u64) -> PolicyParams {
        let vocab = TokenVocab::new(3, 2, vec!["a".into(), "b".into()]).unwrap();
        PolicyParams::init(PolicyShape::new(3, 5, vocab).unwrap(), seed)
    }

    fn perturb(p: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q = p.clone();
        for v in q.as_mut_slice() {
            *v += rng.gen_range(-scale..scale);
        }
        q
    }

    fn reward(r: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_planning: r,
            r_format: 0.0,
            r_total: r,
            ade: None,
            fde: None,
            failure: None,
        }
    }

    #[test]
    fn advantages() {
        let a = group_advantages(&[0.0, 1.0, 2.0, 3.0], 1e-8);
        let s = 1.25f64.sqrt();
        for (x, e) in a.iter().zip([-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s]) {
            assert!((x - e).abs() < 1e-12);
        }
        assert_eq!(group_advantages(&[2.0; 4], 1e-8), vec![0.0; 4]);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_per_token(-1.3, -1.3), 0.0);
        let v = kl_per_token(-2.0, -2.0 + 2f64.ln());
        assert!((v - (1.0 - 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = RftConfig { group_size: 1, ..Default::default() };
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        assert!(RftConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
        assert!(RftConfig { kl_coeff: -0.1, ..Default::default() }.validate().is_err());
        assert!(RftConfig::default().validate().is_ok());
    }

    fn toy_groups(p: &PolicyParams) -> Vec<GroupRollout> {
        let ctxs = [SceneContext(vec![0.3, -0.2, 0.5]), SceneContext(vec![-0.4, 0.1, 0.9])];
        let seqs = [[[0usize, 4, 9], [2, 3, 12]], [[9, 10, 1], [5, 5, 6]]];
        ctxs.iter()
            .zip(seqs)
            .enumerate()
            .map(|(gi, (ctx, pair))| {
                let old = perturb(p, 100 + gi as u64, 0.05);
                let responses = pair
                    .iter()
                    .enumerate()
                    .map(|(i, toks)| Rollout {
                        tokens: toks.to_vec(),
                        old_logprobs: old.sequence_logprobs(ctx, toks).unwrap(),
                        reward: reward(i as f64 + gi as f64),
                        advantage: 0.0,
                    })
                    .collect();
                let mut g = GroupRollout {
                    sample_id: format!("g{gi}"),
                    context: ctx.clone(),
                    responses,
                };
                g.assign_advantages(1e-8);
                g
            })
            .collect()
    }

    fn fd_check(mode: KlMode, eps: f64) {
        let reference = tiny_policy(1);
        let theta = perturb(&reference, 7, 0.3);
        let groups = toy_groups(&theta);
        let cfg = RftConfig { kl_mode: mode, clip_eps: eps, kl_coeff: 0.3, ..Default::default() };
        let out = grpo_loss(&groups, &theta, &reference, &cfg).unwrap();
        let h = 1e-5;
        for i in (0..theta.len()).step_by(7) {
            let mut plus = theta.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = theta.clone();
            minus.as_mut_slice()[i] -= h;
            let jp = grpo_loss(&groups, &plus, &reference, &cfg).unwrap().objective;
            let jm = grpo_loss(&groups, &minus, &reference, &cfg).unwrap().objective;
            let num = (jp - jm) / (2.0 * h);
            let ana = out.gradient.as_slice()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
            assert!(rel < 1e-4, "{mode:?} coord {i}: analytic {ana} numeric {num}");
        }
    }

    #[test]
    fn grpo_gradient_matches_finite_differences() {
        fd_check(KlMode::Estimator, 0.2);
        fd_check(KlMode::Exact, 0.2);
    }

    #[test]
    fn identical_policies_give_zero_objective() {
        let p = tiny_policy(3);
        let ctx = SceneContext(vec![0.1, 0.2, 0.3]);
        let groups: Vec<GroupRollout> = (0..2)
            .map(|g| {
                let mut gr = GroupRollout {
                    sample_id: String::new(),
                    context: ctx.clone(),
                    responses: [[0usize, 1, 2], [3, 4, 5], [6, 7, 8]]
                        .iter()
                        .enumerate()
                        .map(|(i, t)| Rollout {
                            tokens: t.to_vec(),
                            old_logprobs: p.sequence_logprobs(&ctx, t).unwrap(),
                            reward: reward((i * (g + 1)) as f64),
                            advantage: 0.0,
                        })
                        .collect(),
                };
                gr.assign_advantages(1e-8);
                gr
            })
            .collect();
        let out = grpo_loss(&groups, &p, &p, &RftConfig::default()).unwrap();
        assert!(out.objective.abs() < 1e-12);
        assert_eq!(out.mean_kl, 0.0);
        assert_eq!(out.clip_fraction, 0.0);
    }

    #[test]
    fn zero_signal_zero_gradient() {
        let p = tiny_policy(4);
        let theta = perturb(&p, 9, 0.2);
        let mut groups = toy_groups(&theta);
        for g in &mut groups {
            for r in &mut g.responses {
                r.advantage = 0.0;
            }
        }
        let cfg = RftConfig { kl_coeff: 0.0, ..Default::default() };
        let out = grpo_loss(&groups, &theta, &p, &cfg).unwrap();
        assert_eq!(out.gradient.norm(), 0.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        let p = tiny_policy(5);
        let mut groups = toy_groups(&p);
        groups[1].responses[0].old_logprobs.pop();
        assert!(matches!(
            grpo_loss(&groups, &p, &p, &RftConfig::default()),
            Err(TrainError::LengthMismatch { rollout: 2, logprobs: 2, tokens: 3 })
        ));
    }
}
