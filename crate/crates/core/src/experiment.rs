//! Experiment configuration and the generate → split → sft → rft → eval
//! pipeline, both in memory and as file-backed stages.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datakit::{
    build_validation_sets, generate_synthetic, load_ood_scenes, load_samples, save_instruction_json, save_ood_scenes,
    save_samples, split_sft_rft, tag_counts, OodScene, Ratio, Sample, SplitCounts, SplitPlan, SyntheticConfig,
    ValidationPlan,
};
use crate::error::ExperimentError;
use crate::evaluator::{
    eval_ood, eval_planning, safety_scores, Decoding, DeltaRow, OodEval, OodModelRow, PlanningEval,
    PlanningRow, PlanningTable, PolicyPlanner, Report, WeightScheme,
};
use crate::policy::{PolicyParams, PolicyShape, SamplingConfig, TokenVocab};
use crate::rewards::RewardConfig;
use crate::trainer::{train_rft, train_sft, verifiable_reward, RftConfig, RftLogRecord, SftConfig, SftLogRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    /// Waypoint cells per image axis.
    pub grid_size: usize,
    pub hidden: usize,
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self { grid_size: 16, hidden: 48 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub max_len: usize,
    pub decoding: Decoding,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            max_len: 64,
            decoding: Decoding::Greedy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub data: SyntheticConfig,
    pub split: SplitPlan,
    pub validation: ValidationPlan,
    pub policy: PolicySpec,
    pub sft: SftConfig,
    pub rft: RftConfig,
    pub sampling: SamplingConfig,
    pub reward: RewardConfig,
    pub eval: EvalOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workdir: PathBuf::from("planlab-run"),
            data: SyntheticConfig::default(),
            split: SplitPlan::default(),
            validation: ValidationPlan::default(),
            policy: PolicySpec::default(),
            sft: SftConfig {
                learning_rate: 1.0,
                weight_decay: 1e-4,
                batch_size: 32,
                epochs: 8,
                max_grad_norm: Some(5.0),
                ..SftConfig::default()
            },
            rft: RftConfig {
                learning_rate: 0.1,
                batch_size: 64,
                mini_batch: 8,
                max_grad_norm: Some(5.0),
                epochs: 4,
                ..RftConfig::default()
            },
            sampling: SamplingConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn mix(master: u64, sub: u64, salt: u64) -> u64 {
    let mut z = master ^ salt.rotate_left(17) ^ sub.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Parse a possibly partial config. Fields it leaves out keep the values
    /// of [`ExperimentConfig::default`], at any nesting depth.
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let user: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(format!("invalid JSON: {e}")))?;
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge_json(&mut merged, user);
        serde_path_to_error::deserialize(merged).map_err(|e| ExperimentError::Config(format!("{}: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reasoning on: think text is trained and an empty think block fails the
    /// format check. Off: both disabled.
    pub fn with_reasoning(mut self, on: bool) -> Self {
        self.sft.include_reasoning = on;
        self.reward.require_reasoning = on;
        self
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.sft.validate()?;
        self.rft.validate()?;
        self.sampling.validate()?;
        if self.policy.grid_size < 2 || self.policy.hidden == 0 {
            return Err(ExperimentError::Config("policy.grid_size must be >= 2 and hidden > 0".into()));
        }
        if self.data.n_waypoints == 0 || self.data.context_dim == 0 {
            return Err(ExperimentError::Config("data.n_waypoints and data.context_dim must be positive".into()));
        }
        if self.eval.max_len < self.data.n_waypoints + 5 {
            return Err(ExperimentError::Config("eval.max_len is too short for a full response".into()));
        }
        Ok(())
    }

    fn sft_seeded(&self) -> SftConfig {
        SftConfig { seed: mix(self.seed, self.sft.seed, 1), ..self.sft }
    }

    fn rft_seeded(&self) -> RftConfig {
        RftConfig { seed: mix(self.seed, self.rft.seed, 2), ..self.rft }
    }

    fn sampling_seeded(&self) -> SamplingConfig {
        SamplingConfig { seed: mix(self.seed, self.sampling.seed, 3), ..self.sampling }
    }

    fn split_seeded(&self) -> SplitPlan {
        SplitPlan { seed: mix(self.seed, self.split.seed, 4), ..self.split }
    }

    fn validation_seeded(&self) -> ValidationPlan {
        ValidationPlan { seed: mix(self.seed, self.validation.seed, 5), ..self.validation }
    }

    fn data_seed(&self) -> u64 {
        mix(self.seed, 0, 6)
    }

    fn init_seed(&self) -> u64 {
        mix(self.seed, 0, 7)
    }
}

/// Split and validation sets, ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub tagged: Vec<Sample>,
    pub counts: SplitCounts,
    pub val_easy: Vec<Sample>,
    pub val_hard: Vec<Sample>,
    pub ood: Vec<OodScene>,
}

impl Corpus {
    pub fn sft(&self) -> Vec<Sample> {
        self.tagged.iter().filter(|s| s.tag.is_sft()).cloned().collect()
    }

    pub fn rft(&self) -> Vec<Sample> {
        self.tagged.iter().filter(|s| s.tag.is_rft()).cloned().collect()
    }

    pub fn validation(&self) -> Vec<Sample> {
        self.val_easy.iter().chain(&self.val_hard).cloned().collect()
    }
}

pub fn build_corpus(cfg: &ExperimentConfig) -> Result<Corpus, ExperimentError> {
    let data = generate_synthetic(&cfg.data, cfg.data_seed());
    corpus_from(cfg, data.train, &data.val_dense, &data.val_standard, data.ood)
}

fn corpus_from(
    cfg: &ExperimentConfig,
    train: Vec<Sample>,
    dense: &[Sample],
    standard: &[Sample],
    ood: Vec<OodScene>,
) -> Result<Corpus, ExperimentError> {
    let (tagged, counts) = split_sft_rft(train, &cfg.split_seeded())?;
    let (val_easy, val_hard) = build_validation_sets(dense, standard, &cfg.validation_seeded())?;
    Ok(Corpus {
        tagged,
        counts,
        val_easy,
        val_hard,
        ood,
    })
}

pub fn init_policy(cfg: &ExperimentConfig) -> Result<PolicyParams, ExperimentError> {
    let vocab = TokenVocab::with_default_lexicon(cfg.policy.grid_size, cfg.data.n_waypoints)?;
    let shape = PolicyShape::new(cfg.data.context_dim, cfg.policy.hidden, vocab)?;
    Ok(PolicyParams::init(shape, cfg.init_seed()))
}

pub fn run_sft(
    cfg: &ExperimentConfig,
    sft_data: &[Sample],
    log: &mut dyn std::io::Write,
) -> Result<(PolicyParams, Vec<SftLogRecord>), ExperimentError> {
    cfg.validate()?;
    let mut params = init_policy(cfg)?;
    let records = train_sft(&mut params, sft_data, &cfg.sft_seeded(), log)?;
    Ok((params, records))
}

pub fn run_rft(
    cfg: &ExperimentConfig,
    sft: &PolicyParams,
    rft_data: &[Sample],
    log: &mut dyn std::io::Write,
) -> Result<(PolicyParams, Vec<RftLogRecord>), ExperimentError> {
    cfg.validate()?;
    let reward = verifiable_reward(cfg.reward);
    Ok(train_rft(sft, rft_data, &cfg.rft_seeded(), &cfg.sampling_seeded(), &reward, log)?)
}

pub fn planner<'a>(cfg: &ExperimentConfig, params: &'a PolicyParams) -> PolicyPlanner<'a> {
    PolicyPlanner {
        params,
        decoding: cfg.eval.decoding,
        max_len: cfg.eval.max_len,
    }
}

pub fn evaluate_planning(cfg: &ExperimentConfig, params: &PolicyParams, corpus: &Corpus) -> PlanningEval {
    eval_planning(&planner(cfg, params), &corpus.validation())
}

pub fn evaluate_ood(cfg: &ExperimentConfig, params: &PolicyParams, scenes: &[OodScene]) -> Result<OodEval, ExperimentError> {
    Ok(eval_ood(&planner(cfg, params), scenes, cfg.data.n_waypoints)?)
}

/// In-memory SFT → RFT run with evaluation of both checkpoints.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub sft: PolicyParams,
    pub rft: PolicyParams,
    pub sft_eval: PlanningEval,
    pub rft_eval: PlanningEval,
    pub sft_log: Vec<SftLogRecord>,
    pub rft_log: Vec<RftLogRecord>,
}

pub fn run_pipeline(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<PipelineOutcome, ExperimentError> {
    let mut sink = std::io::sink();
    let (sft, sft_log) = run_sft(cfg, &corpus.sft(), &mut sink)?;
    let (rft, rft_log) = run_rft(cfg, &sft, &corpus.rft(), &mut sink)?;
    Ok(PipelineOutcome {
        sft_eval: evaluate_planning(cfg, &sft, corpus),
        rft_eval: evaluate_planning(cfg, &rft, corpus),
        sft,
        rft,
        sft_log,
        rft_log,
    })
}

// ---------------------------------------------------------------------------
// File-backed stages
// ---------------------------------------------------------------------------

/// Paths of every artifact under the working directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{label}.json"))
    }

    pub fn log(&self, label: &str) -> PathBuf {
        self.root.join("logs").join(format!("{label}.jsonl"))
    }

    pub fn planning_eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(format!("{label}.planning.json"))
    }

    pub fn ood_eval(&self, label: &str) -> PathBuf {
        self.root.join("eval").join(format!("{label}.ood.json"))
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{name}.json"))
    }
}

/// Written by every stage: what ran, with which effective config, and what
/// it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub label: Option<String>,
    pub config: ExperimentConfig,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPlanning {
    pub label: String,
    pub eval: PlanningEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOod {
    pub label: String,
    pub eval: OodEval,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<(), ExperimentError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_error(dir)),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_error(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| ExperimentError::Config(format!("{}: {}: {}", path.display(), e.path(), e.inner())))
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, ExperimentError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(ExperimentError::MissingStage { stage, path })
    }
}

fn finish(
    ws: &Workspace,
    cfg: &ExperimentConfig,
    stage: &str,
    label: Option<&str>,
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
) -> Result<Manifest, ExperimentError> {
    let manifest = Manifest {
        stage: stage.to_string(),
        label: label.map(str::to_string),
        config: cfg.clone(),
        outputs,
        summary,
    };
    let name = match label {
        Some(l) => format!("{stage}-{l}"),
        None => stage.to_string(),
    };
    write_json(&ws.manifest(&name), &manifest)?;
    Ok(manifest)
}

/// Synthetic training, validation and OOD files.
pub fn stage_generate(cfg: &ExperimentConfig) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.workdir);
    let data = generate_synthetic(&cfg.data, cfg.data_seed());
    let outputs = vec![
        ws.data("train.jsonl"),
        ws.data("val_dense.jsonl"),
        ws.data("val_standard.jsonl"),
        ws.data("ood.jsonl"),
    ];
    save_samples(&data.train, &outputs[0])?;
    save_samples(&data.val_dense, &outputs[1])?;
    save_samples(&data.val_standard, &outputs[2])?;
    save_ood_scenes(&data.ood, &outputs[3])?;
    let summary = serde_json::json!({
        "train": data.train.len(),
        "val_dense": data.val_dense.len(),
        "val_standard": data.val_standard.len(),
        "ood": data.ood.len(),
        "seed": cfg.seed,
    });
    finish(&ws, cfg, "generate", None, outputs, summary)
}

fn split_summary(tagged: &[Sample]) -> serde_json::Value {
    let counts = tag_counts(tagged);
    let sft: usize = counts.iter().filter(|(t, _)| t.is_sft()).map(|(_, n)| n).sum();
    let rft: usize = counts.iter().filter(|(t, _)| t.is_rft()).map(|(_, n)| n).sum();
    let mut per_tag = serde_json::Map::new();
    for (tag, n) in &counts {
        per_tag.insert(tag.to_string(), (*n).into());
    }
    serde_json::json!({ "sft": sft, "rft": rft, "tags": per_tag })
}

/// Tag the training pool and build the easy/hard validation sets.
pub fn stage_split(cfg: &ExperimentConfig) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.workdir);
    let n = Some(cfg.data.n_waypoints);
    let train = load_samples(&require(ws.data("train.jsonl"), "generate")?, n)?;
    let dense = load_samples(&require(ws.data("val_dense.jsonl"), "generate")?, n)?;
    let standard = load_samples(&require(ws.data("val_standard.jsonl"), "generate")?, n)?;
    let corpus = corpus_from(cfg, train, &dense, &standard, Vec::new())?;
    let outputs = vec![
        ws.data("tagged.jsonl"),
        ws.data("sft.json"),
        ws.data("rft.json"),
        ws.data("val_easy.jsonl"),
        ws.data("val_hard.jsonl"),
    ];
    save_samples(&corpus.tagged, &outputs[0])?;
    save_instruction_json(&corpus.sft(), &outputs[1])?;
    save_instruction_json(&corpus.rft(), &outputs[2])?;
    save_samples(&corpus.val_easy, &outputs[3])?;
    save_samples(&corpus.val_hard, &outputs[4])?;
    let mut summary = split_summary(&corpus.tagged);
    summary["val_easy"] = corpus.val_easy.len().into();
    summary["val_hard"] = corpus.val_hard.len().into();
    finish(&ws, cfg, "split", None, outputs, summary)
}

fn open_log(path: &Path) -> Result<BufWriter<fs::File>, ExperimentError> {
    ensure_parent(path)?;
    Ok(BufWriter::new(fs::File::create(path).map_err(io_error(path))?))
}

fn load_tagged(ws: &Workspace, cfg: &ExperimentConfig) -> Result<Vec<Sample>, ExperimentError> {
    Ok(load_samples(&require(ws.data("tagged.jsonl"), "split")?, Some(cfg.data.n_waypoints))?)
}

/// Phase 1 from a fresh policy on the SFT-tagged samples.
pub fn stage_sft(cfg: &ExperimentConfig, label: &str) -> Result<Manifest, ExperimentError> {
    let ws = Workspace::new(&cfg.workdir);
    let sft_data: Vec<Sample> = load_tagged(&ws, cfg)?.into_iter().filter(|s| s.tag.is_sft()).collect();
    let log_path = ws.log(label);
    let mut log = open_log(&log_path)?;
    let (params, records) = run_sft(cfg, &sft_data, &mut log)?;
    std::io::Write::flush(&mut log).map_err(io_error(&log_path))?;
    let ck = ws.checkpoint(label);
    ensure_parent(&ck)?;
    params.save(&ck)?;
    let summary = serde_json::json!({
        "samples": sft_data.len(),
        "steps": records.len(),
        "first_loss": records.first().map(|r| r.loss),
        "final_loss": records.last().map(|r| r.loss),
    });
    finish(&ws, cfg, "sft", Some(label), vec![ck, log_path], summary)
}

/// Phase 2 from checkpoint `from`. With `ratio`, the RFT pool is re-drawn
/// with that easy:hard (straight:turn) composition.
pub fn stage_rft(cfg: &ExperimentConfig, from: &str, label: &str, ratio: Option<Ratio>) -> Result<Manifest, ExperimentError> {
    let ws = Workspace::new(&cfg.workdir);
    let ck_in = require(ws.checkpoint(from), "sft")?;
    let sft = PolicyParams::load(&ck_in)?;
    let pool: Vec<Sample> = match ratio {
        None => load_tagged(&ws, cfg)?,
        Some(r) => {
            let train = load_samples(&require(ws.data("train.jsonl"), "generate")?, Some(cfg.data.n_waypoints))?;
            let plan = SplitPlan {
                rft_straight_turn: r,
                ..cfg.split_seeded()
            };
            split_sft_rft(train, &plan)?.0
        }
    };
    let rft_data: Vec<Sample> = pool.into_iter().filter(|s| s.tag.is_rft()).collect();
    let log_path = ws.log(label);
    let mut log = open_log(&log_path)?;
    let (params, records) = run_rft(cfg, &sft, &rft_data, &mut log)?;
    std::io::Write::flush(&mut log).map_err(io_error(&log_path))?;
    let ck = ws.checkpoint(label);
    params.save(&ck)?;
    let turn = rft_data.iter().filter(|s| s.tag == crate::datakit::SplitTag::RftTurn).count();
    let summary = serde_json::json!({
        "from": from,
        "samples": rft_data.len(),
        "turn_samples": turn,
        "ratio": ratio.map(|r| r.to_string()),
        "steps": records.len(),
        "first_reward": records.first().map(|r| r.mean_reward),
        "final_reward": records.last().map(|r| r.mean_reward),
    });
    finish(&ws, cfg, "rft", Some(label), vec![ck, log_path], summary)
}

fn load_checkpoint(ws: &Workspace, label: &str) -> Result<PolicyParams, ExperimentError> {
    let stage = if label.starts_with("rft") { "rft" } else { "sft" };
    Ok(PolicyParams::load(&require(ws.checkpoint(label), stage)?)?)
}

/// Easy/hard ADE and FDE of checkpoint `label`.
pub fn stage_eval(cfg: &ExperimentConfig, label: &str) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.workdir);
    let params = load_checkpoint(&ws, label)?;
    let n = Some(cfg.data.n_waypoints);
    let mut samples = load_samples(&require(ws.data("val_easy.jsonl"), "split")?, n)?;
    samples.extend(load_samples(&require(ws.data("val_hard.jsonl"), "split")?, n)?);
    let eval = eval_planning(&planner(cfg, &params), &samples);
    let out = ws.planning_eval(label);
    let summary = serde_json::to_value(&eval).unwrap_or_default();
    write_json(&out, &LabeledPlanning { label: label.to_string(), eval })?;
    finish(&ws, cfg, "eval", Some(label), vec![out], summary)
}

/// OOD collision metrics of checkpoint `label`.
pub fn stage_ood(cfg: &ExperimentConfig, label: &str) -> Result<Manifest, ExperimentError> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.workdir);
    let params = load_checkpoint(&ws, label)?;
    let scenes = load_ood_scenes(&require(ws.data("ood.jsonl"), "generate")?)?;
    let eval = evaluate_ood(cfg, &params, &scenes)?;
    let out = ws.ood_eval(label);
    let summary = serde_json::json!({ "metrics": eval.metrics, "decode_failures": eval.decode_failures });
    write_json(&out, &LabeledOod { label: label.to_string(), eval })?;
    finish(&ws, cfg, "ood", Some(label), vec![out], summary)
}

fn list_labels(dir: &Path, suffix: &str) -> Vec<String> {
    let mut labels: Vec<String> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(suffix)).map(str::to_string))
                .collect()
        })
        .unwrap_or_default();
    labels.sort();
    labels
}

/// Label used for a ratio-ablation run, e.g. `rft-ratio-9-1`.
pub fn ratio_label(r: &Ratio) -> String {
    format!("rft-ratio-{}-{}", r.first, r.second)
}

/// Assemble a report from whatever evaluations exist, marking gaps.
pub fn build_report(ws: &Workspace) -> Result<Report, ExperimentError> {
    let eval_dir = ws.root.join("eval");
    let mut planning = std::collections::BTreeMap::new();
    for label in list_labels(&eval_dir, ".planning.json") {
        let rec: LabeledPlanning = read_json(&ws.planning_eval(&label))?;
        planning.insert(label.clone(), PlanningRow::from_eval(&label, &rec.eval));
    }
    let mut report = Report::default();
    for needed in ["sft", "rft"] {
        if !planning.contains_key(needed) {
            report.gaps.push(format!("no planning evaluation for `{needed}` (run `planlab eval --label {needed}`)"));
        }
    }
    let row = |l: &str| planning.get(l).cloned();

    let mut main = PlanningTable {
        title: "SFT vs RFT".into(),
        ..Default::default()
    };
    main.rows.extend(row("sft"));
    main.rows.extend(row("rft"));
    if let (Some(s), Some(r)) = (row("sft"), row("rft")) {
        main.deltas.push(DeltaRow::between(&s, &r));
    }
    report.planning.push(main);

    let ratio_labels: Vec<&String> = planning.keys().filter(|l| l.starts_with("rft-ratio-")).collect();
    if !ratio_labels.is_empty() {
        let mut t = PlanningTable {
            title: "RFT easy:hard ratio".into(),
            ..Default::default()
        };
        for l in ratio_labels {
            let mut r = planning[l].clone();
            r.label = l.trim_start_matches("rft-ratio-").replacen('-', ":", 1);
            if let Some(s) = row("sft") {
                let mut d = DeltaRow::between(&s, &r);
                d.label = format!("Δ {} vs SFT", r.label);
                t.deltas.push(d);
            }
            t.rows.push(r);
        }
        report.planning.push(t);
    }

    if planning.contains_key("rft-noreason") || planning.contains_key("sft-noreason") {
        let mut t = PlanningTable {
            title: "Reasoning ablation".into(),
            ..Default::default()
        };
        for l in ["sft-noreason", "rft-noreason", "sft", "rft"] {
            t.rows.extend(row(l));
        }
        if let (Some(a), Some(b)) = (row("rft-noreason"), row("rft")) {
            t.deltas.push(DeltaRow::between(&a, &b));
        }
        report.planning.push(t);
    }

    for label in list_labels(&eval_dir, ".ood.json") {
        let rec: LabeledOod = read_json(&ws.ood_eval(&label))?;
        report.ood.rows.push(OodModelRow {
            model: label,
            metrics: rec.eval.metrics,
            decode_failures: rec.eval.decode_failures,
        });
    }
    if report.ood.rows.len() >= 2 {
        let models: Vec<(String, _)> = report.ood.rows.iter().map(|r| (r.model.clone(), r.metrics)).collect();
        report.ood.scores = Some(safety_scores(&models, &WeightScheme::presets())?);
    } else if report.ood.rows.len() == 1 {
        report.gaps.push("safety scores need OOD evaluations of at least 2 models".into());
    }
    Ok(report)
}

/// Write `report.md` and `report.json`.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let ws = Workspace::new(&cfg.workdir);
    let report = build_report(&ws)?;
    let md = ws.root.join("report.md");
    let json = ws.root.join("report.json");
    ensure_parent(&md)?;
    fs::write(&md, report.to_markdown()).map_err(io_error(&md))?;
    fs::write(&json, report.to_json() + "\n").map_err(io_error(&json))?;
    finish(&ws, cfg, "report", None, vec![md, json], serde_json::Value::Null)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"seed": 4, "sft": {"epochs": 2}, "rft": {"max_grad_norm": null}}"#).unwrap();
        let d = ExperimentConfig::default();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.sft.epochs, 2);
        assert_eq!(cfg.sft.learning_rate, d.sft.learning_rate);
        assert_eq!(cfg.rft.max_grad_norm, None);
        assert_eq!(cfg.rft.learning_rate, d.rft.learning_rate);
        assert_eq!(ExperimentConfig::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_json(r#"{"sft": {"epochs": "many"}}"#).unwrap_err().to_string();
        assert!(err.contains("sft.epochs"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"sedd": 1}"#).unwrap_err().to_string();
        assert!(err.contains("sedd"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"rft": {"kl_coef": 0.1}}"#).unwrap_err().to_string();
        assert!(err.contains("rft") && err.contains("kl_coef"), "{err}");
        assert!(ExperimentConfig::from_json("{").is_err());
    }
}
