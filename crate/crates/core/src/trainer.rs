//! The two-stage training framework: stage scheduling, the optimization
//! loop, checkpointing at stage boundaries, and the labeled-size sweep.
//!
//! A schedule is an ordered list of supervised and unsupervised stages.
//! Optimizer state is carried across consecutive stages of the same kind and
//! reset when the kind changes. An unsupervised stage refuses to run before
//! any supervised stage has completed — a freshly initialized model would
//! only emit noise for the similarity objective to chase. Every reported
//! number is a pure function of (seed, config, data order).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backend::{cosine_similarity, EmbeddingVector, JointEmbeddingBackend};
use crate::captioner::CaptionModel;
use crate::checkpoint::{
    config_digest, read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader,
    SchedulePosition, CHECKPOINT_VERSION,
};
use crate::data::{split_labeled, DatasetManifest, SealedReferences, ToyTokenizer};
use crate::error::{Error, Result};
use crate::gumbel::{EstimatorMode, TemperatureSchedule};
use crate::losses::{
    batched_unsupervised_step, supervised_loss_graph, SupervisedBatch, SupervisedItem,
};
use crate::metrics::{EvalRecord, ScoreReport, Smoothing};
use crate::params::ParamStore;
use crate::rng::{substream, substream_indexed, SeededRng};
use crate::tokens::TokenSequence;

/// Default learning rate at real-encoder scale.
pub const DEFAULT_REAL_LEARNING_RATE: f64 = 2e-5;
/// Default learning rate for the toy backend's much smaller surfaces.
pub const DEFAULT_TOY_LEARNING_RATE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub kind: StageKind,
    pub epochs: usize,
    pub batch_size: usize,
    /// Zero is allowed and makes the stage a null update (useful for
    /// trace-only runs); negative rates are rejected.
    pub learning_rate: f64,
    /// Gumbel temperature over the stage; unsupervised stages only.
    #[serde(default)]
    pub temperature: TemperatureSchedule,
    #[serde(default)]
    pub estimator: EstimatorMode,
}

impl StageConfig {
    pub fn supervised() -> Self {
        StageConfig {
            kind: StageKind::Supervised,
            epochs: 10,
            batch_size: 32,
            learning_rate: DEFAULT_REAL_LEARNING_RATE,
            temperature: TemperatureSchedule::default(),
            estimator: EstimatorMode::default(),
        }
    }

    pub fn unsupervised() -> Self {
        StageConfig {
            kind: StageKind::Unsupervised,
            ..Self::supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Parameter("a stage needs at least one epoch".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Parameter(format!(
                "learning rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        self.temperature.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub stages: Vec<StageConfig>,
    /// Epochs between metric evaluations during a stage; 0 disables them.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Parameter("schedule has no stages".into()));
        }
        for stage in &self.stages {
            stage.validate()?;
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state. Moments are stored as f32 — the checkpoint dtype —
/// and promoted to f64 for arithmetic, so a save/load cycle is bitwise
/// invisible to subsequent updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u64,
}

impl AdamState {
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every gradient group at the given effective rate.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        learning_rate: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown group `{name}`"));
            assert_eq!(param.values.len(), grad.len(), "gradient shape for `{name}`");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = (ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g) as f32;
                v[i] = (ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g) as f32;
                // read the rounded f32 moments back so an intervening
                // checkpoint round-trip cannot change the trajectory
                let m_hat = m[i] as f64 / bc1;
                let v_hat = v[i] as f64 / bc2;
                let update = learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                param.values[i] = (param.values[i] as f64 - update) as f32;
            }
        }
    }
}

/// Linear warmup over the first 5% of a stage's steps.
fn warmup_scale(step_in_stage: usize, total_steps: usize) -> f64 {
    let warmup = (total_steps as f64 * 0.05).ceil().max(1.0);
    ((step_in_stage as f64 + 1.0) / warmup).min(1.0)
}

/// Everything that evolves during training and survives a checkpoint.
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    pub position: SchedulePosition,
    pub supervised_stages_completed: usize,
    pub last_stage_kind: Option<StageKind>,
    /// Stream feeding Gumbel noise during unsupervised stages.
    pub noise_rng: SeededRng,
}

impl TrainState {
    pub fn fresh(model: &CaptionModel, seed: u64) -> Self {
        TrainState {
            params: model.init_params(seed),
            adam: AdamState::default(),
            position: SchedulePosition { stage: 0, epoch: 0 },
            supervised_stages_completed: 0,
            last_stage_kind: None,
            noise_rng: substream(seed, "gumbel-noise"),
        }
    }
}

/// One line of the JSON-lines stage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// Stage index within the schedule.
    pub stage: usize,
    /// Epoch index within the stage.
    pub epoch: usize,
    /// Mean per-item loss over the epoch.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_cosine: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu4: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub s_clip: Option<f64>,
}

pub fn write_reports_jsonl(path: &Path, reports: &[EpochReport]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for report in reports {
        serde_json::to_writer(&mut out, report)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<EpochReport>> {
    let file = BufReader::new(File::open(path)?);
    let mut reports = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(&line)?);
    }
    Ok(reports)
}

/// How captions are decoded for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam(usize),
}

/// One evaluation image with its reference texts.
#[derive(Debug, Clone)]
struct EvalItem {
    image_id: String,
    embedding: EmbeddingVector,
    references: Vec<String>,
}

/// Deterministic evaluation corpus: records with references, manifest order.
pub struct EvalCorpus {
    items: Vec<EvalItem>,
}

impl EvalCorpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// In-stage evaluation settings.
pub struct EvalPlan<'a> {
    pub corpus: &'a EvalCorpus,
    /// Evaluate when (epoch + 1) is a multiple of this; 0 disables.
    pub every: usize,
    pub smoothing: Smoothing,
}

impl EvalPlan<'_> {
    fn due(&self, epoch: usize) -> bool {
        self.every > 0 && (epoch + 1) % self.every == 0
    }
}

/// Mean image-caption cosine of the generated captions in a report
/// (the empty-caption sentinel −1 included).
pub fn mean_generated_cosine(report: &ScoreReport) -> f64 {
    if report.per_image.is_empty() {
        return 0.0;
    }
    report.per_image.iter().map(|p| p.g).sum::<f64>() / report.per_image.len() as f64
}

/// Inputs shared by every stage of a schedule run.
pub struct ScheduleData<'a> {
    pub labeled: &'a DatasetManifest,
    pub unlabeled: &'a DatasetManifest,
    /// True captions of the unlabeled pool, for evaluation traces only.
    pub sealed: Option<&'a SealedReferences>,
}

pub struct RunOptions<'a> {
    /// Stage-boundary checkpoints land here when set.
    pub checkpoint_dir: Option<&'a Path>,
    pub resume_from: Option<&'a Path>,
    /// Evaluation corpus cap (0 = no cap).
    pub eval_cap: usize,
    /// Smoothing for in-training BLEU traces; epsilon by default because the
    /// toy corpora are tiny.
    pub smoothing: Smoothing,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions {
            checkpoint_dir: None,
            resume_from: None,
            eval_cap: 128,
            smoothing: Smoothing::Epsilon { eps: 0.1 },
        }
    }
}

pub struct ScheduleOutcome {
    pub reports: Vec<EpochReport>,
    pub state: TrainState,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub size: usize,
    pub bleu4: f64,
    pub s_clip: f64,
    pub mean_cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    pub warnings: Vec<String>,
}

/// Immutable training context: the model architecture, the embedding
/// backend, and the run seed. All mutation happens through the exclusive
/// `&mut TrainState` passed into each stage.
pub struct Trainer<'a> {
    pub model: &'a CaptionModel,
    pub backend: &'a dyn JointEmbeddingBackend,
    pub seed: u64,
}

impl Trainer<'_> {
    fn tokenizer(&self) -> ToyTokenizer {
        ToyTokenizer::new(self.model.vocabulary_size())
    }

    fn encode_manifest(
        &self,
        manifest: &DatasetManifest,
    ) -> Result<Vec<(String, EmbeddingVector)>> {
        manifest
            .records
            .iter()
            .map(|r| Ok((r.image_id.clone(), self.backend.encode_image(&r.encoding_ref())?)))
            .collect()
    }

    /// Supervised items: one (image embedding, caption ⊕ end-token) pair per
    /// reference caption, in manifest order.
    fn supervised_items(
        &self,
        labeled: &DatasetManifest,
    ) -> Result<Vec<(EmbeddingVector, TokenSequence)>> {
        let tokenizer = self.tokenizer();
        let end = self.model.end_token();
        let mut items = Vec::new();
        for record in &labeled.records {
            if !record.is_labeled() {
                return Err(Error::Manifest(format!(
                    "unlabeled item `{}` in a supervised stage",
                    record.image_id
                )));
            }
            let image = self.backend.encode_image(&record.encoding_ref())?;
            for caption in &record.captions {
                let mut tokens = tokenizer.parse(caption)?;
                tokens.push(end);
                items.push((image.clone(), tokens));
            }
        }
        Ok(items)
    }

    /// Mini-batch gradient descent on the summed cross-entropy objective.
    pub fn run_supervised_stage(
        &self,
        labeled: &DatasetManifest,
        state: &mut TrainState,
        cfg: &StageConfig,
        stage_index: usize,
        eval: Option<&EvalPlan>,
    ) -> Result<Vec<EpochReport>> {
        cfg.validate()?;
        if cfg.kind != StageKind::Supervised {
            return Err(Error::Parameter(
                "supervised runner called with an unsupervised stage config".into(),
            ));
        }
        let items = self.supervised_items(labeled)?;
        let start_epoch = if state.position.stage == stage_index {
            state.position.epoch
        } else {
            0
        };
        if start_epoch == 0 && state.last_stage_kind != Some(StageKind::Supervised) {
            state.adam.reset();
        }
        let batches_per_epoch = items.len().div_ceil(cfg.batch_size).max(1);
        let total_steps = batches_per_epoch * cfg.epochs;
        let mut reports = Vec::new();
        for epoch in start_epoch..cfg.epochs {
            let mut order: Vec<usize> = (0..items.len()).collect();
            substream_indexed(self.seed, &format!("shuffle.stage{stage_index}"), epoch as u64)
                .shuffle(&mut order);
            let mut epoch_loss = 0.0;
            for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch = SupervisedBatch::new(
                    chunk
                        .iter()
                        .map(|&i| SupervisedItem {
                            image: items[i].0.clone(),
                            caption: items[i].1.clone(),
                        })
                        .collect(),
                )?;
                let graph = Graph::new();
                let bound = state.params.bind(&graph);
                let loss_t = supervised_loss_graph(self.model, &graph, &bound, &batch)?;
                let loss = loss_t.scalar_value();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(format!(
                        "stage {stage_index} epoch {epoch} batch {batch_index}"
                    )));
                }
                let grads = bound.gradients(&graph.backward(&loss_t));
                let step_in_stage = epoch * batches_per_epoch + batch_index;
                let rate = cfg.learning_rate * warmup_scale(step_in_stage, total_steps);
                state.adam.step(&mut state.params, &grads, rate);
                epoch_loss += loss;
            }
            let mean_loss = if items.is_empty() {
                0.0
            } else {
                epoch_loss / items.len() as f64
            };
            let (bleu4, s_clip) = self.maybe_evaluate(state, eval, epoch)?;
            reports.push(EpochReport {
                stage: stage_index,
                epoch,
                loss: mean_loss,
                mean_cosine: None,
                bleu4,
                s_clip,
            });
            state.position = SchedulePosition {
                stage: stage_index,
                epoch: epoch + 1,
            };
        }
        if !items.is_empty() {
            state.supervised_stages_completed += 1;
        }
        state.last_stage_kind = Some(StageKind::Supervised);
        Ok(reports)
    }

    /// Gumbel-decoded similarity maximization over unlabeled images.
    pub fn run_unsupervised_stage(
        &self,
        unlabeled: &DatasetManifest,
        state: &mut TrainState,
        cfg: &StageConfig,
        stage_index: usize,
        eval: Option<&EvalPlan>,
    ) -> Result<Vec<EpochReport>> {
        cfg.validate()?;
        if cfg.kind != StageKind::Unsupervised {
            return Err(Error::Parameter(
                "unsupervised runner called with a supervised stage config".into(),
            ));
        }
        if state.supervised_stages_completed == 0 {
            return Err(Error::Sequencing(
                "unsupervised stage requires a completed supervised stage first; \
                 a freshly initialized model would only generate noise"
                    .into(),
            ));
        }
        if !self.backend.descriptor().differentiable_text {
            return Err(Error::Capability {
                backend: self.backend.descriptor().name.clone(),
                capability: "differentiable text encoding".into(),
            });
        }
        let items = self.encode_manifest(unlabeled)?;
        let start_epoch = if state.position.stage == stage_index {
            state.position.epoch
        } else {
            0
        };
        if start_epoch == 0 && state.last_stage_kind != Some(StageKind::Unsupervised) {
            state.adam.reset();
        }
        let max_len = self.model.config().max_caption_length;
        let batches_per_epoch = items.len().div_ceil(cfg.batch_size).max(1);
        let total_steps = batches_per_epoch * cfg.epochs;
        let mut reports = Vec::new();
        for epoch in start_epoch..cfg.epochs {
            let tau = cfg.temperature.at_epoch(epoch);
            let mut order: Vec<usize> = (0..items.len()).collect();
            substream_indexed(self.seed, &format!("shuffle.stage{stage_index}"), epoch as u64)
                .shuffle(&mut order);
            let mut epoch_loss = 0.0;
            let mut cosine_sum = 0.0;
            let mut used_total = 0usize;
            for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<(String, EmbeddingVector)> =
                    chunk.iter().map(|&i| items[i].clone()).collect();
                let step = batched_unsupervised_step(
                    self.model,
                    &state.params,
                    &batch,
                    self.backend,
                    max_len,
                    tau,
                    cfg.estimator,
                    &mut state.noise_rng,
                )?;
                if step.used > 0 {
                    let step_in_stage = epoch * batches_per_epoch + batch_index;
                    let rate = cfg.learning_rate * warmup_scale(step_in_stage, total_steps);
                    state.adam.step(&mut state.params, &step.gradients, rate);
                    epoch_loss += step.loss;
                    cosine_sum += step.mean_cosine * step.used as f64;
                    used_total += step.used;
                }
            }
            let mean_loss = if used_total == 0 {
                0.0
            } else {
                epoch_loss / used_total as f64
            };
            let mean_cosine = (used_total > 0).then(|| cosine_sum / used_total as f64);
            let (bleu4, s_clip) = self.maybe_evaluate(state, eval, epoch)?;
            reports.push(EpochReport {
                stage: stage_index,
                epoch,
                loss: mean_loss,
                mean_cosine,
                bleu4,
                s_clip,
            });
            state.position = SchedulePosition {
                stage: stage_index,
                epoch: epoch + 1,
            };
        }
        state.last_stage_kind = Some(StageKind::Unsupervised);
        Ok(reports)
    }

    fn maybe_evaluate(
        &self,
        state: &TrainState,
        eval: Option<&EvalPlan>,
        epoch: usize,
    ) -> Result<(Option<f64>, Option<f64>)> {
        match eval {
            Some(plan) if plan.due(epoch) && !plan.corpus.is_empty() => {
                let report =
                    self.evaluate(&state.params, plan.corpus, DecodeMode::Greedy, plan.smoothing)?;
                Ok((Some(report.bleu4), Some(report.s_clip)))
            }
            _ => Ok((None, None)),
        }
    }

    /// Records with references, in manifest order: a record contributes its
    /// own captions if it has any, otherwise its sealed ones.
    pub fn build_eval_corpus(
        &self,
        manifest: &DatasetManifest,
        sealed: Option<&SealedReferences>,
        cap: usize,
    ) -> Result<EvalCorpus> {
        let mut items = Vec::new();
        for record in &manifest.records {
            let references: Vec<String> = if record.is_labeled() {
                record.captions.clone()
            } else if let Some(refs) = sealed.and_then(|s| s.get(&record.image_id)) {
                refs.to_vec()
            } else {
                continue;
            };
            items.push(EvalItem {
                image_id: record.image_id.clone(),
                embedding: self.backend.encode_image(&record.encoding_ref())?,
                references,
            });
            if cap > 0 && items.len() == cap {
                break;
            }
        }
        Ok(EvalCorpus { items })
    }

    /// Hard-decoded metric evaluation: greedy or beam captions, then the
    /// reference-relative corpus score and BLEU@4. An empty generation
    /// scores g = −1 (it beats nothing).
    pub fn evaluate(
        &self,
        params: &ParamStore,
        corpus: &EvalCorpus,
        decode: DecodeMode,
        smoothing: Smoothing,
    ) -> Result<ScoreReport> {
        let tokenizer = self.tokenizer();
        let max_len = self.model.config().max_caption_length;
        let mut records = Vec::with_capacity(corpus.items.len());
        for item in &corpus.items {
            let prefix = self.model.map_prefix(params, &item.embedding)?;
            let tokens = match decode {
                DecodeMode::Greedy => self.model.generate_greedy(params, &prefix, max_len)?,
                DecodeMode::Beam(w) => self.model.generate_beam(params, &prefix, w, max_len)?,
            };
            let (generated, g) = if tokens.is_empty() {
                (String::new(), -1.0)
            } else {
                let emb = self.backend.encode_text(&tokens)?;
                (
                    tokenizer.join(&tokens),
                    cosine_similarity(&item.embedding, &emb)?,
                )
            };
            let r = item
                .references
                .iter()
                .map(|text| {
                    let emb = self.backend.encode_text(&tokenizer.parse(text)?)?;
                    cosine_similarity(&item.embedding, &emb)
                })
                .collect::<Result<Vec<f64>>>()?;
            records.push(EvalRecord::new(
                item.image_id.clone(),
                generated,
                item.references.clone(),
                g,
                r,
            )?);
        }
        ScoreReport::from_records(&records, smoothing)
    }

    fn snapshot(&self, state: &TrainState, digest: &str) -> Checkpoint {
        let mut groups: BTreeMap<String, Vec<f32>> = state
            .params
            .iter()
            .map(|(name, p)| (name.clone(), p.values.clone()))
            .collect();
        for (name, values) in &state.adam.m {
            groups.insert(format!("optim.m.{name}"), values.clone());
        }
        for (name, values) in &state.adam.v {
            groups.insert(format!("optim.v.{name}"), values.clone());
        }
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                config_digest: digest.to_string(),
                position: state.position,
                rng: state.noise_rng.state(),
                supervised_stages_completed: state.supervised_stages_completed,
                last_stage_kind: state.last_stage_kind,
                adam_step: state.adam.step_count(),
            },
            groups,
        }
    }

    /// Rebuilds training state from a stage-boundary checkpoint written
    /// under the same (model config, schedule) digest.
    pub fn restore_state(&self, path: &Path, schedule: &TrainingSchedule) -> Result<TrainState> {
        let digest = config_digest(&(self.model.config(), schedule));
        self.load_state(path, &digest, schedule.seed)
    }

    fn load_state(&self, path: &Path, digest: &str, seed: u64) -> Result<TrainState> {
        let ckpt = read_checkpoint(path)?;
        if ckpt.header.config_digest != digest {
            return Err(Error::Compatibility(format!(
                "checkpoint was written under config digest {} but this run has {}",
                ckpt.header.config_digest, digest
            )));
        }
        let mut params = self.model.init_params(seed);
        for (name, param) in params.iter_mut() {
            let values = ckpt.groups.get(name.as_str()).ok_or_else(|| {
                Error::Compatibility(format!("checkpoint is missing parameter group `{name}`"))
            })?;
            if values.len() != param.values.len() {
                return Err(Error::Compatibility(format!(
                    "group `{name}` has {} elements in the checkpoint but {} in the model",
                    values.len(),
                    param.values.len()
                )));
            }
            param.values.copy_from_slice(values);
        }
        let mut adam = AdamState {
            t: ckpt.header.adam_step,
            ..AdamState::default()
        };
        for (name, values) in &ckpt.groups {
            let (target, base) = if let Some(base) = name.strip_prefix("optim.m.") {
                (&mut adam.m, base)
            } else if let Some(base) = name.strip_prefix("optim.v.") {
                (&mut adam.v, base)
            } else if params.get(name).is_some() {
                continue;
            } else {
                return Err(Error::Compatibility(format!(
                    "checkpoint contains unknown group `{name}`"
                )));
            };
            let expected = params
                .get(base)
                .ok_or_else(|| {
                    Error::Compatibility(format!(
                        "optimizer moments for unknown parameter group `{base}`"
                    ))
                })?
                .values
                .len();
            if values.len() != expected {
                return Err(Error::Compatibility(format!(
                    "moment group `{name}` has {} elements, parameter has {expected}",
                    values.len()
                )));
            }
            target.insert(base.to_string(), values.clone());
        }
        Ok(TrainState {
            params,
            adam,
            position: ckpt.header.position,
            supervised_stages_completed: ckpt.header.supervised_stages_completed,
            last_stage_kind: ckpt.header.last_stage_kind,
            noise_rng: SeededRng::restore(&ckpt.header.rng),
        })
    }

    /// Executes the stages in order, evaluating every `eval_every` epochs
    /// and checkpointing at stage boundaries. With `resume_from`, picks up
    /// at the recorded position after verifying the config digest.
    pub fn run_schedule(
        &self,
        schedule: &TrainingSchedule,
        data: &ScheduleData,
        opts: &RunOptions,
    ) -> Result<ScheduleOutcome> {
        schedule.validate()?;
        let digest = config_digest(&(self.model.config(), schedule));
        let mut state = match opts.resume_from {
            Some(path) => self.load_state(path, &digest, schedule.seed)?,
            None => {
                if schedule.stages[0].kind == StageKind::Unsupervised {
                    return Err(Error::Sequencing(
                        "a fresh run must start with a supervised stage".into(),
                    ));
                }
                TrainState::fresh(self.model, schedule.seed)
            }
        };
        let corpus = self.build_eval_corpus(data.unlabeled, data.sealed, opts.eval_cap)?;
        let plan = (schedule.eval_every > 0 && !corpus.is_empty()).then(|| EvalPlan {
            corpus: &corpus,
            every: schedule.eval_every,
            smoothing: opts.smoothing,
        });
        let mut reports = Vec::new();
        for stage_index in state.position.stage..schedule.stages.len() {
            let cfg = &schedule.stages[stage_index];
            let stage_reports = match cfg.kind {
                StageKind::Supervised => self.run_supervised_stage(
                    data.labeled,
                    &mut state,
                    cfg,
                    stage_index,
                    plan.as_ref(),
                )?,
                StageKind::Unsupervised => self.run_unsupervised_stage(
                    data.unlabeled,
                    &mut state,
                    cfg,
                    stage_index,
                    plan.as_ref(),
                )?,
            };
            reports.extend(stage_reports);
            state.position = SchedulePosition {
                stage: stage_index + 1,
                epoch: 0,
            };
            if let Some(dir) = opts.checkpoint_dir {
                let path = dir.join(format!("stage-{:02}.ckpt", stage_index + 1));
                write_checkpoint(&path, &self.snapshot(&state, &digest))?;
            }
        }
        Ok(ScheduleOutcome {
            reports,
            state,
            config_digest: digest,
        })
    }

    /// Runs the full schedule once per labeled-set size, each from a fresh
    /// seed-controlled split and init, and tabulates the final greedy
    /// metrics. Duplicate sizes run once, with a warning.
    pub fn sweep_labeled_size(
        &self,
        sizes: &[usize],
        schedule: &TrainingSchedule,
        full: &DatasetManifest,
        opts: &RunOptions,
    ) -> Result<SweepReport> {
        if sizes.is_empty() {
            return Err(Error::Parameter("sweep needs at least one size".into()));
        }
        let pool = full.labeled().count();
        let mut warnings = Vec::new();
        let mut deduped: Vec<usize> = Vec::new();
        let mut sorted = sizes.to_vec();
        sorted.sort_unstable();
        for size in sorted {
            if size == 0 {
                return Err(Error::Parameter("sweep sizes must be positive".into()));
            }
            if size > pool {
                return Err(Error::Parameter(format!(
                    "sweep size {size} exceeds the labeled pool ({pool})"
                )));
            }
            if deduped.last() == Some(&size) {
                warnings.push(format!("duplicate sweep size {size} ignored"));
            } else {
                deduped.push(size);
            }
        }
        let mut entries = Vec::with_capacity(deduped.len());
        for size in deduped {
            let split = split_labeled(full, size, schedule.seed)?;
            let run_opts = RunOptions {
                checkpoint_dir: None,
                resume_from: None,
                ..*opts
            };
            let outcome = self.run_schedule(
                schedule,
                &ScheduleData {
                    labeled: &split.labeled,
                    unlabeled: &split.unlabeled,
                    sealed: Some(&split.sealed),
                },
                &run_opts,
            )?;
            // score on the held-out pool; fall back to the labeled pool when
            // the split left nothing held out
            let corpus = {
                let held_out =
                    self.build_eval_corpus(&split.unlabeled, Some(&split.sealed), opts.eval_cap)?;
                if held_out.is_empty() {
                    self.build_eval_corpus(&split.labeled, None, opts.eval_cap)?
                } else {
                    held_out
                }
            };
            let report = self.evaluate(
                &outcome.state.params,
                &corpus,
                DecodeMode::Greedy,
                opts.smoothing,
            )?;
            entries.push(SweepEntry {
                size,
                bleu4: report.bleu4,
                s_clip: report.s_clip,
                mean_cosine: mean_generated_cosine(&report),
            });
        }
        Ok(SweepReport { entries, warnings })
    }
}
