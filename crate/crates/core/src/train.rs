//! Mixed-batch training loop, evaluation and the ablation suite.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{strong_variants, weak_augment, AugmentSpec, StrongSpec};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::SemiDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{
    augmentation_consistency, gate_open, generation_xe, paired_l2_consistency, prediction_consistency,
    pseudo_label_loss, relation_consistency, scst_loss, supervised_prediction_loss, total_loss, CaptionLoss,
    LossReport, LossWeights, SupervisedTerms, UnsupervisedTerms,
};
use crate::metrics::{CiderD, EvalCorpus, EvalItem, MetricReport, Sentence};
use crate::model::{CaptionerConfig, CaptionerModel, ModelVars};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::rng::{stream, tag};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o-prediction")]
    WithoutPrediction,
    #[serde(rename = "w/o-relation")]
    WithoutRelation,
    #[serde(rename = "w/o-tau")]
    WithoutTau,
    #[serde(rename = "pl")]
    PseudoLabel,
    #[serde(rename = "ac")]
    AugmentationConsistency,
    #[serde(rename = "embedding+")]
    EmbeddingPlus,
    #[serde(rename = "semantic+")]
    SemanticPlus,
    #[serde(rename = "strong+")]
    StrongPlus,
    #[serde(rename = "supervised-only")]
    SupervisedOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 10] = [
        AblationMode::Full,
        AblationMode::WithoutPrediction,
        AblationMode::WithoutRelation,
        AblationMode::WithoutTau,
        AblationMode::PseudoLabel,
        AblationMode::AugmentationConsistency,
        AblationMode::EmbeddingPlus,
        AblationMode::SemanticPlus,
        AblationMode::StrongPlus,
        AblationMode::SupervisedOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::WithoutPrediction => "w/o-prediction",
            AblationMode::WithoutRelation => "w/o-relation",
            AblationMode::WithoutTau => "w/o-tau",
            AblationMode::PseudoLabel => "pl",
            AblationMode::AugmentationConsistency => "ac",
            AblationMode::EmbeddingPlus => "embedding+",
            AblationMode::SemanticPlus => "semantic+",
            AblationMode::StrongPlus => "strong+",
            AblationMode::SupervisedOnly => "supervised-only",
        }
    }

    /// Loss weights actually used under this mode.
    pub fn weights(self, base: &LossWeights) -> LossWeights {
        let mut w = base.clone();
        match self {
            AblationMode::WithoutPrediction => w.lambda1 = 0.0,
            AblationMode::WithoutRelation => w.lambda2 = 0.0,
            AblationMode::WithoutTau => w.tau = 0.0,
            _ => {}
        }
        w
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        AblationMode::ALL.into_iter().find(|m| m.name() == lower).ok_or_else(|| {
            let known: Vec<&str> = AblationMode::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown mode `{s}`; known modes: {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// How the per-batch sum weights undescribed items against described ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsupWeighting {
    /// Unbiased estimate of the sum over the whole dataset: unsupervised terms
    /// are scaled by `(N_u / u) / (N_l / s)` for `s`/`u` items per batch.
    Dataset,
    /// Plain sum over the batch.
    Batch,
}

/// Model sizes not implied by the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub region_count: usize,
    pub hidden_dim: usize,
    pub classifier_hidden: usize,
    pub max_len: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec { region_count: 16, hidden_dim: 32, classifier_hidden: 32, max_len: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each batch drawn from the described pool.
    pub labeled_fraction: f64,
    pub learning_rate: f64,
    pub anneal_factor: f64,
    pub anneal_every: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub mode: AblationMode,
    pub loss: LossWeights,
    pub augment: AugmentSpec,
    pub strong: StrongSpec,
    pub model: ModelSpec,
    /// Probability threshold for hard labels in the pseudo-label ablation.
    pub pl_threshold: f64,
    /// Softmax temperature for sampled decoding under the RL caption loss.
    pub sample_temperature: f64,
    pub unsup_weighting: UnsupWeighting,
    /// Overrides the number of batches per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Evaluate on the test split every this many epochs (0: only after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            labeled_fraction: 0.25,
            learning_rate: 1e-4,
            anneal_factor: 0.8,
            anneal_every: 3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            mode: AblationMode::Full,
            loss: LossWeights::default(),
            augment: AugmentSpec::default(),
            strong: StrongSpec::default(),
            model: ModelSpec::default(),
            pl_threshold: 0.5,
            sample_temperature: 1.0,
            unsup_weighting: UnsupWeighting::Dataset,
            steps_per_epoch: None,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!("labeled_fraction must lie in (0, 1], got {}", self.labeled_fraction)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) || self.anneal_every == 0 {
            return Err(Error::Config("anneal_factor must lie in (0, 1] and anneal_every be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and epsilon be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pl_threshold) {
            return Err(Error::Config(format!("pl_threshold must lie in [0, 1], got {}", self.pl_threshold)));
        }
        if !(self.sample_temperature > 0.0) {
            return Err(Error::Config("sample_temperature must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        if self.model.max_len < 2 {
            return Err(Error::Config("model.max_len must be >= 2".into()));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.strong.validate()
    }

    /// lr for 1-based `epoch`: `learning_rate * anneal_factor^floor((epoch-1)/anneal_every)`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drops = epoch.saturating_sub(1) / self.anneal_every;
        self.learning_rate * self.anneal_factor.powi(drops as i32)
    }

    /// (described, undescribed) items per batch.
    pub fn batch_split(&self) -> (usize, usize) {
        let s = (self.labeled_fraction * self.batch_size as f64).round() as usize;
        let s = s.clamp(1, self.batch_size);
        (s, self.batch_size - s)
    }

    /// Factor applied to lambda1 and lambda2 for the given pool sizes.
    pub fn unsup_scale(&self, n_described: usize, n_undescribed: usize) -> f64 {
        let (s, u) = self.batch_split();
        match self.unsup_weighting {
            UnsupWeighting::Batch => 1.0,
            _ if u == 0 || n_described == 0 => 1.0,
            UnsupWeighting::Dataset => (n_undescribed as f64 / u as f64) / (n_described as f64 / s as f64),
        }
    }

    /// Loss weights in effect for a run over the given pool sizes.
    pub fn effective_weights(&self, n_described: usize, n_undescribed: usize) -> LossWeights {
        let mut w = self.mode.weights(&self.loss);
        let scale = self.unsup_scale(n_described, n_undescribed);
        w.lambda1 *= scale;
        w.lambda2 *= scale;
        w
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn captioner_config(&self, ds: &SemiDataset) -> Result<CaptionerConfig> {
        let (h, w, c) = ds.image_dims().ok_or_else(|| Error::Invalid("dataset holds no images".into()))?;
        let cfg = CaptionerConfig {
            grid_h: h,
            grid_w: w,
            channels: c,
            region_count: self.model.region_count,
            region_dim: self.model.hidden_dim,
            hidden_dim: self.model.hidden_dim,
            vocab_size: ds.vocabulary.len(),
            max_len: self.model.max_len,
            class_count: ds.classes.len(),
            classifier_hidden: self.model.classifier_hidden,
            attention_refiner: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Checks that a model can consume a dataset, naming the first mismatch.
pub fn check_compatible(cfg: &CaptionerConfig, ds: &SemiDataset) -> Result<()> {
    if let Some(dims) = ds.image_dims() {
        if dims != (cfg.grid_h, cfg.grid_w, cfg.channels) {
            return Err(Error::Invalid(format!(
                "image dimensions: dataset has {dims:?}, model expects {:?}",
                (cfg.grid_h, cfg.grid_w, cfg.channels)
            )));
        }
    }
    if ds.vocabulary.len() != cfg.vocab_size {
        return Err(Error::Invalid(format!(
            "vocabulary size: dataset has {}, model expects {}",
            ds.vocabulary.len(),
            cfg.vocab_size
        )));
    }
    if ds.classes.len() != cfg.class_count {
        return Err(Error::Invalid(format!(
            "class count: dataset has {}, model expects {}",
            ds.classes.len(),
            cfg.class_count
        )));
    }
    Ok(())
}

/// Indices into the described and undescribed pools for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    pub described: Vec<usize>,
    pub undescribed: Vec<usize>,
}

/// Draws from a pool without replacement, reshuffling whenever it runs dry.
struct PoolSampler {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    size: usize,
    seed: u64,
    side: u64,
    epoch: u64,
    wraps: usize,
}

impl PoolSampler {
    fn new(size: usize, seed: u64, side: u64, epoch: u64) -> Self {
        let mut s = PoolSampler { order: Vec::new(), pos: 0, pass: 0, size, seed, side, epoch, wraps: 0 };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.size).collect();
        self.order.shuffle(&mut stream(self.seed, &[tag::SHUFFLE, self.side, self.epoch, self.pass]));
        self.pos = 0;
        self.pass += 1;
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reshuffle();
                self.wraps += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Batches per epoch: enough to pass once over the larger pool, unless overridden.
pub fn batches_per_epoch(config: &TrainConfig, n_described: usize, n_undescribed: usize) -> usize {
    if let Some(n) = config.steps_per_epoch {
        return n;
    }
    let (s, u) = config.batch_split();
    let sup = n_described.div_ceil(s.max(1));
    let uns = if u == 0 { 0 } else { n_undescribed.div_ceil(u) };
    sup.max(uns).max(1)
}

/// All batches of 1-based `epoch`. Each pool is sampled without replacement
/// and reshuffled per epoch; a pool smaller than the epoch's demand wraps
/// with a fresh shuffle.
pub fn plan_epoch(config: &TrainConfig, n_described: usize, n_undescribed: usize, epoch: usize) -> Result<Vec<BatchIndices>> {
    let (s, u) = config.batch_split();
    if n_described == 0 {
        return Err(Error::Invalid("no described scenes to train on".into()));
    }
    let needs_unlabeled = u > 0 && config.mode != AblationMode::SupervisedOnly;
    if needs_unlabeled && n_undescribed == 0 {
        return Err(Error::Invalid(format!("mode {} needs undescribed images but the pool is empty", config.mode)));
    }
    let n = batches_per_epoch(config, n_described, n_undescribed);
    let mut sup = PoolSampler::new(n_described, config.seed, 0, epoch as u64);
    let mut uns = PoolSampler::new(n_undescribed, config.seed, 1, epoch as u64);
    let batches: Vec<BatchIndices> = (0..n)
        .map(|_| BatchIndices {
            described: sup.take(s),
            undescribed: if n_undescribed == 0 { Vec::new() } else { uns.take(u) },
        })
        .collect();
    if sup.wraps > 0 || uns.wraps > 0 {
        log::debug!("epoch {epoch}: described pool wrapped {} times, undescribed {}", sup.wraps, uns.wraps);
    }
    Ok(batches)
}

/// Per-epoch aggregates; losses are means over the epoch's batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub l_c: f64,
    pub l_p: f64,
    pub l_pc: f64,
    pub l_rc: f64,
    pub total: f64,
    /// Share of undescribed items whose gate was open; absent when none were seen.
    pub gate_open_rate: Option<f64>,
    pub metrics: Option<MetricReport>,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub mode: AblationMode,
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub wall_s: f64,
}

impl RunRecord {
    pub fn final_metrics(&self) -> Option<&MetricReport> {
        self.epochs.iter().rev().find_map(|e| e.metrics.as_ref())
    }

    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_s = 0.0;
        r.epochs.iter_mut().for_each(|e| e.wall_s = 0.0);
        r
    }
}

#[derive(Serialize)]
struct BatchLine<'a> {
    kind: &'static str,
    epoch: usize,
    batch: usize,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    kind: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Clone, Debug, PartialEq)]
enum OptState<S> {
    Adam(AdamState<S>),
    Sgd,
}

fn reborrow<'b>(log: &'b mut Option<&mut dyn Write>) -> Option<&'b mut dyn Write> {
    match log {
        Some(w) => Some(&mut **w),
        None => None,
    }
}

fn nan_term(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NanLoss { term: term.into(), value: f64::NAN },
        other => other,
    }
}

/// Runs one term's graph construction, attributing non-finite values to `term`.
fn term<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(nan_term(name))
}

fn label_tensor<S: Scalar>(labels: &[u8]) -> Tensor<S> {
    Tensor::vector(labels.iter().map(|&b| if b != 0 { S::one() } else { S::zero() }).collect())
}

/// Stateful trainer, resumable from a checkpoint between epochs.
pub struct Trainer<'a, S: Scalar> {
    config: TrainConfig,
    dataset: &'a SemiDataset,
    model: CaptionerModel<S>,
    opt: OptState<S>,
    record: RunRecord,
    scorer: CiderD,
    references: Vec<Vec<Sentence>>,
}

impl<'a, S: Scalar> Trainer<'a, S> {
    pub fn new(config: TrainConfig, dataset: &'a SemiDataset) -> Result<Self> {
        config.validate()?;
        let cfg = config.captioner_config(dataset)?;
        let model = CaptionerModel::new(cfg, &mut stream(config.seed, &[tag::INIT]))?;
        let opt = match config.optimizer {
            OptimizerKind::Adam => OptState::Adam(AdamState::new(model.params().tensors().iter(), config.adam())),
            OptimizerKind::Sgd => OptState::Sgd,
        };
        let record = RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            mode: config.mode,
            seed: config.seed,
            config_hash: config.hash(),
            epochs: Vec::new(),
            wall_s: 0.0,
        };
        Self::assemble(config, dataset, model, opt, record)
    }

    fn assemble(
        config: TrainConfig,
        dataset: &'a SemiDataset,
        model: CaptionerModel<S>,
        opt: OptState<S>,
        record: RunRecord,
    ) -> Result<Self> {
        dataset.validate()?;
        dataset.check_disjoint()?;
        check_compatible(model.config(), dataset)?;
        let references: Vec<Vec<Sentence>> = dataset.described.iter().map(|s| vec![s.caption.clone()]).collect();
        let scorer = CiderD::new(references.iter().map(Vec::as_slice));
        Ok(Trainer { config, dataset, model, opt, record, scorer, references })
    }

    /// Continues a run saved by [`Trainer::checkpoint`]. The stored config
    /// must hash to the same value as `config`, except for `epochs`.
    pub fn resume(config: TrainConfig, dataset: &'a SemiDataset, ck: Checkpoint<S>) -> Result<Self> {
        config.validate()?;
        let record: RunRecord = serde_json::from_value(ck.extra.get("record").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("no resumable run record: {e}")))?;
        let stored: TrainConfig = serde_json::from_value(ck.extra.get("train_config").cloned().unwrap_or_default())
            .map_err(|e| Error::Checkpoint(format!("no training config: {e}")))?;
        if (TrainConfig { epochs: config.epochs, ..stored }) != config {
            return Err(Error::Config("resume config differs from the checkpointed run".into()));
        }
        if record.epochs.len() != ck.epoch {
            return Err(Error::Checkpoint("run record and epoch counter disagree".into()));
        }
        let opt = match (config.optimizer, ck.optimizer) {
            (OptimizerKind::Adam, Some(a)) => OptState::Adam(a),
            (OptimizerKind::Sgd, None) => OptState::Sgd,
            _ => return Err(Error::Checkpoint("optimizer state does not match the configured optimizer".into())),
        };
        Self::assemble(config, dataset, ck.model, opt, record)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &CaptionerModel<S> {
        &self.model
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn epochs_done(&self) -> usize {
        self.record.epochs.len()
    }

    pub fn into_parts(self) -> (CaptionerModel<S>, RunRecord) {
        (self.model, self.record)
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        let optimizer = match &self.opt {
            OptState::Adam(a) => Some(a.clone()),
            OptState::Sgd => None,
        };
        Checkpoint {
            model: self.model.clone(),
            optimizer,
            epoch: self.epochs_done(),
            extra: serde_json::json!({ "train_config": self.config, "record": self.record }),
        }
    }

    /// Trains until `config.epochs` epochs are recorded.
    pub fn run(&mut self, mut log: Option<&mut dyn Write>) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            self.run_epoch(reborrow(&mut log))?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self, mut log: Option<&mut dyn Write>) -> Result<&EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_done() + 1;
        let lr = self.config.learning_rate_at(epoch);
        if let OptState::Adam(a) = &mut self.opt {
            a.set_learning_rate(lr);
        }
        let plan = plan_epoch(&self.config, self.dataset.described.len(), self.dataset.undescribed.len(), epoch)?;
        let mut sums = [0.0f64; 5];
        let (mut open, mut seen) = (0usize, 0usize);
        for (b, batch) in plan.iter().enumerate() {
            let report = self.step(epoch, b, batch)?;
            for (acc, v) in sums.iter_mut().zip([report.l_c, report.l_p, report.l_pc, report.l_rc, report.total]) {
                *acc += v;
            }
            open += report.gate_open.iter().filter(|&&o| o).count();
            seen += report.gate_open.len();
            if let Some(w) = log.as_deref_mut() {
                let line = BatchLine { kind: "batch", epoch, batch: b + 1, report: &report };
                writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io("training log", e))?;
            }
        }
        let every = self.config.eval_every;
        let due = epoch == self.config.epochs || (every > 0 && epoch % every == 0);
        let metrics = if due && !self.dataset.test.is_empty() {
            Some(evaluate(&self.model, &self.dataset.test, &self.dataset.vocabulary)?.0)
        } else {
            None
        };
        let n = plan.len() as f64;
        let wall_s = start.elapsed().as_secs_f64();
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            batches: plan.len(),
            l_c: sums[0] / n,
            l_p: sums[1] / n,
            l_pc: sums[2] / n,
            l_rc: sums[3] / n,
            total: sums[4] / n,
            gate_open_rate: (seen > 0).then(|| open as f64 / seen as f64),
            metrics,
            wall_s,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.3e} total {:.4} l_c {:.4} l_p {:.4} l_pc {:.4} l_rc {:.4}{}",
            record.total,
            record.l_c,
            record.l_p,
            record.l_pc,
            record.l_rc,
            record.metrics.as_ref().map(|m| format!(" CIDEr-D {:.4}", m.cider_d)).unwrap_or_default()
        );
        if let Some(w) = log {
            writeln!(w, "{}", serde_json::to_string(&EpochLine { kind: "epoch", record: &record })?)
                .map_err(|e| Error::io("training log", e))?;
        }
        self.record.wall_s += wall_s;
        self.record.epochs.push(record);
        Ok(self.record.epochs.last().expect("just pushed"))
    }

    /// Forward, backward and one optimizer update on a single batch.
    fn step(&mut self, epoch: usize, batch_no: usize, batch: &BatchIndices) -> Result<LossReport> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g);
        let (total, report) = self.batch_loss(&mut g, &vars, epoch, batch_no, batch)?;
        if !report.total.is_finite() {
            return Err(Error::NanLoss { term: "total".into(), value: report.total });
        }
        let grads = g.backward(total).map_err(nan_term("backward"))?;
        let grads: Vec<Tensor<S>> = vars.all().iter().map(|&v| grads.wrt(v).clone()).collect();
        let params = self.model.params_mut().tensors_mut();
        match &mut self.opt {
            OptState::Adam(state) => adam_step(params, &grads, state)?,
            OptState::Sgd => sgd_step(params, &grads, self.config.learning_rate_at(epoch))?,
        }
        Ok(report)
    }

    fn batch_loss(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        epoch: usize,
        batch_no: usize,
        batch: &BatchIndices,
    ) -> Result<(Var, LossReport)> {
        let cfg = &self.config;
        let model = &self.model;
        let vocab = &self.dataset.vocabulary;
        let weights = cfg.effective_weights(self.dataset.described.len(), self.dataset.undescribed.len());
        let max_len = model.config().max_len;

        let mut supervised = Vec::with_capacity(batch.described.len());
        for (slot, &i) in batch.described.iter().enumerate() {
            let scene = &self.dataset.described[i];
            let gold = vocab.encode(&scene.caption);
            let (regions, forced) = term("l_c", || {
                let regions = model.encode(g, vars, &scene.image)?;
                Ok((regions, model.decode_teacher_forced(g, vars, regions, &gold)?))
            })?;
            let caption = match cfg.loss.caption_loss {
                CaptionLoss::Xe => term("l_c", || generation_xe(g, &forced.step_logits, &gold[1..]))?,
                CaptionLoss::Rl => term("l_c", || {
                    let mut rng = stream(cfg.seed, &[tag::SAMPLE, epoch as u64, batch_no as u64, slot as u64]);
                    let sampled = model.decode_sampled(g, vars, regions, max_len, cfg.sample_temperature, &mut rng)?;
                    let greedy = model.decode_greedy(g, vars, regions, max_len)?;
                    Ok(scst_loss(g, &sampled, &greedy, &self.references[i], vocab, &self.scorer)?.loss)
                })?,
            };
            let prediction = term("l_p", || {
                let ee = model.image_embedding(g, regions)?;
                let pv = model.classify(g, vars, ee)?;
                let de = model.sentence_embedding(g, &forced)?;
                let pw = model.classify(g, vars, de)?;
                let y = g.constant(label_tensor(&scene.labels));
                supervised_prediction_loss(g, pv, pw, y)
            })?;
            supervised.push(SupervisedTerms { caption, prediction });
        }

        let mut unsupervised = Vec::new();
        let mut gate_log = Vec::new();
        if cfg.mode != AblationMode::SupervisedOnly {
            for (slot, &j) in batch.undescribed.iter().enumerate() {
                let image = &self.dataset.undescribed[j];
                let tags = [tag::AUGMENT, epoch as u64, batch_no as u64, slot as u64];
                match term("l_pc", || self.unsupervised_item(g, vars, image, &weights, &tags))? {
                    Unsup::Closed => gate_log.push(false),
                    Unsup::Skipped => gate_log.push(false),
                    Unsup::Open(t) => {
                        gate_log.push(true);
                        unsupervised.push(t);
                    }
                }
            }
        }
        let (total, mut report) = total_loss(g, &supervised, &unsupervised, &weights)?;
        report.gate_open = gate_log;
        Ok((total, report))
    }

    fn unsupervised_item(
        &self,
        g: &mut Graph<S>,
        vars: &ModelVars,
        image: &Image,
        weights: &LossWeights,
        tags: &[u64],
    ) -> Result<Unsup> {
        let cfg = &self.config;
        let model = &self.model;
        let mut rng = stream(cfg.seed, tags);
        let variants = match cfg.mode {
            AblationMode::StrongPlus => strong_variants(image, cfg.augment.k, &cfg.strong, &mut rng)?,
            _ => weak_augment(image, &cfg.augment, &mut rng)?,
        };
        // the gate reads the raw image only, so closed items stop here
        let regions0 = model.encode(g, vars, &variants[0])?;
        let ee0 = model.image_embedding(g, regions0)?;
        let pv0 = model.classify(g, vars, ee0)?;
        let confidence = g.value(pv0).data().iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        if !gate_open(confidence, weights.tau) {
            return Ok(Unsup::Closed);
        }
        let max_len = model.config().max_len;
        let (mut ee, mut pv, mut de, mut pw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (k, v) in variants.iter().enumerate() {
            let (regions, e, p) = if k == 0 {
                (regions0, ee0, pv0)
            } else {
                let r = model.encode(g, vars, v)?;
                let e = model.image_embedding(g, r)?;
                let p = model.classify(g, vars, e)?;
                (r, e, p)
            };
            let trace = model.decode_greedy(g, vars, regions, max_len)?;
            let d = model.sentence_embedding(g, &trace)?;
            pw.push(model.classify(g, vars, d)?);
            ee.push(e);
            pv.push(p);
            de.push(d);
        }
        let reduction = weights.variant_reduction;
        let consistency = match cfg.mode {
            AblationMode::PseudoLabel => {
                match term("l_pc", || pseudo_label_loss(g, &pv, &pw, cfg.pl_threshold, reduction))? {
                    Some(t) => t,
                    None => return Ok(Unsup::Skipped),
                }
            }
            _ => term("l_pc", || prediction_consistency(g, &pv, &pw, reduction))?,
        };
        let relation = term("l_rc", || match cfg.mode {
            AblationMode::AugmentationConsistency => augmentation_consistency(g, &pw),
            AblationMode::EmbeddingPlus => paired_l2_consistency(g, &ee, &de),
            AblationMode::SemanticPlus => paired_l2_consistency(g, &pv, &pw),
            _ => relation_consistency(g, &pv, &pw),
        })?;
        Ok(Unsup::Open(UnsupervisedTerms { consistency, relation, confidence }))
    }
}

enum Unsup {
    Closed,
    /// Gate open but no pseudo label passed the threshold.
    Skipped,
    Open(UnsupervisedTerms),
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train<S: Scalar>(
    dataset: &SemiDataset,
    config: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(CaptionerModel<S>, RunRecord)> {
    let mut t = Trainer::new(config.clone(), dataset)?;
    t.run(log)?;
    Ok(t.into_parts())
}

/// Greedy caption (words) for one image.
pub fn caption_image<S: Scalar>(model: &CaptionerModel<S>, image: &Image, vocab: &Vocabulary) -> Result<Sentence> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let regions = model.encode(&mut g, &vars, image)?;
    let trace = model.decode_greedy(&mut g, &vars, regions, model.config().max_len)?;
    Ok(vocab.decode(&trace.tokens))
}

/// Greedy-decodes every scene and scores against its reference caption.
pub fn evaluate<S: Scalar>(
    model: &CaptionerModel<S>,
    scenes: &[crate::data::Scene],
    vocab: &Vocabulary,
) -> Result<(MetricReport, Vec<Sentence>)> {
    if scenes.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one test scene".into()));
    }
    let mut items = Vec::with_capacity(scenes.len());
    let mut captions = Vec::with_capacity(scenes.len());
    for s in scenes {
        let cand = caption_image(model, &s.image, vocab)?;
        captions.push(cand.clone());
        items.push(EvalItem { candidate: cand, references: vec![s.caption.clone()] });
    }
    Ok((MetricReport::compute(&EvalCorpus::new(items)?)?, captions))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub metrics: MetricReport,
    pub wall_s: f64,
    pub record: RunRecord,
}

pub const ABLATION_CSV_HEADER: &str = "mode,B@1,B@2,B@3,B@4,ROUGE-L,CIDEr-D,wall_s";

/// One run per mode on the same dataset and seed.
pub fn ablation_suite(
    dataset: &SemiDataset,
    base: &TrainConfig,
    modes: &[AblationMode],
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<AblationRow>> {
    if dataset.test.is_empty() {
        return Err(Error::Invalid("ablation suite needs a test split".into()));
    }
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        log::info!("ablation run: {mode}");
        let config = TrainConfig { mode, ..base.clone() };
        let (model, record) = train::<f32>(dataset, &config, reborrow(&mut log))?;
        let metrics = match record.final_metrics() {
            Some(m) => m.clone(),
            None => evaluate(&model, &dataset.test, &dataset.vocabulary)?.0,
        };
        rows.push(AblationRow { mode, metrics, wall_s: record.wall_s, record });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let v = r.metrics.values();
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            r.mode, v[0], v[1], v[2], v[3], v[4], v[5], r.wall_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in AblationMode::ALL {
            assert_eq!(m.name().parse::<AblationMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("nope".parse::<AblationMode>().is_err());
    }

    #[test]
    fn ablation_weights_touch_one_knob() {
        let base = LossWeights::default();
        let wo_rel = AblationMode::WithoutRelation.weights(&base);
        assert_eq!((wo_rel.lambda1, wo_rel.lambda2, wo_rel.tau), (0.01, 0.0, 0.1));
        let wo_pred = AblationMode::WithoutPrediction.weights(&base);
        assert_eq!((wo_pred.lambda1, wo_pred.lambda2, wo_pred.tau), (0.0, 10.0, 0.1));
        assert_eq!(AblationMode::WithoutTau.weights(&base).tau, 0.0);
        assert_eq!(AblationMode::Full.weights(&base), base);
    }

    #[test]
    fn batch_split_rounds() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_split(), (4, 12));
        assert_eq!(TrainConfig { labeled_fraction: 1.0, ..c.clone() }.batch_split(), (16, 0));
    }

    #[test]
    fn learning_rate_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.learning_rate_at(1), 1e-4);
        assert_eq!(c.learning_rate_at(3), 1e-4);
        assert_eq!(c.learning_rate_at(4), 1e-4 * 0.8);
        assert_eq!(c.learning_rate_at(7), 1e-4 * 0.8f64.powi(2));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = TrainConfig::default();
        assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { labeled_fraction: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { steps_per_epoch: Some(0), ..c.clone() }.validate().is_err());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn plan_requires_pools() {
        let c = TrainConfig::default();
        assert!(plan_epoch(&c, 0, 10, 1).is_err());
        assert!(plan_epoch(&c, 10, 0, 1).is_err());
        let so = TrainConfig { mode: AblationMode::SupervisedOnly, ..c };
        assert!(plan_epoch(&so, 10, 0, 1).is_ok());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        assert_eq!(a.hash(), TrainConfig::default().hash());
        assert_ne!(a.hash(), TrainConfig { seed: 1, ..a.clone() }.hash());
    }
}
