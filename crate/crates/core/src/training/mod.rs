//! Objectives, AdaDelta, phase schedules, and the training loop.

mod adadelta;
pub mod checkpoint;
mod schedule;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

pub use adadelta::{AdaDeltaSlot, AdaDeltaState, DEFAULT_EPSILON, DEFAULT_RHO};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError,
};
pub use schedule::{Objective, Phase, Schedule};

use crate::corpus::{check_supervision, make_batches, Batch, CorpusError, SentencePair};
use crate::model::{
    forward_on_tape, forward_teacher_forced, DecoderTrace, InitOptions, ModelDims, ModelError,
    ModelParams, ParamId, ParamVars, Partition, TapeTrace, INIT_SCALE,
};
use crate::supervision::{
    alignment_distance, alignment_distance_var, SmoothingConfig, SupervisionError,
    SupervisionMatrix,
};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("phase {phase} needs supervision matrices but none were supplied")]
    MissingSupervision { phase: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const DEFAULT_BATCH_SIZE: usize = 80;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

/// Architecture sizes other than the vocabularies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConfig {
    pub embed: usize,
    pub hidden: usize,
    pub attn_hidden: usize,
    pub out_hidden: usize,
    pub target_embedding: Partition,
    pub init_scale: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            hidden: 64,
            attn_hidden: 64,
            out_hidden: 64,
            target_embedding: Partition::A,
            init_scale: INIT_SCALE,
        }
    }
}

impl ArchConfig {
    pub fn dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed: self.embed,
            hidden: self.hidden,
            attn_hidden: self.attn_hidden,
            out_hidden: self.out_hidden,
        }
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            scale: self.init_scale,
            target_embedding: self.target_embedding,
        }
    }

    /// Fresh parameters for the given vocabularies.
    pub fn init_params(
        &self,
        src_vocab: usize,
        tgt_vocab: usize,
        seed: u64,
    ) -> Result<ModelParams> {
        Ok(ModelParams::init_with(
            self.dims(src_vocab, tgt_vocab),
            seed,
            &self.init_options(),
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Schedule text, see [`Schedule::parse`].
    pub schedule: String,
    pub lambda: f64,
    /// `None` selects the simple transform.
    pub smoothing: Option<SmoothingConfig>,
    pub rho: f64,
    pub epsilon: f64,
    pub clip_norm: Option<f64>,
    pub workers: usize,
    pub bucket_by_length: bool,
    /// Stop a phase after this many epochs without dev-loss improvement.
    pub patience: Option<usize>,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: 10,
            seed: 1,
            schedule: "J".to_string(),
            lambda: 1.0,
            smoothing: Some(SmoothingConfig::default()),
            rho: DEFAULT_RHO,
            epsilon: DEFAULT_EPSILON,
            clip_norm: Some(DEFAULT_CLIP_NORM),
            workers: 1,
            bucket_by_length: true,
            patience: None,
            arch: ArchConfig::default(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}={value} is not a valid value")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(TrainError::Config(format!("{key}={value} is not on/off"))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.eq_ignore_ascii_case("none") || value.eq_ignore_ascii_case("off") {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

impl TrainConfig {
    pub fn parsed_schedule(&self) -> Result<Schedule> {
        Schedule::parse(&self.schedule, self.max_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        self.parsed_schedule()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad("clip_norm must be positive");
            }
        }
        if let Some(s) = &self.smoothing {
            s.validate()?;
        }
        if !(self.arch.init_scale >= 0.0 && self.arch.init_scale.is_finite()) {
            return bad("init_scale must be finite and non-negative");
        }
        for (name, v) in [
            ("embed", self.arch.embed),
            ("hidden", self.arch.hidden),
            ("attn_hidden", self.arch.attn_hidden),
            ("out_hidden", self.arch.out_hidden),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting; `Ok(false)` means the key is not a
    /// training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "schedule" => self.schedule = value.to_string(),
            "lambda" => self.lambda = parse_value(key, value)?,
            "smoothing" => {
                self.smoothing = if parse_bool(key, value)? {
                    Some(self.smoothing.unwrap_or_default())
                } else {
                    None
                }
            }
            "smooth_window" | "smooth_sigma" => {
                let mut s = self.smoothing.unwrap_or_default();
                if key == "smooth_window" {
                    s.window = parse_value(key, value)?;
                } else {
                    s.sigma = parse_value(key, value)?;
                }
                if self.smoothing.is_some() {
                    self.smoothing = Some(s);
                } else {
                    return Err(TrainError::Config(format!(
                        "{key} given while smoothing=off"
                    )));
                }
            }
            "rho" => self.rho = parse_value(key, value)?,
            "epsilon" => self.epsilon = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_optional(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "bucket_by_length" => self.bucket_by_length = parse_bool(key, value)?,
            "patience" => self.patience = parse_optional(key, value)?,
            "embed" => self.arch.embed = parse_value(key, value)?,
            "hidden" => self.arch.hidden = parse_value(key, value)?,
            "attn_hidden" => self.arch.attn_hidden = parse_value(key, value)?,
            "out_hidden" => self.arch.out_hidden = parse_value(key, value)?,
            "init_scale" => self.arch.init_scale = parse_value(key, value)?,
            "target_embedding_partition" => {
                self.arch.target_embedding = match value {
                    "A" | "a" => Partition::A,
                    "T" | "t" => Partition::T,
                    _ => return Err(TrainError::Config(format!("{key}={value} is not A or T"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// The fully resolved configuration as `key=value` lines.
    pub fn to_kv_lines(&self) -> Vec<String> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let mut out = vec![
            format!("batch_size={}", self.batch_size),
            format!("max_epochs={}", self.max_epochs),
            format!("seed={}", self.seed),
            format!("schedule={}", self.schedule),
            format!("lambda={}", self.lambda),
            format!(
                "smoothing={}",
                if self.smoothing.is_some() {
                    "on"
                } else {
                    "off"
                }
            ),
        ];
        if let Some(s) = &self.smoothing {
            out.push(format!("smooth_window={}", s.window));
            out.push(format!("smooth_sigma={}", s.sigma));
        }
        out.extend([
            format!("rho={}", self.rho),
            format!("epsilon={}", self.epsilon),
            format!("clip_norm={}", opt(self.clip_norm.map(|c| c.to_string()))),
            format!("workers={}", self.workers),
            format!("bucket_by_length={}", self.bucket_by_length),
            format!("patience={}", opt(self.patience.map(|p| p.to_string()))),
            format!("embed={}", self.arch.embed),
            format!("hidden={}", self.arch.hidden),
            format!("attn_hidden={}", self.arch.attn_hidden),
            format!("out_hidden={}", self.arch.out_hidden),
            format!("init_scale={}", self.arch.init_scale),
            format!(
                "target_embedding_partition={}",
                self.arch.target_embedding.as_str()
            ),
        ]);
        out
    }
}

/// Splits config text into `(line, key, value)`; blank lines and `#`
/// comments are skipped, duplicate keys rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(TrainError::ConfigLine {
                line: n + 1,
                msg: format!("{line:?} is not key=value"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(TrainError::ConfigLine {
                line: n + 1,
                msg: "empty key".into(),
            });
        }
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(TrainError::ConfigLine {
                line: n + 1,
                msg: format!("duplicate key {k}"),
            });
        }
        out.push((n + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Training pairs with optional line-aligned supervision.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub pairs: Vec<SentencePair>,
    pub supervision: Option<Vec<SupervisionMatrix>>,
}

impl TrainData {
    pub fn new(
        pairs: Vec<SentencePair>,
        supervision: Option<Vec<SupervisionMatrix>>,
    ) -> Result<Self> {
        if let Some(s) = &supervision {
            check_supervision(&pairs, s)?;
        }
        Ok(Self { pairs, supervision })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn require_sup(
    sup: Option<&SupervisionMatrix>,
    kind: Objective,
) -> Result<Option<&SupervisionMatrix>> {
    if kind.needs_supervision() && sup.is_none() {
        return Err(TrainError::MissingSupervision {
            phase: kind.as_str().to_string(),
        });
    }
    Ok(sup)
}

/// Value-level loss of one teacher-forced trace.
///
/// `TRANSLATION` is `−Σ log p`, `ALIGNMENT` is `λ·d`, `JOINT` their sum.
pub fn sentence_loss(
    trace: &DecoderTrace,
    sup: Option<&SupervisionMatrix>,
    kind: Objective,
    lambda: f64,
) -> Result<f64> {
    let sup = require_sup(sup, kind)?;
    let translation = -trace.log_likelihood();
    let distance =
        || -> Result<f64> { Ok(alignment_distance(&trace.attention, sup.expect("checked"))?) };
    Ok(match kind {
        Objective::Translation => translation,
        Objective::Alignment => lambda * distance()?,
        Objective::Joint if lambda == 0.0 => translation,
        Objective::Joint => translation + lambda * distance()?,
    })
}

/// Loss terms recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub translation: Var,
    pub distance: Option<Var>,
    pub loss: Var,
}

/// Tape-level loss. With `λ = 0` the joint loss is exactly the translation
/// loss node, so the two objectives produce identical gradients.
pub fn sentence_loss_on_tape(
    tape: &mut Tape,
    trace: &TapeTrace,
    sup: Option<&SupervisionMatrix>,
    kind: Objective,
    lambda: f64,
) -> Result<LossVars> {
    let sup = require_sup(sup, kind)?;
    let mut ll = trace.token_log_probs[0];
    for &lp in &trace.token_log_probs[1..] {
        ll = tape.add(ll, lp)?;
    }
    let translation = tape.scale(ll, -1.0)?;
    let wants_distance = match kind {
        Objective::Translation => false,
        Objective::Alignment => true,
        Objective::Joint => lambda != 0.0,
    };
    let distance = if wants_distance {
        Some(alignment_distance_var(
            tape,
            trace.attention,
            sup.expect("checked"),
        )?)
    } else {
        None
    };
    let loss = match (kind, distance) {
        (Objective::Translation, _) | (Objective::Joint, None) => translation,
        (Objective::Alignment, Some(d)) => tape.scale(d, lambda)?,
        (Objective::Joint, Some(d)) => {
            let w = tape.scale(d, lambda)?;
            tape.add(translation, w)?
        }
        (Objective::Alignment, None) => unreachable!("alignment always has a distance"),
    };
    Ok(LossVars {
        translation,
        distance,
        loss,
    })
}

struct SentenceGrad {
    grads: Vec<Tensor>,
    translation: f64,
    distance: Option<f64>,
}

fn sentence_gradient(
    params: &ModelParams,
    ids: &[ParamId],
    phase: &Phase,
    pair: &SentencePair,
    sup: Option<&SupervisionMatrix>,
    lambda: f64,
) -> Result<SentenceGrad> {
    let mut tape = Tape::new();
    let pv = ParamVars::load(&mut tape, params, Some(phase.trainable));
    let trace = forward_on_tape(&mut tape, &pv, &pair.src_ids, None, &pair.tgt_ids)?;
    let terms = sentence_loss_on_tape(&mut tape, &trace, sup, phase.objective, lambda)?;
    let mut g = tape.backward(terms.loss)?;
    let grads = ids
        .iter()
        .map(|&id| {
            g.take(pv.get(id))
                .unwrap_or_else(|| Tensor::zeros(params.get(id).shape()))
        })
        .collect();
    let distance = match (terms.distance, sup) {
        (Some(d), _) => Some(tape.value(d).item()),
        (None, Some(s)) => Some(alignment_distance(tape.value(trace.attention), s)?),
        (None, None) => None,
    };
    Ok(SentenceGrad {
        grads,
        translation: tape.value(terms.translation).item(),
        distance,
    })
}

/// Summed loss terms and mean gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    /// Gradient of the mean loss, one tensor per trainable id.
    pub grads: Vec<Tensor>,
    pub translation_sum: f64,
    pub distance_sum: Option<f64>,
    pub sentences: usize,
}

/// Gradient of the mean per-sentence loss. Per-sentence gradients are
/// merged in batch order, so the result does not depend on `pool`.
pub fn batch_gradient(
    params: &ModelParams,
    ids: &[ParamId],
    phase: &Phase,
    batch: &Batch,
    lambda: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<BatchGradient> {
    let sup_of = |k: usize| batch.supervision.as_ref().map(|s| &s[k]);
    let one = |k: usize| sentence_gradient(params, ids, phase, &batch.pairs[k], sup_of(k), lambda);
    let inv = 1.0 / batch.len() as f64;
    let mut acc: Vec<Tensor> = ids
        .iter()
        .map(|&id| Tensor::zeros(params.get(id).shape()))
        .collect();
    let mut translation_sum = 0.0;
    let mut distance_sum = batch.supervision.as_ref().map(|_| 0.0);
    let mut merge = |sg: SentenceGrad| {
        for (a, mut g) in acc.iter_mut().zip(sg.grads) {
            g.scale(inv);
            a.add_assign(&g);
        }
        translation_sum += sg.translation;
        if let (Some(total), Some(d)) = (distance_sum.as_mut(), sg.distance) {
            *total += d;
        }
    };
    match pool {
        Some(pool) => {
            let all: Vec<Result<SentenceGrad>> =
                pool.install(|| (0..batch.len()).into_par_iter().map(one).collect());
            for sg in all {
                merge(sg?);
            }
        }
        None => {
            for k in 0..batch.len() {
                merge(one(k)?);
            }
        }
    }
    Ok(BatchGradient {
        grads: acc,
        translation_sum,
        distance_sum,
        sentences: batch.len(),
    })
}

/// Rescales `grads` to global norm `max_norm` when larger; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            g.scale(f);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based across the whole schedule.
    pub epoch: usize,
    pub phase: String,
    /// Mean per-sentence `−Σ log p`.
    pub translation_loss: f64,
    /// Mean per-sentence distance, when supervision is available.
    pub distance: Option<f64>,
    pub seconds: f64,
    pub skipped_batches: usize,
    pub dev_loss: Option<f64>,
}

impl EpochReport {
    /// `epoch  phase  translation  distance  seconds`, tab-separated.
    pub fn log_line(&self) -> String {
        let d = self
            .distance
            .map_or_else(|| "NA".to_string(), |d| format!("{d:.6}"));
        format!(
            "{}\t{}\t{:.6}\t{}\t{:.3}",
            self.epoch, self.phase, self.translation_loss, d, self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs: Vec<EpochReport>,
    pub skipped_batches: usize,
    pub stopped_early: bool,
}

/// Mean teacher-forced losses over a data set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalLoss {
    pub translation: f64,
    pub distance: Option<f64>,
}

pub fn evaluate_loss(params: &ModelParams, data: &TrainData) -> Result<EvalLoss> {
    let mut t = 0.0;
    let mut d = data.supervision.as_ref().map(|_| 0.0);
    for (k, pair) in data.pairs.iter().enumerate() {
        let trace = forward_teacher_forced(pair, params)?;
        t -= trace.log_likelihood();
        if let (Some(total), Some(sup)) = (d.as_mut(), data.supervision.as_ref()) {
            *total += alignment_distance(&trace.attention, &sup[k])?;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(EvalLoss {
        translation: t / n,
        distance: d.map(|v| v / n),
    })
}

fn make_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| TrainError::Config(format!("cannot start {workers} workers: {e}")))
}

fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(Tensor::is_finite)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains one phase with a fresh optimizer. Tensors outside
/// `phase.trainable` are never written. `epoch_offset` numbers epochs
/// across a schedule.
pub fn train_phase(
    params: &mut ModelParams,
    data: &TrainData,
    phase: &Phase,
    cfg: &TrainConfig,
    epoch_offset: usize,
    dev: Option<&TrainData>,
) -> Result<PhaseReport> {
    if phase.objective.needs_supervision() && phase.epochs > 0 && data.supervision.is_none() {
        return Err(TrainError::MissingSupervision {
            phase: phase.label(),
        });
    }
    let ids = params.partition_filter(phase.trainable);
    let mut opt = AdaDeltaState::new(
        cfg.rho,
        cfg.epsilon,
        ids.iter().map(|&id| params.get(id).shape()),
    );
    let pool = make_pool(cfg.workers)?;
    let mut report = PhaseReport {
        phase: *phase,
        epochs: Vec::new(),
        skipped_batches: 0,
        stopped_early: false,
    };
    let mut best_dev = f64::INFINITY;
    let mut stale = 0;
    for e in 0..phase.epochs {
        let epoch = epoch_offset + e + 1;
        let start = Instant::now();
        let batches = make_batches(
            &data.pairs,
            data.supervision.as_deref(),
            cfg.batch_size,
            cfg.bucket_by_length,
            epoch_seed(cfg.seed, epoch),
        );
        let mut t_sum = 0.0;
        let mut d_sum = data.supervision.as_ref().map(|_| 0.0);
        let mut seen = 0;
        let mut skipped = 0;
        for batch in &batches {
            let bg = match batch_gradient(params, &ids, phase, batch, cfg.lambda, pool.as_ref()) {
                Ok(bg) => bg,
                Err(TrainError::Tensor(TensorError::NonFinite { op }))
                | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op }))) => {
                    log::warn!("epoch {epoch}: non-finite value in {op}, batch skipped");
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut grads = bg.grads;
            if !all_finite(&grads) {
                log::warn!("epoch {epoch}: non-finite gradient, batch skipped");
                skipped += 1;
                continue;
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            for (k, (&id, g)) in ids.iter().zip(&grads).enumerate() {
                opt.update(k, params.get_mut(id), g);
            }
            t_sum += bg.translation_sum;
            if let (Some(total), Some(d)) = (d_sum.as_mut(), bg.distance_sum) {
                *total += d;
            }
            seen += bg.sentences;
        }
        let n = seen.max(1) as f64;
        let dev_loss = match dev {
            Some(dv) => Some(evaluate_loss(params, dv)?.translation),
            None => None,
        };
        let er = EpochReport {
            epoch,
            phase: phase.label(),
            translation_loss: t_sum / n,
            distance: d_sum.map(|d| d / n),
            seconds: start.elapsed().as_secs_f64(),
            skipped_batches: skipped,
            dev_loss,
        };
        log::info!("{}", er.log_line());
        report.skipped_batches += skipped;
        report.epochs.push(er);
        if let (Some(p), Some(dl)) = (cfg.patience, dev_loss) {
            if dl < best_dev {
                best_dev = dl;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p {
                    log::info!(
                        "dev loss stalled for {p} epochs, ending phase {}",
                        phase.label()
                    );
                    report.stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub phases: Vec<PhaseReport>,
}

impl ScheduleReport {
    pub fn last_epoch(&self) -> Option<&EpochReport> {
        self.phases.iter().rev().find_map(|p| p.epochs.last())
    }
}

/// Path of the snapshot written after phase `k` (1-based).
pub fn phase_checkpoint_path(path: &Path, k: usize) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".phase{k}"));
    PathBuf::from(s)
}

/// Runs every phase in order. When `checkpoint` is given, a snapshot is
/// written after each phase and the final model is written to the path.
pub fn run_schedule(
    params: &mut ModelParams,
    data: &TrainData,
    cfg: &TrainConfig,
    dev: Option<&TrainData>,
    checkpoint: Option<&Path>,
) -> Result<ScheduleReport> {
    cfg.validate()?;
    let schedule = cfg.parsed_schedule()?;
    if let Some(p) = schedule
        .phases
        .iter()
        .find(|p| p.epochs > 0 && p.objective.needs_supervision())
    {
        if data.supervision.is_none() {
            return Err(TrainError::MissingSupervision { phase: p.label() });
        }
    }
    if let Some(s) = &data.supervision {
        check_supervision(&data.pairs, s)?;
    }
    if data.is_empty() {
        return Err(TrainError::Config("no training pairs".into()));
    }
    let mut phases = Vec::with_capacity(schedule.phases.len());
    let mut offset = 0;
    for (k, phase) in schedule.phases.iter().enumerate() {
        log::info!("phase {}/{}: {phase}", k + 1, schedule.phases.len());
        let r = train_phase(params, data, phase, cfg, offset, dev)?;
        offset += r.epochs.len();
        phases.push(r);
        if let Some(path) = checkpoint {
            let mut meta = BTreeMap::new();
            meta.insert("phases_completed".to_string(), (k + 1).to_string());
            meta.insert("epochs_completed".to_string(), offset.to_string());
            save_checkpoint(params, &meta, &phase_checkpoint_path(path, k + 1))?;
            if k + 1 == schedule.phases.len() {
                save_checkpoint(params, &meta, path)?;
            }
        }
    }
    if !params.is_finite() {
        return Err(TrainError::Config("parameters became non-finite".into()));
    }
    Ok(ScheduleReport { phases })
}

/// Tab-separated training log for a whole schedule.
pub fn format_log(report: &ScheduleReport) -> String {
    let mut s = String::new();
    for p in &report.phases {
        for e in &p.epochs {
            let _ = writeln!(s, "{}", e.log_line());
        }
    }
    s
}
