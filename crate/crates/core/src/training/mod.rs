//! Minibatch SGD with a halving learning-rate schedule, frozen per-sequence
//! dropout, L2 on weight matrices, auxiliary pretraining of the code
//! embeddings, and model selection on validation loss.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatientRecord;
use crate::embedding::{CodeMask, EmbeddingParams};
use crate::error::{Error, Result};
use crate::gradients::{loss_and_grad, GradStore};
use crate::linalg::Rng;
use crate::network::{sequence_loss, task_admissions, DropoutMasks, Model, ModelConfig, Task};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainState, CHECKPOINT_VERSION};

/// Stream ids for [`Rng::derive`]. Initialisation has its own stream so a
/// pretrained model and a cold-start model with the same seed start from
/// identical parameters.
pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;
pub const PRETRAIN_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_floor: f64,
    pub n_epoch_max: usize,
    pub n_wait_init: usize,
    pub n_wait_cap: usize,
    pub n_wait_step: usize,
    pub l2_lambda: f64,
    /// Keep-probabilities: codes of an admission.
    pub keep_code: f64,
    /// Pooled `x_t` and `p_t`.
    pub keep_feat: f64,
    /// Input of the risk head and of the label heads.
    pub keep_in: f64,
    /// Hidden layer of the risk head.
    pub keep_hidden: f64,
    pub seed: u64,
    /// Worker threads for per-sequence gradients within a batch.
    pub threads: usize,
    /// Rescale the batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// An epoch improves when its loss is below the best by more than this.
    pub improvement_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr_init: 0.01,
            lr_floor: 1e-4,
            n_epoch_max: 200,
            n_wait_init: 5,
            n_wait_cap: 15,
            n_wait_step: 2,
            l2_lambda: 1e-4,
            keep_code: 0.9,
            keep_feat: 0.9,
            keep_in: 0.8,
            keep_hidden: 0.8,
            seed: 1,
            threads: 1,
            clip_norm: None,
            improvement_tol: 1e-6,
        }
    }
}

impl TrainConfig {
    /// No dropout at any site.
    pub fn without_dropout(self) -> Self {
        Self { keep_code: 1.0, keep_feat: 1.0, keep_in: 1.0, keep_hidden: 1.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_init > 0.0 && self.lr_floor > 0.0 && self.lr_floor < self.lr_init) {
            return bad(format!("need 0 < lr_floor < lr_init, got {} and {}", self.lr_floor, self.lr_init));
        }
        if self.n_wait_init == 0 || self.n_wait_cap < self.n_wait_init {
            return bad("need 0 < n_wait_init <= n_wait_cap".into());
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return bad("l2_lambda must be finite and non-negative".into());
        }
        for (name, p) in [
            ("keep_code", self.keep_code),
            ("keep_feat", self.keep_feat),
            ("keep_in", self.keep_in),
            ("keep_hidden", self.keep_hidden),
        ] {
            check_keep(p).map_err(|_| Error::Config(format!("{name} must lie in (0, 1], got {p}")))?;
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive".into());
        }
        if !(self.improvement_tol >= 0.0) {
            return bad("improvement_tol must be non-negative".into());
        }
        Ok(())
    }
}

fn check_keep(keep: f64) -> Result<()> {
    if keep > 0.0 && keep <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("keep probability must lie in (0, 1], got {keep}")))
    }
}

/// Learning-rate schedule: after `n_wait` consecutive epochs without a new
/// best training loss the rate halves and the patience grows by
/// `n_wait_step`, capped at `n_wait_cap`. Training stops once the rate
/// drops below the floor or the epoch budget is spent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub n_wait: usize,
    /// Consecutive non-improving epochs since the last reset.
    pub waited: usize,
    pub epoch: usize,
    #[serde(with = "checkpoint::extended_f64")]
    pub best_loss: f64,
    lr_floor: f64,
    n_epoch_max: usize,
    n_wait_cap: usize,
    n_wait_step: usize,
    improvement_tol: f64,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_init,
            n_wait: cfg.n_wait_init,
            waited: 0,
            epoch: 0,
            best_loss: f64::INFINITY,
            lr_floor: cfg.lr_floor,
            n_epoch_max: cfg.n_epoch_max,
            n_wait_cap: cfg.n_wait_cap,
            n_wait_step: cfg.n_wait_step,
            improvement_tol: cfg.improvement_tol,
        }
    }

    /// Records one finished epoch's training loss; returns whether it improved.
    pub fn observe(&mut self, loss: f64) -> bool {
        let improved = loss < self.best_loss - self.improvement_tol;
        if improved {
            self.best_loss = loss;
        }
        self.step(improved);
        improved
    }

    /// Advances one epoch given whether it improved.
    pub fn step(&mut self, improved: bool) {
        self.epoch += 1;
        if improved {
            self.waited = 0;
            return;
        }
        self.waited += 1;
        if self.waited >= self.n_wait {
            self.lr /= 2.0;
            self.n_wait = (self.n_wait + self.n_wait_step).min(self.n_wait_cap);
            self.waited = 0;
        }
    }

    pub fn finished(&self) -> bool {
        self.lr < self.lr_floor || self.epoch >= self.n_epoch_max
    }
}

/// Functional form of [`LrSchedule::step`].
pub fn lr_schedule_step(mut state: LrSchedule, improved: bool) -> LrSchedule {
    state.step(improved);
    state
}

/// A `len`-vector of `0` or `1/keep` entries, or `None` when `keep == 1`.
pub fn dropout_mask(len: usize, keep: f64, rng: &mut Rng) -> Result<Option<Vec<f64>>> {
    check_keep(keep)?;
    if keep == 1.0 {
        return Ok(None);
    }
    let scale = 1.0 / keep;
    Ok(Some((0..len).map(|_| if rng.bernoulli(keep) { scale } else { 0.0 }).collect()))
}

/// Inverted dropout: at train time each entry survives with probability
/// `keep` and is scaled by `1/keep`; at eval time the input is returned as is.
pub fn apply_dropout(values: &[f64], keep: f64, rng: &mut Rng, train: bool) -> Result<Vec<f64>> {
    check_keep(keep)?;
    let mut out = values.to_vec();
    if train {
        if let Some(mask) = dropout_mask(values.len(), keep, rng)? {
            out.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
        }
    }
    Ok(out)
}

/// Draws every mask one sequence needs for `task`. Recurrent connections are
/// never dropped.
pub fn sample_masks(
    record: &PatientRecord,
    task: Task,
    config: &ModelConfig,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<DropoutMasks> {
    let admissions = task_admissions(record, task);
    let mut masks = DropoutMasks::default();
    for adm in admissions {
        masks.codes.push((cfg.keep_code < 1.0).then(|| CodeMask::sample(adm, cfg.keep_code, rng)));
        masks.features_x.push(dropout_mask(config.embed_dim, cfg.keep_feat, rng)?);
        let p = if config.uses_interventions() { dropout_mask(config.embed_dim, cfg.keep_feat, rng)? } else { None };
        masks.features_p.push(p);
    }
    if task == Task::Risk {
        masks.head_input = dropout_mask(config.pooled_dim(), cfg.keep_in, rng)?;
        if config.head_dim > 0 {
            masks.head_hidden = dropout_mask(config.head_dim, cfg.keep_hidden, rng)?;
        }
    } else {
        for _ in admissions {
            masks.label_input.push(dropout_mask(config.hidden_dim, cfg.keep_in, rng)?);
        }
    }
    Ok(masks)
}

fn per_sequence(
    pool: Option<&rayon::ThreadPool>,
    model: &Model,
    batch: &[(&PatientRecord, DropoutMasks)],
    task: Task,
) -> Vec<Result<(f64, GradStore)>> {
    let one = |(r, m): &(&PatientRecord, DropoutMasks)| loss_and_grad(model, r, task, Some(m));
    match pool {
        // `collect` on an indexed parallel iterator keeps input order, so the
        // reduction below is the same sum whatever the thread count.
        Some(pool) => pool.install(|| batch.par_iter().map(one).collect()),
        None => batch.iter().map(one).collect(),
    }
}

fn thread_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// `θ ← θ − lr (g + l2 θ)` with L2 on weight matrices only.
fn apply_update(model: &mut Model, grads: &GradStore, lr: f64, l2: f64) {
    for (p, g) in model.params.tensors_mut().into_iter().zip(grads.params.tensors()) {
        let decay = if p.is_weight { l2 } else { 0.0 };
        p.data.iter_mut().zip(g.data).for_each(|(w, g)| *w -= lr * (g + decay * *w));
    }
}

/// One pass over `train_set` in shuffled minibatches. Returns the mean
/// per-sequence loss under the sampled dropout.
pub fn sgd_epoch(
    train_set: &[PatientRecord],
    model: &mut Model,
    cfg: &TrainConfig,
    task: Task,
    lr: f64,
    epoch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    cfg.validate()?;
    let pool = thread_pool(cfg.threads)?;
    sgd_epoch_in(pool.as_ref(), train_set, model, cfg, task, lr, epoch, rng)
}

#[allow(clippy::too_many_arguments)]
fn sgd_epoch_in(
    pool: Option<&rayon::ThreadPool>,
    train_set: &[PatientRecord],
    model: &mut Model,
    cfg: &TrainConfig,
    task: Task,
    lr: f64,
    epoch: usize,
    rng: &mut Rng,
) -> Result<f64> {
    if train_set.is_empty() {
        return Err(Error::TooFewRecords { needed: 1, got: 0 });
    }
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    rng.shuffle(&mut order);
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        // Masks are drawn serially so the stream does not depend on threads.
        let mut batch = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let r = &train_set[i];
            batch.push((r, sample_masks(r, task, &model.config, cfg, rng)?));
        }
        let mut grads = GradStore::zeros_like(&model.params);
        let mut batch_loss = 0.0;
        for res in per_sequence(pool, model, &batch, task) {
            let (loss, g) = res?;
            batch_loss += loss;
            grads.add_assign(&g);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: b,
                lr,
                patients: batch.iter().map(|(r, _)| r.patient_id.clone()).collect(),
            });
        }
        grads.scale(1.0 / chunk.len() as f64);
        if let Some(max) = cfg.clip_norm {
            let norm = grads.l2_norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        apply_update(model, &grads, lr, cfg.l2_lambda);
        total += batch_loss;
    }
    Ok(total / train_set.len() as f64)
}

/// Mean per-sequence loss without dropout.
pub fn mean_loss(model: &Model, records: &[PatientRecord], task: Task) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::TooFewRecords { needed: 1, got: 0 });
    }
    let mut total = 0.0;
    for r in records {
        total += sequence_loss(model, r, task, None)?;
    }
    Ok(total / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Rate and patience in effect during the epoch.
    pub lr: f64,
    pub n_wait: usize,
}

impl EpochLog {
    /// `epoch train_loss valid_loss lr n_wait`, floats in shortest
    /// round-trip form.
    pub fn line(&self) -> String {
        format!("{} {} {} {} {}", self.epoch, self.train_loss, self.valid_loss, self.lr, self.n_wait)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Parameters after the final epoch.
    pub last: Model,
    pub log: Vec<EpochLog>,
    pub state: TrainState,
}

/// Trains `model` on `task` until the schedule finishes. Epoch 0 in the log
/// is the untrained model; selection considers it too, so a run that only
/// gets worse returns its starting point. Each log line is also written to
/// `metrics` when given.
pub fn train(
    model: Model,
    train_set: &[PatientRecord],
    valid_set: &[PatientRecord],
    task: Task,
    cfg: &TrainConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    let pool = thread_pool(cfg.threads)?;
    let mut rng = Rng::derive(cfg.seed, TRAIN_STREAM);
    let mut schedule = LrSchedule::new(cfg);
    let mut model = model;
    let valid = |m: &Model| if valid_set.is_empty() { Ok(f64::NAN) } else { mean_loss(m, valid_set, task) };

    let v0 = valid(&model)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: mean_loss(&model, train_set, task)?,
        valid_loss: v0,
        lr: schedule.lr,
        n_wait: schedule.n_wait,
    }];
    let mut best = (model.clone(), 0, v0);
    let emit = |entry: &EpochLog, metrics: &mut Option<&mut dyn Write>| -> Result<()> {
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{}", entry.line()).map_err(|e| Error::io("metrics log", e))?;
        }
        Ok(())
    };
    emit(&log[0], &mut metrics)?;

    while !schedule.finished() {
        let (lr, n_wait) = (schedule.lr, schedule.n_wait);
        let epoch = schedule.epoch + 1;
        let train_loss = sgd_epoch_in(pool.as_ref(), train_set, &mut model, cfg, task, lr, epoch, &mut rng)?;
        schedule.observe(train_loss);
        let valid_loss = valid(&model)?;
        // NaN validation (no validation set) selects the last epoch.
        if valid_loss < best.2 || valid_loss.is_nan() {
            best = (model.clone(), epoch, valid_loss);
        }
        let entry = EpochLog { epoch, train_loss, valid_loss, lr, n_wait };
        emit(&entry, &mut metrics)?;
        log.push(entry);
    }
    let state = TrainState { epoch: schedule.epoch, schedule, rng, best_valid_loss: best.2 };
    Ok(TrainOutcome { best: best.0, best_epoch: best.1, best_valid_loss: best.2, last: model, log, state })
}

/// Fresh parameters for `config` from the initialisation stream of `seed`.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model> {
    Model::new(config, &mut Rng::derive(seed, INIT_STREAM))
}

/// Trains the next-diagnosis and intervention heads jointly and returns the
/// learned code embeddings; everything else is discarded. The pretraining
/// model starts from the same initialisation as [`init_model`], so zero
/// epochs returns the cold-start embeddings.
pub fn pretrain_auxiliary(
    config: &ModelConfig,
    train_set: &[PatientRecord],
    valid_set: &[PatientRecord],
    cfg: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<EmbeddingParams> {
    let model = init_model(config.clone(), cfg.seed)?;
    if cfg.n_epoch_max == 0 {
        return Ok(model.params.embedding);
    }
    let cfg = TrainConfig { seed: cfg.seed ^ PRETRAIN_STREAM.rotate_left(32), ..cfg.clone() };
    let out = train(model, train_set, valid_set, Task::Auxiliary, &cfg, metrics)?;
    Ok(out.best.params.embedding)
}

/// A model initialised as [`init_model`] with its code embeddings replaced.
pub fn with_embeddings(config: ModelConfig, seed: u64, embedding: EmbeddingParams) -> Result<Model> {
    let mut model = init_model(config, seed)?;
    let want = &model.params.embedding;
    let shape = |m: &crate::linalg::Matrix| (m.rows(), m.cols());
    if shape(&embedding.diagnosis) != shape(&want.diagnosis)
        || shape(&embedding.intervention) != shape(&want.intervention)
    {
        return Err(Error::Shape(format!(
            "pretrained embeddings are {:?} and {:?}, model needs {:?} and {:?}",
            shape(&embedding.diagnosis),
            shape(&embedding.intervention),
            shape(&want.diagnosis),
            shape(&want.intervention)
        )));
    }
    model.params.embedding = embedding;
    Ok(model)
}
