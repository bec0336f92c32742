use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on_tape, report_of, LossReport, LossWeights};
use super::metrics::{MetricAccumulator, MetricReport};
use crate::error::{Error, Result};
use crate::model::{distributions, Batch, DecodeModes, Forecaster, PointMode, Sample};
use crate::numeric::layers::apply_buffer_updates;
use crate::numeric::{Adam, Checkpoint, CosineWarmRestarts, ParamStore, Session};

/// Stream offsets separating the per-epoch shuffle and noise generators.
const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First restart period in epochs.
    pub t0: f64,
    pub t_mult: f64,
    /// Epochs without validation NLL improvement before stopping; 0 never
    /// stops early.
    pub patience: usize,
    pub loss_weights: LossWeights,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub point_mode: PointMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            epochs: 50,
            t0: 10.0,
            t_mult: 2.0,
            patience: 10,
            loss_weights: LossWeights::default(),
            grad_clip: 10.0,
            point_mode: PointMode::TopMode,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        CosineWarmRestarts::new(self.lr, self.t0, self.t_mult).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let w = &self.loss_weights;
        if !(w.nll >= 0.0 && w.maneuver >= 0.0 && w.nll.is_finite() && w.maneuver.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossReport,
    pub val: Option<LossReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    seed: u64,
    epoch: usize,
    adam_step: u64,
    best_val: Option<f64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
    stopped: bool,
    history: Vec<EpochRecord>,
    train: TrainConfig,
}

/// Mini-batch Adam training with cosine warm restarts, early stopping on
/// validation NLL and resumable checkpoints.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Forecaster,
    pub config: TrainConfig,
    adam: Adam,
    schedule: CosineWarmRestarts,
    state: TrainerState,
    best_params: Option<ParamStore>,
    /// Learning rate of every optimizer step taken by this instance.
    pub lr_trace: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn make_batch(samples: &[Sample], order: &[usize], no_rss: bool) -> Result<Batch> {
    let refs: Vec<&Sample> = order.iter().map(|&i| &samples[i]).collect();
    Batch::new(&refs, no_rss)
}

impl Trainer {
    pub fn new(model: Forecaster, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = CosineWarmRestarts::new(config.lr, config.t0, config.t_mult)?;
        Ok(Self {
            adam: Adam::new(&model.params),
            model,
            schedule,
            state: TrainerState {
                seed,
                epoch: 0,
                adam_step: 0,
                best_val: None,
                best_epoch: None,
                bad_epochs: 0,
                stopped: false,
                history: Vec::new(),
                train: config.clone(),
            },
            config,
            best_params: None,
            lr_trace: Vec::new(),
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam.step
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn stopped_early(&self) -> bool {
        self.state.stopped
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.state.best_epoch
    }

    /// Learning rate for batch `index` of `n_batches` in `epoch`.
    pub fn lr_at(&self, epoch: usize, index: usize, n_batches: usize) -> f64 {
        self.schedule.lr_at(epoch as f64 + index as f64 / n_batches as f64)
    }

    fn n_batches(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    fn clip_gradients(&mut self) {
        let limit = self.config.grad_clip;
        if limit <= 0.0 {
            return;
        }
        let norm = self
            .model
            .params
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > limit {
            let k = limit / norm;
            for p in self.model.params.iter_mut() {
                for g in p.grad.data_mut() {
                    *g *= k;
                }
            }
        }
    }

    /// One pass over `train` in a seed- and epoch-determined order.
    pub fn train_epoch(&mut self, train: &[Sample]) -> Result<LossReport> {
        if train.is_empty() {
            return Err(Error::EmptyInput("empty training split".into()));
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.state.seed, SHUFFLE_STREAM + epoch as u64));
        let mut noise = stream_rng(self.state.seed, NOISE_STREAM + epoch as u64);
        let n_batches = self.n_batches(train.len());
        let no_rss = self.model.config.ablation.no_rss;
        let weights = self.config.loss_weights;
        let snapshot = (self.model.params.clone(), self.adam.clone());
        let mut reports = Vec::with_capacity(n_batches);

        for (i, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = make_batch(train, chunk, no_rss)?;
            let lr = self.lr_at(epoch, i, n_batches);
            let result = self.optimizer_step(&batch, lr, &mut noise);
            match result {
                Ok(report) => {
                    reports.push(report);
                    self.lr_trace.push(lr);
                }
                Err(e) => {
                    (self.model.params, self.adam) = snapshot;
                    return Err(Error::Training(format!(
                        "diverged in epoch {epoch}, batch {i}: {e}; parameters restored to the end of epoch {}",
                        epoch as i64 - 1
                    )));
                }
            }
        }
        Ok(LossReport::mean(&reports, &weights))
    }

    fn optimizer_step(&mut self, batch: &Batch, lr: f64, noise: &mut ChaCha8Rng) -> Result<LossReport> {
        let weights = self.config.loss_weights;
        let (report, tape, grads, updates) = {
            let mut s = Session::new(&self.model.params, true, noise);
            let out = self.model.forward(&mut s, batch, DecodeModes::Given(&batch.labels))?;
            let vars = loss_on_tape(&mut s, &out, batch, &weights)?;
            let report = report_of(&s, &vars, &weights, batch.size);
            if !report.is_finite() {
                return Err(Error::Training(format!("non-finite loss {report:?}")));
            }
            let grads = s.tape.backward(vars.total)?;
            let updates = s.take_buffer_updates();
            (report, s.tape, grads, updates)
        };
        self.model.params.zero_grad();
        tape.accumulate_param_grads(&grads, &mut self.model.params);
        self.clip_gradients();
        self.adam.step(&mut self.model.params, lr)?;
        apply_buffer_updates(&mut self.model.params, updates);
        Ok(report)
    }

    /// Evaluation-mode loss over `samples`, decoding the true modes.
    pub fn validate(&self, samples: &[Sample]) -> Result<LossReport> {
        validation_loss(&self.model, samples, &self.config)
    }

    /// Trains until `config.epochs` epochs are complete or early stopping
    /// fires. `on_epoch` runs after every epoch (checkpointing, logging).
    pub fn fit(
        &mut self,
        train: &[Sample],
        val: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<()> {
        while self.state.epoch < self.config.epochs && !self.state.stopped {
            let train_report = self.train_epoch(train)?;
            let val_report = if val.is_empty() { None } else { Some(self.validate(val)?) };
            let record = EpochRecord {
                epoch: self.state.epoch,
                train: train_report,
                val: val_report,
            };
            self.state.epoch += 1;
            self.state.adam_step = self.adam.step;
            self.state.history.push(record.clone());
            if let (Some(v), true) = (val_report, self.config.patience > 0) {
                if self.state.best_val.is_none_or(|b| v.nll < b) {
                    self.state.best_val = Some(v.nll);
                    self.state.best_epoch = Some(record.epoch);
                    self.state.bad_epochs = 0;
                    self.best_params = Some(self.model.params.clone());
                } else {
                    self.state.bad_epochs += 1;
                    if self.state.bad_epochs >= self.config.patience {
                        self.state.stopped = true;
                    }
                }
            }
            log::info!(
                "epoch {} train total {:.4} mse {:.4} nll {:.4}{}",
                record.epoch,
                record.train.total,
                record.train.mse,
                record.train.nll,
                record.val.map(|v| format!(" val nll {:.4}", v.nll)).unwrap_or_default()
            );
            on_epoch(self, &record)?;
        }
        Ok(())
    }

    /// The model with the best validation weights when early stopping is
    /// active, otherwise the current one.
    pub fn best_model(&self) -> Forecaster {
        let mut model = self.model.clone();
        if let Some(best) = &self.best_params {
            model.params = best.clone();
        }
        model
    }

    /// Everything needed to continue training bit-for-bit.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "trainer": serde_json::to_value(&self.state)? });
        let mut ckpt = self.model.to_checkpoint(meta)?;
        for (k, (_, p)) in self.model.params.iter().enumerate() {
            ckpt.push(format!("adam.m/{}", p.name), self.adam.first_moment[k].clone());
            ckpt.push(format!("adam.v/{}", p.name), self.adam.second_moment[k].clone());
        }
        if let Some(best) = &self.best_params {
            for (_, p) in best.iter() {
                ckpt.push(format!("best/{}", p.name), p.value.clone());
            }
        }
        Ok(ckpt)
    }

    /// Restores a trainer from [`Trainer::checkpoint`]. `config` replaces
    /// the saved schedule settings (for example a larger epoch budget).
    pub fn resume(ckpt: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let model = Forecaster::from_checkpoint(ckpt)?;
        let state: TrainerState = serde_json::from_value(
            ckpt.meta
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no trainer state".into()))?,
        )?;
        let config = config.unwrap_or_else(|| state.train.clone());
        let mut t = Self::new(model, config, state.seed)?;
        let missing = |n: &str| Error::Config(format!("checkpoint lacks `{n}`"));
        for (k, (_, p)) in t.model.params.iter().enumerate() {
            let (m, v) = (format!("adam.m/{}", p.name), format!("adam.v/{}", p.name));
            t.adam.first_moment[k] = ckpt.get(&m).ok_or_else(|| missing(&m))?.clone();
            t.adam.second_moment[k] = ckpt.get(&v).ok_or_else(|| missing(&v))?.clone();
        }
        t.adam.step = state.adam_step;
        if state.best_val.is_some() {
            let mut best = t.model.params.clone();
            for p in best.iter_mut() {
                let name = format!("best/{}", p.name);
                p.value = ckpt.get(&name).ok_or_else(|| missing(&name))?.clone();
            }
            t.best_params = Some(best);
        }
        t.state = state;
        t.state.train = t.config.clone();
        Ok(t)
    }

    /// Writes the training curve as `epoch,total,mse,nll,maneuver_nll`.
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        write_loss_rows(path, self.state.history.iter().map(|r| (r.epoch, r.train)))
    }

    /// Same columns for the validation curve; nothing is written without
    /// validation data.
    pub fn write_val_loss_csv(&self, path: &Path) -> Result<()> {
        write_loss_rows(path, self.state.history.iter().filter_map(|r| r.val.map(|v| (r.epoch, v))))
    }
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    total: f64,
    mse: f64,
    nll: f64,
    maneuver_nll: f64,
}

fn write_loss_rows(path: &Path, rows: impl Iterator<Item = (usize, LossReport)>) -> Result<()> {
    let wrap = |e: csv::Error| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(wrap)?;
    for (epoch, r) in rows {
        w.serialize(LossRow {
            epoch,
            total: r.total,
            mse: r.mse,
            nll: r.nll,
            maneuver_nll: r.maneuver_nll,
        })
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Evaluation-mode loss of `model` over `samples`.
pub fn validation_loss(model: &Forecaster, samples: &[Sample], config: &TrainConfig) -> Result<LossReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("empty validation split".into()));
    }
    let weights = config.loss_weights;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut reports = Vec::new();
    for chunk in order.chunks(config.batch_size) {
        let batch = make_batch(samples, chunk, model.config.ablation.no_rss)?;
        let mut s = Session::new(&model.params, false, &mut rng);
        let out = model.forward(&mut s, &batch, DecodeModes::Given(&batch.labels))?;
        let vars = loss_on_tape(&mut s, &out, &batch, &weights)?;
        reports.push(report_of(&s, &vars, &weights, batch.size));
    }
    Ok(LossReport::mean(&reports, &weights))
}

/// Point-forecast metrics of `model` over `samples`.
pub fn evaluate(model: &Forecaster, samples: &[Sample], batch_size: usize, mode: PointMode) -> Result<MetricReport> {
    let first = samples.first().ok_or_else(|| Error::EmptyInput("empty evaluation split".into()))?;
    let mut acc = MetricAccumulator::new(first.truth.len(), first.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let order: Vec<usize> = (0..samples.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = make_batch(samples, chunk, model.config.ablation.no_rss)?;
        let mut s = Session::new(&model.params, false, &mut rng);
        let out = model.forward(&mut s, &batch, DecodeModes::All)?;
        for (d, &i) in distributions(&s, &out, &batch)?.iter().zip(chunk) {
            d.validate()?;
            acc.push(&d.predict_point(mode), &samples[i].truth, samples[i].ego_type)?;
        }
    }
    acc.finish()
}

