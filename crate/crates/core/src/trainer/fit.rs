use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{f64_from_meta, f64_to_meta, Checkpoint};
use super::dataset::{make_batches, Batch, TrainingDataset};
use super::optim::Adam;
use super::schedule::LrSchedule;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_bidirectional, BidirectionalReport};
use crate::hybridspace::{JointLoss, LossConfig};
use crate::model::{DualEncoding, ModelConfig};
use crate::numcore::{Mode, ParamStore, Session};

/// Batch order used for validation loss, fixed so epochs are comparable.
const VALIDATION_BATCH_SEED: u64 = 0;

/// Forward pass of the joint objective over one batch.
pub fn batch_loss(
    model: &DualEncoding,
    store: &ParamStore,
    data: &TrainingDataset,
    batch: &Batch,
    loss: &LossConfig,
    mode: Mode,
) -> Result<JointLoss> {
    let inputs = data.batch_inputs(batch)?;
    let mut s = Session::new(store, mode);
    let vars = model.batch_loss(&mut s, &inputs.videos, &inputs.texts, inputs.labels, loss)?;
    let value = |v| s.value(v).item();
    Ok(JointLoss {
        latent_rank: value(vars.latent_rank),
        concept_rank: value(vars.concept_rank),
        bce: value(vars.bce),
        total: value(vars.total),
    })
}

fn check_finite(l: &JointLoss) -> Result<()> {
    for (term, v) in [
        ("latent triplet loss", l.latent_rank),
        ("concept triplet loss", l.concept_rank),
        ("concept BCE loss", l.bce),
        ("joint loss", l.total),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: term.to_owned() });
        }
    }
    Ok(())
}

/// One optimization step: forward in train mode, backward, Adam update,
/// then the batch-norm running statistics. Returns the loss before the
/// update.
pub fn train_step(
    model: &DualEncoding,
    store: &mut ParamStore,
    optimizer: &mut Adam,
    data: &TrainingDataset,
    batch: &Batch,
    lr: f64,
    loss: &LossConfig,
) -> Result<JointLoss> {
    let inputs = data.batch_inputs(batch)?;
    let (report, grads, updates) = {
        let mut s = Session::new(store, Mode::Train);
        let vars = model.batch_loss(&mut s, &inputs.videos, &inputs.texts, inputs.labels, loss)?;
        let value = |v| s.value(v).item();
        let report = JointLoss {
            latent_rank: value(vars.latent_rank),
            concept_rank: value(vars.concept_rank),
            bce: value(vars.bce),
            total: value(vars.total),
        };
        check_finite(&report)?;
        let mut g = s.tape.backward(vars.total)?;
        let grads = s.param_grads(&mut g);
        (report, grads, s.into_updates())
    };
    if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: format!("gradient of `{}`", store.name(*id)),
        });
    }
    optimizer.update(store, &grads, lr)?;
    for u in &updates {
        u.apply(store);
    }
    Ok(report)
}

/// Validation results of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_sumr: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Validation SumR is the best so far.
    pub new_best: bool,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_sumr,lr";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.2},{:e}",
            self.epoch, self.train_loss, self.val_loss, self.val_sumr, self.lr
        )
    }
}

/// Model, parameters, optimizer and schedule of one training run.
pub struct Trainer {
    pub model: DualEncoding,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub schedule: LrSchedule,
    pub loss: LossConfig,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Initializes parameters from `config.seed`; the same generator then
    /// draws one batch-order seed per epoch.
    pub fn new(model: ModelConfig, loss: LossConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, store) = DualEncoding::new(model, &mut rng)?;
        let optimizer = Adam::new(&store);
        let schedule = LrSchedule::new(
            config.learning_rate,
            config.lr_decay_patience,
            config.lr_decay_factor,
            config.early_stop_patience,
        );
        Ok(Trainer {
            model,
            store,
            optimizer,
            schedule,
            loss,
            config,
            epoch: 0,
            rng,
        })
    }

    /// One pass over every training pair. Returns the mean batch loss.
    pub fn train_epoch(&mut self, data: &TrainingDataset) -> Result<f64> {
        let batches = make_batches(data, self.config.batch_size, self.rng.gen())?;
        if batches.is_empty() {
            return Err(Error::invalid("training set yields no batch of two distinct videos"));
        }
        let lr = self.schedule.lr;
        let mut total = 0.0;
        for b in &batches {
            let l = train_step(&self.model, &mut self.store, &mut self.optimizer, data, b, lr, &self.loss)?;
            total += l.total;
        }
        self.epoch += 1;
        Ok(total / batches.len() as f64)
    }

    /// Mean joint loss over validation batches, batch norm in eval mode.
    pub fn validation_loss(&self, data: &TrainingDataset) -> Result<f64> {
        let batches = make_batches(data, self.config.batch_size, VALIDATION_BATCH_SEED)?;
        if batches.is_empty() {
            return Err(Error::invalid("validation set yields no batch of two distinct videos"));
        }
        let mut total = 0.0;
        for b in &batches {
            let l = batch_loss(&self.model, &self.store, data, b, &self.loss, Mode::Eval)?;
            check_finite(&l)?;
            total += l.total;
        }
        Ok(total / batches.len() as f64)
    }

    /// Retrieval metrics over the dataset's videos and captions.
    pub fn evaluate(&self, data: &TrainingDataset) -> Result<BidirectionalReport> {
        evaluate_dataset(&self.model, &self.store, data, self.loss.alpha)
    }

    /// Trains until the schedule stops. `on_epoch` sees every epoch's
    /// record with the trainer in its post-epoch state.
    pub fn fit(
        &mut self,
        train: &TrainingDataset,
        val: &TrainingDataset,
        on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        self.fit_until(train, val, usize::MAX, on_epoch)
    }

    /// Like [`Self::fit`], but also returns once `epoch_limit` epochs are
    /// complete. Continuing from the resulting state gives the same run as
    /// an uninterrupted [`Self::fit`].
    pub fn fit_until(
        &mut self,
        train: &TrainingDataset,
        val: &TrainingDataset,
        epoch_limit: usize,
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        let limit = epoch_limit.min(self.config.max_epochs);
        while self.epoch < limit && !self.schedule.exhausted() {
            let lr = self.schedule.lr;
            let train_loss = self.train_epoch(train)?;
            let val_loss = self.validation_loss(val)?;
            let val_sumr = self.evaluate(val)?.sum_r();
            let decision = self
                .schedule
                .observe(val_loss, val_sumr, self.epoch, self.config.max_epochs);
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss,
                val_loss,
                val_sumr,
                lr,
                new_best: decision.new_best,
            };
            log::info!("{}", record.csv_line());
            on_epoch(&record, self)?;
            records.push(record);
            if decision.stop {
                break;
            }
        }
        Ok(records)
    }

    /// Parameters, optimizer moments, schedule, epoch and generator state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        let s = &self.schedule;
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_owned(), f64_to_meta);
        let meta = [
            ("state.epoch", self.epoch.to_string()),
            ("state.adam_step", self.optimizer.steps().to_string()),
            ("schedule.lr", f64_to_meta(s.lr)),
            ("schedule.best_loss", opt(s.best_loss)),
            ("schedule.stale_loss_epochs", s.stale_loss_epochs.to_string()),
            ("schedule.best_sumr", opt(s.best_sumr)),
            ("schedule.stale_sumr_epochs", s.stale_sumr_epochs.to_string()),
            ("rng.seed", self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect()),
            ("rng.stream", self.rng.get_stream().to_string()),
            ("rng.word_pos", self.rng.get_word_pos().to_string()),
        ];
        for (k, v) in meta {
            c.metadata.insert(k.to_owned(), v);
        }
        c.push_params(&self.store);
        for id in self.store.ids() {
            let name = self.store.name(id);
            if let (Some(m), Some(v)) = (self.optimizer.first_moment(id), self.optimizer.second_moment(id)) {
                c.tensors.push((format!("adam_m/{name}"), m.clone()));
                c.tensors.push((format!("adam_v/{name}"), v.clone()));
            }
        }
        c
    }

    /// Restores everything [`Self::checkpoint`] saved.
    pub fn restore(&mut self, c: &Checkpoint) -> Result<()> {
        let int = |k: &str| -> Result<u128> {
            let v = c.meta(k)?;
            v.parse().map_err(|_| Error::invalid(format!("bad checkpoint value `{v}` for `{k}`")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            match c.meta(k)? {
                "none" => Ok(None),
                v => f64_from_meta(v).map(Some),
            }
        };
        c.restore_params(&mut self.store)?;
        let mut first = Vec::new();
        let mut second = Vec::new();
        for id in self.store.ids() {
            if self.store.is_trainable(id) {
                let name = self.store.name(id);
                first.push(Some(c.require(&format!("adam_m/{name}"))?.clone()));
                second.push(Some(c.require(&format!("adam_v/{name}"))?.clone()));
            } else {
                first.push(None);
                second.push(None);
            }
        }
        self.optimizer.restore(int("state.adam_step")? as u64, first, second)?;

        let s = &mut self.schedule;
        s.lr = f64_from_meta(c.meta("schedule.lr")?)?;
        s.best_loss = opt("schedule.best_loss")?;
        s.stale_loss_epochs = int("schedule.stale_loss_epochs")? as usize;
        s.best_sumr = opt("schedule.best_sumr")?;
        s.stale_sumr_epochs = int("schedule.stale_sumr_epochs")? as usize;
        self.epoch = int("state.epoch")? as usize;

        let hex = c.meta("rng.seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(Error::invalid("bad generator seed in checkpoint"));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::invalid("bad generator seed in checkpoint"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(int("rng.stream")? as u64);
        rng.set_word_pos(int("rng.word_pos")?);
        self.rng = rng;
        Ok(())
    }
}

/// Bidirectional retrieval metrics of `model` over a dataset.
pub fn evaluate_dataset(
    model: &DualEncoding,
    store: &ParamStore,
    data: &TrainingDataset,
    alpha: f64,
) -> Result<BidirectionalReport> {
    let videos = model.index_videos(store, data.videos(), alpha)?;
    let texts: Vec<_> = data.captions().iter().map(|c| c.tokens.clone()).collect();
    let sentences = model.index_texts(store, &texts, alpha)?;
    let truth: Vec<String> = data
        .captions()
        .iter()
        .map(|c| data.videos()[c.video].video_id.clone())
        .collect();
    evaluate_bidirectional(&videos, &sentences, &truth, alpha)
}
