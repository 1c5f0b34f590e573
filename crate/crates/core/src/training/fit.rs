use serde::{Deserialize, Serialize};

use crate::agedist::{combined_loss, target_batch, LambdaScheduler, LossConfig, NUM_BINS};
use crate::dataset::{BatchIter, Order, VolumeSet};
use crate::error::{Error, Result};
use crate::model::Gldn;
use crate::params::{Ctx, Mode, ParamStore};
use crate::tape::Tape;
use crate::training::augment::AugmentConfig;
use crate::training::metrics::{compute_metrics, Metrics};
use crate::training::optim::{Adam, AdamConfig};
use crate::training::schedule::{warmup_lr, EarlyStopping, StopDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Clean training volumes used to re-estimate batch-norm statistics
    /// after each epoch; 0 keeps the running averages.
    pub bn_recalibration: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_epochs: 20,
            batch_size: 8,
            early_stop_patience: 20,
            max_epochs: 60,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            bn_recalibration: 128,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.warmup_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds max_epochs {}",
                self.warmup_epochs, self.max_epochs
            )));
        }
        if self.early_stop_patience == 0 || self.loss.lambda_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) || !(self.loss.theta > 0.0) {
            return Err(Error::Config("base_lr and theta must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_pcc: Option<f64>,
    pub val_srcc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub best_store: ParamStore<f32>,
    pub stop: StopReason,
    pub lambda: LambdaScheduler,
}

/// Predictions and loss of a model on a set, in eval mode.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub predictions: Vec<f64>,
    pub loss: f64,
    pub metrics: Metrics,
}

/// Eval-mode expected ages, batch-mean loss at `lambda`, and metrics.
pub fn evaluate(
    model: &Gldn,
    store: &ParamStore<f32>,
    set: &VolumeSet,
    batch_size: usize,
    theta: f64,
    lambda: f64,
) -> Result<Evaluation> {
    let mut predictions = Vec::with_capacity(set.len());
    let mut loss_sum = 0.0;
    for batch in BatchIter::new(set, batch_size, Order::Sequential)? {
        let batch = batch?;
        let q_hat = model.predict(store, &batch.x)?;
        for (b, &age) in batch.ages.iter().enumerate() {
            let row: Vec<f64> = q_hat.data()[b * NUM_BINS..(b + 1) * NUM_BINS]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let q = crate::agedist::gen_distribution(age, theta)?;
            loss_sum += combined_loss(&q.q, &row, age, lambda)?;
            predictions.push(crate::agedist::expectation(&row));
        }
    }
    let loss = loss_sum / set.len() as f64;
    let metrics = compute_metrics(&predictions, &set.ages)?;
    Ok(Evaluation {
        predictions,
        loss,
        metrics,
    })
}

/// One optimizer step on a batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Gldn,
    store: &mut ParamStore<f32>,
    adam: &mut Adam<f32>,
    x: crate::tensor::Tensor<f32>,
    ages: &[f64],
    theta: f64,
    lambda: f64,
    lr: f64,
) -> Result<f64> {
    let target = target_batch::<f32>(ages, theta)?;
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let (q_hat, updates) = {
        let mut ctx = Ctx::new(&mut tape, &bound, store, Mode::Train);
        let xv = ctx.tape.constant(x);
        let q_hat = model.forward(&mut ctx, xv)?;
        (q_hat, std::mem::take(&mut ctx.updates))
    };
    let loss = tape.combined_loss(q_hat, &target, ages, lambda)?;
    let value = tape.value(loss).item()? as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss is {value}")));
    }
    tape.backward(loss)?;
    let grads: Vec<_> = bound
        .vars()
        .iter()
        .map(|&v| tape.grad_or_zeros(v))
        .collect();
    drop(tape);
    adam.step(store, &grads, lr)?;
    store.apply_updates(updates);
    Ok(value)
}

/// Replaces batch-norm running statistics with their average over the
/// first `samples` volumes of `set`, without augmentation.
pub fn recalibrate_batchnorm(
    model: &Gldn,
    store: &mut ParamStore<f32>,
    set: &VolumeSet,
    batch_size: usize,
    samples: usize,
) -> Result<()> {
    let mut seen = 0;
    for (k, batch) in BatchIter::new(set, batch_size, Order::Sequential)?.enumerate() {
        if seen >= samples {
            break;
        }
        let batch = batch?;
        seen += batch.ages.len();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let updates = {
            let mut ctx = Ctx::new(&mut tape, &bound, store, Mode::Train);
            ctx.bn_momentum = Some(1.0 / (k + 1) as f64);
            let xv = ctx.tape.constant(batch.x);
            model.forward(&mut ctx, xv)?;
            std::mem::take(&mut ctx.updates)
        };
        drop(tape);
        store.apply_updates(updates);
    }
    Ok(())
}

/// Trains `store` in place. `on_epoch` sees every record, whether it is a
/// new best, and the current parameters.
pub fn fit(
    model: &Gldn,
    store: &mut ParamStore<f32>,
    train: &VolumeSet,
    val: &VolumeSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, bool, &ParamStore<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg("training and validation sets must be nonempty"));
    }
    let mut adam = Adam::new(store, cfg.adam.clone());
    let mut lambda = LambdaScheduler::new(cfg.loss.lambda_patience);
    let mut early = EarlyStopping::new(cfg.early_stop_patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let lr = warmup_lr(epoch, cfg.base_lr, cfg.warmup_epochs);
        let lam = cfg.loss.lambda_override.unwrap_or(lambda.lambda);
        let mut batches = BatchIter::new(
            train,
            cfg.batch_size,
            Order::Shuffled {
                seed: cfg.seed,
                epoch: epoch as u64,
            },
        )?;
        if cfg.augment {
            batches = batches.with_augmentation(cfg.augmentation.clone(), cfg.seed, epoch as u64);
        }
        let mut loss_sum = 0.0;
        for batch in batches {
            let batch = batch?;
            let n = batch.ages.len() as f64;
            let loss = train_step(
                model,
                store,
                &mut adam,
                batch.x,
                &batch.ages,
                cfg.loss.theta,
                lam,
                lr,
            )
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            loss_sum += loss * n;
        }
        let train_loss = loss_sum / train.len() as f64;
        if cfg.bn_recalibration > 0 {
            recalibrate_batchnorm(model, store, train, cfg.batch_size, cfg.bn_recalibration)?;
        }

        let eval = evaluate(model, store, val, cfg.batch_size, cfg.loss.theta, lam)?;
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "epoch {epoch}: validation loss is {}",
                eval.loss
            )));
        }
        let record = EpochRecord {
            epoch,
            lr,
            lambda: lam,
            train_loss,
            val_loss: eval.loss,
            val_mae: eval.metrics.mae,
            val_rmse: eval.metrics.rmse,
            val_pcc: eval.metrics.pcc,
            val_srcc: eval.metrics.srcc,
        };

        let flipped = cfg.loss.lambda_override.is_none() && lambda.step(eval.loss);
        let (improved, decision) = if flipped {
            early.reset();
            (false, StopDecision::Continue)
        } else {
            early.update(eval.loss)
        };
        if improved || best.is_none() {
            best = Some((epoch, eval.loss, store.clone()));
        }
        on_epoch(&record, improved, store)?;
        log::info!(
            "epoch {epoch}: lr {lr:.2e} lambda {lam} train {train_loss:.4} val {:.4} mae {:.3}",
            eval.loss,
            eval.metrics.mae
        );
        history.push(record);
        if decision == StopDecision::Stop {
            stop = StopReason::EarlyStop;
            break;
        }
    }

    let (best_epoch, best_val_loss, best_store) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        best_store,
        stop,
        lambda,
    })
}
