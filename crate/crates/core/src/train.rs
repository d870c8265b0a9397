//! MSE objective, Adam, gradient clipping and the epoch loop.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Sample, WindowedDataset};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics, ModelForecaster};
use crate::model::{self, AdjacencySource, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 5.0,
            patience: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Configuration(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Configuration("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Configuration(
                "beta1 and beta2 must lie in [0, 1)".into(),
            ));
        }
        if !(self.epsilon > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Configuration(
                "epsilon must be > 0 and clip_norm >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over all elements of `(pred - target)²`.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    tape.mean_all(sq)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = shapes
            .into_iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. `names` label the tensors in errors.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Configuration(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != p.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
        if !g.is_finite() {
            let name = names.get(k).cloned().unwrap_or_else(|| format!("#{k}"));
            return Err(Error::Diverged(format!("non-finite gradient for `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v[k].data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let (m, v) = (state.m[k].data(), state.v[k].data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}

/// Plain gradient descent, `p -= lr * g`.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.data_mut().iter_mut().zip(g.data()) {
            *pi -= lr * gi;
        }
    }
}

/// Loss and parameter gradients (in [`crate::model::ModelParams::named`]
/// order) for one batch.
pub fn batch_gradients(
    model: &Model,
    samples: &[&Sample],
    source: &AdjacencySource,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pred = model::forward(&mut tape, samples, &bound, &model.config, source)?;
    let targets: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    let target = tape.leaf(Tensor::vstack(&targets)?);
    let loss = mse_loss(&mut tape, pred, target)?;
    let value = tape.value(loss).get(0, 0);
    let grads = tape.backward(loss)?;
    let out = bound
        .vars()
        .into_iter()
        .map(|v| {
            let shape = tape.value(v).shape();
            grads.get_or_zeros(v, shape)
        })
        .collect();
    Ok((value, out))
}

pub fn batch_loss(model: &Model, samples: &[&Sample], source: &AdjacencySource) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pred = model::forward(&mut tape, samples, &bound, &model.config, source)?;
    let targets: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    let target = tape.leaf(Tensor::vstack(&targets)?);
    let loss = mse_loss(&mut tape, pred, target)?;
    Ok(tape.value(loss).get(0, 0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: Metrics,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation MAE.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    /// `epoch,train_loss,val_mae,val_rmse,val_r2,seconds`. Wall-clock is
    /// only written when `with_time` is set so that reruns are byte-equal;
    /// otherwise the column is left empty.
    pub fn write_csv<W: Write>(
        &self,
        out: W,
        header_comment: Option<&str>,
        with_time: bool,
    ) -> Result<()> {
        let mut out = out;
        if let Some(comment) = header_comment {
            for line in comment.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "train_loss",
            "val_mae",
            "val_rmse",
            "val_r2",
            "seconds",
        ])?;
        for r in &self.epochs {
            let secs = if with_time {
                format!("{:.3}", r.seconds)
            } else {
                String::new()
            };
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val.mae.to_string(),
                r.val.rmse.to_string(),
                r.val.r2.to_string(),
                secs,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything the loop reads besides the model.
pub struct TrainingSet<'a> {
    pub train: &'a WindowedDataset,
    pub val: &'a WindowedDataset,
    pub source: &'a AdjacencySource,
    pub normalizer: &'a Normalizer,
}

/// Trains `model` and returns the snapshot with the best validation MAE.
///
/// Per epoch: seeded shuffle, mini-batches of `batch_size` (loss averaged
/// over elements and samples), global-norm clipping, Adam. Stops early once
/// `patience` epochs pass without a strictly lower validation MAE.
pub fn train(
    mut model: Model,
    data: &TrainingSet<'_>,
    config: &TrainConfig,
    mut rng: ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Split(
            "training and validation sets must be nonempty".into(),
        ));
    }
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::new(model.params.named().into_iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
    };
    let mut best = model.clone();
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train.samples[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch, data.source)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            weighted += loss * chunk.len() as f64;
            clip_global_norm(&mut grads, config.clip_norm);
            adam_step(
                &mut model.params.tensors_mut(),
                &grads,
                &names,
                &mut adam,
                config,
            )
            .map_err(|e| match e {
                Error::Diverged(m) => {
                    Error::Diverged(format!("{m} at epoch {epoch}, batch {}", b + 1))
                }
                other => other,
            })?;
        }
        let train_loss = weighted / data.train.len() as f64;
        let forecaster = ModelForecaster {
            model: &model,
            source: data.source,
        };
        let val = eval::evaluate(&forecaster, data.val, data.normalizer)?;
        if !(val.mae.is_finite() && val.rmse.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite validation metrics at epoch {epoch}"
            )));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        let improved = history.epochs.is_empty() || record.val.mae < history.best().val.mae;
        history.epochs.push(record);
        if improved {
            history.best_epoch = history.epochs.len() - 1;
            best = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    Ok((best, history))
}
