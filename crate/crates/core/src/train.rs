//! Optimization loop: seeded shuffling, Dice objective, global-norm
//! clipping, Adam, and early stopping on validation Dice.

use std::fmt;
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::SegSample;
use crate::error::{Error, Result};
use crate::loss::dice_loss;
use crate::metrics::{evaluate_image, MetricsReport};
use crate::model::Model;
use crate::nn::BnMode;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Rng, Scalar, Tensor};

/// Smallest improvement of the monitored Dice that resets patience.
pub const MIN_DELTA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub seed: u64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 15,
            clip_norm: 3.0,
            patience: 3,
            seed: 0,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        };
        positive("lr", self.lr)?;
        positive("clip_norm", self.clip_norm)?;
        positive("adam_eps", self.adam_eps)?;
        positive("batch_size", self.batch_size as f64)?;
        positive("max_epochs", self.max_epochs as f64)?;
        positive("patience", self.patience as f64)?;
        if self.patience >= self.max_epochs {
            return Err(Error::config(
                "patience",
                format!("must be below max_epochs ({}), got {}", self.max_epochs, self.patience),
            ));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config("betas", format!("must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// Joint l2 norm of a gradient set, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales every gradient by `threshold / norm` when the joint norm exceeds
/// `threshold`; returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], threshold: f64) -> Result<f64> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid(format!("clip threshold must be positive, got {threshold}")));
    }
    let norm = global_norm(grads);
    if norm > threshold {
        let k = threshold / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = T::of(v.as_f64() * k);
            }
        }
    }
    Ok(norm)
}

/// First and second moments for each trainable tensor, in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m: Vec<Tensor<T>> = store.trainable_ids().map(|id| Tensor::zeros_like(store.get(id))).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update. `grads` pairs with `store.trainable_ids()`.
/// Any non-finite gradient aborts before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    if ids.len() != grads.len() || ids.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moment tensors",
            ids.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (&id, g) in ids.iter().zip(grads) {
        if g.shape() != store.get(id).shape() {
            return Err(Error::ShapeMismatch { op: "adam_step", lhs: store.get(id).shape().to_vec(), rhs: g.shape().to_vec() });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { param: store.entry(id).name.clone() });
        }
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (k, (&id, g)) in ids.iter().zip(grads).enumerate() {
        let p = store.get_mut(id).data_mut();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let update = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_eps);
            p[i] = T::of(p[i].as_f64() - update);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best monitored value; signals a stop after `patience`
/// consecutive epochs without an improvement larger than `min_delta`.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: None, stale: 0 }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, value: f64) -> StopSignal {
        match self.best {
            Some(b) if value <= b + self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopSignal::Stop
                } else {
                    StopSignal::Continue
                }
            }
            _ => {
                self.best = Some(value);
                self.stale = 0;
                StopSignal::Improved
            }
        }
    }
}

/// Splits a shuffled order into batches; a trailing batch of one sample is
/// merged into the one before it.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn stack_batch(samples: &[SegSample], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let masks: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Model-independent optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub adam: AdamState<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { adam: AdamState::new(model.store()), config })
    }

    /// Forward in training mode, summed Dice loss on the foreground channel,
    /// backward, clip, Adam, running-statistic update. A non-finite loss or
    /// gradient leaves the model untouched.
    pub fn step(&mut self, model: &mut Model<T>, images: &Tensor<T>, masks: &Tensor<T>) -> Result<StepReport> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let pass = model.forward(&mut g, &x, BnMode::Training)?;
        let fg = g.narrow_channels(&pass.probs, 1, 1)?;
        let loss = g.dice_loss(&fg, masks)?;
        let value = loss.value().data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::Diverged { reason: format!("loss is {value}") });
        }
        let mut grads_all = g.backward(&loss)?;
        let store = model.store();
        let mut grads: Vec<Tensor<T>> = store.trainable_ids().map(|id| grads_all.take(&pass.params[id.index()])).collect();
        for (id, gr) in store.trainable_ids().zip(&grads) {
            if !gr.all_finite() {
                return Err(Error::NonFiniteGradient { param: store.entry(id).name.clone() });
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm)?;
        adam_step(model.store_mut(), &grads, &mut self.adam, &self.config)?;
        model.apply_bn_updates(&pass.bn_updates);
        Ok(StepReport { loss: value, grad_norm })
    }
}

impl<T: Scalar> Trainer<T> {
    /// One pass over `samples` in the given order; returns the per-batch
    /// losses.
    pub fn epoch(&mut self, model: &mut Model<T>, samples: &[SegSample], order: &[usize]) -> Result<Vec<f64>> {
        let mut losses = Vec::new();
        for batch in make_batches(order, self.config.batch_size) {
            let (images, masks) = stack_batch(samples, &batch)?;
            losses.push(self.step(model, &images.cast(), &masks.cast())?.loss);
        }
        Ok(losses)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Summed batch loss divided by the number of training images.
    pub mean_loss: f64,
    /// Mean soft Dice of the monitored set.
    pub val_dsc: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tloss\tval_dsc\tlr\twall_s";

    pub fn tsv(&self) -> String {
        format!("{}\t{:.6}\t{:.6}\t{:e}\t{:.3}", self.epoch, self.mean_loss, self.val_dsc, self.lr, self.wall_secs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    /// Training aborted; the returned models hold the last finite state.
    Diverged { epoch: usize, reason: String },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxEpochs => f.write_str("reached max epochs"),
            StopReason::EarlyStopped => f.write_str("early stopped"),
            StopReason::Diverged { epoch, reason } => write!(f, "diverged in epoch {epoch}: {reason}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub history: Vec<EpochRecord>,
    /// Per-step losses in order.
    pub step_losses: Vec<f64>,
    /// Model at the epoch with the best monitored Dice.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub stop: StopReason,
}

/// Mean soft Dice of the foreground channel, inference mode.
pub fn mean_dsc<T: Scalar>(model: &Model<T>, samples: &[SegSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot score an empty dataset"));
    }
    let scores: Result<Vec<f64>> = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict(&batch_of_one(&s.image)?)?;
            let fg = probs.narrow_channels(1, 1)?;
            let report = dice_loss(&fg, &batch_of_one::<T>(&s.mask)?)?;
            Ok(report.per_image_dsc[0])
        })
        .collect();
    Ok(scores?.iter().sum::<f64>() / samples.len() as f64)
}

fn batch_of_one<T: Scalar>(t: &Tensor<f32>) -> Result<Tensor<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.cast::<T>().reshape(shape)
}

/// Runs the full protocol. `model` ends in its last finite state; the
/// outcome carries the best one. An empty `val` set makes early stopping
/// monitor the training Dice.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &[SegSample],
    val_set: &[SegSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut rng = Rng::new(cfg.seed);
    let mut stopper = EarlyStopper::new(cfg.patience, MIN_DELTA);
    let monitor = if val_set.is_empty() { train_set } else { val_set };
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let order = rng.permutation(train_set.len());
        let total = match trainer.epoch(model, train_set, &order) {
            Ok(losses) => {
                let t = losses.iter().sum::<f64>();
                step_losses.extend(losses);
                t
            }
            Err(e @ (Error::Diverged { .. } | Error::NonFiniteGradient { .. })) => {
                stop = StopReason::Diverged { epoch, reason: e.to_string() };
                break;
            }
            Err(e) => return Err(e),
        };
        let val_dsc = mean_dsc(model, monitor)?;
        let record = EpochRecord {
            epoch,
            mean_loss: total / train_set.len() as f64,
            val_dsc,
            lr: cfg.lr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        info!("{}", record.tsv());
        history.push(record);
        match stopper.observe(val_dsc) {
            StopSignal::Improved => {
                best = model.clone();
                best_epoch = epoch;
            }
            StopSignal::Continue => {}
            StopSignal::Stop => {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    if best_epoch == 0 {
        best = model.clone();
    }
    Ok(TrainOutcome { history, step_losses, best, best_epoch, stop })
}

/// Per-image reports (foreground channel, 0.5 threshold) and their mean.
pub fn evaluate<T: Scalar>(model: &Model<T>, samples: &[SegSample]) -> Result<(Vec<MetricsReport>, MetricsReport)> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let reports: Result<Vec<MetricsReport>> = samples
        .par_iter()
        .map(|s| {
            let probs = model.predict(&batch_of_one(&s.image)?)?;
            let fg = probs.narrow_channels(1, 1)?;
            evaluate_image(&fg, &batch_of_one::<T>(&s.mask)?)
        })
        .collect();
    let reports = reports?;
    let mean = MetricsReport::mean(&reports)?;
    Ok((reports, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.max_epochs, c.clip_norm), (1e-3, 8, 15, 3.0));
        assert!(c.validate().is_ok());
        let bad = TrainConfig { patience: 15, ..c.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "patience", .. })));
        let bad = TrainConfig { lr: 0.0, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config { field: "lr", .. })));
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0f64, 4.0]).unwrap(), Tensor::new(vec![1], vec![0.0]).unwrap()];
        // norm 5 -> 3
        assert_eq!(clip_global_norm(&mut g, 3.0).unwrap(), 5.0);
        assert!((global_norm(&g) - 3.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 1.8).abs() < 1e-12);

        let orig = vec![Tensor::new(vec![2], vec![0.6f64, 0.8]).unwrap()];
        let mut same = orig.clone();
        clip_global_norm(&mut same, 3.0).unwrap();
        assert_eq!(same, orig);
        assert!(clip_global_norm(&mut same, 0.0).is_err());
    }

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap(), crate::params::ParamKind::Trainable)
            .unwrap();
        s
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut s = store_with(&[1.0, -2.0, 0.5]);
        let mut st = AdamState::new(&s);
        let g = vec![Tensor::new(vec![3], vec![0.3, -7.0, 1e-3]).unwrap()];
        adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        let want = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in s.entries()[0].value.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let cfg = TrainConfig::default();
        let mut s = store_with(&[1.0, 2.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &[Tensor::zeros(vec![2]).unwrap()], &mut st, &cfg).unwrap();
        assert_eq!(s.entries()[0].value.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_constant_gradient_saturates_at_lr() {
        let cfg = TrainConfig::default();
        let mut s = store_with(&[0.0]);
        let mut st = AdamState::new(&s);
        let g = [Tensor::new(vec![1], vec![0.25]).unwrap()];
        let mut prev = 0.0;
        for _ in 0..2000 {
            prev = s.entries()[0].value.data()[0];
            adam_step(&mut s, &g, &mut st, &cfg).unwrap();
        }
        let delta = prev - s.entries()[0].value.data()[0];
        assert!((delta - 1e-3).abs() < 1e-7, "{delta}");
    }

    #[test]
    fn adam_rejects_nan_naming_the_parameter() {
        let cfg = TrainConfig::default();
        let mut s = store_with(&[1.0]);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &[Tensor::new(vec![1], vec![f64::NAN]).unwrap()], &mut st, &cfg).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient { param } if param == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(s.entries()[0].value.data(), &[1.0]);
    }

    #[test]
    fn early_stopping_contract() {
        let mut e = EarlyStopper::new(1, MIN_DELTA);
        assert_eq!(e.observe(0.5), StopSignal::Improved);
        assert_eq!(e.observe(0.5), StopSignal::Stop);

        let mut e = EarlyStopper::new(3, MIN_DELTA);
        assert_eq!(e.observe(0.5), StopSignal::Improved);
        assert_eq!(e.observe(0.50005), StopSignal::Continue);
        assert_eq!(e.observe(0.6), StopSignal::Improved);
        assert_eq!(e.observe(0.1), StopSignal::Continue);
        assert_eq!(e.observe(0.1), StopSignal::Continue);
        assert_eq!(e.observe(0.1), StopSignal::Stop);
        assert_eq!(e.best(), Some(0.6));
    }

    #[test]
    fn batching_merges_a_trailing_single() {
        let order: Vec<usize> = (0..17).collect();
        let b = make_batches(&order, 8);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 9]);
        assert_eq!(make_batches(&order[..10], 8).iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 2]);
        assert_eq!(make_batches(&order[..1], 8), vec![vec![0]]);
        let mut flat: Vec<usize> = b.concat();
        flat.sort_unstable();
        assert_eq!(flat, order);
    }
}
