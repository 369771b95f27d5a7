//! Training: MSE loss, Adam, reduce-on-plateau learning-rate schedule,
//! early stopping, and the epoch loop with per-epoch checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointMeta, OptimSnapshot, SsaUnet};
use crate::nn::params::{Grads, ParamId, Params};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Mean over all elements of the squared difference, with the gradient
/// 2*(pred - target)/count.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "mse_loss shapes differ: {} vs {}",
            pred.shape(),
            target.shape()
        )));
    }
    let count = T::from_f64_lossy(pred.numel() as f64);
    let mut acc = T::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        acc += d * d;
    }
    let two = T::from_f64_lossy(2.0);
    let grad = pred
        .zip(target, |p, t| two * (p - t) / count)
        .expect("shapes checked");
    Ok((acc / count, grad))
}

/// Adam hyperparameters; (beta1, beta2, eps) = (0.9, 0.999, 1e-8).
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    trainable: Vec<ParamId>,
    pub step: u64,
    pub lr: f64,
    pub hyper: AdamParams,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>, lr: f64) -> Self {
        let trainable = params.trainable_ids();
        let m = trainable
            .iter()
            .map(|&id| Tensor::zeros(params.get(id).shape()))
            .collect();
        let v = trainable
            .iter()
            .map(|&id| Tensor::zeros(params.get(id).shape()))
            .collect();
        AdamState {
            m,
            v,
            trainable,
            step: 0,
            lr,
            hyper: AdamParams::default(),
        }
    }

    /// One bias-corrected Adam update over all trainable parameters.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Grads<T>) {
        self.step += 1;
        let b1 = T::from_f64_lossy(self.hyper.beta1);
        let b2 = T::from_f64_lossy(self.hyper.beta2);
        let one = T::one();
        let eps = T::from_f64_lossy(self.hyper.epsilon);
        let bc1 = T::from_f64_lossy(1.0 - self.hyper.beta1.powi(self.step as i32));
        let bc2 = T::from_f64_lossy(1.0 - self.hyper.beta2.powi(self.step as i32));
        let lr = T::from_f64_lossy(self.lr);
        for (k, &id) in self.trainable.iter().enumerate() {
            let g = grads.get(id).data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Checkpoint form: `<param>.m` / `<param>.v` suffix keys.
    pub fn snapshot(&self, params: &Params<T>) -> OptimSnapshot<T> {
        let mut tensors = Vec::with_capacity(2 * self.trainable.len());
        for (k, &id) in self.trainable.iter().enumerate() {
            tensors.push((format!("{}.m", params.name(id)), self.m[k].clone()));
            tensors.push((format!("{}.v", params.name(id)), self.v[k].clone()));
        }
        OptimSnapshot {
            step: self.step,
            lr: self.lr,
            tensors,
        }
    }

    /// Rebuilds the state from a loaded snapshot.
    pub fn from_snapshot(params: &Params<T>, snap: &OptimSnapshot<T>) -> Result<Self> {
        let mut state = Self::new(params, snap.lr);
        state.step = snap.step;
        for (name, tensor) in &snap.tensors {
            let (base, kind) = name
                .rsplit_once('.')
                .ok_or_else(|| Error::data(format!("malformed optimizer key \"{name}\"")))?;
            let id = params
                .find(base)
                .ok_or_else(|| Error::data(format!("optimizer state for unknown parameter \"{base}\"")))?;
            let k = state
                .trainable
                .iter()
                .position(|&t| t == id)
                .ok_or_else(|| Error::data(format!("optimizer state for non-trainable \"{base}\"")))?;
            if tensor.shape() != params.get(id).shape() {
                return Err(Error::data(format!(
                    "optimizer tensor \"{name}\" has shape {}, parameter has {}",
                    tensor.shape(),
                    params.get(id).shape()
                )));
            }
            match kind {
                "m" => state.m[k] = tensor.clone(),
                "v" => state.v[k] = tensor.clone(),
                other => {
                    return Err(Error::data(format!(
                        "unknown optimizer suffix \".{other}\" on \"{name}\""
                    )))
                }
            }
        }
        Ok(state)
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without strict
/// improvement the learning rate is multiplied by `factor` and the
/// counter resets.
#[derive(Clone, Debug)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    count: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauSchedule {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            count: 0,
        }
    }

    /// Observes one epoch's validation loss and returns the (possibly
    /// reduced) learning rate.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.count = 0;
        } else {
            self.count += 1;
            if self.count >= self.patience {
                self.lr *= self.factor;
                self.count = 0;
            }
        }
        self.lr
    }
}

/// Stop after `patience` consecutive epochs without strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub patience: usize,
    best: f64,
    count: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            count: 0,
        }
    }

    /// Observes one epoch's validation loss; true means stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.count = 0;
            false
        } else {
            self.count += 1;
            self.count >= self.patience
        }
    }
}

/// Epoch-loop bookkeeping: current epoch, global best, and the two
/// patience trackers.
pub struct TrainState {
    pub epoch: usize,
    pub best_val_loss: f64,
    pub schedule: PlateauSchedule,
    pub stop: EarlyStop,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Seed of the per-epoch batch shuffle.
    pub seed: u64,
    /// When set, an `epoch_NNN.ssac` checkpoint is written every epoch
    /// and `best.ssac` tracks the lowest validation loss.
    pub checkpoint_dir: Option<PathBuf>,
    /// Training-set normalization constant recorded into checkpoints.
    pub norm_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 200,
            batch_size: 6,
            lr: 1e-3,
            lr_factor: 0.1,
            plateau_patience: 4,
            early_stop_patience: 15,
            seed: 0,
            checkpoint_dir: None,
            norm_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub best_checkpoint: Option<PathBuf>,
}

/// Stacks sample windows (each (1, c, h, w)) into one batch tensor pair.
pub fn stack_windows<T: Scalar>(
    windows: &[SampleWindow<T>],
    idxs: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    if idxs.is_empty() {
        return Err(Error::data("cannot stack an empty batch"));
    }
    let is = windows[idxs[0]].inputs.shape();
    let ts = windows[idxs[0]].targets.shape();
    let mut inputs = Tensor::zeros(Shape::new(idxs.len(), is.c, is.h, is.w)?);
    let mut targets = Tensor::zeros(Shape::new(idxs.len(), ts.c, ts.h, ts.w)?);
    for (b, &i) in idxs.iter().enumerate() {
        let wdw = &windows[i];
        if wdw.inputs.shape() != is || wdw.targets.shape() != ts {
            return Err(Error::dim("windows in one batch must share shapes"));
        }
        for c in 0..is.c {
            inputs.plane_mut(b, c).copy_from_slice(wdw.inputs.plane(0, c));
        }
        for c in 0..ts.c {
            targets
                .plane_mut(b, c)
                .copy_from_slice(wdw.targets.plane(0, c));
        }
    }
    Ok((inputs, targets))
}

/// Mean over batches of the per-batch MSE, in eval mode.
pub fn validation_loss<T: Scalar>(
    model: &SsaUnet<T>,
    windows: &[SampleWindow<T>],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::data("validation set is empty"));
    }
    let idxs: Vec<usize> = (0..windows.len()).collect();
    let mut acc = 0.0;
    let mut batches = 0;
    for chunk in idxs.chunks(batch_size) {
        let (x, t) = stack_windows(windows, chunk)?;
        let y = model.forward(&x)?;
        let (loss, _) = mse_loss(&y, &t)?;
        acc += loss.to_f64_lossy();
        batches += 1;
    }
    Ok(acc / batches as f64)
}

/// The epoch loop: seeded shuffled mini-batches, Adam updates, per-epoch
/// validation, plateau LR decay, early stopping, and checkpoints after
/// every epoch. Aborts with a diagnostic on the first NaN loss.
pub fn train<T: Scalar>(
    model: &mut SsaUnet<T>,
    train_set: &[SampleWindow<T>],
    val_set: &[SampleWindow<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::data(format!(
            "training needs non-empty splits (train {}, val {})",
            train_set.len(),
            val_set.len()
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let mut state = TrainState {
        epoch: 0,
        best_val_loss: f64::INFINITY,
        schedule: PlateauSchedule::new(cfg.lr, cfg.lr_factor, cfg.plateau_patience),
        stop: EarlyStop::new(cfg.early_stop_patience),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads = Grads::zeros_like(&model.params);
    let mut history = Vec::new();
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut best_path = None;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.max_epochs {
        state.epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut train_acc = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, t) = stack_windows(train_set, chunk)?;
            let (y, ctx) = model.forward_train(&x)?;
            let (loss, grad) = mse_loss(&y, &t)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(match grads.first_non_finite(&model.params) {
                    Some(name) => format!(
                        "loss became non-finite at epoch {epoch}; first NaN gradient in \"{name}\""
                    ),
                    None => format!("loss became non-finite at epoch {epoch}"),
                }));
            }
            grads.zero();
            model.backward(ctx, &grad, &mut grads, None)?;
            if let Some(name) = grads.first_non_finite(&model.params) {
                return Err(Error::Numeric(format!(
                    "NaN gradient in \"{name}\" at epoch {epoch}"
                )));
            }
            adam.lr = state.schedule.lr;
            adam.step(&mut model.params, &grads);
            train_acc += loss.to_f64_lossy();
            batches += 1;
        }
        let train_mse = train_acc / batches as f64;
        let val_mse = validation_loss(model, val_set, cfg.batch_size)?;

        let lr_for_epoch = state.schedule.lr;
        history.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr: lr_for_epoch,
        });

        let improved = val_mse < state.best_val_loss;
        if improved {
            state.best_val_loss = val_mse;
            best_epoch = epoch;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let meta = CheckpointMeta {
                epoch,
                best_val_loss: val_mse,
                norm_max: cfg.norm_max,
            };
            let snap = adam.snapshot(&model.params);
            save_checkpoint(model, Some(&snap), &meta, &dir.join(format!("epoch_{epoch:03}.ssac")))?;
            if improved {
                let best = dir.join("best.ssac");
                save_checkpoint(model, Some(&snap), &meta, &best)?;
                best_path = Some(best);
            }
        }
        state.schedule.observe(val_mse);
        if state.stop.observe(val_mse) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss: state.best_val_loss,
        stopped_early,
        best_checkpoint: best_path,
    })
}

/// Loss history as CSV: epoch, train_mse, val_mse, lr.
pub fn write_loss_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,train_mse,val_mse,lr\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e}\n",
            r.epoch, r.train_mse, r.val_mse, r.lr
        ));
    }
    std::fs::write(path, s)?;
    Ok(())
}
