use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::model::{Mode, Network};
use crate::diffkit::{Adam, AdamConfig, Graph, PlateauScheduler};
use crate::error::{Error, Result};
use crate::preprocess::Patch;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(
            s,
            "{},{:e},{},{},{},{}",
            e.epoch, e.lr, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        );
    }
    s
}

pub fn write_epoch_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, epoch_log_csv(log)).map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome<T> {
    /// Network at the epoch with the lowest validation loss.
    pub best: Network<T>,
    /// Optimizer state saved alongside `best`.
    pub adam: Adam<T>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn targets<T: Scalar>(patches: &[&Patch<T>]) -> Result<Vec<T>> {
    patches
        .iter()
        .map(|p| match p.label {
            Some(l @ (0 | 1)) => Ok(T::lit(l as f64)),
            Some(l) => Err(Error::Config(format!("patch {} has label {l}, expected 0 or 1", p.nodule_id))),
            None => Err(Error::Config(format!("patch {} has no label", p.nodule_id))),
        })
        .collect()
}

fn accuracy<T: Scalar>(probs: &[T], y: &[T]) -> f64 {
    let half = T::lit(0.5);
    let hits = probs.iter().zip(y).filter(|&(&p, &t)| (p >= half) == (t > half)).count();
    hits as f64 / probs.len().max(1) as f64
}

/// Mean eval-mode BCE and accuracy.
pub fn evaluate_loss<T: Scalar>(net: &Network<T>, patches: &[Patch<T>]) -> Result<(f64, f64)> {
    let refs: Vec<&Patch<T>> = patches.iter().collect();
    let y = targets(&refs)?;
    let p = net.predict(patches)?;
    let loss = crate::diffkit::bce_value(&p, &y).to_f64_lossy();
    Ok((loss, accuracy(&p, &y)))
}

/// One optimizer step on `batch`. Returns the batch loss and the
/// training-mode predictions.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    batch: &[&Patch<T>],
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<T>)> {
    let y = targets(batch)?;
    let x = net.batch_tensor(batch)?;
    let mut g = Graph::new();
    let fwd = net.forward(&mut g, x, Mode::Train, true, dropout)?;
    let loss = g.bce(fwd.prob, &y)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        let culprit = g.first_non_finite().unwrap_or_else(|| "loss".into());
        return Err(Error::NonFinite { tensor: culprit });
    }
    g.backward(loss);
    let idx = net.trainable_indices();
    let grads: Vec<_> = idx
        .iter()
        .map(|&i| g.take_grad(fwd.bound[i]).expect("trainable parameters receive gradients"))
        .collect();
    if let Some(k) = grads.iter().position(|t| !t.all_finite()) {
        return Err(Error::NonFinite {
            tensor: format!("grad of {}", net.params()[idx[k]].name),
        });
    }
    net.update_running_stats(&g, &fwd);
    let preds = g.value(fwd.prob).data().to_vec();
    net.apply_update(adam, &grads)?;
    Ok((lv.to_f64_lossy(), preds))
}

/// Mini-batch Adam on BCE with per-epoch shuffling, plateau learning-rate
/// decay on validation loss and best-validation-loss model selection.
pub fn train<T: Scalar>(
    mut net: Network<T>,
    train_set: &[Patch<T>],
    val_set: &[Patch<T>],
    tc: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    tc.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: train_set.len().min(val_set.len()),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: tc.lr,
        ..AdamConfig::default()
    });
    let mut sched = PlateauScheduler::new(tc.lr_factor, tc.lr_patience, tc.min_lr);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<(f64, usize, Network<T>, Adam<T>)> = None;

    for epoch in 1..=tc.epochs {
        let lr = adam.lr();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&Patch<T>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, preds) = train_step(&mut net, &mut adam, &batch, Some(&mut rng))?;
            loss_sum += loss * batch.len() as f64;
            let y = targets(&batch)?;
            hits += (accuracy(&preds, &y) * batch.len() as f64).round() as usize;
        }
        let n = train_set.len() as f64;
        let (val_loss, val_acc) = evaluate_loss(&net, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite {
                tensor: "validation loss".into(),
            });
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss,
            val_acc,
        };
        debug!("{entry:?}");
        log.push(entry);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, net.clone(), adam.clone()));
        }
        adam.set_lr(sched.observe(val_loss, lr));
        if let (Some(p), Some(b)) = (tc.early_stop, &best) {
            if epoch - b.1 >= p {
                info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let (_, best_epoch, best, adam) = best.expect("at least one epoch ran");
    info!("best validation loss at epoch {best_epoch}");
    Ok(TrainOutcome {
        best,
        adam,
        best_epoch,
        log,
    })
}
