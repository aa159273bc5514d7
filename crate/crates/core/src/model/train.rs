//! Base-model training: softmax cross-entropy minimized with Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{forward_batched, forward_trace, init_weights, predictions, Gates, ModelSpec, Weights};
use crate::error::{Error, Result};
use crate::rngutil;
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            lr: 3e-3,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean cross-entropy over the training set at initialization.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for &y in labels {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Mean cross-entropy and accuracy of the model on a labeled set.
pub fn evaluate(
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    ys: &[usize],
    batch: usize,
) -> Result<(f64, f64)> {
    check_labels(ys, spec.num_classes)?;
    let logits = forward_batched(spec, weights, xs, None, batch)?;
    let (n, k) = logits.dims2()?;
    let mut loss = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(ys) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let preds = predictions(&logits)?;
    let correct = preds.iter().zip(ys).filter(|(p, y)| p == y).count();
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Trains the spec from scratch and returns the weights of the epoch with
/// the best validation accuracy (earliest on ties). Deterministic in
/// `cfg.seed`.
pub fn train_base(
    spec: &ModelSpec,
    train_x: &Tensor,
    train_y: &[usize],
    val_x: &Tensor,
    val_y: &[usize],
    cfg: &TrainConfig,
) -> Result<(Weights, TrainLog)> {
    spec.validate()?;
    check_labels(train_y, spec.num_classes)?;
    check_labels(val_y, spec.num_classes)?;
    let (n, c, h, w) = train_x.dims4()?;
    if n != train_y.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: train_y.len(),
        });
    }
    if [c, h, w] != spec.input_shape {
        return Err(Error::InvalidShape {
            op: "train_base",
            shape: train_x.shape().to_vec(),
            reason: format!("spec expects input {:?}", spec.input_shape),
        });
    }

    let weights = init_weights(spec, cfg.seed);
    let mut params = weights.into_map();
    let (initial_loss, _) = evaluate(
        spec,
        &Weights::from_map(params.clone()),
        train_x,
        train_y,
        256,
    )?;

    let mut log = TrainLog {
        initial_loss,
        epochs: Vec::new(),
    };
    let mut state = AdamState::new();
    let hyper = AdamHyper::with_lr(cfg.lr);
    let sample = c * h * w;
    let mut best: Option<(f64, BTreeMap<String, Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = rngutil::rng_for(cfg.seed, 0x7124_0000 + epoch as u64);
        rngutil::shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut data = Vec::with_capacity(chunk.len() * sample);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                data.extend_from_slice(&train_x.data()[i * sample..(i + 1) * sample]);
                labels.push(train_y[i]);
            }
            let batch_x = Tensor::from_vec(&[chunk.len(), c, h, w], data)?;

            let mut tape = Tape::new();
            let cur = Weights::from_map(params.clone());
            let nodes = super::register_weights(&mut tape, spec, &cur, true)?;
            let x_id = tape.constant(batch_x);
            let trace = forward_trace(&mut tape, spec, &nodes, x_id, Gates::Absent)?;
            let loss = tape.softmax_cross_entropy(trace.logits, &labels)?;
            epoch_loss += tape.value(loss).scalar()?;
            batches += 1;

            let grads = tape.backward(loss)?;
            let mut grad_map = BTreeMap::new();
            for (name, id) in &nodes {
                let shape = params[name].shape().to_vec();
                grad_map.insert(name.clone(), grads.get_or_zeros(*id, &shape));
            }
            adam_step(&mut params, &grad_map, &mut state, &hyper)?;
        }

        let snapshot = Weights::from_map(params.clone());
        let (_, val_acc) = evaluate(spec, &snapshot, val_x, val_y, 256)?;
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_accuracy: val_acc,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, val acc {:.4}",
            epoch_loss / batches.max(1) as f64,
            val_acc
        );
    }

    let final_params = match best {
        Some((_, p)) => p,
        None => params,
    };
    Ok((Weights::from_map(final_params), log))
}
