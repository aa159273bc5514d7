//! Class-specific subnetwork extraction.
//!
//! Gates start at 1.0 and are trained with Adam to minimize, over balanced
//! epochs, the per-class distillation loss
//!
//! ```text
//! mean_i BCE(sigmoid(teacher_c(x_i)), sigmoid(student_c(x_i))) + gamma * mean_g |gate_g|
//! ```
//!
//! with the base weights frozen. After every Adam step gates are projected
//! to be nonnegative. The epoch with minimum balanced-validation loss among
//! those at or below the sparsity ceiling tau is selected; gates at or
//! below the binarization threshold are zeroed in the returned bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{balanced_epoch, to_batch_indices, LabeledImage};
use crate::error::{Error, Result};
use crate::model::{
    forward, forward_batched, forward_trace, register_weights, GateVector, Gates, ModelSpec,
    Weights,
};
use crate::rngutil;
use crate::tensor::{adam_step, bce, sigmoid, AdamHyper, AdamState, NodeId, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionConfig {
    /// Sparsity weight on the mean absolute gate value.
    pub gamma: f64,
    /// Training epochs T.
    pub epochs: usize,
    /// Sparsity ceiling tau: selected epochs must have at most this
    /// fraction of active gates.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Binarization threshold: gates at or below it are zeroed on output.
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            gamma: 0.05,
            epochs: 5,
            tau: 0.5,
            lr: 0.1,
            batch_size: 64,
            epsilon: 0.01,
            seed: 13,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 {
            return Err(Error::InvalidParam("extract.gamma must be >= 0".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidParam("extract.tau must be in (0, 1]".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidParam("extract.epsilon must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidParam("extract.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidParam("extract.batch_size must be >= 1".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::InvalidParam("extract.lr must be >= 0".into()));
        }
        Ok(())
    }
}

/// The extracted subnetwork: the frozen base weights plus this gate vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubnetworkBundle {
    pub class: usize,
    pub gates: GateVector,
    /// Fraction of gates above epsilon.
    pub sparsity: f64,
    /// 1-based epoch the gates were taken from.
    pub selected_epoch: usize,
    /// Balanced-validation loss: index 0 is the identity-gate loss, then
    /// one entry per training epoch.
    pub loss_history: Vec<f64>,
    pub met_tau: bool,
    pub config: ExtractionConfig,
}

pub fn save_bundle(path: &Path, bundle: &SubnetworkBundle) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(bundle)?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<SubnetworkBundle> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

// ---------------------------------------------------------------------------
// Distillation loss
// ---------------------------------------------------------------------------

/// Records the distillation objective on the tape: mean BCE between the
/// sigmoid-transformed teacher and student class logits plus
/// `gamma * mean(|gate|)` over all gate channels.
pub fn distill_loss_node(
    tape: &mut Tape,
    student_logit_c: NodeId,
    teacher_logits_c: &[f64],
    gate_nodes: &[NodeId],
    total_gates: usize,
    gamma: f64,
) -> Result<NodeId> {
    let teacher_probs: Vec<f64> = teacher_logits_c.iter().map(|&t| sigmoid(t)).collect();
    let data_term = tape.bce_with_logits(student_logit_c, &teacher_probs)?;
    if gamma == 0.0 || gate_nodes.is_empty() {
        return Ok(data_term);
    }
    let mut l1: Option<NodeId> = None;
    for &gate in gate_nodes {
        let a = tape.abs(gate)?;
        let s = tape.sum(a)?;
        l1 = Some(match l1 {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let scale_env: f64 = std::env::var("L1_SCALE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0 / total_gates as f64);
    let reg = tape.scale(l1.unwrap(), gamma * scale_env)?;
    tape.add(data_term, reg)
}

/// Pure evaluation of the same objective, used for validation bookkeeping
/// and as a cross-check of the tape route.
pub fn distill_loss_value(
    teacher_logits_c: &[f64],
    student_logits_c: &[f64],
    gates: &GateVector,
    gamma: f64,
) -> f64 {
    let n = teacher_logits_c.len();
    let data: f64 = teacher_logits_c
        .iter()
        .zip(student_logits_c)
        .map(|(&t, &s)| bce(sigmoid(t), sigmoid(s)))
        .sum::<f64>()
        / n as f64;
    let total = gates.total_len();
    if gamma == 0.0 || total == 0 {
        return data;
    }
    let l1: f64 = gates.per_layer.iter().flatten().map(|g| g.abs()).sum();
    let scale_env: f64 = std::env::var("L1_SCALE")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1.0 / total as f64);
    data + gamma * scale_env * l1
}

// ---------------------------------------------------------------------------
// Teacher logit cache
// ---------------------------------------------------------------------------

/// Full-model logits for a sample set; computed once and shared across
/// per-class extraction jobs.
pub struct TeacherLogits {
    logits: Tensor,
}

impl TeacherLogits {
    pub fn compute(
        spec: &ModelSpec,
        weights: &Weights,
        images: &[LabeledImage],
        batch: usize,
    ) -> Result<Self> {
        let (xs, _) = crate::data::to_batch(images)?;
        Ok(TeacherLogits {
            logits: forward_batched(spec, weights, &xs, None, batch)?,
        })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// Class-c logit for each of the given sample indices.
    pub fn class_column(&self, indices: &[usize], class: usize) -> Vec<f64> {
        let (_, k) = self.logits.dims2().unwrap();
        indices
            .iter()
            .map(|&i| self.logits.data()[i * k + class])
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Extraction loop
// ---------------------------------------------------------------------------

struct GateParams {
    tensors: BTreeMap<String, Tensor>,
}

impl GateParams {
    fn ones(spec: &ModelSpec) -> Self {
        let mut tensors = BTreeMap::new();
        for (slot, (_, channels)) in spec.gated_layers().iter().enumerate() {
            tensors.insert(format!("gate{slot:02}"), Tensor::ones(&[*channels]));
        }
        GateParams { tensors }
    }

    fn as_gate_vector(&self) -> GateVector {
        GateVector {
            per_layer: self.tensors.values().map(|t| t.data().to_vec()).collect(),
        }
    }

    fn project_nonnegative(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Learns the gate vector for one class. Deterministic in `cfg.seed`.
pub fn extract_subnetwork(
    spec: &ModelSpec,
    weights: &Weights,
    train: &[LabeledImage],
    val: &[LabeledImage],
    teacher_train: &TeacherLogits,
    teacher_val: &TeacherLogits,
    class: usize,
    cfg: &ExtractionConfig,
) -> Result<SubnetworkBundle> {
    cfg.validate()?;
    spec.validate()?;
    if class >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: spec.num_classes,
        });
    }

    // Fixed balanced validation slice.
    let val_slice = balanced_epoch(val, class, rngutil::mix(cfg.seed, 0x7A11_DA7A))?;
    let val_indices: Vec<usize> = val_slice.iter().map(|s| s.index).collect();
    let (val_x, _) = to_batch_indices(val, &val_indices)?;
    let val_teacher = teacher_val.class_column(&val_indices, class);

    let total_gates = spec.total_gated_channels();
    let mut gates = GateParams::ones(spec);
    let mut adam = AdamState::new();
    let hyper = AdamHyper::with_lr(cfg.lr);

    let val_loss = |gv: &GateVector| -> Result<f64> {
        let logits = forward_batched(spec, weights, &val_x, Some(gv), 256)?;
        let (_, k) = logits.dims2()?;
        let student: Vec<f64> = (0..val_indices.len())
            .map(|i| logits.data()[i * k + class])
            .collect();
        Ok(distill_loss_value(&val_teacher, &student, gv, cfg.gamma))
    };

    let mut loss_history = vec![val_loss(&gates.as_gate_vector())?];
    // best epoch meeting tau, by validation loss; min-sparsity fallback otherwise
    let mut best_ok: Option<(f64, usize, GateVector)> = None;
    let mut fallback: Option<(f64, f64, usize, GateVector)> = None;

    for epoch in 1..=cfg.epochs {
        let samples = balanced_epoch(train, class, rngutil::mix(cfg.seed, epoch as u64))?;
        let indices: Vec<usize> = samples.iter().map(|s| s.index).collect();
        for chunk in indices.chunks(cfg.batch_size) {
            let (batch_x, _) = to_batch_indices(train, chunk)?;
            let teacher_col = teacher_train.class_column(chunk, class);

            let mut tape = Tape::new();
            let weight_nodes = register_weights(&mut tape, spec, weights, false)?;
            let gate_nodes: Vec<NodeId> = gates
                .tensors
                .values()
                .map(|t| tape.var(t.clone()))
                .collect();
            let x_id = tape.constant(batch_x);
            let trace = forward_trace(&mut tape, spec, &weight_nodes, x_id, Gates::Nodes(&gate_nodes))?;
            let student_col = tape.column(trace.logits, class)?;
            let loss = distill_loss_node(
                &mut tape,
                student_col,
                &teacher_col,
                &gate_nodes,
                total_gates,
                cfg.gamma,
            )?;
            let grads = tape.backward(loss)?;
            let mut grad_map = BTreeMap::new();
            for (name, id) in gates.tensors.keys().zip(&gate_nodes) {
                let shape = gates.tensors[name].shape().to_vec();
                grad_map.insert(name.clone(), grads.get_or_zeros(*id, &shape));
            }
            adam_step(&mut gates.tensors, &grad_map, &mut adam, &hyper)?;
            gates.project_nonnegative();
        }

        let gv = gates.as_gate_vector();
        let sparsity = gv.active_fraction(cfg.epsilon);
        let loss = val_loss(&gv)?;
        loss_history.push(loss);
        log::debug!(
            "class {class} epoch {epoch}: val loss {loss:.5}, sparsity {sparsity:.3}"
        );

        if sparsity <= cfg.tau && best_ok.as_ref().map_or(true, |(l, ..)| loss < *l) {
            best_ok = Some((loss, epoch, gv.clone()));
        }
        if fallback
            .as_ref()
            .map_or(true, |(s, l, ..)| (sparsity, loss) < (*s, *l))
        {
            fallback = Some((sparsity, loss, epoch, gv));
        }
    }

    let (met_tau, selected_epoch, mut selected) = match best_ok {
        Some((_, epoch, gv)) => (true, epoch, gv),
        None => {
            let (_, _, epoch, gv) = fallback.expect("at least one epoch ran");
            (false, epoch, gv)
        }
    };
    selected.zero_below(cfg.epsilon);
    let sparsity = selected.active_fraction(cfg.epsilon);

    Ok(SubnetworkBundle {
        class,
        gates: selected,
        sparsity,
        selected_epoch,
        loss_history,
        met_tau,
        config: cfg.clone(),
    })
}

/// Forward pass through a bundle's gated network.
pub fn subnet_forward(
    spec: &ModelSpec,
    weights: &Weights,
    bundle: &SubnetworkBundle,
    x: &Tensor,
) -> Result<Tensor> {
    bundle.gates.validate(spec)?;
    forward(spec, weights, x, Some(&bundle.gates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_shapes, ShapesConfig};
    use crate::model::{init_weights, LayerSpec};

    fn tiny_spec() -> ModelSpec {
        ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    gated: true,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 4 * 12 * 12,
                    out_features: 8,
                    gated: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    in_features: 8,
                    out_features: 10,
                    gated: false,
                },
            ],
            num_classes: 10,
            input_shape: [1, 24, 24],
        }
    }

    fn tiny_setup() -> (
        ModelSpec,
        Weights,
        Vec<LabeledImage>,
        Vec<LabeledImage>,
        TeacherLogits,
        TeacherLogits,
    ) {
        let spec = tiny_spec();
        let weights = init_weights(&spec, 77);
        let config = ShapesConfig {
            image_size: 24,
            train_per_class: 4,
            val_per_class: 2,
            test_per_class: 1,
            noise: 0.02,
            seed: 3,
        };
        let ds = generate_shapes(&config).unwrap();
        let tt = TeacherLogits::compute(&spec, &weights, &ds.train, 64).unwrap();
        let tv = TeacherLogits::compute(&spec, &weights, &ds.val, 64).unwrap();
        (spec, weights, ds.train, ds.val, tt, tv)
    }

    #[test]
    fn distill_loss_matches_hand_value() {
        // teacher = student = 2.0, all gates 1.0, gamma 0.05:
        // BCE(sigmoid 2, sigmoid 2) + 0.05 = 0.3653 + 0.05
        let gates = GateVector {
            per_layer: vec![vec![1.0; 6]],
        };
        let loss = distill_loss_value(&[2.0], &[2.0], &gates, 0.05);
        assert!((loss - 0.4153).abs() < 1e-4, "got {loss}");
    }

    #[test]
    fn matched_probabilities_minimize_bce() {
        // BCE(a, b) >= BCE(a, a) for any b
        let a = 0.73;
        let base = bce(a, a);
        for b in [0.01, 0.3, 0.5, 0.72, 0.74, 0.99] {
            assert!(bce(a, b) >= base);
        }
    }

    #[test]
    fn tape_and_pure_routes_agree() {
        let teacher = vec![1.5, -0.3, 0.2];
        let student_vals = vec![0.9, 0.1, -0.4];
        let gate_vals = [vec![0.7, 0.0, 1.3], vec![0.5]];
        let gamma = 0.05;

        let mut tape = Tape::new();
        let student = tape.var(Tensor::from_vec(&[3], student_vals.clone()).unwrap());
        let gnodes: Vec<NodeId> = gate_vals
            .iter()
            .map(|g| tape.var(Tensor::from_vec(&[g.len()], g.clone()).unwrap()))
            .collect();
        let loss = distill_loss_node(&mut tape, student, &teacher, &gnodes, 4, gamma).unwrap();
        let tape_val = tape.value(loss).scalar().unwrap();

        let gv = GateVector {
            per_layer: gate_vals.to_vec(),
        };
        let pure = distill_loss_value(&teacher, &student_vals, &gv, gamma);
        assert!((tape_val - pure).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_keeps_identity_gates() {
        let (spec, weights, train, val, tt, tv) = tiny_setup();
        let cfg = ExtractionConfig {
            gamma: 0.0,
            epochs: 1,
            lr: 0.0,
            batch_size: 16,
            ..ExtractionConfig::default()
        };
        let bundle = extract_subnetwork(&spec, &weights, &train, &val, &tt, &tv, 0, &cfg).unwrap();
        assert!(bundle
            .gates
            .per_layer
            .iter()
            .flatten()
            .all(|&g| g == 1.0));
        assert_eq!(bundle.sparsity, 1.0);
        let (xs, _) = crate::data::to_batch(&val).unwrap();
        let full = forward(&spec, &weights, &xs, None).unwrap();
        let sub = subnet_forward(&spec, &weights, &bundle, &xs).unwrap();
        assert_eq!(full.data(), sub.data());
    }

    #[test]
    fn binarization_thresholds_gates() {
        let mut gv = GateVector {
            per_layer: vec![vec![1.0, 0.5, 0.009, 0.0]],
        };
        assert_eq!(gv.active_fraction(0.01), 0.5);
        gv.zero_below(0.01);
        assert_eq!(gv.per_layer[0], vec![1.0, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn extraction_is_deterministic_and_projects_gates() {
        let (spec, weights, train, val, tt, tv) = tiny_setup();
        let cfg = ExtractionConfig {
            epochs: 2,
            batch_size: 16,
            seed: 5,
            ..ExtractionConfig::default()
        };
        let a = extract_subnetwork(&spec, &weights, &train, &val, &tt, &tv, 1, &cfg).unwrap();
        let b = extract_subnetwork(&spec, &weights, &train, &val, &tt, &tv, 1, &cfg).unwrap();
        assert_eq!(a.gates, b.gates);
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.selected_epoch, b.selected_epoch);
        assert!(a.gates.per_layer.iter().flatten().all(|&g| g >= 0.0));
    }

    #[test]
    fn stronger_gamma_gives_smaller_l1_median() {
        let (spec, weights, train, val, tt, tv) = tiny_setup();
        let l1_for = |gamma: f64, seed: u64| -> f64 {
            let cfg = ExtractionConfig {
                gamma,
                epochs: 2,
                batch_size: 16,
                seed,
                ..ExtractionConfig::default()
            };
            let b =
                extract_subnetwork(&spec, &weights, &train, &val, &tt, &tv, 2, &cfg).unwrap();
            b.gates.per_layer.iter().flatten().map(|g| g.abs()).sum()
        };
        let mut low: Vec<f64> = (0..5).map(|s| l1_for(0.01, s)).collect();
        let mut high: Vec<f64> = (0..5).map(|s| l1_for(0.4, s)).collect();
        low.sort_by(|a, b| a.partial_cmp(b).unwrap());
        high.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(
            high[2] <= low[2],
            "median L1 under gamma 0.4 ({}) should not exceed gamma 0.01 ({})",
            high[2],
            low[2]
        );
    }
}
