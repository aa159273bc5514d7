//! Layer/architecture description, the gated forward pass, base-model
//! training and model file serialization.
//!
//! Control gates are per-channel multipliers applied to the post-activation
//! output of a gated layer: executing a gated conv or hidden dense layer
//! schedules a channel-wise multiply right after the rectifier that follows
//! it. With all-ones gates the forward pass is bit-identical to the ungated
//! one.

mod io;
mod train;

pub use io::{load_model, save_model};
pub use train::{evaluate, train_base, EpochStats, TrainConfig, TrainLog};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rngutil;
use crate::tensor::{NodeId, Tape, Tensor};

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gated: bool,
    },
    Relu,
    MaxPool,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        gated: bool,
    },
}

impl LayerSpec {
    fn gated_channels(&self) -> Option<usize> {
        match self {
            LayerSpec::Conv {
                out_channels,
                gated: true,
                ..
            } => Some(*out_channels),
            LayerSpec::Dense {
                out_features,
                gated: true,
                ..
            } => Some(*out_features),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
    pub input_shape: [usize; 3],
}

impl ModelSpec {
    /// Checks that consecutive layer shapes chain, the final layer emits
    /// `num_classes` logits, and gating only appears on conv/hidden-dense
    /// layers immediately followed by a rectifier.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidClassCount(self.num_classes));
        }
        let mut gated_total = 0;
        enum S {
            Spatial(usize, usize, usize),
            Flat(usize),
        }
        let [c, h, w] = self.input_shape;
        let mut state = S::Spatial(c, h, w);
        let mut out_features = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    gated,
                } => {
                    let S::Spatial(c, h, w) = state else {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: conv after flatten"
                        )));
                    };
                    if c != *in_channels {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: conv expects {in_channels} input channels, gets {c}"
                        )));
                    }
                    if *stride == 0 || h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: conv geometry does not fit {h}x{w}"
                        )));
                    }
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    state = S::Spatial(*out_channels, oh, ow);
                    if *gated {
                        gated_total += out_channels;
                        if !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu)) {
                            return Err(Error::InvalidModel(format!(
                                "layer {i}: gated layer must be followed by relu"
                            )));
                        }
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::MaxPool => {
                    let S::Spatial(c, h, w) = state else {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: maxpool after flatten"
                        )));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: maxpool needs even dims, got {h}x{w}"
                        )));
                    }
                    state = S::Spatial(c, h / 2, w / 2);
                }
                LayerSpec::Flatten => {
                    let S::Spatial(c, h, w) = state else {
                        return Err(Error::InvalidModel(format!("layer {i}: double flatten")));
                    };
                    state = S::Flat(c * h * w);
                }
                LayerSpec::Dense {
                    in_features,
                    out_features: of,
                    gated,
                } => {
                    let S::Flat(f) = state else {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: dense before flatten"
                        )));
                    };
                    if f != *in_features {
                        return Err(Error::InvalidModel(format!(
                            "layer {i}: dense expects {in_features} features, gets {f}"
                        )));
                    }
                    state = S::Flat(*of);
                    if *gated {
                        gated_total += of;
                        let is_last = i + 1 == self.layers.len();
                        if is_last || !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu)) {
                            return Err(Error::InvalidModel(format!(
                                "layer {i}: gated dense must be hidden and followed by relu"
                            )));
                        }
                    }
                }
            }
            if i + 1 == self.layers.len() {
                match (layer, &state) {
                    (LayerSpec::Dense { .. }, S::Flat(f)) => out_features = *f,
                    _ => {
                        return Err(Error::InvalidModel(
                            "final layer must be dense".to_string(),
                        ))
                    }
                }
            }
        }
        if out_features != self.num_classes {
            return Err(Error::InvalidModel(format!(
                "final layer emits {out_features} logits, expected {}",
                self.num_classes
            )));
        }
        if gated_total == 0 {
            return Err(Error::InvalidModel("no gated layer".to_string()));
        }
        Ok(())
    }

    /// (layer index, channel count) for every gated layer, in order.
    pub fn gated_layers(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gated_channels().map(|c| (i, c)))
            .collect()
    }

    pub fn total_gated_channels(&self) -> usize {
        self.gated_layers().iter().map(|(_, c)| c).sum()
    }

    /// Parameter names with their shapes, in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("layer{i}.weight"),
                        vec![*out_channels, *in_channels, *kernel, *kernel],
                    ));
                    out.push((format!("layer{i}.bias"), vec![*out_channels]));
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    ..
                } => {
                    out.push((
                        format!("layer{i}.weight"),
                        vec![*in_features, *out_features],
                    ));
                    out.push((format!("layer{i}.bias"), vec![*out_features]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn conv_block_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count()
    }
}

/// The fixed desk-scale reference architecture:
/// conv(16)-relu-pool, conv(32)-relu-pool, conv(64)-relu-pool, flatten,
/// dense(128)-relu, dense(K). The three convs and the hidden dense carry
/// gates (240 gate channels for any input size).
pub fn build_reference_cnn(input_shape: [usize; 3], num_classes: usize) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::InvalidClassCount(num_classes));
    }
    let [c, h, w] = input_shape;
    if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
        return Err(Error::InvalidModel(format!(
            "reference cnn needs spatial dims divisible by 8, got {h}x{w}"
        )));
    }
    let conv = |ic, oc| LayerSpec::Conv {
        in_channels: ic,
        out_channels: oc,
        kernel: 3,
        stride: 1,
        padding: 1,
        gated: true,
    };
    let spec = ModelSpec {
        layers: vec![
            conv(c, 16),
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            conv(16, 32),
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            conv(32, 64),
            LayerSpec::Relu,
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: 64 * (h / 8) * (w / 8),
                out_features: 128,
                gated: true,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_features: 128,
                out_features: num_classes,
                gated: false,
            },
        ],
        num_classes,
        input_shape,
    };
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Named parameter tensors; immutable once training finishes.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Weights { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Every parameter named by the spec present with a matching shape.
    pub fn validate_against(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidModel(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "weights",
                    lhs: shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Kaiming-normal initialization, deterministic in the seed.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Weights {
    let mut tensors = BTreeMap::new();
    for (li, (name, shape)) in spec.param_shapes().into_iter().enumerate() {
        let mut rng = rngutil::rng_for(seed, 0x5EED_0000 + li as u64);
        let t = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| std * rngutil::standard_normal(&mut rng))
                .collect();
            Tensor::from_vec(&shape, data).unwrap()
        };
        tensors.insert(name, t);
    }
    Weights { tensors }
}

// ---------------------------------------------------------------------------
// Gates
// ---------------------------------------------------------------------------

/// Per-gated-layer channel gate values, nonnegative, ordered to match
/// [`ModelSpec::gated_layers`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateVector {
    pub per_layer: Vec<Vec<f64>>,
}

impl GateVector {
    pub fn ones(spec: &ModelSpec) -> Self {
        GateVector {
            per_layer: spec
                .gated_layers()
                .iter()
                .map(|(_, c)| vec![1.0; *c])
                .collect(),
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let gated = spec.gated_layers();
        if gated.len() != self.per_layer.len() {
            return Err(Error::GateLengthMismatch {
                layer: gated.len().min(self.per_layer.len()),
                expected: gated.len(),
                got: self.per_layer.len(),
            });
        }
        for ((layer, expected), values) in gated.iter().zip(&self.per_layer) {
            if *expected != values.len() {
                return Err(Error::GateLengthMismatch {
                    layer: *layer,
                    expected: *expected,
                    got: values.len(),
                });
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.per_layer.iter().flatten().copied().collect()
    }

    pub fn total_len(&self) -> usize {
        self.per_layer.iter().map(Vec::len).sum()
    }

    /// Fraction of gates strictly above `eps` (the spec's "sparsity").
    pub fn active_fraction(&self, eps: f64) -> f64 {
        let total = self.total_len();
        if total == 0 {
            return 0.0;
        }
        let active = self
            .per_layer
            .iter()
            .flatten()
            .filter(|&&g| g > eps)
            .count();
        active as f64 / total as f64
    }

    /// Zeroes every gate at or below `eps`.
    pub fn zero_below(&mut self, eps: f64) {
        for layer in &mut self.per_layer {
            for g in layer.iter_mut() {
                if *g <= eps {
                    *g = 0.0;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// How gate values enter the forward pass.
#[derive(Clone, Copy)]
pub enum Gates<'a> {
    /// No gating; identical to all-ones gates.
    Absent,
    /// Fixed gate values recorded as constants.
    Fixed(&'a GateVector),
    /// Pre-registered tape nodes, one per gated layer (training path).
    Nodes(&'a [NodeId]),
}

/// Nodes of interest from one forward pass.
pub struct ForwardTrace {
    pub logits: NodeId,
    /// Post-rectifier (and post-gate) conv outputs, one per conv layer,
    /// before the following pool.
    pub conv_blocks: Vec<NodeId>,
    /// Post-rectifier (and post-gate) output of the last hidden dense layer.
    pub penultimate: Option<NodeId>,
}

/// Registers every weight tensor on the tape. `trainable` decides whether
/// gradients flow to them.
pub fn register_weights(
    tape: &mut Tape,
    spec: &ModelSpec,
    weights: &Weights,
    trainable: bool,
) -> Result<BTreeMap<String, NodeId>> {
    weights.validate_against(spec)?;
    let mut map = BTreeMap::new();
    for (name, t) in weights.as_map() {
        let id = if trainable {
            tape.var(t.clone())
        } else {
            tape.constant(t.clone())
        };
        map.insert(name.clone(), id);
    }
    Ok(map)
}

/// Runs the layer stack on the tape from an already-registered input node.
pub fn forward_trace(
    tape: &mut Tape,
    spec: &ModelSpec,
    weight_nodes: &BTreeMap<String, NodeId>,
    x: NodeId,
    gates: Gates<'_>,
) -> Result<ForwardTrace> {
    if let Gates::Fixed(gv) = gates {
        gv.validate(spec)?;
    }
    if let Gates::Nodes(nodes) = gates {
        let expected = spec.gated_layers().len();
        if nodes.len() != expected {
            return Err(Error::GateLengthMismatch {
                layer: 0,
                expected,
                got: nodes.len(),
            });
        }
    }
    let mut cur = x;
    let mut pending_gate: Option<NodeId> = None;
    let mut pending_is_conv = false;
    let mut gate_cursor = 0;
    let mut conv_blocks = Vec::new();
    let mut penultimate = None;
    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv {
                stride,
                padding,
                gated,
                ..
            } => {
                let w = weight_nodes[&format!("layer{i}.weight")];
                let b = weight_nodes[&format!("layer{i}.bias")];
                cur = tape.conv2d(cur, w, *stride as i64, *padding as i64)?;
                cur = tape.bias_add(cur, b)?;
                pending_is_conv = true;
                if *gated {
                    pending_gate = Some(next_gate(tape, spec, gates, &mut gate_cursor)?);
                } else {
                    pending_gate = None;
                }
            }
            LayerSpec::Dense { gated, .. } => {
                let w = weight_nodes[&format!("layer{i}.weight")];
                let b = weight_nodes[&format!("layer{i}.bias")];
                cur = tape.matmul(cur, w)?;
                cur = tape.bias_add(cur, b)?;
                pending_is_conv = false;
                if *gated {
                    pending_gate = Some(next_gate(tape, spec, gates, &mut gate_cursor)?);
                } else {
                    pending_gate = None;
                }
            }
            LayerSpec::Relu => {
                cur = tape.relu(cur)?;
                if let Some(gate) = pending_gate.take() {
                    cur = tape.channel_mul(cur, gate)?;
                }
                if pending_is_conv {
                    conv_blocks.push(cur);
                } else {
                    penultimate = Some(cur);
                }
            }
            LayerSpec::MaxPool => {
                cur = tape.maxpool2x2(cur)?;
            }
            LayerSpec::Flatten => {
                let (n, c, h, w) = tape.value(cur).dims4()?;
                cur = tape.reshape(cur, &[n, c * h * w])?;
            }
        }
    }
    Ok(ForwardTrace {
        logits: cur,
        conv_blocks,
        penultimate,
    })
}

fn next_gate(
    tape: &mut Tape,
    spec: &ModelSpec,
    gates: Gates<'_>,
    cursor: &mut usize,
) -> Result<NodeId> {
    let idx = *cursor;
    *cursor += 1;
    match gates {
        Gates::Absent => {
            let (_, channels) = spec.gated_layers()[idx];
            Ok(tape.constant(Tensor::ones(&[channels])))
        }
        Gates::Fixed(gv) => Ok(tape.constant(Tensor::from_vec(
            &[gv.per_layer[idx].len()],
            gv.per_layer[idx].clone(),
        )?)),
        Gates::Nodes(nodes) => Ok(nodes[idx]),
    }
}

/// Logits for a batch, whole batch on one tape.
pub fn forward(
    spec: &ModelSpec,
    weights: &Weights,
    x: &Tensor,
    gates: Option<&GateVector>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = register_weights(&mut tape, spec, weights, false)?;
    let x_id = tape.constant(x.clone());
    let gates = match gates {
        Some(g) => Gates::Fixed(g),
        None => Gates::Absent,
    };
    let trace = forward_trace(&mut tape, spec, &nodes, x_id, gates)?;
    Ok(tape.value(trace.logits).clone())
}

/// Logits for an arbitrarily large input, chunked to bound tape memory.
pub fn forward_batched(
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    gates: Option<&GateVector>,
    batch: usize,
) -> Result<Tensor> {
    let (n, c, h, w) = xs.dims4()?;
    let sample = c * h * w;
    let mut out = Vec::with_capacity(n * spec.num_classes);
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let chunk = Tensor::from_vec(
            &[len, c, h, w],
            xs.data()[start * sample..(start + len) * sample].to_vec(),
        )?;
        let logits = forward(spec, weights, &chunk, gates)?;
        out.extend_from_slice(logits.data());
        start += len;
    }
    Tensor::from_vec(&[n, spec.num_classes], out)
}

/// Row-wise argmax of a logits tensor.
pub fn predictions(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, k) = logits.dims2()?;
    Ok((0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect())
}
