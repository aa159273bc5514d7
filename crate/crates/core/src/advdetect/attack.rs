//! FGSM, BIM and DeepFool attack crafting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward, forward_trace, predictions, register_weights, Gates, ModelSpec, Weights,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    DeepFool,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::DeepFool => "deepfool",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "deepfool" => Ok(AttackKind::DeepFool),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L-infinity budget (fgsm/bim).
    #[serde(default)]
    pub epsilon: f64,
    /// bim iterations / deepfool iteration cap.
    pub steps: usize,
    /// deepfool boundary overshoot.
    #[serde(default)]
    pub overshoot: f64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            overshoot: 0.0,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn bim(epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            kind: AttackKind::Bim,
            epsilon,
            steps,
            overshoot: 0.0,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn deepfool(steps: usize, overshoot: f64) -> Self {
        AttackSpec {
            kind: AttackKind::DeepFool,
            epsilon: 0.0,
            steps,
            overshoot,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Fgsm | AttackKind::Bim => {
                if self.epsilon <= 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "{}: epsilon must be > 0",
                        self.kind.name()
                    )));
                }
            }
            AttackKind::DeepFool => {
                if self.overshoot < 0.0 {
                    return Err(Error::InvalidParam("deepfool: overshoot must be >= 0".into()));
                }
            }
        }
        if self.steps < 1 {
            return Err(Error::InvalidParam("attack steps must be >= 1".into()));
        }
        if self.clip_min >= self.clip_max {
            return Err(Error::InvalidParam("empty clip range".into()));
        }
        Ok(())
    }
}

pub struct AttackOutcome {
    pub x_adv: Tensor,
    /// Per sample: did the prediction change relative to the clean input.
    pub success: Vec<bool>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// d(cross-entropy)/dx for a batch.
fn ce_input_gradient(
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    ys: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nodes = register_weights(&mut tape, spec, weights, false)?;
    let x_id = tape.var(xs.clone());
    let trace = forward_trace(&mut tape, spec, &nodes, x_id, Gates::Absent)?;
    let loss = tape.softmax_cross_entropy(trace.logits, ys)?;
    let grads = tape.backward(loss)?;
    grads
        .get(x_id)
        .cloned()
        .ok_or(Error::DetachedNode)
}

fn fgsm_attack(
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    ys: &[usize],
    a: &AttackSpec,
) -> Result<Tensor> {
    let grad = ce_input_gradient(spec, weights, xs, ys)?;
    let data = xs
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| (x + a.epsilon * sign(g)).clamp(a.clip_min, a.clip_max))
        .collect();
    Tensor::from_vec(xs.shape(), data)
}

fn bim_attack(
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    ys: &[usize],
    a: &AttackSpec,
) -> Result<Tensor> {
    let step = a.epsilon / a.steps as f64;
    let mut cur = xs.clone();
    for _ in 0..a.steps {
        let grad = ce_input_gradient(spec, weights, &cur, ys)?;
        let data = cur
            .data()
            .iter()
            .zip(grad.data())
            .zip(xs.data())
            .map(|((&x, &g), &orig)| {
                (x + step * sign(g))
                    .clamp(orig - a.epsilon, orig + a.epsilon)
                    .clamp(a.clip_min, a.clip_max)
            })
            .collect();
        cur = Tensor::from_vec(xs.shape(), data)?;
    }
    Ok(cur)
}

/// Gradients of every logit with respect to a single [1,c,h,w] input.
fn logit_jacobian(
    spec: &ModelSpec,
    weights: &Weights,
    x: &Tensor,
) -> Result<(Vec<f64>, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let nodes = register_weights(&mut tape, spec, weights, false)?;
    let x_id = tape.var(x.clone());
    let trace = forward_trace(&mut tape, spec, &nodes, x_id, Gates::Absent)?;
    let logits = tape.value(trace.logits).data().to_vec();
    let mut grads = Vec::with_capacity(spec.num_classes);
    for k in 0..spec.num_classes {
        let col = tape.column(trace.logits, k)?;
        let g = tape.backward(col)?;
        grads.push(g.get(x_id).cloned().ok_or(Error::DetachedNode)?);
    }
    Ok((logits, grads))
}

/// Minimal-perturbation linearization attack for one sample.
fn deepfool_single(
    spec: &ModelSpec,
    weights: &Weights,
    x0: &Tensor,
    a: &AttackSpec,
) -> Result<Tensor> {
    let numel = x0.numel();
    let orig = {
        let logits = forward(spec, weights, x0, None)?;
        predictions(&logits)?[0]
    };
    let mut r_tot = vec![0.0; numel];
    for _ in 0..a.steps {
        let probe_data: Vec<f64> = x0
            .data()
            .iter()
            .zip(&r_tot)
            .map(|(&x, &r)| x + (1.0 + a.overshoot) * r)
            .collect();
        let probe = Tensor::from_vec(x0.shape(), probe_data)?;
        let (logits, grads) = logit_jacobian(spec, weights, &probe)?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|p, q| p.1.partial_cmp(q.1).unwrap())
            .unwrap()
            .0;
        if pred != orig {
            break;
        }
        // closest linearized boundary
        let mut best: Option<(f64, usize)> = None;
        for k in 0..spec.num_classes {
            if k == orig {
                continue;
            }
            let df = logits[k] - logits[orig];
            let norm2: f64 = grads[k]
                .data()
                .iter()
                .zip(grads[orig].data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            let norm = norm2.sqrt().max(1e-12);
            let ratio = df.abs() / norm;
            if best.map_or(true, |(r, _)| ratio < r) {
                best = Some((ratio, k));
            }
        }
        let (_, l) = best.ok_or_else(|| Error::InvalidParam("deepfool needs >= 2 classes".into()))?;
        let df = (logits[l] - logits[orig]).abs();
        let norm2: f64 = grads[l]
            .data()
            .iter()
            .zip(grads[orig].data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            .max(1e-24);
        for ((r, &gl), &go) in r_tot
            .iter_mut()
            .zip(grads[l].data())
            .zip(grads[orig].data())
        {
            *r += df / norm2 * (gl - go);
        }
    }
    let data = x0
        .data()
        .iter()
        .zip(&r_tot)
        .map(|(&x, &r)| (x + (1.0 + a.overshoot) * r).clamp(a.clip_min, a.clip_max))
        .collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Crafts adversarial versions of a batch. Success means the model's
/// prediction changed relative to the clean input.
pub fn attack(
    a: &AttackSpec,
    spec: &ModelSpec,
    weights: &Weights,
    xs: &Tensor,
    ys: &[usize],
) -> Result<AttackOutcome> {
    a.validate()?;
    let (n, c, h, w) = xs.dims4()?;
    if ys.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ys.len(),
        });
    }
    for &y in ys {
        if y >= spec.num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: spec.num_classes,
            });
        }
    }
    if xs
        .data()
        .iter()
        .any(|&v| v < a.clip_min || v > a.clip_max)
    {
        return Err(Error::InvalidParam(
            "input outside the attack clip range".into(),
        ));
    }

    let x_adv = match a.kind {
        AttackKind::Fgsm => fgsm_attack(spec, weights, xs, ys, a)?,
        AttackKind::Bim => bim_attack(spec, weights, xs, ys, a)?,
        AttackKind::DeepFool => {
            let sample = c * h * w;
            let rows: Vec<Result<Vec<f64>>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let x0 = Tensor::from_vec(
                        &[1, c, h, w],
                        xs.data()[i * sample..(i + 1) * sample].to_vec(),
                    )?;
                    Ok(deepfool_single(spec, weights, &x0, a)?.into_data())
                })
                .collect();
            let mut data = Vec::with_capacity(n * sample);
            for row in rows {
                data.extend(row?);
            }
            Tensor::from_vec(&[n, c, h, w], data)?
        }
    };

    let clean_pred = predictions(&crate::model::forward_batched(
        spec, weights, xs, None, 256,
    )?)?;
    let adv_pred = predictions(&crate::model::forward_batched(
        spec, weights, &x_adv, None, 256,
    )?)?;
    let success = clean_pred
        .iter()
        .zip(&adv_pred)
        .map(|(c, a)| c != a)
        .collect();
    Ok(AttackOutcome { x_adv, success })
}
