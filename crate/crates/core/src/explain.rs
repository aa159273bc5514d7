//! Gradient-based saliency methods, the subnetwork-swap variant, and the
//! weakly supervised localization evaluation with the alpha* threshold
//! sweep.
//!
//! In subnet mode both the forward and the backward pass run through the
//! gated network of the class being explained.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{to_batch, BBox, LabeledImage};
use crate::error::{Error, Result};
use crate::extract::SubnetworkBundle;
use crate::model::{
    forward_batched, forward_trace, predictions, register_weights, GateVector, Gates, ModelSpec,
    Weights,
};
use crate::rngutil;
use crate::tensor::{BackwardRule, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMethod {
    Gradient,
    Deconv,
    GuidedBp,
    GradCam,
    IntGrad,
    SmoothGrad,
}

pub const ALL_METHODS: [SaliencyMethod; 6] = [
    SaliencyMethod::Gradient,
    SaliencyMethod::Deconv,
    SaliencyMethod::GuidedBp,
    SaliencyMethod::GradCam,
    SaliencyMethod::IntGrad,
    SaliencyMethod::SmoothGrad,
];

impl SaliencyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            SaliencyMethod::Gradient => "gradient",
            SaliencyMethod::Deconv => "deconv",
            SaliencyMethod::GuidedBp => "guided_bp",
            SaliencyMethod::GradCam => "gradcam",
            SaliencyMethod::IntGrad => "intgrad",
            SaliencyMethod::SmoothGrad => "smoothgrad",
        }
    }
}

impl std::str::FromStr for SaliencyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ALL_METHODS
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMode {
    Normal,
    Subnet,
}

impl SaliencyMode {
    pub fn name(&self) -> &'static str {
        match self {
            SaliencyMode::Normal => "normal",
            SaliencyMode::Subnet => "subnet",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyParams {
    pub intgrad_steps: usize,
    pub smoothgrad_samples: usize,
    /// Noise standard deviation; inputs live in [0,1] so this is absolute.
    pub smoothgrad_sigma: f64,
    pub noise_seed: u64,
}

impl Default for SaliencyParams {
    fn default() -> Self {
        SaliencyParams {
            intgrad_steps: 24,
            smoothgrad_samples: 25,
            smoothgrad_sigma: 0.15,
            noise_seed: 0x5A11,
        }
    }
}

impl SaliencyParams {
    pub fn validate(&self) -> Result<()> {
        if self.intgrad_steps < 1 {
            return Err(Error::InvalidParam("intgrad_steps must be >= 1".into()));
        }
        if self.smoothgrad_samples < 1 {
            return Err(Error::InvalidParam(
                "smoothgrad_samples must be >= 1".into(),
            ));
        }
        if self.smoothgrad_sigma < 0.0 {
            return Err(Error::InvalidParam("smoothgrad_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel nonnegative attribution grid for one image and class.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub grid: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub method: SaliencyMethod,
    pub class: usize,
    pub mode: SaliencyMode,
}

fn gate_mode<'a>(gates: Option<&'a GateVector>) -> Gates<'a> {
    match gates {
        Some(g) => Gates::Fixed(g),
        None => Gates::Absent,
    }
}

/// d(logit_class)/dx for a single [c,h,w] image under the given rectifier
/// rule, through the gated network when gates are present.
fn input_gradient(
    spec: &ModelSpec,
    weights: &Weights,
    gates: Option<&GateVector>,
    x: &Tensor,
    class: usize,
    rule: BackwardRule,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let mut tape = Tape::new();
    let nodes = register_weights(&mut tape, spec, weights, false)?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(&shape);
    let x_id = tape.var(x.reshaped(&batch_shape)?);
    let trace = forward_trace(&mut tape, spec, &nodes, x_id, gate_mode(gates))?;
    let logit = tape.column(trace.logits, class)?;
    let grads = tape.backward_with_rule(logit, rule)?;
    grads
        .get(x_id)
        .ok_or(Error::DetachedNode)?
        .reshaped(&shape)
}

/// Per-pixel max over channels of |t|.
fn channel_max_abs(t: &Tensor) -> (Vec<f64>, usize, usize) {
    let shape = t.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut grid = vec![0.0f64; h * w];
    for ch in 0..c {
        for i in 0..h * w {
            grid[i] = grid[i].max(t.data()[ch * h * w + i].abs());
        }
    }
    (grid, h, w)
}

/// Signed integrated-gradients attribution (zero baseline), per channel:
/// (x - x0) * mean of gradients along the straight path.
pub fn intgrad_signed(
    spec: &ModelSpec,
    weights: &Weights,
    gates: Option<&GateVector>,
    x: &Tensor,
    class: usize,
    steps: usize,
) -> Result<Tensor> {
    let mut acc = Tensor::zeros(x.shape());
    for t in 1..=steps {
        let frac = t as f64 / steps as f64;
        let point = x.map(|v| v * frac);
        let g = input_gradient(spec, weights, gates, &point, class, BackwardRule::Standard)?;
        for (a, &gv) in acc.data_mut().iter_mut().zip(g.data()) {
            *a += gv;
        }
    }
    let inv = 1.0 / steps as f64;
    let mut out = acc;
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        *o *= inv * xv; // (x - 0) elementwise
    }
    Ok(out)
}

fn bilinear_upsample(src: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; h_out * w_out];
    let fy = if h_out > 1 {
        (h_in - 1) as f64 / (h_out - 1) as f64
    } else {
        0.0
    };
    let fx = if w_out > 1 {
        (w_in - 1) as f64 / (w_out - 1) as f64
    } else {
        0.0
    };
    for r in 0..h_out {
        let y = r as f64 * fy;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let wy = y - y0 as f64;
        for c in 0..w_out {
            let x = c as f64 * fx;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let wx = x - x0 as f64;
            let top = src[y0 * w_in + x0] * (1.0 - wx) + src[y0 * w_in + x1] * wx;
            let bot = src[y1 * w_in + x0] * (1.0 - wx) + src[y1 * w_in + x1] * wx;
            out[r * w_out + c] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

fn gradcam_grid(
    spec: &ModelSpec,
    weights: &Weights,
    gates: Option<&GateVector>,
    x: &Tensor,
    class: usize,
) -> Result<(Vec<f64>, usize, usize)> {
    let shape = x.shape().to_vec();
    let (h_out, w_out) = (shape[1], shape[2]);
    let mut tape = Tape::new();
    let nodes = register_weights(&mut tape, spec, weights, false)?;
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(&shape);
    let x_id = tape.var(x.reshaped(&batch_shape)?);
    let trace = forward_trace(&mut tape, spec, &nodes, x_id, gate_mode(gates))?;
    let last_conv = *trace
        .conv_blocks
        .last()
        .ok_or_else(|| Error::InvalidModel("gradcam needs a conv layer".into()))?;
    let logit = tape.column(trace.logits, class)?;
    let grads = tape.backward(logit)?;
    let activation = tape.value(last_conv);
    let grad = grads.get(last_conv).ok_or(Error::DetachedNode)?;
    let (_, k, h, w) = activation.dims4()?;
    let plane = h * w;
    let mut cam = vec![0.0; plane];
    for ch in 0..k {
        let alpha: f64 =
            grad.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for i in 0..plane {
            cam[i] += alpha * activation.data()[ch * plane + i];
        }
    }
    for v in cam.iter_mut() {
        *v = v.max(0.0);
    }
    Ok((bilinear_upsample(&cam, h, w, h_out, w_out), h_out, w_out))
}

/// Computes the saliency map of `class` for one [c,h,w] image.
pub fn saliency(
    method: SaliencyMethod,
    spec: &ModelSpec,
    weights: &Weights,
    gates: Option<&GateVector>,
    x: &Tensor,
    class: usize,
    params: &SaliencyParams,
) -> Result<SaliencyMap> {
    params.validate()?;
    if class >= spec.num_classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            num_classes: spec.num_classes,
        });
    }
    let mode = if gates.is_some() {
        SaliencyMode::Subnet
    } else {
        SaliencyMode::Normal
    };
    let (grid, h, w) = match method {
        SaliencyMethod::Gradient => channel_max_abs(&input_gradient(
            spec,
            weights,
            gates,
            x,
            class,
            BackwardRule::Standard,
        )?),
        SaliencyMethod::Deconv => channel_max_abs(&input_gradient(
            spec,
            weights,
            gates,
            x,
            class,
            BackwardRule::Deconv,
        )?),
        SaliencyMethod::GuidedBp => channel_max_abs(&input_gradient(
            spec,
            weights,
            gates,
            x,
            class,
            BackwardRule::Guided,
        )?),
        SaliencyMethod::GradCam => gradcam_grid(spec, weights, gates, x, class)?,
        SaliencyMethod::IntGrad => channel_max_abs(&intgrad_signed(
            spec,
            weights,
            gates,
            x,
            class,
            params.intgrad_steps,
        )?),
        SaliencyMethod::SmoothGrad if params.smoothgrad_sigma == 0.0 => {
            // zero noise: the mean of identical maps is the map itself
            channel_max_abs(&input_gradient(
                spec,
                weights,
                gates,
                x,
                class,
                BackwardRule::Standard,
            )?)
        }
        SaliencyMethod::SmoothGrad => {
            let n = params.smoothgrad_samples;
            let mut mean: Option<(Vec<f64>, usize, usize)> = None;
            for i in 0..n {
                let noisy = {
                    let mut rng = rngutil::rng_for(params.noise_seed, i as u64);
                    let data = x
                        .data()
                        .iter()
                        .map(|&v| {
                            v + params.smoothgrad_sigma * rngutil::standard_normal(&mut rng)
                        })
                        .collect();
                    Tensor::from_vec(x.shape(), data)?
                };
                let (g, h, w) = channel_max_abs(&input_gradient(
                    spec,
                    weights,
                    gates,
                    &noisy,
                    class,
                    BackwardRule::Standard,
                )?);
                match &mut mean {
                    Some((acc, _, _)) => {
                        for (a, v) in acc.iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    None => mean = Some((g, h, w)),
                }
            }
            let (mut acc, h, w) = mean.unwrap();
            for v in acc.iter_mut() {
                *v /= n as f64;
            }
            (acc, h, w)
        }
    };
    Ok(SaliencyMap {
        grid,
        height: h,
        width: w,
        method,
        class,
        mode,
    })
}

// ---------------------------------------------------------------------------
// Box derivation and IoU
// ---------------------------------------------------------------------------

/// Pixels at or above `alpha * mean(map)`.
pub fn threshold_mask(map: &SaliencyMap, alpha: f64) -> Result<Vec<bool>> {
    if alpha <= 0.0 {
        return Err(Error::InvalidParam("alpha must be > 0".into()));
    }
    let mean: f64 = map.grid.iter().sum::<f64>() / map.grid.len() as f64;
    let thr = alpha * mean;
    Ok(map.grid.iter().map(|&v| v >= thr).collect())
}

/// Threshold at `alpha * mean`, take the largest 4-connected component,
/// return its tight box; an empty mask falls back to the full-image box.
pub fn saliency_to_bbox(map: &SaliencyMap, alpha: f64) -> Result<BBox> {
    let mask = threshold_mask(map, alpha)?;
    let (h, w) = (map.height, map.width);
    let mut visited = vec![false; h * w];
    let mut best: Option<(usize, Vec<usize>)> = None; // (size, pixels)
    for start in 0..h * w {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut queue = vec![start];
        visited[start] = true;
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop() {
            pixels.push(p);
            let (r, c) = (p / w, p % w);
            let mut push = |q: usize| {
                if mask[q] && !visited[q] {
                    visited[q] = true;
                    queue.push(q);
                }
            };
            if r > 0 {
                push(p - w);
            }
            if r + 1 < h {
                push(p + w);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < w {
                push(p + 1);
            }
        }
        if best.as_ref().map_or(true, |(n, _)| pixels.len() > *n) {
            best = Some((pixels.len(), pixels));
        }
    }
    match best {
        None => Ok(BBox::full(h, w)),
        Some((_, pixels)) => {
            let mut comp = vec![false; h * w];
            for p in pixels {
                comp[p] = true;
            }
            Ok(BBox::tight(&comp, h, w).unwrap())
        }
    }
}

/// Intersection over union with inclusive pixel counting.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let r0 = a.r0.max(b.r0);
    let c0 = a.c0.max(b.c0);
    let r1 = a.r1.min(b.r1);
    let c1 = a.c1.min(b.c1);
    let inter = if r1 >= r0 && c1 >= c0 {
        (r1 - r0 + 1) * (c1 - c0 + 1)
    } else {
        0
    };
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

// ---------------------------------------------------------------------------
// WSOL evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocResult {
    pub method: SaliencyMethod,
    pub mode: SaliencyMode,
    pub alpha_grid: Vec<f64>,
    pub heldout_err: Vec<f64>,
    pub test_err: Vec<f64>,
    pub alpha_star: f64,
    pub test_err_at_alpha_star: f64,
}

/// The Table-1 alpha grid: 0.5 to 10.0 in steps of 0.5.
pub fn default_alpha_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 * 0.5).collect()
}

fn bundle_lookup<'a>(
    spec: &ModelSpec,
    bundles: &'a [SubnetworkBundle],
) -> Result<Vec<&'a GateVector>> {
    let mut by_class: Vec<Option<&GateVector>> = vec![None; spec.num_classes];
    for b in bundles {
        if b.class < spec.num_classes {
            by_class[b.class] = Some(&b.gates);
        }
    }
    by_class
        .into_iter()
        .enumerate()
        .map(|(c, g)| g.ok_or(Error::MissingClassBundle(c)))
        .collect()
}

/// Per-alpha localization error of one method/mode on one split: the
/// fraction of images misclassified by the full model or localized with
/// IoU below 0.5 at that threshold.
fn split_errors(
    spec: &ModelSpec,
    weights: &Weights,
    gates_by_class: Option<&[&GateVector]>,
    method: SaliencyMethod,
    split: &[LabeledImage],
    alpha_grid: &[f64],
    params: &SaliencyParams,
) -> Result<Vec<f64>> {
    let (xs, _) = to_batch(split)?;
    let logits = forward_batched(spec, weights, &xs, None, 256)?;
    let preds = predictions(&logits)?;

    let per_image: Vec<Result<Vec<bool>>> = split
        .par_iter()
        .zip(preds.par_iter())
        .map(|(sample, &pred)| {
            let gt = sample
                .bbox
                .as_ref()
                .ok_or_else(|| Error::MissingGroundTruth("sample has no bbox".into()))?;
            if pred != sample.label {
                return Ok(vec![true; alpha_grid.len()]);
            }
            let gates = gates_by_class.map(|g| g[pred]);
            let map = saliency(method, spec, weights, gates, &sample.image, pred, params)?;
            alpha_grid
                .iter()
                .map(|&alpha| Ok(iou(&saliency_to_bbox(&map, alpha)?, gt) < 0.5))
                .collect()
        })
        .collect();

    let mut counts = vec![0usize; alpha_grid.len()];
    for image in per_image {
        for (count, err) in counts.iter_mut().zip(image?) {
            *count += err as usize;
        }
    }
    Ok(counts
        .iter()
        .map(|&c| c as f64 / split.len() as f64)
        .collect())
}

/// Sweeps the alpha grid on the held-out split, picks alpha*, and reports
/// the test error at alpha*.
#[allow(clippy::too_many_arguments)]
pub fn wsol_eval(
    spec: &ModelSpec,
    weights: &Weights,
    bundles: &[SubnetworkBundle],
    method: SaliencyMethod,
    mode: SaliencyMode,
    heldout: &[LabeledImage],
    test: &[LabeledImage],
    alpha_grid: &[f64],
    params: &SaliencyParams,
) -> Result<LocResult> {
    if alpha_grid.is_empty() {
        return Err(Error::InvalidParam("alpha grid is empty".into()));
    }
    let lookup;
    let gates_by_class = match mode {
        SaliencyMode::Normal => None,
        SaliencyMode::Subnet => {
            lookup = bundle_lookup(spec, bundles)?;
            Some(lookup.as_slice())
        }
    };
    let heldout_err = split_errors(
        spec,
        weights,
        gates_by_class,
        method,
        heldout,
        alpha_grid,
        params,
    )?;
    let test_err = split_errors(
        spec,
        weights,
        gates_by_class,
        method,
        test,
        alpha_grid,
        params,
    )?;
    let mut star = 0;
    for (i, err) in heldout_err.iter().enumerate() {
        if *err < heldout_err[star] {
            star = i;
        }
    }
    Ok(LocResult {
        method,
        mode,
        alpha_grid: alpha_grid.to_vec(),
        heldout_err,
        test_err: test_err.clone(),
        alpha_star: alpha_grid[star],
        test_err_at_alpha_star: test_err[star],
    })
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

/// Plain-text PGM (P2), max-normalized to 8 bits.
pub fn write_pgm(path: &Path, map: &SaliencyMap) -> Result<()> {
    let max = map.grid.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P2\n{} {}\n255\n", map.width, map.height);
    for r in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|c| {
                let v = map.grid[r * map.width + c];
                let q = if max > 0.0 {
                    (255.0 * v / max).round() as u32
                } else {
                    0
                };
                q.to_string()
            })
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Exact f32 values, one CSV row per pixel row.
pub fn write_saliency_csv(path: &Path, map: &SaliencyMap) -> Result<()> {
    let mut out = String::new();
    for r in 0..map.height {
        let row: Vec<String> = (0..map.width)
            .map(|c| format!("{}", map.grid[r * map.width + c] as f32))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Table-1-shaped CSV: method x mode with alpha* and test error.
pub fn write_wsol_csv(path: &Path, results: &[LocResult]) -> Result<()> {
    let mut out = String::from("method,mode,alpha_star,test_err\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            r.method.name(),
            r.mode.name(),
            r.alpha_star,
            r.test_err_at_alpha_star
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerSpec;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn linear_spec(h: usize, w: usize, k: usize) -> (ModelSpec, Weights) {
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: h * w,
                    out_features: k,
                    gated: false,
                },
            ],
            num_classes: k,
            input_shape: [1, h, w],
        };
        let mut map = BTreeMap::new();
        let wdata: Vec<f64> = (0..h * w * k)
            .map(|i| ((i * 37 % 13) as f64 - 6.0) / 10.0)
            .collect();
        map.insert(
            "layer1.weight".to_string(),
            Tensor::from_vec(&[h * w, k], wdata).unwrap(),
        );
        map.insert("layer1.bias".to_string(), Tensor::zeros(&[k]));
        (spec, Weights::from_map(map))
    }

    #[test]
    fn intgrad_is_exact_for_linear_model() {
        let (spec, weights) = linear_spec(4, 4, 2);
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        for steps in [1, 3, 8] {
            let params = SaliencyParams {
                intgrad_steps: steps,
                ..SaliencyParams::default()
            };
            let map = saliency(
                SaliencyMethod::IntGrad,
                &spec,
                &weights,
                None,
                &x,
                1,
                &params,
            )
            .unwrap();
            // attribution = |w . x| elementwise for f(x) = w . x
            let wt = weights.get("layer1.weight").unwrap();
            for i in 0..16 {
                let expected = (wt.data()[i * 2 + 1] * x.data()[i]).abs();
                assert!((map.grid[i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn smoothgrad_with_zero_sigma_equals_gradient() {
        let (spec, weights) = linear_spec(4, 4, 3);
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| (i as f64).sin().abs()).collect())
            .unwrap();
        let params = SaliencyParams {
            smoothgrad_sigma: 0.0,
            smoothgrad_samples: 7,
            ..SaliencyParams::default()
        };
        let sg = saliency(
            SaliencyMethod::SmoothGrad,
            &spec,
            &weights,
            None,
            &x,
            0,
            &params,
        )
        .unwrap();
        let g = saliency(
            SaliencyMethod::Gradient,
            &spec,
            &weights,
            None,
            &x,
            0,
            &params,
        )
        .unwrap();
        assert_eq!(sg.grid, g.grid);
    }

    fn single_map_conv_spec() -> (ModelSpec, Weights) {
        // conv(1 -> 1, 1x1 positive weight) relu flatten dense
        let spec = ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 1,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                    gated: false,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_features: 16,
                    out_features: 2,
                    gated: false,
                },
            ],
            num_classes: 2,
            input_shape: [1, 4, 4],
        };
        let mut map = BTreeMap::new();
        map.insert(
            "layer0.weight".to_string(),
            Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap(),
        );
        map.insert("layer0.bias".to_string(), Tensor::zeros(&[1]));
        // positive weights into class 0 so the mean gradient is positive
        map.insert(
            "layer3.weight".to_string(),
            Tensor::from_vec(&[16, 2], (0..32).map(|i| if i % 2 == 0 { 0.5 } else { -0.1 }).collect())
                .unwrap(),
        );
        map.insert("layer3.bias".to_string(), Tensor::zeros(&[2]));
        (spec, Weights::from_map(map))
    }

    #[test]
    fn gradcam_single_map_is_scaled_relu_of_activation() {
        let (spec, weights) = single_map_conv_spec();
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| i as f64 / 8.0).collect()).unwrap();
        let map = saliency(
            SaliencyMethod::GradCam,
            &spec,
            &weights,
            None,
            &x,
            0,
            &SaliencyParams::default(),
        )
        .unwrap();
        // with one 1x1 kernel of weight 1, activation = relu(x) = x, and
        // the cam is alpha * x with alpha the positive mean dense weight
        let ratio: Vec<f64> = map
            .grid
            .iter()
            .zip(x.data())
            .skip(1)
            .map(|(&m, &xv)| m / xv)
            .collect();
        for w in ratio.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "cam not proportional: {ratio:?}");
        }
        assert!(ratio[0] > 0.0);
    }

    #[test]
    fn bbox_from_rectangle_map() {
        let mut grid = vec![0.0; 8 * 8];
        for r in 1..=3 {
            for c in 2..=5 {
                grid[r * 8 + c] = 1.0;
            }
        }
        let map = SaliencyMap {
            grid,
            height: 8,
            width: 8,
            method: SaliencyMethod::Gradient,
            class: 0,
            mode: SaliencyMode::Normal,
        };
        let bbox = saliency_to_bbox(&map, 0.5).unwrap();
        assert_eq!(
            bbox,
            BBox {
                r0: 1,
                c0: 2,
                r1: 3,
                c1: 5
            }
        );
        // huge alpha empties the mask -> full-image fallback
        let bbox = saliency_to_bbox(&map, 1e9).unwrap();
        assert_eq!(bbox, BBox::full(8, 8));
    }

    #[test]
    fn constant_map_keeps_full_image() {
        let map = SaliencyMap {
            grid: vec![0.7; 6 * 6],
            height: 6,
            width: 6,
            method: SaliencyMethod::Gradient,
            class: 0,
            mode: SaliencyMode::Normal,
        };
        for alpha in [0.3, 0.9, 1.0] {
            assert_eq!(saliency_to_bbox(&map, alpha).unwrap(), BBox::full(6, 6));
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox {
            r0: 0,
            c0: 0,
            r1: 1,
            c1: 1,
        };
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = BBox {
            r0: 5,
            c0: 5,
            r1: 6,
            c1: 6,
        };
        assert_eq!(iou(&a, &disjoint), 0.0);
        let b = BBox {
            r0: 1,
            c0: 1,
            r1: 2,
            c1: 2,
        };
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_mask_map_gives_zero_error_ingredients() {
        // map equal to the ground-truth mask localizes exactly
        let mut grid = vec![0.0; 8 * 8];
        let gt = BBox {
            r0: 2,
            c0: 1,
            r1: 5,
            c1: 4,
        };
        for r in gt.r0..=gt.r1 {
            for c in gt.c0..=gt.c1 {
                grid[r * 8 + c] = 1.0;
            }
        }
        let map = SaliencyMap {
            grid,
            height: 8,
            width: 8,
            method: SaliencyMethod::Gradient,
            class: 0,
            mode: SaliencyMode::Normal,
        };
        let bbox = saliency_to_bbox(&map, 1.0).unwrap();
        assert_eq!(iou(&bbox, &gt), 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn growing_alpha_shrinks_threshold_mask(
            vals in proptest::collection::vec(0.0f64..1.0, 36),
            a1 in 0.1f64..5.0,
            delta in 0.01f64..5.0,
        ) {
            let map = SaliencyMap {
                grid: vals,
                height: 6,
                width: 6,
                method: SaliencyMethod::Gradient,
                class: 0,
                mode: SaliencyMode::Normal,
            };
            let m1 = threshold_mask(&map, a1).unwrap();
            let m2 = threshold_mask(&map, a1 + delta).unwrap();
            for (small, large) in m2.iter().zip(&m1) {
                prop_assert!(!small || *large);
            }
        }
    }
}
