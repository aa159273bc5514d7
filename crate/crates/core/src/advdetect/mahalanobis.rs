//! Class-conditional Gaussian confidence scoring with a shared pooled
//! covariance per scored layer.
//!
//! In subnet mode the feature for class c is produced by class c's gated
//! network: fitting runs each training sample through its own class's
//! subnetwork, and scoring (by default) evaluates the class-c term of the
//! max with the feature from subnetwork c.

use serde::{Deserialize, Serialize};

use super::super::extract::SubnetworkBundle;
use crate::error::{Error, Result};
use crate::model::{
    forward_batched, forward_trace, predictions, register_weights, GateVector, Gates, ModelSpec,
    Weights,
};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoredLayer {
    /// Spatially averaged channel activations of the i-th conv block.
    ConvBlock(usize),
    /// The last hidden dense output, used as-is.
    Penultimate,
}

impl ScoredLayer {
    pub fn name(&self) -> String {
        match self {
            ScoredLayer::ConvBlock(i) => format!("conv{}", i + 1),
            ScoredLayer::Penultimate => "penultimate".to_string(),
        }
    }
}

impl std::str::FromStr for ScoredLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "penultimate" {
            return Ok(ScoredLayer::Penultimate);
        }
        if let Some(num) = s.strip_prefix("conv") {
            if let Ok(i) = num.parse::<usize>() {
                if i >= 1 {
                    return Ok(ScoredLayer::ConvBlock(i - 1));
                }
            }
        }
        Err(Error::UnknownMethod(s.to_string()))
    }
}

/// Every conv block plus the penultimate dense output.
pub fn default_scored_layers(spec: &ModelSpec) -> Vec<ScoredLayer> {
    let mut layers: Vec<ScoredLayer> = (0..spec.conv_block_count())
        .map(ScoredLayer::ConvBlock)
        .collect();
    layers.push(ScoredLayer::Penultimate);
    layers
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    FullModel,
    Subnet,
}

impl DetectorMode {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorMode::FullModel => "full_model",
            DetectorMode::Subnet => "subnet",
        }
    }
}

/// Whether the max over classes evaluates each class's term with that
/// class's own subnetwork feature, or only the predicted class's feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    PerClass,
    PredictedClassOnly,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: ScoredLayer,
    pub dim: usize,
    /// One mean vector per class.
    pub means: Vec<Vec<f64>>,
    /// Pooled covariance, row-major dim x dim, before regularization.
    pub cov: Vec<f64>,
    /// Trace-scaled ridge added for factorization.
    pub delta: f64,
    /// Lower Cholesky factor of cov + delta I.
    pub chol: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MahalanobisStats {
    pub mode: DetectorMode,
    pub layers: Vec<ScoredLayer>,
    pub per_layer: Vec<LayerStats>,
    pub class_counts: Vec<usize>,
    pub total: usize,
}

/// Per-layer feature vectors for a batch: `[layer][sample][dim]`.
pub fn extract_features(
    spec: &ModelSpec,
    weights: &Weights,
    gates: Option<&GateVector>,
    xs: &Tensor,
    layers: &[ScoredLayer],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (n, c, h, w) = xs.dims4()?;
    let sample = c * h * w;
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); layers.len()];
    let mut start = 0;
    while start < n {
        let len = 256.min(n - start);
        let chunk = Tensor::from_vec(
            &[len, c, h, w],
            xs.data()[start * sample..(start + len) * sample].to_vec(),
        )?;
        let mut tape = Tape::new();
        let nodes = register_weights(&mut tape, spec, weights, false)?;
        let x_id = tape.constant(chunk);
        let gate_mode = match gates {
            Some(g) => Gates::Fixed(g),
            None => Gates::Absent,
        };
        let trace = forward_trace(&mut tape, spec, &nodes, x_id, gate_mode)?;
        for (li, layer) in layers.iter().enumerate() {
            match layer {
                ScoredLayer::ConvBlock(i) => {
                    let node = *trace.conv_blocks.get(*i).ok_or_else(|| {
                        Error::InvalidParam(format!(
                            "model has {} conv blocks, layer conv{} requested",
                            trace.conv_blocks.len(),
                            i + 1
                        ))
                    })?;
                    let value = tape.value(node);
                    let (bn, bc, bh, bw) = value.dims4()?;
                    let plane = bh * bw;
                    for s in 0..bn {
                        let mut feat = Vec::with_capacity(bc);
                        for ch in 0..bc {
                            let base = (s * bc + ch) * plane;
                            feat.push(
                                value.data()[base..base + plane].iter().sum::<f64>()
                                    / plane as f64,
                            );
                        }
                        out[li].push(feat);
                    }
                }
                ScoredLayer::Penultimate => {
                    let node = trace.penultimate.ok_or_else(|| {
                        Error::InvalidParam("model has no hidden dense layer".into())
                    })?;
                    let value = tape.value(node);
                    let (_, f) = value.dims2()?;
                    for s in 0..len {
                        out[li].push(value.data()[s * f..(s + 1) * f].to_vec());
                    }
                }
            }
        }
        start += len;
    }
    Ok(out)
}

/// Lower Cholesky factor of a dense SPD matrix; None when not positive
/// definite within floating point.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = a[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Squared Mahalanobis distance via forward substitution on the factor.
fn chol_dist2(l: &[f64], d: usize, diff: &[f64]) -> f64 {
    let mut z = vec![0.0; d];
    for i in 0..d {
        let mut sum = diff[i];
        for k in 0..i {
            sum -= l[i * d + k] * z[k];
        }
        z[i] = sum / l[i * d + i];
    }
    z.iter().map(|v| v * v).sum()
}

/// Fits per-class means and the pooled covariance from already-extracted
/// features (`[layer][sample][dim]`, one label per sample).
pub fn fit_stats_from_features(
    features: &[Vec<Vec<f64>>],
    labels: &[usize],
    layers: &[ScoredLayer],
    mode: DetectorMode,
    num_classes: usize,
) -> Result<MahalanobisStats> {
    let n = labels.len();
    let mut class_counts = vec![0usize; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        class_counts[y] += 1;
    }
    if let Some(c) = class_counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(c));
    }

    let mut per_layer = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let feats = &features[li];
        let dim = feats[0].len();
        let mut means = vec![vec![0.0; dim]; num_classes];
        for (f, &y) in feats.iter().zip(labels) {
            for (m, &v) in means[y].iter_mut().zip(f) {
                *m += v;
            }
        }
        for (mean, &count) in means.iter_mut().zip(&class_counts) {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }
        let mut cov = vec![0.0; dim * dim];
        for (f, &y) in feats.iter().zip(labels) {
            let mean = &means[y];
            for i in 0..dim {
                let di = f[i] - mean[i];
                for j in 0..=i {
                    cov[i * dim + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in 0..=i {
                cov[i * dim + j] /= n as f64;
                cov[j * dim + i] = cov[i * dim + j];
            }
        }
        let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
        let mut delta = 1e-6 * trace / dim as f64;
        if delta <= 0.0 {
            delta = 1e-12;
        }
        let mut ridged = cov.clone();
        for i in 0..dim {
            ridged[i * dim + i] += delta;
        }
        let chol = cholesky(&ridged, dim).ok_or_else(|| Error::FactorizationFailed {
            layer: layer.name(),
            delta,
        })?;
        per_layer.push(LayerStats {
            layer: *layer,
            dim,
            means,
            cov,
            delta,
            chol,
        });
    }
    Ok(MahalanobisStats {
        mode,
        layers: layers.to_vec(),
        per_layer,
        class_counts,
        total: n,
    })
}

fn gates_per_class<'a>(
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

/// Fits stats on a labeled training set. With bundles present, every
/// sample's feature comes from its own class's subnetwork.
pub fn fit_mahalanobis(
    spec: &ModelSpec,
    weights: &Weights,
    bundles: Option<&[SubnetworkBundle]>,
    train_x: &Tensor,
    train_y: &[usize],
    layers: &[ScoredLayer],
) -> Result<MahalanobisStats> {
    let (n, c, h, w) = train_x.dims4()?;
    if n != train_y.len() {
        return Err(Error::CountMismatch {
            images: n,
            labels: train_y.len(),
        });
    }
    let sample = c * h * w;
    match bundles {
        None => {
            let features = extract_features(spec, weights, None, train_x, layers)?;
            fit_stats_from_features(features.as_slice(), train_y, layers, DetectorMode::FullModel, spec.num_classes)
        }
        Some(bundles) => {
            let gates = gates_per_class(spec, bundles)?;
            // group samples by class, run each group through its subnetwork
            let mut features: Vec<Vec<Vec<f64>>> =
                vec![vec![Vec::new(); n]; layers.len()];
            for class in 0..spec.num_classes {
                let indices: Vec<usize> = (0..n).filter(|&i| train_y[i] == class).collect();
                if indices.is_empty() {
                    return Err(Error::MissingClass(class));
                }
                let mut data = Vec::with_capacity(indices.len() * sample);
                for &i in &indices {
                    data.extend_from_slice(&train_x.data()[i * sample..(i + 1) * sample]);
                }
                let xs = Tensor::from_vec(&[indices.len(), c, h, w], data)?;
                let class_feats =
                    extract_features(spec, weights, Some(gates[class]), &xs, layers)?;
                for (li, layer_feats) in class_feats.into_iter().enumerate() {
                    for (pos, feat) in indices.iter().zip(layer_feats) {
                        features[li][*pos] = feat;
                    }
                }
            }
            fit_stats_from_features(&features, train_y, layers, DetectorMode::Subnet, spec.num_classes)
        }
    }
}

/// Per-layer confidence scores for a batch: `[sample][layer]`, each entry
/// the max over classes of the negative squared Mahalanobis distance.
pub fn mahalanobis_scores(
    stats: &MahalanobisStats,
    spec: &ModelSpec,
    weights: &Weights,
    bundles: Option<&[SubnetworkBundle]>,
    xs: &Tensor,
    rule: ScoreRule,
) -> Result<Vec<Vec<f64>>> {
    match (stats.mode, bundles) {
        (DetectorMode::FullModel, None) => {
            let features = extract_features(spec, weights, None, xs, &stats.layers)?;
            Ok(score_single_feature_set(stats, &features))
        }
        (DetectorMode::Subnet, Some(bundles)) => {
            let gates = gates_per_class(spec, bundles)?;
            match rule {
                ScoreRule::PerClass => {
                    // one feature pass per candidate class
                    let per_class: Vec<Vec<Vec<Vec<f64>>>> = gates
                        .iter()
                        .map(|g| extract_features(spec, weights, Some(g), xs, &stats.layers))
                        .collect::<Result<_>>()?;
                    let n = xs.dims4()?.0;
                    let mut out = vec![vec![f64::NEG_INFINITY; stats.layers.len()]; n];
                    for (li, layer) in stats.per_layer.iter().enumerate() {
                        for s in 0..n {
                            let mut best = f64::NEG_INFINITY;
                            for (class, mean) in layer.means.iter().enumerate() {
                                let feat = &per_class[class][li][s];
                                let diff: Vec<f64> =
                                    feat.iter().zip(mean).map(|(a, b)| a - b).collect();
                                let score = -chol_dist2(&layer.chol, layer.dim, &diff);
                                if score > best {
                                    best = score;
                                }
                            }
                            out[s][li] = best;
                        }
                    }
                    Ok(out)
                }
                ScoreRule::PredictedClassOnly => {
                    let preds =
                        predictions(&forward_batched(spec, weights, xs, None, 256)?)?;
                    let (n, c, h, w) = xs.dims4()?;
                    let sample = c * h * w;
                    let mut features: Vec<Vec<Vec<f64>>> =
                        vec![vec![Vec::new(); n]; stats.layers.len()];
                    for class in 0..spec.num_classes {
                        let indices: Vec<usize> =
                            (0..n).filter(|&i| preds[i] == class).collect();
                        if indices.is_empty() {
                            continue;
                        }
                        let mut data = Vec::with_capacity(indices.len() * sample);
                        for &i in &indices {
                            data.extend_from_slice(&xs.data()[i * sample..(i + 1) * sample]);
                        }
                        let batch = Tensor::from_vec(&[indices.len(), c, h, w], data)?;
                        let class_feats = extract_features(
                            spec,
                            weights,
                            Some(gates[class]),
                            &batch,
                            &stats.layers,
                        )?;
                        for (li, layer_feats) in class_feats.into_iter().enumerate() {
                            for (pos, feat) in indices.iter().zip(layer_feats) {
                                features[li][*pos] = feat;
                            }
                        }
                    }
                    Ok(score_single_feature_set(stats, &features))
                }
            }
        }
        (stats_mode, bundles) => Err(Error::ModeMismatch {
            stats: stats_mode.name(),
            requested: if bundles.is_some() {
                "subnet"
            } else {
                "full_model"
            },
        }),
    }
}

/// Max over classes with one shared feature vector per sample.
fn score_single_feature_set(
    stats: &MahalanobisStats,
    features: &[Vec<Vec<f64>>],
) -> Vec<Vec<f64>> {
    let n = features[0].len();
    let mut out = vec![vec![f64::NEG_INFINITY; stats.layers.len()]; n];
    for (li, layer) in stats.per_layer.iter().enumerate() {
        for s in 0..n {
            let feat = &features[li][s];
            let mut best = f64::NEG_INFINITY;
            for mean in &layer.means {
                let diff: Vec<f64> = feat.iter().zip(mean).map(|(a, b)| a - b).collect();
                let score = -chol_dist2(&layer.chol, layer.dim, &diff);
                if score > best {
                    best = score;
                }
            }
            out[s][li] = best;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn hand_stats(means: Vec<Vec<f64>>, cov: Vec<f64>, dim: usize) -> MahalanobisStats {
        let chol = cholesky(&cov, dim).unwrap();
        MahalanobisStats {
            mode: DetectorMode::FullModel,
            layers: vec![ScoredLayer::Penultimate],
            per_layer: vec![LayerStats {
                layer: ScoredLayer::Penultimate,
                dim,
                means: means.clone(),
                cov,
                delta: 0.0,
                chol,
            }],
            class_counts: vec![1; means.len()],
            total: means.len(),
        }
    }

    #[test]
    fn hand_fit_matches_spec_example() {
        // class 0: {(0,0),(2,0)}, class 1: {(0,2),(2,2)}
        let features = vec![vec![
            vec![0.0, 0.0],
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![2.0, 2.0],
        ]];
        let labels = [0, 0, 1, 1];
        let stats = fit_stats_from_features(
            &features,
            &labels,
            &[ScoredLayer::Penultimate],
            DetectorMode::FullModel,
            2,
        )
        .unwrap();
        let layer = &stats.per_layer[0];
        assert_eq!(layer.means[0], vec![1.0, 0.0]);
        assert_eq!(layer.means[1], vec![1.0, 2.0]);
        assert_eq!(layer.cov, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(layer.delta > 0.0);
    }

    #[test]
    fn degenerate_single_sample_classes_factorize() {
        let features = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]];
        let labels = [0, 1];
        let stats = fit_stats_from_features(
            &features,
            &labels,
            &[ScoredLayer::Penultimate],
            DetectorMode::FullModel,
            2,
        )
        .unwrap();
        // zero covariance regularized to delta I
        assert!(stats.per_layer[0].cov.iter().all(|&v| v == 0.0));
        assert_eq!(stats.per_layer[0].delta, 1e-12);
    }

    #[test]
    fn score_matches_hand_evaluation() {
        // f = (0,0), mu1 = (1,0), mu2 = (3,4), identity covariance:
        // M = max(-1, -25) = -1
        let stats = hand_stats(
            vec![vec![1.0, 0.0], vec![3.0, 4.0]],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        let features = vec![vec![vec![0.0, 0.0]]];
        let scores = score_single_feature_set(&stats, &features);
        assert!((scores[0][0] - (-1.0)).abs() < 1e-12);
        // at a mean the score is exactly zero, the max possible
        let at_mean = vec![vec![vec![3.0, 4.0]]];
        let scores = score_single_feature_set(&stats, &at_mean);
        assert_eq!(scores[0][0], 0.0);
    }

    #[test]
    fn covariance_scaling_divides_scores() {
        let means = vec![vec![0.5, -0.2], vec![1.5, 0.7]];
        let cov = vec![2.0, 0.3, 0.3, 1.0];
        let scaled: Vec<f64> = cov.iter().map(|v| 4.0 * v).collect();
        let s1 = hand_stats(means.clone(), cov, 2);
        let s4 = hand_stats(means, scaled, 2);
        let features = vec![vec![vec![2.0, 1.0]]];
        let a = score_single_feature_set(&s1, &features)[0][0];
        let b = score_single_feature_set(&s4, &features)[0][0];
        assert!((a / 4.0 - b).abs() < 1e-12);
    }

    #[test]
    fn cholesky_route_matches_dense_solve_oracle() {
        // random SPD systems d <= 5 against Gaussian elimination
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(40);
        for _ in 0..50 {
            let d = rng.gen_range(1..=5);
            let mut b = vec![0.0; d * d];
            for v in b.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            // A = B^T B + 0.1 I
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += b[k * d + i] * b[k * d + j];
                    }
                    a[i * d + j] = s + if i == j { 0.1 } else { 0.0 };
                }
            }
            let diff: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let l = cholesky(&a, d).unwrap();
            let fast = chol_dist2(&l, d, &diff);

            // oracle: solve A z = diff by Gaussian elimination, dist = diff . z
            let mut aug = vec![0.0; d * (d + 1)];
            for i in 0..d {
                for j in 0..d {
                    aug[i * (d + 1) + j] = a[i * d + j];
                }
                aug[i * (d + 1) + d] = diff[i];
            }
            for col in 0..d {
                let pivot = (col..d)
                    .max_by(|&p, &q| {
                        aug[p * (d + 1) + col]
                            .abs()
                            .partial_cmp(&aug[q * (d + 1) + col].abs())
                            .unwrap()
                    })
                    .unwrap();
                for j in 0..=d {
                    aug.swap(col * (d + 1) + j, pivot * (d + 1) + j);
                }
                for row in 0..d {
                    if row != col {
                        let f = aug[row * (d + 1) + col] / aug[col * (d + 1) + col];
                        for j in col..=d {
                            aug[row * (d + 1) + j] -= f * aug[col * (d + 1) + j];
                        }
                    }
                }
            }
            let z: Vec<f64> = (0..d)
                .map(|i| aug[i * (d + 1) + d] / aug[i * (d + 1) + i])
                .collect();
            let oracle: f64 = diff.iter().zip(&z).map(|(a, b)| a * b).sum();
            assert!(
                (fast - oracle).abs() <= 1e-9 * oracle.abs().max(1.0),
                "chol {fast} vs oracle {oracle}"
            );
        }
    }
}
