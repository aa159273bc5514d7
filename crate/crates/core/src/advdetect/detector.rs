//! AUROC and the logistic-regression detector over per-layer scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sigmoid;

/// Probability a positive score outranks a negative one, ties counting
/// one half. Rank-sum formulation.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::EmptyScoreSet);
    }
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average rank of the tie group (ranks are 1-based)
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for item in &all[i..=j] {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = pos.len() as f64;
    let nn = neg.len() as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub lr: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            lr: 0.1,
            iterations: 2000,
            l2: 1e-4,
        }
    }
}

/// Logistic regression over standardized features; higher output means
/// more adversarial.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogisticDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
}

impl LogisticDetector {
    pub fn score(&self, features: &[f64]) -> f64 {
        let mut z = self.bias;
        for ((&f, &m), (&s, &w)) in features
            .iter()
            .zip(&self.feat_mean)
            .zip(self.feat_std.iter().zip(&self.weights))
        {
            z += w * (f - m) / s;
        }
        z
    }
}

/// Full-batch gradient descent from zero initialization; deterministic.
pub fn train_detector(
    features: &[Vec<f64>],
    labels: &[bool],
    cfg: &DetectorConfig,
) -> Result<LogisticDetector> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: features.len(),
            labels: labels.len(),
        });
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::SingleLabelFold);
    }
    let n = features.len();
    let d = features[0].len();

    let mut mean = vec![0.0; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0; d];
    for f in features {
        for (s, (&v, &m)) in std.iter_mut().zip(f.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (&m, &s))| (v - m) / s)
                .collect()
        })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (f, &y) in standardized.iter().zip(labels) {
            let z: f64 = b + f.iter().zip(&w).map(|(&x, &wi)| x * wi).sum::<f64>();
            let err = sigmoid(z) - (y as u8 as f64);
            for (g, &x) in gw.iter_mut().zip(f) {
                *g += err * x;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (g / n as f64 + cfg.l2 * *wi);
        }
        b -= cfg.lr * gb / n as f64;
    }
    Ok(LogisticDetector {
        weights: w,
        bias: b,
        feat_mean: mean,
        feat_std: std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn auroc_basics() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.4], &[0.6, 0.1]).unwrap(), 0.75);
        // identical multisets tie everywhere
        assert_eq!(auroc(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::EmptyScoreSet)));
    }

    #[test]
    fn auroc_matches_pairwise_counting_oracle() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        for _ in 0..30 {
            let np = rng.gen_range(1..120);
            let nn = rng.gen_range(1..120);
            // coarse grid makes ties common
            let pos: Vec<f64> = (0..np).map(|_| rng.gen_range(0..12) as f64 / 4.0).collect();
            let neg: Vec<f64> = (0..nn).map(|_| rng.gen_range(0..12) as f64 / 4.0).collect();
            let mut wins = 0.0;
            for &p in &pos {
                for &q in &neg {
                    if p > q {
                        wins += 1.0;
                    } else if p == q {
                        wins += 0.5;
                    }
                }
            }
            let oracle = wins / (np as f64 * nn as f64);
            let fast = auroc(&pos, &neg).unwrap();
            assert_eq!(fast, oracle);
        }
    }

    #[test]
    fn separable_scores_reach_perfect_training_auroc() {
        let features: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![if i < 10 { 1.0 + i as f64 } else { -1.0 - i as f64 }])
            .collect();
        let labels: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let det = train_detector(&features, &labels, &DetectorConfig::default()).unwrap();
        let pos: Vec<f64> = features[..10].iter().map(|f| det.score(f)).collect();
        let neg: Vec<f64> = features[10..].iter().map(|f| det.score(f)).collect();
        assert_eq!(auroc(&pos, &neg).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let mut aurocs = Vec::new();
        for _ in 0..8 {
            let features: Vec<Vec<f64>> =
                (0..160).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let labels: Vec<bool> = (0..160).map(|_| rng.gen::<bool>()).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let det = train_detector(&features, &labels, &DetectorConfig::default()).unwrap();
            let pos: Vec<f64> = features
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l)
                .map(|(f, _)| det.score(f))
                .collect();
            let neg: Vec<f64> = features
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| !l)
                .map(|(f, _)| det.score(f))
                .collect();
            aurocs.push(auroc(&pos, &neg).unwrap());
        }
        let mean: f64 = aurocs.iter().sum::<f64>() / aurocs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "chance-level mean {mean}");
    }

    #[test]
    fn redundant_identical_features_preserve_ranking() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let single: Vec<Vec<f64>> = (0..60)
            .map(|i| vec![i as f64 / 10.0 + rng.gen_range(-0.2..0.2)])
            .collect();
        let doubled: Vec<Vec<f64>> = single.iter().map(|f| vec![f[0], f[0]]).collect();
        let labels: Vec<bool> = (0..60).map(|i| i >= 30).collect();
        let cfg = DetectorConfig::default();
        let det1 = train_detector(&single, &labels, &cfg).unwrap();
        let det2 = train_detector(&doubled, &labels, &cfg).unwrap();
        let score = |det: &LogisticDetector, fs: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let pos = fs
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l)
                .map(|(f, _)| det.score(f))
                .collect();
            let neg = fs
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| !l)
                .map(|(f, _)| det.score(f))
                .collect();
            (pos, neg)
        };
        let (p1, n1) = score(&det1, &single);
        let (p2, n2) = score(&det2, &doubled);
        let a1 = auroc(&p1, &n1).unwrap();
        let a2 = auroc(&p2, &n2).unwrap();
        assert!((a1 - a2).abs() < 1e-6);
    }

    #[test]
    fn single_label_fold_rejected() {
        let features = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_detector(&features, &[true, true], &DetectorConfig::default()),
            Err(Error::SingleLabelFold)
        ));
    }
}
