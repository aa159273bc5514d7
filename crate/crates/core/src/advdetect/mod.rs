//! Adversarial attacks, class-specific Mahalanobis scoring, the
//! logistic-regression detector ensemble, and the detection evaluation
//! protocol including unknown-attack transfer.

mod attack;
mod detector;
mod mahalanobis;

pub use attack::{attack, AttackKind, AttackOutcome, AttackSpec};
pub use detector::{auroc, train_detector, DetectorConfig, LogisticDetector};
pub use mahalanobis::{
    default_scored_layers, extract_features, fit_mahalanobis, fit_stats_from_features,
    mahalanobis_scores, DetectorMode, LayerStats, MahalanobisStats, ScoreRule, ScoredLayer,
};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::extract::SubnetworkBundle;
use crate::model::{ModelSpec, Weights};
use crate::rngutil;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Crafted-attack sets and their cache file
// ---------------------------------------------------------------------------

/// Adversarial versions of a test subset, paired by position with the
/// clean originals given by `indices`.
#[derive(Clone, Debug)]
pub struct CraftedAttack {
    pub spec: AttackSpec,
    /// Indices into the source test set, one per crafted row.
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub x_adv: Tensor,
    pub success: Vec<bool>,
}

impl CraftedAttack {
    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len().max(1) as f64
    }
}

/// Runs one attack over (up to) the first `limit` test images.
pub fn craft_attack(
    aspec: &AttackSpec,
    spec: &ModelSpec,
    weights: &Weights,
    test: &[LabeledImage],
    limit: usize,
) -> Result<CraftedAttack> {
    let n = limit.min(test.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..n).collect();
    let (xs, labels) = crate::data::to_batch_indices(test, &indices)?;
    let outcome = attack(aspec, spec, weights, &xs, &labels)?;
    Ok(CraftedAttack {
        spec: aspec.clone(),
        indices,
        labels,
        x_adv: outcome.x_adv,
        success: outcome.success,
    })
}

const ADV_MAGIC: [u8; 4] = *b"SSAD";

#[derive(Serialize, Deserialize)]
struct AdvHeader {
    spec: AttackSpec,
    indices: Vec<usize>,
    labels: Vec<usize>,
    success: Vec<bool>,
    shape: Vec<usize>,
}

/// Cache file: magic `SSAD`, u64 LE header length, JSON header, f32 payload.
pub fn save_adversarial(path: &Path, crafted: &CraftedAttack) -> Result<()> {
    let header = serde_json::to_vec(&AdvHeader {
        spec: crafted.spec.clone(),
        indices: crafted.indices.clone(),
        labels: crafted.labels.clone(),
        success: crafted.success.clone(),
        shape: crafted.x_adv.shape().to_vec(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(&ADV_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for &v in crafted.x_adv.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_adversarial(path: &Path) -> Result<CraftedAttack> {
    let file = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            file,
            detail: "shorter than fixed preamble".into(),
        });
    }
    if bytes[0..4] != ADV_MAGIC {
        return Err(Error::BadMagic {
            file,
            expected: ADV_MAGIC,
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(Error::Truncated {
            file,
            detail: "header extends past end of file".into(),
        });
    }
    let header: AdvHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::HeaderInconsistency {
            file: file.clone(),
            detail: format!("bad header json: {e}"),
        })?;
    let numel: usize = header.shape.iter().product();
    let body = &bytes[12 + header_len..];
    if body.len() != numel * 4 {
        return Err(Error::Truncated {
            file,
            detail: format!("payload {} bytes, expected {}", body.len(), numel * 4),
        });
    }
    let data: Vec<f64> = (0..numel)
        .map(|i| f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap()) as f64)
        .collect();
    Ok(CraftedAttack {
        spec: header.spec,
        indices: header.indices,
        labels: header.labels,
        x_adv: Tensor::from_vec(&header.shape, data)?,
        success: header.success,
    })
}

// ---------------------------------------------------------------------------
// Detection protocol
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionConfig {
    /// Scored layer names; empty means the default set.
    pub layers: Vec<String>,
    pub samples_per_attack: usize,
    pub split_seed: u64,
    pub score_rule: ScoreRule,
    /// Minimum successful adversarial samples per attack.
    pub min_successful: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            layers: Vec::new(),
            samples_per_attack: 500,
            split_seed: 99,
            score_rule: ScoreRule::PerClass,
            min_successful: 50,
        }
    }
}

impl DetectionConfig {
    pub fn scored_layers(&self, spec: &ModelSpec) -> Result<Vec<ScoredLayer>> {
        if self.layers.is_empty() {
            Ok(default_scored_layers(spec))
        } else {
            self.layers.iter().map(|s| s.parse()).collect()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionCell {
    pub attack: String,
    pub mode: DetectorMode,
    pub auroc: f64,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Detector trained and evaluated on the same attack.
    pub seen: Vec<DetectionCell>,
    /// Detector trained on FGSM, evaluated on the other attacks.
    pub unknown: Vec<DetectionCell>,
    pub attack_success_rates: Vec<(String, f64)>,
    pub samples_per_attack: usize,
    pub score_rule: ScoreRule,
}

impl DetectionReport {
    pub fn seen_auroc(&self, attack: &str, mode: DetectorMode) -> Option<f64> {
        self.seen
            .iter()
            .find(|c| c.attack == attack && c.mode == mode)
            .map(|c| c.auroc)
    }

    pub fn unknown_auroc(&self, attack: &str, mode: DetectorMode) -> Option<f64> {
        self.unknown
            .iter()
            .find(|c| c.attack == attack && c.mode == mode)
            .map(|c| c.auroc)
    }

    /// Mean seen-attack AUROC for one detector mode.
    pub fn mean_seen_auroc(&self, mode: DetectorMode) -> f64 {
        let cells: Vec<f64> = self
            .seen
            .iter()
            .filter(|c| c.mode == mode)
            .map(|c| c.auroc)
            .collect();
        cells.iter().sum::<f64>() / cells.len().max(1) as f64
    }
}

struct ScoredAttack {
    attack: String,
    /// Per mode: (clean scores, adversarial scores), row per pair.
    per_mode: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    train_split: Vec<usize>,
    test_split: Vec<usize>,
}

const MODES: [DetectorMode; 2] = [DetectorMode::FullModel, DetectorMode::Subnet];

/// Scores crafted attacks under both detector modes and evaluates the
/// logistic-regression ensemble, including the unknown-attack transfer
/// block (trained on FGSM when present).
pub fn run_detection_suite(
    spec: &ModelSpec,
    weights: &Weights,
    bundles: &[SubnetworkBundle],
    train_images: &[LabeledImage],
    test_images: &[LabeledImage],
    crafted: &[CraftedAttack],
    cfg: &DetectionConfig,
) -> Result<DetectionReport> {
    let layers = cfg.scored_layers(spec)?;
    let (train_x, train_y) = crate::data::to_batch(train_images)?;
    let stats_full = fit_mahalanobis(spec, weights, None, &train_x, &train_y, &layers)?;
    let stats_subnet =
        fit_mahalanobis(spec, weights, Some(bundles), &train_x, &train_y, &layers)?;

    let mut scored = Vec::new();
    let mut success_rates = Vec::new();
    for (ai, craft) in crafted.iter().enumerate() {
        let name = craft.spec.kind.name().to_string();
        success_rates.push((name.clone(), craft.success_rate()));
        let successful: Vec<usize> = (0..craft.success.len())
            .filter(|&i| craft.success[i])
            .collect();
        if successful.len() < cfg.min_successful {
            return Err(Error::AttackSuccessTooLow {
                attack: name,
                successful: successful.len(),
                required: cfg.min_successful,
                rate: craft.success_rate(),
            });
        }
        // paired clean/adv batches over successful attacks only
        let clean_indices: Vec<usize> = successful.iter().map(|&i| craft.indices[i]).collect();
        let (clean_x, _) = crate::data::to_batch_indices(test_images, &clean_indices)?;
        let sample: usize = craft.x_adv.shape()[1..].iter().product();
        let mut adv_data = Vec::with_capacity(successful.len() * sample);
        for &i in &successful {
            adv_data.extend_from_slice(&craft.x_adv.data()[i * sample..(i + 1) * sample]);
        }
        let mut adv_shape = craft.x_adv.shape().to_vec();
        adv_shape[0] = successful.len();
        let adv_x = Tensor::from_vec(&adv_shape, adv_data)?;

        let mut per_mode = Vec::new();
        for mode in MODES {
            let (stats, b) = match mode {
                DetectorMode::FullModel => (&stats_full, None),
                DetectorMode::Subnet => (&stats_subnet, Some(bundles)),
            };
            let clean = mahalanobis_scores(stats, spec, weights, b, &clean_x, cfg.score_rule)?;
            let adv = mahalanobis_scores(stats, spec, weights, b, &adv_x, cfg.score_rule)?;
            per_mode.push((clean, adv));
        }

        // 50/50 pair split, clean and adversarial of one pair stay together
        let mut order: Vec<usize> = (0..successful.len()).collect();
        let mut rng = rngutil::rng_for(cfg.split_seed, ai as u64);
        rngutil::shuffle(&mut order, &mut rng);
        let half = order.len() / 2;
        scored.push(ScoredAttack {
            attack: name,
            per_mode,
            train_split: order[..half].to_vec(),
            test_split: order[half..].to_vec(),
        });
    }

    let detector_cfg = DetectorConfig::default();
    let fold =
        |sa: &ScoredAttack, mode_idx: usize, split: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
            let (clean, adv) = &sa.per_mode[mode_idx];
            let mut feats = Vec::with_capacity(2 * split.len());
            let mut labels = Vec::with_capacity(2 * split.len());
            for &i in split {
                feats.push(clean[i].clone());
                labels.push(false);
                feats.push(adv[i].clone());
                labels.push(true);
            }
            (feats, labels)
        };
    let eval = |det: &LogisticDetector, sa: &ScoredAttack, mode_idx: usize| -> Result<f64> {
        let (clean, adv) = &sa.per_mode[mode_idx];
        let pos: Vec<f64> = sa.test_split.iter().map(|&i| det.score(&adv[i])).collect();
        let neg: Vec<f64> = sa
            .test_split
            .iter()
            .map(|&i| det.score(&clean[i]))
            .collect();
        auroc(&pos, &neg)
    };

    let mut seen = Vec::new();
    let mut fgsm_detectors: Vec<Option<LogisticDetector>> = vec![None; MODES.len()];
    for sa in &scored {
        for (mi, mode) in MODES.iter().enumerate() {
            let (feats, labels) = fold(sa, mi, &sa.train_split);
            let det = train_detector(&feats, &labels, &detector_cfg)?;
            seen.push(DetectionCell {
                attack: sa.attack.clone(),
                mode: *mode,
                auroc: eval(&det, sa, mi)?,
                train_pairs: sa.train_split.len(),
                test_pairs: sa.test_split.len(),
            });
            if sa.attack == AttackKind::Fgsm.name() {
                fgsm_detectors[mi] = Some(det);
            }
        }
    }

    let mut unknown = Vec::new();
    if fgsm_detectors.iter().all(|d| d.is_some()) {
        for sa in &scored {
            if sa.attack == AttackKind::Fgsm.name() {
                continue;
            }
            for (mi, mode) in MODES.iter().enumerate() {
                let det = fgsm_detectors[mi].as_ref().unwrap();
                unknown.push(DetectionCell {
                    attack: sa.attack.clone(),
                    mode: *mode,
                    auroc: eval(det, sa, mi)?,
                    train_pairs: 0,
                    test_pairs: sa.test_split.len(),
                });
            }
        }
    }

    Ok(DetectionReport {
        seen,
        unknown,
        attack_success_rates: success_rates,
        samples_per_attack: cfg.samples_per_attack,
        score_rule: cfg.score_rule,
    })
}

/// Table-2-shaped CSV: one row per attack x detector mode with the seen
/// AUROC and (when available) the FGSM-transfer AUROC.
pub fn write_detection_csv(path: &Path, report: &DetectionReport) -> Result<()> {
    let mut out = String::from("attack,mode,seen_auroc,unknown_auroc\n");
    for cell in &report.seen {
        let unknown = report
            .unknown_auroc(&cell.attack, cell.mode)
            .map(|v| format!("{v:.6}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            cell.attack,
            cell.mode.name(),
            cell.auroc,
            unknown
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adversarial_cache_roundtrip() {
        let crafted = CraftedAttack {
            spec: AttackSpec::fgsm(0.1),
            indices: vec![0, 1, 2],
            labels: vec![4, 2, 9],
            x_adv: Tensor::from_vec(&[3, 1, 2, 2], (0..12).map(|i| i as f64 / 12.0).collect())
                .unwrap(),
            success: vec![true, false, true],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ssad");
        save_adversarial(&path, &crafted).unwrap();
        let loaded = load_adversarial(&path).unwrap();
        assert_eq!(loaded.spec, crafted.spec);
        assert_eq!(loaded.indices, crafted.indices);
        assert_eq!(loaded.labels, crafted.labels);
        assert_eq!(loaded.success, crafted.success);
        for (&a, &b) in crafted.x_adv.data().iter().zip(loaded.x_adv.data()) {
            assert_eq!(a as f32, b as f32);
        }
        // magic corruption
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'Z';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_adversarial(&path),
            Err(Error::BadMagic { .. })
        ));
    }
}
