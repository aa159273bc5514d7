//! Balanced per-class epoch sampler: every image of the target class plus
//! an equal number drawn without replacement from the rest.

use super::LabeledImage;
use crate::error::{Error, Result};
use crate::rngutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BalancedSample {
    pub index: usize,
    /// True when the sample belongs to the target class.
    pub is_target: bool,
}

/// One balanced epoch over `data` for target `class`. Callers re-shuffle per
/// epoch by mixing the epoch index into `seed`.
pub fn balanced_epoch(
    data: &[LabeledImage],
    class: usize,
    seed: u64,
) -> Result<Vec<BalancedSample>> {
    let targets: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == class)
        .map(|(i, _)| i)
        .collect();
    if targets.is_empty() {
        return Err(Error::MissingClass(class));
    }
    let mut others: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label != class)
        .map(|(i, _)| i)
        .collect();
    if others.len() < targets.len() {
        return Err(Error::BalancedSamplerShortfall {
            class,
            need: targets.len(),
            available: others.len(),
        });
    }
    let mut rng = rngutil::rng_for(seed, 0xBA1A_0000 ^ class as u64);
    rngutil::shuffle(&mut others, &mut rng);
    let mut epoch: Vec<BalancedSample> = targets
        .iter()
        .map(|&index| BalancedSample {
            index,
            is_target: true,
        })
        .chain(others[..targets.len()].iter().map(|&index| BalancedSample {
            index,
            is_target: false,
        }))
        .collect();
    rngutil::shuffle(&mut epoch, &mut rng);
    Ok(epoch)
}
