use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::ManifestRecord;
use crate::error::{param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Upper bound on the masked share of a planned epoch, in `[0, 1)`.
    pub mask_ratio_cap: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mask_ratio_cap: 0.10,
            seed: 0,
            shuffle: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio_cap) {
            return Err(param_err!("mask_ratio_cap must be in [0, 1), got {}", self.mask_ratio_cap));
        }
        Ok(())
    }

    /// Largest masked count that keeps `m / (unmasked + m) <= cap`.
    pub fn masked_budget(&self, unmasked: usize) -> usize {
        let cap = self.mask_ratio_cap;
        let mut m = (cap / (1.0 - cap) * unmasked as f64 + 1e-9).floor() as usize;
        while m > 0 && m as f64 / (unmasked + m) as f64 > cap {
            m -= 1;
        }
        m
    }
}

/// Record indices for one epoch: every unmasked record once plus a seeded
/// subset of masked records capped at `mask_ratio_cap` of the epoch.
pub fn plan_epoch(records: &[ManifestRecord], cfg: &SamplerConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let (masked, unmasked): (Vec<usize>, Vec<usize>) = (0..records.len()).partition(|&i| records[i].masked);
    if unmasked.is_empty() {
        return Err(param_err!("sampler needs at least one unmasked record"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let budget = cfg.masked_budget(unmasked.len()).min(masked.len());
    let mut pool = masked;
    pool.shuffle(&mut rng);
    pool.truncate(budget);
    let mut plan = unmasked;
    plan.extend(pool);
    if cfg.shuffle {
        plan.shuffle(&mut rng);
    } else {
        plan.sort_unstable();
    }
    Ok(plan)
}
