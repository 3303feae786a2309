//! DropBlock: structured dropout that zeroes contiguous squares.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{Float, Mode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropBlockConfig {
    /// Target fraction of dropped units, in `[0, 1)`.
    pub drop_prob: f64,
    /// Side of the dropped square; odd.
    pub block_size: usize,
}

impl Default for DropBlockConfig {
    fn default() -> Self {
        Self {
            drop_prob: 0.1,
            block_size: 3,
        }
    }
}

impl DropBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(param_err!("dropblock drop_prob must be in [0, 1), got {}", self.drop_prob));
        }
        if self.block_size == 0 || self.block_size % 2 == 0 {
            return Err(param_err!("dropblock block_size must be odd and positive, got {}", self.block_size));
        }
        Ok(())
    }

    /// Bernoulli rate for block centres so that about `drop_prob` of an
    /// `h × w` map ends up dropped.
    pub fn seed_rate(&self, h: usize, w: usize) -> f64 {
        let bs = self.block_size;
        let valid = ((h - bs + 1) * (w - bs + 1)) as f64;
        self.drop_prob / (bs * bs) as f64 * (h * w) as f64 / valid
    }
}

/// Keep-mask for a `[b, c, h, w]` activation; `false` marks dropped units.
/// Seeds are drawn independently per channel, only where the whole block
/// fits inside the map.
pub fn dropblock_mask<R: Rng + ?Sized>(
    cfg: &DropBlockConfig,
    (b, c, h, w): (usize, usize, usize, usize),
    rng: &mut R,
) -> Result<Vec<bool>> {
    cfg.validate()?;
    let bs = cfg.block_size;
    if bs > h || bs > w {
        return Err(dim_err!("dropblock block_size {bs} exceeds feature map {h}x{w}"));
    }
    let gamma = cfg.seed_rate(h, w);
    let half = bs / 2;
    let mut keep = vec![true; b * c * h * w];
    for plane in keep.chunks_mut(h * w) {
        for cy in half..h - half {
            for cx in half..w - half {
                if rng.random::<f64>() < gamma {
                    for y in cy - half..=cy + half {
                        plane[y * w + cx - half..=y * w + cx + half].fill(false);
                    }
                }
            }
        }
    }
    Ok(keep)
}

/// Applies DropBlock to `x`. Eval mode and `drop_prob == 0` return `x`
/// itself. Survivors are rescaled by `total / kept`.
pub fn dropblock<T: Float>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &DropBlockConfig,
    mode: Mode,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    cfg.validate()?;
    if mode == Mode::Eval || cfg.drop_prob == 0.0 {
        return Ok(x);
    }
    let rng = rng.ok_or_else(|| Error::State("dropblock in train mode needs a random source".into()))?;
    let shape = tape.value(x)?.shape().to_vec();
    let dims = tape.value(x)?.dims4()?;
    let keep = dropblock_mask(cfg, dims, rng)?;
    let kept = keep.iter().filter(|&&k| k).count();
    let scale = if kept == 0 {
        T::zero()
    } else {
        T::lit(keep.len() as f64 / kept as f64)
    };
    let mask = Tensor::new(&shape, keep.iter().map(|&k| if k { scale } else { T::zero() }).collect())?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}
