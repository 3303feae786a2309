use rand::Rng;

use super::{Ctx, Linear};
use crate::error::{param_err, Result};
use crate::tensor::{Float, ParamStore, Var};

/// Squeeze-and-excitation gate:
/// `x * sigmoid(fc2(relu(fc1(mean_hw(x)))))` broadcast over `h, w`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
    pub reduction: usize,
}

impl SeBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(param_err!("SE: {channels} channels not divisible by reduction {reduction}"));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, rng)?,
            channels,
            reduction,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let squeezed = ctx.tape.global_avg_pool(x)?;
        let h = self.fc1.forward(ctx, squeezed)?;
        let h = ctx.tape.relu(h)?;
        let s = self.fc2.forward(ctx, h)?;
        let gate = ctx.tape.sigmoid(s)?;
        ctx.tape.scale_channels(x, gate)
    }
}
