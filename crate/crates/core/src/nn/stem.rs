//! Two-branch stem unit.
//!
//! Branch C1 average-pools (k2, s2) and applies a k2/s2 conv; branch C2
//! rearranges space to depth and applies a k3/s2/p1 conv over the 4× channels.
//! Each branch ends in its own BN + PReLU and the two outputs are summed, so
//! `[b, c, h, w]` becomes `[b, c_out, h/4, w/4]`.

use rand::Rng;

use super::{BatchNorm, Conv, ConvBnAct, Ctx, PRelu};
use crate::error::{dim_err, Result};
use crate::tensor::{Float, ParamStore, Var};

#[derive(Debug, Clone)]
pub struct StemUnit {
    pub c1: ConvBnAct,
    pub c2: ConvBnAct,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl StemUnit {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let branch = |store: &mut ParamStore<T>, rng: &mut R, tag: &str, cin: usize, k: usize, pad: usize| {
            let prefix = format!("{name}.{tag}");
            Ok::<_, crate::Error>(ConvBnAct {
                conv: Conv::new(store, &format!("{prefix}.conv"), cin, out_channels, k, 2, pad, true, rng)?,
                bn: BatchNorm::new(store, &format!("{prefix}.bn"), out_channels)?,
                act: PRelu::new(store, &format!("{prefix}.prelu"), out_channels)?,
            })
        };
        let c1 = branch(store, rng, "c1", in_channels, 2, 0)?;
        let c2 = branch(store, rng, "c2", 4 * in_channels, 3, 1)?;
        Ok(Self {
            c1,
            c2,
            in_channels,
            out_channels,
        })
    }

    fn check(&self, ctx: &Ctx<impl Float>, x: Var) -> Result<()> {
        let (_, c, h, w) = ctx.tape.value(x)?.dims4()?;
        if c != self.in_channels {
            return Err(dim_err!("stem expects {} channels, got {c}", self.in_channels));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err!("stem needs h and w divisible by 4, got {h}x{w}"));
        }
        Ok(())
    }

    /// avg-pool(k2, s2) → conv(k2, s2) → BN → PReLU.
    pub fn branch_c1<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let pooled = ctx.tape.avg_pool2d(x, 2, 2)?;
        self.c1.forward(ctx, pooled)
    }

    /// space-to-depth → conv(k3, s2, p1) → BN → PReLU.
    pub fn branch_c2<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.check(ctx, x)?;
        let folded = ctx.tape.space_to_depth(x)?;
        self.c2.forward(ctx, folded)
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let a = self.branch_c1(ctx, x)?;
        let b = self.branch_c2(ctx, x)?;
        ctx.tape.add(a, b)
    }
}
