use rand::Rng;

use super::{BatchNorm, Conv, Ctx, DropBlockConfig, PRelu, SeBlock};
use crate::error::{Error, Result};
use crate::tensor::{Float, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// 1×1 conv + BN on the shortcut. Required exactly when the stride or
    /// channel count changes the shape.
    pub projection: bool,
    pub se_reduction: Option<usize>,
    pub dropblock: Option<DropBlockConfig>,
}

impl ResidualBlockSpec {
    pub fn needs_projection(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels
    }
}

/// Basic two-conv residual block:
/// `PReLU(BN(conv(PReLU(BN(conv(x))))) [· SE] + shortcut(x))`, followed by
/// DropBlock when configured.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub act1: PRelu,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub se: Option<SeBlock>,
    pub shortcut: Option<(Conv, BatchNorm)>,
    pub act_out: PRelu,
    pub dropblock: Option<DropBlockConfig>,
    pub spec: ResidualBlockSpec,
}

impl ResidualBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: ResidualBlockSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.stride != 1 && spec.stride != 2 {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {}", spec.stride)));
        }
        if spec.needs_projection() != spec.projection {
            return Err(Error::Config(format!(
                "{name}: shortcut projection {} but block maps {}→{} channels with stride {}",
                if spec.projection { "present" } else { "missing" },
                spec.in_channels,
                spec.out_channels,
                spec.stride
            )));
        }
        if let Some(db) = &spec.dropblock {
            db.validate()?;
        }
        let (cin, cout) = (spec.in_channels, spec.out_channels);
        let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, cout, 3, spec.stride, 1, false, rng)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), cout)?;
        let act1 = PRelu::new(store, &format!("{name}.prelu1"), cout)?;
        let conv2 = Conv::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), cout)?;
        let se = match spec.se_reduction {
            Some(r) => Some(SeBlock::new(store, &format!("{name}.se"), cout, r, rng)?),
            None => None,
        };
        let shortcut = if spec.projection {
            Some((
                Conv::new(store, &format!("{name}.shortcut.conv"), cin, cout, 1, spec.stride, 0, false, rng)?,
                BatchNorm::new(store, &format!("{name}.shortcut.bn"), cout)?,
            ))
        } else {
            None
        };
        let act_out = PRelu::new(store, &format!("{name}.prelu_out"), cout)?;
        Ok(Self {
            conv1,
            bn1,
            act1,
            conv2,
            bn2,
            se,
            shortcut,
            act_out,
            dropblock: spec.dropblock,
            spec,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = self.act1.forward(ctx, y)?;
        let y = self.conv2.forward(ctx, y)?;
        let mut y = self.bn2.forward(ctx, y)?;
        if let Some(se) = &self.se {
            y = se.forward(ctx, y)?;
        }
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        let out = self.act_out.forward(ctx, sum)?;
        match &self.dropblock {
            Some(cfg) => ctx.dropblock(out, cfg),
            None => Ok(out),
        }
    }
}
