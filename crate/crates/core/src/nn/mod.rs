//! Network building blocks and the face-embedding backbone.

mod backbone;
mod dropblock;
mod residual;
mod se;
mod stem;

use rand::{Rng, RngCore};

use crate::error::Result;
use crate::tensor::{BnId, Float, Mode, ParamId, ParamStore, Tape, Tensor, Var};

pub use backbone::{Backbone, BackboneConfig, EMBEDDING_DIM, INPUT_SIZE};
pub use dropblock::{dropblock, dropblock_mask, DropBlockConfig};
pub use residual::{ResidualBlock, ResidualBlockSpec};
pub use se::SeBlock;
pub use stem::StemUnit;

pub(crate) const BN_EPS: f64 = 1e-5;

enum Access<'a, T: Float> {
    Train {
        store: &'a mut ParamStore<T>,
        rng: &'a mut dyn RngCore,
    },
    Eval(&'a ParamStore<T>),
}

/// Everything a module needs during one forward pass: the tape being
/// recorded, the parameters and, in train mode, batch-norm state to update
/// and a random source for DropBlock.
pub struct Ctx<'a, T: Float> {
    pub tape: &'a mut Tape<T>,
    access: Access<'a, T>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn train(tape: &'a mut Tape<T>, store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self {
            tape,
            access: Access::Train { store, rng },
        }
    }

    pub fn eval(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            access: Access::Eval(store),
        }
    }

    pub fn mode(&self) -> Mode {
        match self.access {
            Access::Train { .. } => Mode::Train,
            Access::Eval(_) => Mode::Eval,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        match &self.access {
            Access::Train { store, .. } => store,
            Access::Eval(store) => store,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store: &ParamStore<T> = match &self.access {
            Access::Train { store, .. } => store,
            Access::Eval(store) => store,
        };
        self.tape.param(store, id)
    }

    /// Random source; `None` in eval mode.
    pub fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match &mut self.access {
            Access::Train { rng, .. } => Some(&mut **rng),
            Access::Eval(_) => None,
        }
    }

    pub fn dropblock(&mut self, x: Var, cfg: &DropBlockConfig) -> Result<Var> {
        match &mut self.access {
            Access::Train { rng, .. } => dropblock(self.tape, x, cfg, Mode::Train, Some(&mut **rng)),
            Access::Eval(_) => dropblock(self.tape, x, cfg, Mode::Eval, None),
        }
    }

    fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        match &mut self.access {
            Access::Train { store, .. } => self.tape.batch_norm_train(x, gamma, beta, store.bn_mut(bn.state), BN_EPS),
            Access::Eval(store) => self.tape.batch_norm_eval(x, gamma, beta, store.bn(bn.state), BN_EPS),
        }
    }
}

/// He-normal initialisation for a weight with `fan_in` inputs per output.
pub(crate) fn kaiming<T: Float, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = kaiming(&[out_c, in_c, kernel, kernel], in_c * kernel * kernel, rng);
        let weight = store.add(&format!("{name}.weight"), w, false)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_c]), false)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnId,
}

impl BatchNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            state: store.add_bn_state(name, channels)?,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        ctx.batch_norm(x, self)
    }
}

#[derive(Debug, Clone)]
pub struct PRelu {
    pub slope: ParamId,
}

impl PRelu {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let slope = store.add(&format!("{name}.slope"), Tensor::full(&[channels], T::lit(0.25)), true)?;
        Ok(Self { slope })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let a = ctx.param(self.slope);
        ctx.tape.prelu(x, a)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), kaiming(&[out_f, in_f], in_f, rng), false)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(&[out_f]), false)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

/// Conv → BN → PReLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
    pub act: PRelu,
}

impl ConvBnAct {
    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        self.act.forward(ctx, y)
    }
}
