use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Ctx, DropBlockConfig, Linear, ResidualBlock, ResidualBlockSpec, StemUnit};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Float, ParamStore, Tape, Tensor, Var};

pub const EMBEDDING_DIM: usize = 512;
pub const INPUT_SIZE: usize = 112;

/// Shape of the residual backbone. Stage indices in `dropblock_stages` are
/// 1-based, matching the `stageN` parameter names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub strides: Vec<usize>,
    pub se_enabled: bool,
    pub se_reduction: usize,
    pub dropblock_stages: Vec<usize>,
    pub dropblock: DropBlockConfig,
    pub embedding_dim: usize,
}

impl BackboneConfig {
    /// Desk-scale preset: 112 → 28 (stem) → 28 → 14 → 7.
    pub fn toy() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 16,
            widths: vec![16, 32, 64],
            blocks: vec![1, 1, 1],
            strides: vec![1, 2, 2],
            se_enabled: true,
            se_reduction: 16,
            dropblock_stages: vec![2, 3],
            dropblock: DropBlockConfig::default(),
            embedding_dim: EMBEDDING_DIM,
        }
    }

    pub fn resnet34() -> Self {
        Self {
            in_channels: 3,
            stem_channels: 64,
            widths: vec![64, 128, 256, 512],
            blocks: vec![3, 4, 6, 3],
            strides: vec![1, 2, 2, 2],
            se_enabled: true,
            se_reduction: 16,
            dropblock_stages: vec![3, 4],
            dropblock: DropBlockConfig::default(),
            embedding_dim: EMBEDDING_DIM,
        }
    }

    /// Spatial side after the stem and after each stage for a 112×112 input.
    pub fn stage_sides(&self) -> Vec<usize> {
        let mut side = INPUT_SIZE / 4;
        let mut out = vec![side];
        for &s in &self.strides {
            side = (side + 2 - 3) / s + 1;
            out.push(side);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 || self.blocks.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "backbone widths/blocks/strides must have equal non-zero length ({}, {}, {})",
                n,
                self.blocks.len(),
                self.strides.len()
            )));
        }
        if self.embedding_dim != EMBEDDING_DIM {
            return Err(Error::Config(format!(
                "embedding_dim must be {EMBEDDING_DIM}, got {}",
                self.embedding_dim
            )));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config(format!("stage strides must be 1 or 2, got {:?}", self.strides)));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.widths.iter().any(|&w| w == 0) || self.stem_channels == 0 {
            return Err(Error::Config("backbone widths and block counts must be positive".into()));
        }
        if self.se_enabled {
            if self.se_reduction == 0 {
                return Err(Error::Config("se_reduction must be positive".into()));
            }
            if let Some(w) = self.widths.iter().find(|&&w| w % self.se_reduction != 0) {
                return Err(Error::Config(format!(
                    "stage width {w} not divisible by se_reduction {}",
                    self.se_reduction
                )));
            }
        }
        let last_two = n.saturating_sub(1).max(1)..=n;
        let sides = self.stage_sides();
        for &s in &self.dropblock_stages {
            if !last_two.contains(&s) {
                return Err(Error::Config(format!(
                    "dropblock stage {s} is not one of the last two stages of {n}"
                )));
            }
            if self.dropblock.block_size > sides[s] {
                return Err(Error::Config(format!(
                    "dropblock block_size {} exceeds stage {s} map side {}",
                    self.dropblock.block_size, sides[s]
                )));
            }
        }
        if !self.dropblock_stages.is_empty() {
            self.dropblock.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// Stem → residual stages → flatten → FC(512) → BN: the face embedding network.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: StemUnit,
    pub stages: Vec<Vec<ResidualBlock>>,
    pub fc: Linear,
    pub features: BatchNorm,
}

impl Backbone {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = StemUnit::new(store, "stem", config.in_channels, config.stem_channels, rng)?;
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut cin = config.stem_channels;
        for (si, ((&width, &nblocks), &stride)) in
            config.widths.iter().zip(&config.blocks).zip(&config.strides).enumerate()
        {
            let stage_no = si + 1;
            let dropblock = config
                .dropblock_stages
                .contains(&stage_no)
                .then_some(config.dropblock);
            let mut blocks = Vec::with_capacity(nblocks);
            for bi in 0..nblocks {
                let stride = if bi == 0 { stride } else { 1 };
                let spec = ResidualBlockSpec {
                    in_channels: cin,
                    out_channels: width,
                    stride,
                    projection: stride != 1 || cin != width,
                    se_reduction: config.se_enabled.then_some(config.se_reduction),
                    dropblock,
                };
                blocks.push(ResidualBlock::new(store, &format!("stage{stage_no}.block{bi}"), spec, rng)?);
                cin = width;
            }
            stages.push(blocks);
        }
        let side = *config.stage_sides().last().unwrap();
        let fc = Linear::new(store, "fc", cin * side * side, config.embedding_dim, true, rng)?;
        let features = BatchNorm::new(store, "features", config.embedding_dim)?;
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            fc,
            features,
        })
    }

    pub fn forward<T: Float>(&self, ctx: &mut Ctx<T>, images: Var) -> Result<Var> {
        let (_, c, h, w) = ctx.tape.value(images)?.dims4()?;
        if c != self.config.in_channels || h != INPUT_SIZE || w != INPUT_SIZE {
            return Err(dim_err!(
                "backbone expects [b, {}, {INPUT_SIZE}, {INPUT_SIZE}], got [_, {c}, {h}, {w}]",
                self.config.in_channels
            ));
        }
        let mut x = self.stem.forward(ctx, images)?;
        for block in self.stages.iter().flatten() {
            x = block.forward(ctx, x)?;
        }
        let flat = ctx.tape.flatten(x)?;
        let emb = self.fc.forward(ctx, flat)?;
        self.features.forward(ctx, emb)
    }

    /// Eval-mode embeddings for a batch of preprocessed images.
    pub fn embed<T: Float>(&self, store: &ParamStore<T>, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let mut ctx = Ctx::eval(&mut tape, store);
        let y = self.forward(&mut ctx, x)?;
        Ok(tape.value(y)?.clone())
    }
}
