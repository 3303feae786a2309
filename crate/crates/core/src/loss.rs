//! Classification heads: cosine logits, ArcFace / CosFace margins and
//! softmax cross-entropy.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Error, Result};
use crate::nn::{Ctx, EMBEDDING_DIM};
use crate::tensor::{Backward, Float, ParamId, ParamStore, Tape, Tensor, Var};

/// Norms below this are treated as degenerate by [`cosine_logits`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    ArcFace,
    CosFace,
    Softmax,
}

impl LossFamily {
    pub fn default_margin(self) -> f64 {
        match self {
            LossFamily::ArcFace => 0.5,
            LossFamily::CosFace => 0.35,
            LossFamily::Softmax => 0.0,
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFamily::ArcFace => "arcface",
            LossFamily::CosFace => "cosface",
            LossFamily::Softmax => "softmax",
        })
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "arcface" => Ok(LossFamily::ArcFace),
            "cosface" => Ok(LossFamily::CosFace),
            "softmax" => Ok(LossFamily::Softmax),
            other => Err(Error::Config(format!(
                "unknown loss family '{other}' (expected arcface, cosface or softmax)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub family: LossFamily,
    pub s: f64,
    pub m: f64,
    pub class_count: usize,
}

impl MarginConfig {
    pub fn new(family: LossFamily, class_count: usize) -> Self {
        Self {
            family,
            s: 64.0,
            m: family.default_margin(),
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(param_err!("loss scale must be positive, got {}", self.s));
        }
        if !(self.m >= 0.0 && self.m.is_finite()) {
            return Err(param_err!("loss margin must be non-negative, got {}", self.m));
        }
        match self.family {
            LossFamily::ArcFace if self.m >= PI => {
                return Err(param_err!("arcface margin must be below pi, got {}", self.m));
            }
            LossFamily::CosFace if self.m >= 1.0 => {
                return Err(param_err!("cosface margin must be below 1, got {}", self.m));
            }
            _ => {}
        }
        if self.class_count == 0 {
            return Err(param_err!("class_count must be positive"));
        }
        Ok(())
    }
}

/// Learnable `[class_count, dim]` classifier. Rows are normalised inside
/// [`cosine_logits`], never in storage.
#[derive(Debug, Clone)]
pub struct ClassWeights {
    pub weight: ParamId,
    pub class_count: usize,
    pub dim: usize,
}

impl ClassWeights {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        class_count: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if class_count == 0 || dim == 0 {
            return Err(param_err!("class weights need positive shape, got [{class_count}, {dim}]"));
        }
        let w = Tensor::randn(&[class_count, dim], 0.01, rng);
        Ok(Self {
            weight: store.add(name, w, false)?,
            class_count,
            dim,
        })
    }

    pub fn with_embedding_dim<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, "head.weight", class_count, EMBEDDING_DIM, rng)
    }
}

fn check_rows<T: Float>(what: &str, t: &Tensor<T>) -> Result<()> {
    let (rows, cols) = t.dims2()?;
    for r in 0..rows {
        let n: T = t.data()[r * cols..(r + 1) * cols].iter().map(|v| v.powi(2)).sum();
        if n.sqrt().to_f64_lossy() < NORM_EPS {
            return Err(param_err!("{what} row {r} has norm below {NORM_EPS}"));
        }
    }
    Ok(())
}

/// `logits[i, j] = <e_i / |e_i|, w_j / |w_j|>`.
pub fn cosine_logits<T: Float>(tape: &mut Tape<T>, embeddings: Var, weights: Var) -> Result<Var> {
    let (_, d) = tape.value(embeddings)?.dims2()?;
    let (_, dw) = tape.value(weights)?.dims2()?;
    if d != dw {
        return Err(dim_err!("embedding dim {d} does not match class weight dim {dw}"));
    }
    check_rows("embedding", tape.value(embeddings)?)?;
    check_rows("class weight", tape.value(weights)?)?;
    let e = tape.l2_normalize(embeddings, 1, NORM_EPS)?;
    let w = tape.l2_normalize(weights, 1, NORM_EPS)?;
    tape.linear(e, w, None)
}

fn check_labels<T: Float>(cos: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, n) = cos.dims2()?;
    if labels.len() != b {
        return Err(dim_err!("{} labels for a batch of {b}", labels.len()));
    }
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n) {
        return Err(Error::Index(format!("label {l} at row {i} out of range for {n} classes")));
    }
    Ok((b, n))
}

/// Elementwise map `s·f(c)` on target entries and `s·c` elsewhere, with the
/// per-target derivative recorded at forward time.
struct MarginGrad<T> {
    s: T,
    n: usize,
    labels: Vec<usize>,
    target_slope: Vec<T>,
}

impl<T: Float> Backward<T> for MarginGrad<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T], _needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let mut dx: Vec<T> = g.iter().map(|&v| v * self.s).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            dx[i * self.n + l] = g[i * self.n + l] * self.target_slope[i];
        }
        Ok(vec![Some(dx)])
    }
}

fn margin_op<T: Float>(
    tape: &mut Tape<T>,
    name: &'static str,
    cosines: Var,
    labels: &[usize],
    s: f64,
    target: impl Fn(f64) -> (f64, f64),
) -> Result<Var> {
    let cv = tape.value(cosines)?;
    let (_, n) = check_labels(cv, labels)?;
    let st = T::lit(s);
    let mut out: Vec<T> = cv.data().iter().map(|&c| c * st).collect();
    let mut slope = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let (f, df) = target(cv.data()[i * n + l].to_f64_lossy());
        out[i * n + l] = T::lit(s * f);
        slope.push(T::lit(s * df));
    }
    let value = Tensor::new(cv.shape(), out)?;
    tape.push_op(
        name,
        &[cosines],
        value,
        Box::new(MarginGrad {
            s: st,
            n,
            labels: labels.to_vec(),
            target_slope: slope,
        }),
    )
}

/// Target entries become `s·cos(θ + m)` with `θ = acos(c)`; once `θ + m`
/// passes π the logit is held at `-s`.
pub fn arcface_logits<T: Float>(tape: &mut Tape<T>, cosines: Var, labels: &[usize], s: f64, m: f64) -> Result<Var> {
    if !(0.0..PI).contains(&m) {
        return Err(param_err!("arcface margin must be in [0, pi), got {m}"));
    }
    let (cos_m, sin_m) = (m.cos(), m.sin());
    margin_op(tape, "arcface", cosines, labels, s, |c| {
        let c = c.clamp(-1.0, 1.0);
        let theta = c.acos();
        if theta + m > PI {
            return (-1.0, 0.0);
        }
        let sin_t = (1.0 - c * c).sqrt();
        let f = c * cos_m - sin_t * sin_m;
        let df = cos_m + c * sin_m / sin_t.max(1e-7);
        (f, df)
    })
}

/// Target entries become `s·(c − m)`.
pub fn cosface_logits<T: Float>(tape: &mut Tape<T>, cosines: Var, labels: &[usize], s: f64, m: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&m) {
        return Err(param_err!("cosface margin must be in [0, 1), got {m}"));
    }
    margin_op(tape, "cosface", cosines, labels, s, |c| (c - m, 1.0))
}

struct CrossEntropyGrad<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
    n: usize,
}

impl<T: Float> Backward<T> for CrossEntropyGrad<T> {
    fn backward(&self, _inputs: &[&Tensor<T>], _out: &Tensor<T>, g: &[T], _needs: &[bool]) -> Result<Vec<Option<Vec<T>>>> {
        let scale = g[0] / T::lit(self.labels.len() as f64);
        let mut dx: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            dx[i * self.n + l] -= scale;
        }
        Ok(vec![Some(dx)])
    }
}

/// Batch mean of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy<T: Float>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lv = tape.value(logits)?;
    let (b, n) = lv.dims2()?;
    if b == 0 {
        return Err(param_err!("cross-entropy over an empty batch"));
    }
    check_labels(lv, labels)?;
    let mut probs = Vec::with_capacity(b * n);
    let mut total = T::zero();
    for (i, row) in lv.data().chunks(n).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total += z.ln() - (row[labels[i]] - max);
        probs.extend(exps.iter().map(|&e| e / z));
    }
    let loss = total / T::lit(b as f64);
    tape.push_op(
        "softmax_cross_entropy",
        &[logits],
        Tensor::scalar(loss),
        Box::new(CrossEntropyGrad {
            probs,
            labels: labels.to_vec(),
            n,
        }),
    )
}

/// Applies the configured margin to cosine logits. The softmax family only
/// scales by `s`.
pub fn margin_logits<T: Float>(tape: &mut Tape<T>, cosines: Var, labels: &[usize], cfg: &MarginConfig) -> Result<Var> {
    match cfg.family {
        LossFamily::ArcFace => arcface_logits(tape, cosines, labels, cfg.s, cfg.m),
        LossFamily::CosFace => cosface_logits(tape, cosines, labels, cfg.s, cfg.m),
        LossFamily::Softmax => cosface_logits(tape, cosines, labels, cfg.s, 0.0),
    }
}

/// Classifier plus loss: embeddings → cosine logits → margin → cross-entropy.
#[derive(Debug, Clone)]
pub struct MarginHead {
    pub weights: ClassWeights,
    pub config: MarginConfig,
}

impl MarginHead {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: MarginConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: ClassWeights::with_embedding_dim(store, config.class_count, rng)?,
            config,
        })
    }

    pub fn loss<T: Float>(&self, ctx: &mut Ctx<T>, embeddings: Var, labels: &[usize]) -> Result<Var> {
        let w = ctx.param(self.weights.weight);
        let cos = cosine_logits(ctx.tape, embeddings, w)?;
        let logits = margin_logits(ctx.tape, cos, labels, &self.config)?;
        softmax_cross_entropy(ctx.tape, logits, labels)
    }
}
