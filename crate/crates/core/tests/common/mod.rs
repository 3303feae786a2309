//! Shared oracles for the integration tests: a central finite-difference
//! gradient checker and small fixture builders.

#![allow(dead_code)]

use mfr_core::nn::Ctx;
use mfr_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use mfr_core::Result;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-3;
/// Fallback steps for coordinates whose `FD_STEP` stencil crosses a
/// rectifier kink.
pub const FINE_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
/// Denominator floor for the relative error, as a fraction of the largest
/// analytic gradient magnitude in the same input tensor. Components far
/// below their tensor's scale are dominated by the O(h²) truncation error
/// of the stencil, not by the accuracy of backward.
pub const REL_FLOOR_FRACTION: f64 = 1e-2;
/// Absolute floor, well above the ~1e-11 rounding noise of a 1e-3 stencil, so
/// that gradients which are exactly zero compare against that noise level.
pub const REL_FLOOR_MIN: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Worst relative error over coordinates checked at `FD_STEP`.
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
    /// Coordinates whose `FD_STEP` stencil moved a rectifier input across
    /// zero. They are excluded from `max_rel` and re-checked at the largest
    /// of `FINE_STEPS` that stays on one side of every kink.
    pub kinked: usize,
    pub kinked_max_rel: f64,
    /// Kinked coordinates for which even the finest step crossed a kink.
    pub unresolved: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel < tol && self.kinked_max_rel < tol && self.unresolved == 0 && self.checked > 0
    }
}

/// One evaluation of a scalar objective: its value, the analytic gradient of
/// each input and the sign pattern of every rectifier input on the tape.
pub struct Eval {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
    pub kinks: Vec<bool>,
}

/// Signs of the inputs of every `prelu` / `relu` node, in tape order.
pub fn kink_signature(tape: &Tape<f64>) -> Vec<bool> {
    let mut signs = Vec::new();
    for v in tape.vars() {
        if matches!(tape.op_name(v).unwrap(), "prelu" | "relu") {
            let x = tape.op_inputs(v).unwrap()[0];
            signs.extend(tape.value(x).unwrap().data().iter().map(|&a| a >= 0.0));
        }
    }
    signs
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor).max(REL_FLOOR_MIN)
}

/// Which coordinates a gradient check perturbs.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// This many random coordinates of each input.
    PerInput(usize),
    /// This many random coordinates drawn over all inputs together.
    Total(usize),
}

fn pick_coords(inputs: &[Tensor<f64>], coords: Coords, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    match coords {
        Coords::All => inputs.iter().enumerate().flat_map(|(k, t)| (0..t.numel()).map(move |i| (k, i))).collect(),
        Coords::PerInput(n) => inputs
            .iter()
            .enumerate()
            .flat_map(|(k, t)| {
                let idx: Vec<usize> =
                    if n < t.numel() { sample(rng, t.numel(), n).into_vec() } else { (0..t.numel()).collect() };
                idx.into_iter().map(move |i| (k, i))
            })
            .collect(),
        Coords::Total(n) => {
            let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
            let total: usize = sizes.iter().sum();
            let mut flat = sample(rng, total, n.min(total)).into_vec();
            flat.sort_unstable();
            flat.into_iter()
                .map(|mut g| {
                    let mut k = 0;
                    while g >= sizes[k] {
                        g -= sizes[k];
                        k += 1;
                    }
                    (k, g)
                })
                .collect()
        }
    }
}

/// Compares analytic gradients with central differences.
///
/// `f` evaluates the scalar objective at the given inputs. A coordinate whose
/// stencil changes the rectifier sign pattern is not differentiable within
/// the stencil; it is re-checked with a finer step instead.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    coords: Coords,
    seed: u64,
    mut f: impl FnMut(&[Tensor<f64>]) -> Eval,
) -> GradReport {
    let base = f(inputs);
    assert_eq!(base.grads.len(), inputs.len(), "one gradient per input");
    for (k, input) in inputs.iter().enumerate() {
        assert_eq!(base.grads[k].len(), input.numel(), "gradient {k} has the input's size");
    }
    let floors: Vec<f64> = base
        .grads
        .iter()
        .map(|g| REL_FLOOR_FRACTION * g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
        kinked: 0,
        kinked_max_rel: 0.0,
        unresolved: 0,
    };
    let mut probe = inputs.to_vec();
    let mut central = |probe: &mut Vec<Tensor<f64>>, k: usize, i: usize, h: f64| {
        let orig = inputs[k].data()[i];
        probe[k].data_mut()[i] = orig + h;
        let up = f(probe);
        probe[k].data_mut()[i] = orig - h;
        let down = f(probe);
        probe[k].data_mut()[i] = orig;
        let smooth = up.kinks == base.kinks && down.kinks == base.kinks;
        ((up.value - down.value) / (2.0 * h), smooth)
    };
    for (k, i) in pick_coords(inputs, coords, &mut rng) {
        let analytic = base.grads[k][i];
        let (numeric, smooth) = central(&mut probe, k, i, FD_STEP);
        if smooth {
            let e = rel_err(analytic, numeric, floors[k]);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("input {k}[{i}]: analytic {analytic} numeric {numeric}");
            }
            continue;
        }
        report.kinked += 1;
        let fine = FINE_STEPS.iter().map(|&h| central(&mut probe, k, i, h)).find(|&(_, smooth)| smooth);
        match fine {
            Some((numeric, _)) => {
                let e = rel_err(analytic, numeric, floors[k]);
                if e > report.kinked_max_rel {
                    report.kinked_max_rel = e;
                    if e >= report.max_rel {
                        report.worst = format!("kinked input {k}[{i}]: analytic {analytic} numeric {numeric}");
                    }
                }
            }
            None => report.unresolved += 1,
        }
    }
    report
}

/// Fixed random projection `sum(y * r)` that turns any output into a scalar
/// with a non-degenerate gradient.
pub fn project(tape: &mut Tape<f64>, y: Var) -> Var {
    let shape = tape.value(y).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ shape.iter().product::<usize>() as u64);
    let r = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = tape.mul(y, r).unwrap();
    tape.sum(p).unwrap()
}

/// Gradient check of a pure tape op. `build` receives one leaf per input and
/// returns the op output; non-scalar outputs are projected.
pub fn check_op(
    inputs: &[Tensor<f64>],
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> GradReport {
    check_gradients(inputs, Coords::All, seed, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
        let y = build(&mut tape, &vars).unwrap();
        let loss = if tape.value(y).unwrap().numel() == 1 { y } else { project(&mut tape, y) };
        let value = tape.value(loss).unwrap().data()[0];
        let grads = tape.backward(loss).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect();
        Eval { value, grads, kinks: kink_signature(&tape) }
    })
}

/// Gradient check of a module: the input batch plus every parameter in
/// `store`. `forward` runs in train mode with a freshly seeded random source
/// on a copy of the store, so batch-norm statistics and DropBlock masks are
/// identical on every evaluation.
pub fn check_module(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    coords: Coords,
    seed: u64,
    forward: impl Fn(&mut Ctx<f64>, Var) -> Result<Var>,
) -> GradReport {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut inputs = vec![x.clone()];
    inputs.extend(ids.iter().map(|&id| store.get(id).clone()));
    check_gradients(&inputs, coords, seed, |xs| {
        let mut local = store.clone();
        for (&id, t) in ids.iter().zip(&xs[1..]) {
            local.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        local.zero_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(xs[0].clone().with_requires_grad(true));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0b1);
        let y = {
            let mut ctx = Ctx::train(&mut tape, &mut local, &mut rng);
            forward(&mut ctx, xv).unwrap()
        };
        let loss = if tape.value(y).unwrap().numel() == 1 { y } else { project(&mut tape, y) };
        let value = tape.value(loss).unwrap().data()[0];
        let grads = tape.backward_into(loss, &mut local).unwrap();
        let mut g = vec![grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; xs[0].numel()])];
        for &id in &ids {
            let t = local.get(id);
            g.push(t.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]));
        }
        Eval { value, grads: g, kinks: kink_signature(&tape) }
    })
}

/// Random tensor whose entries stay at least `gap` away from zero, so that
/// finite differences never straddle the kink of a rectifier.
pub fn randn_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

/// Tries every candidate threshold, returns the smallest one meeting the
/// target together with its TAR.
pub fn exhaustive_tar(scores: &[f64], genuine: &[bool], target: f64) -> (f64, f64) {
    let neg = genuine.iter().filter(|&&g| !g).count() as f64;
    let pos = genuine.iter().filter(|&&g| g).count() as f64;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    let mut best = f64::INFINITY;
    for &t in &candidates {
        let fa = scores.iter().zip(genuine).filter(|(&s, &g)| !g && s >= t).count() as f64;
        if fa / neg <= target && t < best {
            best = t;
        }
    }
    let ta = scores.iter().zip(genuine).filter(|(&s, &g)| g && s >= best).count() as f64;
    (best, ta / pos)
}

pub mod cases;
