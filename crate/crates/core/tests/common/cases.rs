//! The gradient suite: every differentiable op, the composed blocks and the
//! loss heads, each paired with its tolerance.

use mfr_core::loss::{
    arcface_logits, cosface_logits, cosine_logits, softmax_cross_entropy, LossFamily, MarginConfig, MarginHead,
};
use mfr_core::nn::{
    dropblock, Backbone, BackboneConfig, DropBlockConfig, ResidualBlock, ResidualBlockSpec, SeBlock, StemUnit,
};
use mfr_core::tensor::{BatchNormState, Mode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_module, check_op, randn_away_from_zero, Coords, GradReport};

pub const OP_TOL: f64 = 1e-4;
pub const BACKBONE_TOL: f64 = 1e-3;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn() -> GradReport,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

fn conv2d_padded() -> GradReport {
    let mut r = rng(1);
    let xs = [randn(&[2, 3, 7, 7], &mut r), randn(&[4, 3, 3, 3], &mut r), randn(&[4], &mut r)];
    check_op(&xs, 1, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))
}

fn conv2d_k2s2() -> GradReport {
    let mut r = rng(2);
    let xs = [randn(&[2, 2, 6, 6], &mut r), randn(&[3, 2, 2, 2], &mut r)];
    check_op(&xs, 2, |t, v| t.conv2d(v[0], v[1], None, 2, 0))
}

fn avg_pool2d() -> GradReport {
    let mut r = rng(3);
    check_op(&[randn(&[2, 3, 6, 6], &mut r)], 3, |t, v| t.avg_pool2d(v[0], 2, 2))
}

fn global_avg_pool() -> GradReport {
    let mut r = rng(4);
    check_op(&[randn(&[2, 3, 4, 5], &mut r)], 4, |t, v| t.global_avg_pool(v[0]))
}

fn space_to_depth() -> GradReport {
    let mut r = rng(5);
    check_op(&[randn(&[2, 3, 4, 6], &mut r)], 5, |t, v| t.space_to_depth(v[0]))
}

fn depth_to_space() -> GradReport {
    let mut r = rng(6);
    check_op(&[randn(&[2, 8, 3, 2], &mut r)], 6, |t, v| t.depth_to_space(v[0]))
}

fn batch_norm_train() -> GradReport {
    let mut r = rng(7);
    let xs = [randn(&[4, 3, 3, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)];
    check_op(&xs, 7, |t, v| {
        let mut state = BatchNormState::new(3);
        t.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train, 1e-5)
    })
}

fn batch_norm_features_train() -> GradReport {
    let mut r = rng(8);
    let xs = [randn(&[5, 4], &mut r), randn(&[4], &mut r), randn(&[4], &mut r)];
    check_op(&xs, 8, |t, v| {
        let mut state = BatchNormState::new(4);
        t.batch_norm(v[0], v[1], v[2], &mut state, Mode::Train, 1e-5)
    })
}

fn batch_norm_eval() -> GradReport {
    let mut r = rng(9);
    let xs = [randn(&[2, 3, 3, 3], &mut r), randn(&[3], &mut r), randn(&[3], &mut r)];
    let mut state = BatchNormState::new(3);
    state.running_mean = vec![0.3, -0.2, 0.1];
    state.running_var = vec![1.5, 0.7, 2.0];
    state.batches_tracked = 1;
    check_op(&xs, 9, move |t, v| {
        let mut s = state.clone();
        t.batch_norm(v[0], v[1], v[2], &mut s, Mode::Eval, 1e-5)
    })
}

fn prelu_per_channel() -> GradReport {
    let mut r = rng(10);
    let xs = [randn_away_from_zero(&[2, 3, 4, 4], 0.01, &mut r), randn(&[3], &mut r)];
    check_op(&xs, 10, |t, v| t.prelu(v[0], v[1]))
}

fn prelu_shared() -> GradReport {
    let mut r = rng(11);
    let xs = [randn_away_from_zero(&[3, 5], 0.01, &mut r), randn(&[1], &mut r)];
    check_op(&xs, 11, |t, v| t.prelu(v[0], v[1]))
}

fn relu() -> GradReport {
    let mut r = rng(12);
    check_op(&[randn_away_from_zero(&[2, 3, 3, 3], 0.01, &mut r)], 12, |t, v| t.relu(v[0]))
}

fn sigmoid() -> GradReport {
    let mut r = rng(13);
    check_op(&[randn(&[3, 7], &mut r)], 13, |t, v| t.sigmoid(v[0]))
}

fn linear() -> GradReport {
    let mut r = rng(14);
    let xs = [randn(&[3, 5], &mut r), randn(&[4, 5], &mut r), randn(&[4], &mut r)];
    check_op(&xs, 14, |t, v| t.linear(v[0], v[1], Some(v[2])))
}

fn add() -> GradReport {
    let mut r = rng(15);
    let xs = [randn(&[2, 3, 2, 2], &mut r), randn(&[2, 3, 2, 2], &mut r)];
    check_op(&xs, 15, |t, v| t.add(v[0], v[1]))
}

fn mul() -> GradReport {
    let mut r = rng(16);
    let xs = [randn(&[2, 3, 2, 2], &mut r), randn(&[2, 3, 2, 2], &mut r)];
    check_op(&xs, 16, |t, v| t.mul(v[0], v[1]))
}

fn scale_channels() -> GradReport {
    let mut r = rng(17);
    let xs = [randn(&[2, 3, 3, 2], &mut r), randn(&[2, 3], &mut r)];
    check_op(&xs, 17, |t, v| t.scale_channels(v[0], v[1]))
}

fn concat() -> GradReport {
    let mut r = rng(18);
    let xs = [randn(&[2, 3, 2], &mut r), randn(&[2, 1, 2], &mut r), randn(&[2, 2, 2], &mut r)];
    check_op(&xs, 18, |t, v| t.concat(&[v[0], v[1], v[2]], 1))
}

fn flatten_reshape() -> GradReport {
    let mut r = rng(19);
    check_op(&[randn(&[2, 3, 2, 2], &mut r)], 19, |t, v| {
        let f = t.flatten(v[0])?;
        let y = t.reshape(f, &[4, 6])?;
        t.sigmoid(y)
    })
}

fn l2_normalize() -> GradReport {
    let mut r = rng(20);
    check_op(&[randn(&[3, 6], &mut r)], 20, |t, v| t.l2_normalize(v[0], 1, 1e-12))
}

fn sum() -> GradReport {
    let mut r = rng(21);
    check_op(&[randn(&[2, 5], &mut r)], 21, |t, v| {
        let s = t.sigmoid(v[0])?;
        t.sum(s)
    })
}

fn dropblock_train() -> GradReport {
    let mut r = rng(22);
    let cfg = DropBlockConfig { drop_prob: 0.3, block_size: 3 };
    check_op(&[randn(&[2, 2, 7, 7], &mut r)], 22, move |t, v| {
        let mut mask_rng = rng(99);
        dropblock(t, v[0], &cfg, Mode::Train, Some(&mut mask_rng))
    })
}

fn cosine_logits_op() -> GradReport {
    let mut r = rng(23);
    let xs = [randn(&[4, 6], &mut r), randn(&[5, 6], &mut r)];
    check_op(&xs, 23, |t, v| cosine_logits(t, v[0], v[1]))
}

/// Cosines in (-0.8, 0.95): inside (-1, 1) and, for targets, far enough from
/// cos(π − m) that the clamp never switches within a finite-difference step.
fn cosines(r: &mut ChaCha8Rng, b: usize, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, n], |_| r.random_range(-0.8..0.95))
}

fn arcface_op() -> GradReport {
    let mut r = rng(24);
    let labels = [0, 3, 1, 4];
    check_op(&[cosines(&mut r, 4, 5)], 24, move |t, v| arcface_logits(t, v[0], &labels, 64.0, 0.5))
}

fn cosface_op() -> GradReport {
    let mut r = rng(25);
    let labels = [2, 0, 4, 1];
    check_op(&[cosines(&mut r, 4, 5)], 25, move |t, v| cosface_logits(t, v[0], &labels, 64.0, 0.35))
}

fn cross_entropy_op() -> GradReport {
    let mut r = rng(26);
    let labels = [1, 0, 2];
    check_op(&[randn(&[3, 4], &mut r)], 26, move |t, v| softmax_cross_entropy(t, v[0], &labels))
}

fn stem_unit() -> GradReport {
    let mut r = rng(27);
    let mut store = ParamStore::<f64>::new();
    let stem = StemUnit::new(&mut store, "stem", 3, 4, &mut r).unwrap();
    let x = randn(&[2, 3, 8, 8], &mut r);
    check_module(&store, &x, Coords::All, 27, |ctx, x| stem.forward(ctx, x))
}

fn se_block() -> GradReport {
    let mut r = rng(28);
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", 8, 4, &mut r).unwrap();
    let x = randn(&[2, 8, 3, 3], &mut r);
    check_module(&store, &x, Coords::All, 28, |ctx, x| se.forward(ctx, x))
}

fn residual_block() -> GradReport {
    let mut r = rng(29);
    let mut store = ParamStore::<f64>::new();
    let spec = ResidualBlockSpec {
        in_channels: 4,
        out_channels: 8,
        stride: 2,
        projection: true,
        se_reduction: Some(4),
        dropblock: Some(DropBlockConfig { drop_prob: 0.1, block_size: 3 }),
    };
    let block = ResidualBlock::new(&mut store, "block", spec, &mut r).unwrap();
    // 4 × 6 × 6 = 144 values per channel in each batch norm: a population
    // small enough to check every coordinate, large enough that batch
    // statistics are not dominated by single samples.
    let x = randn(&[4, 4, 12, 12], &mut r);
    check_module(&store, &x, Coords::All, 29, |ctx, x| block.forward(ctx, x))
}

fn head(family: LossFamily, seed: u64) -> GradReport {
    let mut r = rng(seed);
    let mut store = ParamStore::<f64>::new();
    let mut cfg = MarginConfig::new(family, 6);
    if family == LossFamily::Softmax {
        cfg.s = 16.0;
    }
    let head = MarginHead::new(&mut store, cfg, &mut r).unwrap();
    // Class weights at unit scale so cosines spread over (-1, 1).
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= 100.0);
    }
    let labels = [0, 5, 2, 3];
    let x = randn(&[4, 512], &mut r);
    check_module(&store, &x, Coords::PerInput(60), seed, move |ctx, e| head.loss(ctx, e, &labels))
}

fn arcface_head() -> GradReport {
    head(LossFamily::ArcFace, 30)
}

fn cosface_head() -> GradReport {
    head(LossFamily::CosFace, 31)
}

fn softmax_head() -> GradReport {
    head(LossFamily::Softmax, 32)
}

/// Toy backbone plus ArcFace head on 112×112 inputs; 20 random coordinates
/// drawn over the input and all parameters.
fn full_backbone() -> GradReport {
    let mut r = rng(33);
    let mut store = ParamStore::<f64>::new();
    let net = Backbone::new(&mut store, &BackboneConfig::toy(), &mut r).unwrap();
    let head = MarginHead::new(&mut store, MarginConfig::new(LossFamily::ArcFace, 4), &mut r).unwrap();
    for id in store.ids().filter(|&id| store.name(id) == "head.weight").collect::<Vec<_>>() {
        store.get_mut(id).data_mut().iter_mut().for_each(|w| *w *= 100.0);
    }
    let labels = [0, 1, 2, 3];
    let x = randn(&[4, 3, 112, 112], &mut r);
    check_module(&store, &x, Coords::Total(20), 33, move |ctx, x| {
        let e = net.forward(ctx, x)?;
        head.loss(ctx, e, &labels)
    })
}

pub fn all() -> Vec<GradCase> {
    macro_rules! case {
        ($f:ident) => {
            GradCase { name: stringify!($f), tol: OP_TOL, run: $f }
        };
        ($f:ident, $tol:expr) => {
            GradCase { name: stringify!($f), tol: $tol, run: $f }
        };
    }
    vec![
        case!(conv2d_padded),
        case!(conv2d_k2s2),
        case!(avg_pool2d),
        case!(global_avg_pool),
        case!(space_to_depth),
        case!(depth_to_space),
        case!(batch_norm_train),
        case!(batch_norm_features_train),
        case!(batch_norm_eval),
        case!(prelu_per_channel),
        case!(prelu_shared),
        case!(relu),
        case!(sigmoid),
        case!(linear),
        case!(add),
        case!(mul),
        case!(scale_channels),
        case!(concat),
        case!(flatten_reshape),
        case!(l2_normalize),
        case!(sum),
        case!(dropblock_train),
        case!(cosine_logits_op),
        case!(arcface_op),
        case!(cosface_op),
        case!(cross_entropy_op),
        case!(stem_unit),
        case!(se_block),
        case!(residual_block),
        case!(arcface_head),
        case!(cosface_head),
        case!(softmax_head),
        case!(full_backbone, BACKBONE_TOL),
    ]
}
