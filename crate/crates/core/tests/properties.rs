//! Property tests for the library's structural invariants.

use std::collections::HashMap;

use mfr_core::data::{
    apply_mask_overlay, estimate_similarity, plan_epoch, Image, ManifestRecord, MaskTemplate, SamplerConfig, Similarity,
    TEMPLATE_112,
};
use mfr_core::eval::{concat_features, cosine, identification_top1, tar_at_far, weighted_mfr, EmbeddingSet};
use mfr_core::loss::{arcface_logits, cosface_logits, cosine_logits};
use mfr_core::nn::{dropblock_mask, Ctx, DropBlockConfig, StemUnit};
use mfr_core::optim::{lr_at, ScheduleConfig, Sgd, SgdConfig};
use mfr_core::tensor::{depth_to_space_values, space_to_depth_values, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_output_shape_formula(h in 1usize..12, w in 1usize..12, k in 1usize..5, s in 1usize..4, p in 0usize..3, seed: u64) {
        prop_assume!(k <= h + 2 * p && k <= w + 2 * p);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, h, w], seed));
        let wt = tape.constant(randn(&[4, 3, k, k], seed ^ 1));
        let y = tape.conv2d(x, wt, None, s, p).unwrap();
        let out = tape.value(y).unwrap();
        prop_assert_eq!(out.shape(), &[2, 4, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1][..]);
        prop_assert!(out.is_finite());
    }

    #[test]
    fn space_to_depth_inverts(b in 1usize..3, c in 1usize..4, h2 in 1usize..6, w2 in 1usize..6, seed: u64) {
        let x = randn(&[b, c, 2 * h2, 2 * w2], seed);
        let y = space_to_depth_values(&x).unwrap();
        prop_assert_eq!(y.shape(), &[b, 4 * c, h2, w2][..]);
        prop_assert_eq!(depth_to_space_values(&y).unwrap(), x);
    }

    #[test]
    fn stem_quarters_spatial_dims_and_sums_branches(h4 in 1usize..5, w4 in 1usize..5, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let stem = StemUnit::new(&mut store, "stem", 3, 5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(randn(&[2, 3, 4 * h4, 4 * w4], seed));
        let mut ctx = Ctx::train(&mut tape, &mut store, &mut rng);
        let y = stem.forward(&mut ctx, xv).unwrap();
        let a = stem.branch_c1(&mut ctx, xv).unwrap();
        let b = stem.branch_c2(&mut ctx, xv).unwrap();
        let (y, a, b) = (tape.value(y).unwrap(), tape.value(a).unwrap(), tape.value(b).unwrap());
        prop_assert_eq!(y.shape(), &[2, 5, h4, w4][..]);
        for ((&s, &p), &q) in y.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert_eq!(s, p + q);
        }
    }

    #[test]
    fn dropped_units_form_full_blocks(h in 3usize..12, w in 3usize..12, half in 0usize..2, p in 0.01f64..0.5, seed: u64) {
        let bs = 2 * half + 1;
        prop_assume!(bs <= h && bs <= w);
        let cfg = DropBlockConfig { drop_prob: p, block_size: bs };
        let keep = dropblock_mask(&cfg, (2, 2, h, w), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for plane in keep.chunks(h * w) {
            for y in 0..h {
                for x in 0..w {
                    if plane[y * w + x] {
                        continue;
                    }
                    let covered = (y.saturating_sub(bs - 1)..=y.min(h - bs)).any(|y0| {
                        (x.saturating_sub(bs - 1)..=x.min(w - bs))
                            .any(|x0| (y0..y0 + bs).all(|yy| (x0..x0 + bs).all(|xx| !plane[yy * w + xx])))
                    });
                    prop_assert!(covered, "unit ({}, {}) not in a full block", y, x);
                }
            }
        }
    }
}

fn logits(f: impl Fn(&mut Tape<f64>, mfr_core::tensor::Var) -> mfr_core::tensor::Var, cos: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(cos.clone());
    let y = f(&mut tape, c);
    tape.value(y).unwrap().data().to_vec()
}

fn cosines(b: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, c], |_| rng.random_range(-0.999..0.999))
}

proptest! {
    #[test]
    fn zero_margin_is_scaled_cosine(b in 1usize..5, c in 2usize..6, s in 0.5f64..80.0, seed: u64) {
        let cos = cosines(b, c, seed);
        let labels: Vec<usize> = (0..b).map(|i| i % c).collect();
        let arc = logits(|t, x| arcface_logits(t, x, &labels, s, 0.0).unwrap(), &cos);
        let cf = logits(|t, x| cosface_logits(t, x, &labels, s, 0.0).unwrap(), &cos);
        for ((&a, &f), &x) in arc.iter().zip(&cf).zip(cos.data()) {
            prop_assert!((a - s * x).abs() <= 1e-6 && (f - s * x).abs() <= 1e-6);
        }
    }

    #[test]
    fn arcface_margin_only_lowers_target(theta in 0.0f64..3.14, m in 0.0f64..1.0, s in 1.0f64..64.0) {
        prop_assume!(theta <= std::f64::consts::PI - m);
        let cos = Tensor::new(&[1, 2], vec![theta.cos(), 0.3]).unwrap();
        let y = logits(|t, x| arcface_logits(t, x, &[0], s, m).unwrap(), &cos);
        prop_assert!(y[0] <= s * theta.cos() + 1e-12);
        prop_assert!((y[1] - s * 0.3).abs() <= 1e-12);
    }

    #[test]
    fn cosine_logits_ignore_embedding_scale(lambda in 1e-3f64..1e3, b in 1usize..4, c in 1usize..5, d in 2usize..9, seed: u64) {
        let e = randn(&[b, d], seed);
        let w = randn(&[c, d], seed ^ 7);
        let scaled = Tensor::new(&[b, d], e.data().iter().map(|v| v * lambda).collect()).unwrap();
        let run = |emb: &Tensor<f64>| {
            let mut tape = Tape::new();
            let (ev, wv) = (tape.constant(emb.clone()), tape.constant(w.clone()));
            let y = cosine_logits(&mut tape, ev, wv).unwrap();
            tape.value(y).unwrap().data().to_vec()
        };
        for (a, b) in run(&e).iter().zip(run(&scaled)) {
            prop_assert!((a - b).abs() <= 1e-6);
            prop_assert!(a.abs() <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn schedule_is_bounded_and_continuous(spe in 1usize..60, warm in 0.0f64..2.0, decay in 3.0f64..10.0, extra in 0usize..6, len in 0.0f64..3.0) {
        let cfg = ScheduleConfig {
            base_lr: 0.1,
            warmup_epochs: warm,
            decay_epochs: decay,
            total_epochs: decay.ceil() + extra as f64,
            lr_min: 1e-5,
            steps_per_epoch: spe,
            restart_peak: 0.01,
            restart_len: len,
        };
        let warm_steps = warm * spe as f64;
        let decay_steps = decay * spe as f64;
        let mut prev = f64::INFINITY;
        for step in 0..=cfg.total_steps() {
            let lr = lr_at(step, &cfg).unwrap();
            prop_assert!(lr <= cfg.base_lr + 1e-15);
            if step > 0 {
                prop_assert!(lr > 0.0);
            }
            let s = step as f64;
            if s - 1.0 >= warm_steps && s <= decay_steps {
                prop_assert!(lr <= prev + 1e-15, "cosine phase rises at step {}", step);
            }
            prev = lr;
        }
        prop_assert!(lr_at(cfg.total_steps() + 1, &cfg).is_err());
        // Both sides of the warmup boundary meet at base_lr: the ramp's line
        // through its last step reaches base_lr at the boundary.
        if warm_steps >= 2.0 {
            let w = warm_steps.floor() as usize;
            let ramp = |s: usize| lr_at(s, &cfg).unwrap();
            let left = ramp(w) * warm_steps / w as f64;
            if (w as f64) < warm_steps {
                prop_assert!((left - cfg.base_lr).abs() <= 1e-12);
            } else {
                prop_assert!((ramp(w) - cfg.base_lr).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn momentum_free_sgd_is_gradient_descent(lr in 1e-4f64..1.0, seed: u64) {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", randn(&[6], seed), false).unwrap();
        let mut sgd = Sgd::new(SgdConfig { momentum: 0.0, weight_decay: 0.0, skip_norm_decay: false }, &store).unwrap();
        for k in 0..3u64 {
            let g = randn(&[6], seed ^ (k + 1));
            let expected: Vec<f64> = store.get(id).data().iter().zip(g.data()).map(|(p, g)| p - lr * g).collect();
            store.zero_grad();
            store.get_mut(id).accumulate_grad(g.data()).unwrap();
            sgd.step(&mut store, lr).unwrap();
            prop_assert_eq!(store.get(id).data(), &expected[..]);
        }
    }

    #[test]
    fn sampler_respects_cap(unmasked in 1usize..400, masked in 0usize..400, cap in 0.0f64..0.9, seed: u64) {
        let records: Vec<ManifestRecord> = (0..unmasked + masked)
            .map(|i| ManifestRecord { path: i.to_string(), identity: 0, masked: i >= unmasked, landmarks: [(0.0, 0.0); 5] })
            .collect();
        let cfg = SamplerConfig { mask_ratio_cap: cap, seed, shuffle: true };
        let plan = plan_epoch(&records, &cfg).unwrap();
        let m = plan.iter().filter(|&&i| records[i].masked).count();
        let bound = (cap / (1.0 - cap) * unmasked as f64 + 1e-9).floor() as usize;
        prop_assert!(m <= bound.min(masked));
        prop_assert!(m as f64 / plan.len() as f64 <= cap + 1e-12);
        let mut seen = vec![0usize; records.len()];
        for &i in &plan {
            seen[i] += 1;
        }
        prop_assert!((0..unmasked).all(|i| seen[i] == 1));
        prop_assert!(seen.iter().all(|&c| c <= 1));
        prop_assert_eq!(plan_epoch(&records, &cfg).unwrap(), plan);
    }

    #[test]
    fn similarity_fit_is_equivariant(scale in 0.5f64..2.0, angle in -1.0f64..1.0, tx in -30.0f64..30.0, ty in -30.0f64..30.0, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<(f64, f64)> = (0..5).map(|_| (rng.random_range(0.0..112.0), rng.random_range(0.0..112.0))).collect();
        let spread = src.iter().map(|p| (p.0 - src[0].0).hypot(p.1 - src[0].1)).fold(0.0, f64::max);
        prop_assume!(spread > 5.0);
        let t = Similarity::from_parts(scale, angle, tx, ty);
        let dst: Vec<(f64, f64)> = src.iter().map(|&p| t.apply(p)).collect();
        let e = estimate_similarity(&src, &dst).unwrap();
        for (got, want) in [(e.a, t.a), (e.b, t.b), (e.tx, t.tx), (e.ty, t.ty)] {
            prop_assert!((got - want).abs() <= 1e-6);
        }
        // Fitting the images of both point sets under a second similarity
        // returns the same transform.
        let g = Similarity::from_parts(1.3, -0.4, 5.0, -7.0);
        let gs: Vec<_> = src.iter().map(|&p| g.apply(p)).collect();
        let gd: Vec<_> = dst.iter().map(|&p| g.apply(p)).collect();
        let conj = estimate_similarity(&gs, &gd).unwrap();
        let want = g.compose(&t).compose(&g.inverse().unwrap());
        for (got, want) in [(conj.a, want.a), (conj.b, want.b), (conj.tx, want.tx), (conj.ty, want.ty)] {
            prop_assert!((got - want).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn overlay_leaves_eyes_and_outside_untouched(scale in 0.6f64..1.3, angle in -0.4f64..0.4, tx in -10.0f64..10.0, ty in -10.0f64..10.0, seed: u64) {
        let t = Similarity::from_parts(scale, angle, tx, ty);
        let centre = t.apply((56.0, 56.0));
        let shift = (56.0 - centre.0, 56.0 - centre.1);
        let landmarks = TEMPLATE_112.map(|p| {
            let q = t.apply(p);
            (q.0 + shift.0, q.1 + shift.1)
        });
        let img = Image::from_data(112, 112, (0..112 * 112 * 3).map(|v| ((v * 31) % 251) as f32).collect()).unwrap();
        let template = MaskTemplate::default();
        let out = apply_mask_overlay(&img, &landmarks, &template, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        // The jittered polygon stays inside the template polygon's bounding
        // box grown by the jitter; map that box's corners into the image.
        let frame = estimate_similarity(&TEMPLATE_112, &landmarks).unwrap();
        let j = template.shape_jitter;
        let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for &(x, y) in &template.polygon {
            x0 = x0.min(x - j);
            y0 = y0.min(y - j);
            x1 = x1.max(x + j);
            y1 = y1.max(y + j);
        }
        let corners: Vec<(f64, f64)> = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)].iter().map(|&p| frame.apply(p)).collect();
        let inv = frame.inverse().unwrap();
        for y in 0..112 {
            for x in 0..112 {
                let (u, v) = inv.apply((x as f64, y as f64));
                let outside_box = u < x0 - 1e-9 || u > x1 + 1e-9 || v < y0 - 1e-9 || v > y1 + 1e-9;
                if outside_box {
                    prop_assert_eq!(out.pixel(x, y), img.pixel(x, y), "pixel ({}, {}) changed outside {:?}", x, y, corners);
                }
            }
        }
        for &(ex, ey) in &landmarks[..2] {
            let (ex, ey) = (ex.round() as usize, ey.round() as usize);
            prop_assert_eq!(out.pixel(ex, ey), img.pixel(ex, ey));
        }
    }
}

proptest! {
    #[test]
    fn tar_is_monotone_in_far(n in 4usize..120, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let genuine: Vec<bool> = (0..n).map(|i| i < 2 || (i >= 4 && rng.random_bool(0.4))).collect();
        let genuine: Vec<bool> = genuine.iter().enumerate().map(|(i, &g)| if i == 2 || i == 3 { false } else { g }).collect();
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(-1.0f64..1.0) * 8.0).round() / 8.0).collect();
        let targets = [0.0, 1e-3, 1e-2, 0.05, 0.1, 0.3, 0.5, 1.0];
        let pts = tar_at_far(&scores, &genuine, &targets).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[1].tar >= w[0].tar);
            prop_assert!(w[1].threshold <= w[0].threshold);
        }
        for p in &pts {
            prop_assert!((0.0..=1.0).contains(&p.tar) && p.far <= p.far_target);
        }
    }

    #[test]
    fn weighted_composite_between_inputs(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let w = weighted_mfr(a, b).unwrap();
        prop_assert!(a.min(b) <= w && w <= a.max(b));
    }

    #[test]
    fn concatenated_score_is_mean_of_parts(da in 1usize..40, db in 1usize..40, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = EmbeddingSet::new(da).unwrap();
        let mut b = EmbeddingSet::new(db).unwrap();
        for k in ["p", "q"] {
            let va: Vec<f32> = (0..da).map(|_| rng.random_range(-2.0..2.0)).collect();
            let vb: Vec<f32> = (0..db).map(|_| rng.random_range(-0.1..0.1)).collect();
            prop_assume!(va.iter().any(|v| v.abs() > 1e-3) && vb.iter().any(|v| v.abs() > 1e-4));
            a.push(k, &va).unwrap();
            b.push(k, &vb).unwrap();
        }
        let j = concat_features(&a, &b, true).unwrap();
        prop_assert_eq!(j.dim(), da + db);
        let want = 0.5 * (cosine(a.get("p").unwrap(), a.get("q").unwrap()) + cosine(b.get("p").unwrap(), b.get("q").unwrap()));
        prop_assert!((cosine(j.get("p").unwrap(), j.get("q").unwrap()) - want).abs() <= 1e-6);
    }

    #[test]
    fn identification_ignores_vector_scale(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = 6;
        let mut gallery = EmbeddingSet::new(dim).unwrap();
        let mut probe = EmbeddingSet::new(dim).unwrap();
        let mut scaled_g = EmbeddingSet::new(dim).unwrap();
        let mut scaled_p = EmbeddingSet::new(dim).unwrap();
        let mut ids = HashMap::new();
        for i in 0..12 {
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lambda: f32 = rng.random_range(0.01..100.0);
            let sv: Vec<f32> = v.iter().map(|x| x * lambda).collect();
            let key = format!("k{i}");
            ids.insert(key.clone(), i % 4);
            if i < 6 {
                gallery.push(&key, &v).unwrap();
                scaled_g.push(&key, &sv).unwrap();
            } else {
                probe.push(&key, &v).unwrap();
                scaled_p.push(&key, &sv).unwrap();
            }
        }
        let a = identification_top1(&gallery, &probe, &ids).unwrap();
        let b = identification_top1(&scaled_g, &scaled_p, &ids).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
