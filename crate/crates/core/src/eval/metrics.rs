use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingSet;
use crate::error::{dim_err, param_err, Error, Result};

/// Cosine similarity in `f64`; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Cosine score for each `(key_a, key_b)` pair.
pub fn verification_scores<S: AsRef<str>>(set: &EmbeddingSet, pairs: &[(S, S)]) -> Result<Vec<f64>> {
    let mut missing: Vec<&str> = pairs
        .iter()
        .flat_map(|(a, b)| [a.as_ref(), b.as_ref()])
        .filter(|k| !set.contains(k))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Set(format!("{} pair keys missing from embedding set: {missing:?}", missing.len())));
    }
    Ok(pairs
        .iter()
        .map(|(a, b)| cosine(set.get(a.as_ref()).unwrap(), set.get(b.as_ref()).unwrap()))
        .collect())
}

/// One operating point of a verification curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarPoint {
    pub far_target: f64,
    /// Accepts are scores `>= threshold`; `+inf` when only rejecting every
    /// pair meets the target.
    pub threshold: f64,
    pub tar: f64,
    /// False accept rate actually achieved at `threshold`.
    pub far: f64,
}

fn split_scores(scores: &[f64], genuine: &[bool], targets: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != genuine.len() {
        return Err(dim_err!("{} scores but {} labels", scores.len(), genuine.len()));
    }
    if let Some(f) = targets.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(param_err!("FAR target {f} outside [0, 1]"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN verification score".into()));
    }
    let pos: Vec<f64> = scores.iter().zip(genuine).filter(|(_, &g)| g).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(genuine).filter(|(_, &g)| !g).map(|(&s, _)| s).collect();
    if neg.is_empty() {
        return Err(Error::Metric("no impostor pairs to measure FAR".into()));
    }
    if pos.is_empty() {
        return Err(Error::Metric("no genuine pairs to measure TAR".into()));
    }
    Ok((pos, neg))
}

/// Count of sorted-ascending values `>= t`.
fn count_ge(sorted: &[f64], t: f64) -> usize {
    sorted.len() - sorted.partition_point(|&v| v < t)
}

/// For each FAR target `f`, the smallest candidate threshold `t` (any
/// observed score, or `+inf`) with `#{impostor >= t} / #impostor <= f`, and
/// the TAR `#{genuine >= t} / #genuine` there.
pub fn tar_at_far(scores: &[f64], genuine: &[bool], far_targets: &[f64]) -> Result<Vec<FarPoint>> {
    let (mut pos, mut neg) = split_scores(scores, genuine, far_targets)?;
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok(far_targets
        .iter()
        .map(|&f| {
            let idx = candidates.partition_point(|&t| count_ge(&neg, t) as f64 / nn > f);
            let t = candidates[idx];
            FarPoint {
                far_target: f,
                threshold: t,
                tar: count_ge(&pos, t) as f64 / np,
                far: count_ge(&neg, t) as f64 / nn,
            }
        })
        .collect())
}

/// Quadratic reference for [`tar_at_far`]: scans every candidate threshold.
pub fn tar_at_far_brute_force(scores: &[f64], genuine: &[bool], far_targets: &[f64]) -> Result<Vec<FarPoint>> {
    let (pos, neg) = split_scores(scores, genuine, far_targets)?;
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::INFINITY);
    let rate = |set: &[f64], t: f64| set.iter().filter(|&&s| s >= t).count() as f64 / set.len() as f64;
    Ok(far_targets
        .iter()
        .map(|&f| {
            let t = candidates
                .iter()
                .copied()
                .filter(|&t| rate(&neg, t) <= f)
                .fold(f64::INFINITY, f64::min);
            FarPoint {
                far_target: f,
                threshold: t,
                tar: rate(&pos, t),
                far: rate(&neg, t),
            }
        })
        .collect())
}

/// Nearest-gallery-neighbour identification accuracy. Ties go to the lowest
/// gallery key.
pub fn identification_top1(
    gallery: &EmbeddingSet,
    probe: &EmbeddingSet,
    identity: &HashMap<String, usize>,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::Metric("empty probe set".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Metric("empty gallery".into()));
    }
    if gallery.dim() != probe.dim() {
        return Err(dim_err!("gallery dim {} differs from probe dim {}", gallery.dim(), probe.dim()));
    }
    let lookup = |k: &str| {
        identity
            .get(k)
            .copied()
            .ok_or_else(|| Error::Set(format!("no identity for key '{k}'")))
    };
    let mut order: Vec<(&str, &[f32])> = gallery.iter().collect();
    order.sort_by(|a, b| a.0.cmp(b.0));
    let gallery_ids: Vec<usize> = order.iter().map(|(k, _)| lookup(k)).collect::<Result<_>>()?;
    let mut correct = 0usize;
    for (key, v) in probe.iter() {
        let truth = lookup(key)?;
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for (g, (_, gv)) in order.iter().enumerate() {
            let s = cosine(v, gv);
            if s > best.0 {
                best = (s, g);
            }
        }
        if gallery_ids[best.1] == truth {
            correct += 1;
        }
    }
    Ok(correct as f64 / probe.len() as f64)
}

/// `0.25·old_masked + 0.75·sfr`.
pub fn weighted_mfr(old_masked: f64, sfr: f64) -> Result<f64> {
    for (name, v) in [("old_masked", old_masked), ("sfr", sfr)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(param_err!("{name} must be in [0, 1], got {v}"));
        }
    }
    Ok(0.25 * old_masked + 0.75 * sfr)
}
