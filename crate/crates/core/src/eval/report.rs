use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::embeddings::EmbeddingSet;
use super::metrics::{tar_at_far, verification_scores, weighted_mfr, FarPoint};
use crate::data::PairRecord;
use crate::error::{param_err, Error, Result};

/// Verification results for all, masked and unmasked pairs, plus the
/// weighted masked/standard composite at the primary FAR.
///
/// Rates are true accept rates; the matching error rate is `1 − TAR`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub convention: String,
    pub primary_far: f64,
    pub pairs: usize,
    pub masked_pairs: usize,
    pub all: Vec<FarPoint>,
    pub masked: Option<Vec<FarPoint>>,
    pub unmasked: Option<Vec<FarPoint>>,
    /// TAR on masked pairs at the primary FAR.
    pub mfr_masked_old: Option<f64>,
    /// TAR on unmasked pairs at the primary FAR.
    pub sfr_all: Option<f64>,
    pub mfr_weighted: Option<f64>,
    pub mfr_weighted_error: Option<f64>,
    pub top1: Option<f64>,
}

fn at(points: &[FarPoint], far: f64) -> Option<f64> {
    points.iter().find(|p| p.far_target == far).map(|p| p.tar)
}

fn subgroup(scores: &[f64], genuine: &[bool], keep: impl Fn(usize) -> bool, targets: &[f64]) -> Result<Option<Vec<FarPoint>>> {
    let idx: Vec<usize> = (0..scores.len()).filter(|&i| keep(i)).collect();
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let g: Vec<bool> = idx.iter().map(|&i| genuine[i]).collect();
    match tar_at_far(&s, &g, targets) {
        Ok(p) => Ok(Some(p)),
        Err(Error::Metric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Scores every pair and builds the report. `primary_far` is added to the
/// targets when absent.
pub fn evaluate_pairs(set: &EmbeddingSet, pairs: &[PairRecord], far_targets: &[f64], primary_far: f64) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(param_err!("no verification pairs"));
    }
    let mut targets = far_targets.to_vec();
    if !targets.contains(&primary_far) {
        targets.push(primary_far);
    }
    targets.sort_by(|a, b| b.total_cmp(a));
    let keyed: Vec<(&str, &str)> = pairs.iter().map(|p| (p.path_a.as_str(), p.path_b.as_str())).collect();
    let scores = verification_scores(set, &keyed)?;
    let genuine: Vec<bool> = pairs.iter().map(|p| p.same_identity).collect();
    let all = tar_at_far(&scores, &genuine, &targets)?;
    let masked = subgroup(&scores, &genuine, |i| pairs[i].masked_pair, &targets)?;
    let unmasked = subgroup(&scores, &genuine, |i| !pairs[i].masked_pair, &targets)?;
    let mfr_masked_old = masked.as_deref().and_then(|p| at(p, primary_far));
    let sfr_all = unmasked.as_deref().and_then(|p| at(p, primary_far));
    let mfr_weighted = match (mfr_masked_old, sfr_all) {
        (Some(m), Some(s)) => Some(weighted_mfr(m, s)?),
        _ => None,
    };
    Ok(MetricReport {
        convention: "tar; error = 1 - tar".into(),
        primary_far,
        pairs: pairs.len(),
        masked_pairs: pairs.iter().filter(|p| p.masked_pair).count(),
        all,
        masked,
        unmasked,
        mfr_masked_old,
        sfr_all,
        mfr_weighted,
        mfr_weighted_error: mfr_weighted.map(|w| 1.0 - w),
        top1: None,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Metric(format!("cannot serialise report: {e}")))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "pairs: {} ({} masked)", self.pairs, self.masked_pairs);
        let groups = [("all", Some(&self.all)), ("masked", self.masked.as_ref()), ("unmasked", self.unmasked.as_ref())];
        for (name, points) in groups {
            let Some(points) = points else {
                let _ = writeln!(s, "{name:>8}: n/a");
                continue;
            };
            for p in points {
                let _ = writeln!(
                    s,
                    "{name:>8}: TAR@FAR={:<8e} {:.5}  error {:.5}  threshold {:.5}",
                    p.far_target,
                    p.tar,
                    1.0 - p.tar,
                    p.threshold
                );
            }
        }
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.5}"));
        let _ = writeln!(s, "primary FAR {:e}", self.primary_far);
        let _ = writeln!(s, "  masked (old MFR): {}", opt(self.mfr_masked_old));
        let _ = writeln!(s, "  unmasked (SFR):   {}", opt(self.sfr_all));
        let _ = writeln!(s, "  weighted MFR:     {}  (error {})", opt(self.mfr_weighted), opt(self.mfr_weighted_error));
        if let Some(t) = self.top1 {
            let _ = writeln!(s, "top-1 identification: {t:.5}");
        }
        s
    }
}
