//! Boundary benchmark: thinning, tolerance matching, precision/recall curves,
//! AP and precision at fixed recall.

mod matching;

use std::collections::BTreeMap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use matching::{match_boundaries, match_masks, MatchMethod, MatchResult, EXACT_LIMIT};

use crate::error::{Error, Result};
use crate::raster::{boundary_thin, BoundaryMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Descending, in (0, 1].
    pub thresholds: Vec<f64>,
    /// Matching radius as a fraction of the image diagonal.
    pub tol_frac: f64,
    pub method: MatchMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(25),
            tol_frac: 0.0075,
            method: MatchMethod::Auto,
        }
    }
}

impl EvalConfig {
    pub fn tolerance(&self, w: usize, h: usize) -> f64 {
        self.tol_frac * ((w * w + h * h) as f64).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidArgument("no thresholds".into()));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidArgument("thresholds must lie in (0, 1]".into()));
        }
        if self.thresholds.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("thresholds must be strictly descending".into()));
        }
        Ok(())
    }
}

/// n thresholds i/n, descending from 1.
pub fn default_thresholds(n: usize) -> Vec<f64> {
    (1..=n).rev().map(|i| i as f64 / n as f64).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// 1 when nothing is predicted.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
    pub p_at_20: f64,
    pub p_at_50: f64,
}

/// Recall-sorted points with precision replaced by its maximum over all
/// points of equal or higher recall.
pub fn monotonized(precision: &[f64], recall: &[f64]) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = recall.iter().copied().zip(precision.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    let mut best = 0.0f64;
    for p in pts.iter_mut().rev() {
        best = best.max(p.1);
        p.1 = best;
    }
    pts
}

/// Precision of the monotonized curve at recall `r`, linearly interpolated;
/// 0 beyond the highest recall reached.
pub fn precision_at(pts: &[(f64, f64)], r: f64) -> f64 {
    let Some(last) = pts.last() else { return 0.0 };
    if r > last.0 {
        return 0.0;
    }
    if r <= pts[0].0 {
        return pts[0].1;
    }
    for w in pts.windows(2) {
        let ((r0, p0), (r1, p1)) = (w[0], w[1]);
        if r >= r0 && r <= r1 {
            if r1 == r0 {
                return p0.max(p1);
            }
            return p0 + (p1 - p0) * (r - r0) / (r1 - r0);
        }
    }
    last.1
}

/// Area under the monotonized curve from recall 0 (held at the first
/// point's precision) to the highest recall reached, by trapezoids.
pub fn average_precision(pts: &[(f64, f64)]) -> f64 {
    let Some(first) = pts.first() else { return 0.0 };
    let mut area = first.0 * first.1;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5;
    }
    area.clamp(0.0, 1.0)
}

/// Builds a curve from per-threshold precision and recall.
pub fn summarize(thresholds: &[f64], precision: Vec<f64>, recall: Vec<f64>) -> PrCurve {
    let pts = monotonized(&precision, &recall);
    PrCurve {
        thresholds: thresholds.to_vec(),
        ap: average_precision(&pts),
        p_at_20: precision_at(&pts, 0.2),
        p_at_50: precision_at(&pts, 0.5),
        precision,
        recall,
    }
}

fn gt_mask(gt: &BoundaryMap) -> Vec<bool> {
    boundary_thin(gt, 0.5).values().iter().map(|&v| v > 0.5).collect()
}

/// Match counts of a soft prediction against ground truth at each threshold.
///
/// Both sides are thinned first (ground truth at 0.5). `None` when the
/// ground truth is empty.
pub fn threshold_counts(pred: &BoundaryMap, gt: &BoundaryMap, cfg: &EvalConfig) -> Result<Option<Vec<Counts>>> {
    cfg.validate()?;
    if !pred.same_shape(gt) {
        return Err(Error::dims(
            format!("{}x{}", gt.width(), gt.height()),
            format!("{}x{}", pred.width(), pred.height()),
        ));
    }
    let (w, h) = (gt.width(), gt.height());
    let g = gt_mask(gt);
    if !g.iter().any(|&b| b) {
        return Ok(None);
    }
    let tol = cfg.tolerance(w, h);
    cfg.thresholds
        .iter()
        .map(|&t| {
            let p: Vec<bool> = boundary_thin(pred, t).values().iter().map(|&v| v > 0.5).collect();
            let m = match_masks(&p, &g, w, h, tol, cfg.method)?;
            Ok(Counts {
                tp: m.true_positives,
                fp: m.false_positives,
                fn_: m.false_negatives,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Precision/recall curve of one image. Errors if the ground truth is empty.
pub fn pr_curve(pred: &BoundaryMap, gt: &BoundaryMap, cfg: &EvalConfig) -> Result<PrCurve> {
    let counts = threshold_counts(pred, gt, cfg)?
        .ok_or_else(|| Error::InvalidArgument("ground truth has no boundary pixels".into()))?;
    Ok(summarize(
        &cfg.thresholds,
        counts.iter().map(Counts::precision).collect(),
        counts.iter().map(Counts::recall).collect(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    /// Per-image precision and recall averaged at each threshold.
    pub curve: PrCurve,
    /// `None` for images skipped for empty ground truth.
    pub per_image: Vec<Option<PrCurve>>,
    pub skipped: usize,
}

/// Averages per-image curves threshold by threshold, then summarizes.
pub fn dataset_eval(preds: &[BoundaryMap], gts: &[BoundaryMap], cfg: &EvalConfig) -> Result<DatasetEval> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::dims(format!("{} ground truths", preds.len()), gts.len()));
    }
    let per_image: Vec<Option<PrCurve>> = preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| -> Result<Option<PrCurve>> {
            Ok(threshold_counts(p, g, cfg)?.map(|c| {
                summarize(
                    &cfg.thresholds,
                    c.iter().map(Counts::precision).collect(),
                    c.iter().map(Counts::recall).collect(),
                )
            }))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<&PrCurve> = per_image.iter().flatten().collect();
    let skipped = per_image.len() - kept.len();
    if skipped > 0 {
        warn!("{skipped} image(s) skipped: empty ground truth");
    }
    if kept.is_empty() {
        return Err(Error::InvalidArgument("every image has empty ground truth".into()));
    }
    let n = kept.len() as f64;
    let nt = cfg.thresholds.len();
    let precision = (0..nt).map(|i| kept.iter().map(|c| c.precision[i]).sum::<f64>() / n).collect();
    let recall = (0..nt).map(|i| kept.iter().map(|c| c.recall[i]).sum::<f64>() / n).collect();
    Ok(DatasetEval {
        curve: summarize(&cfg.thresholds, precision, recall),
        per_image,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbdEval {
    pub per_class: BTreeMap<u32, PrCurve>,
    /// Classes without ground truth in the evaluated images.
    pub excluded: Vec<u32>,
    pub mean_ap: f64,
}

/// Per-class AP with match counts pooled over images, and their mean.
///
/// `maps[c][i]` is the class-`c` contour map of image `i`, `gts[c][i]` the
/// matching single-class ground truth.
pub fn sbd_eval(
    maps: &BTreeMap<u32, Vec<BoundaryMap>>,
    gts: &BTreeMap<u32, Vec<BoundaryMap>>,
    cfg: &EvalConfig,
) -> Result<SbdEval> {
    cfg.validate()?;
    let mut per_class = BTreeMap::new();
    let mut excluded = Vec::new();
    for (&c, gt) in gts {
        let pred = maps
            .get(&c)
            .ok_or_else(|| Error::InvalidArgument(format!("no predictions for class {c}")))?;
        if pred.len() != gt.len() {
            return Err(Error::dims(format!("{} maps for class {c}", gt.len()), pred.len()));
        }
        let nt = cfg.thresholds.len();
        let per_image: Vec<Vec<Counts>> = pred
            .par_iter()
            .zip(gt.par_iter())
            .map(|(p, g)| -> Result<Vec<Counts>> {
                match threshold_counts(p, g, cfg)? {
                    Some(c) => Ok(c),
                    None => {
                        // No ground truth: every thinned prediction is a false positive.
                        cfg.thresholds
                            .iter()
                            .map(|&t| {
                                Ok(Counts {
                                    tp: 0,
                                    fp: boundary_thin(p, t).count_nonzero(),
                                    fn_: 0,
                                })
                            })
                            .collect()
                    }
                }
            })
            .collect::<Result<_>>()?;
        let mut pooled = vec![Counts::default(); nt];
        for img in &per_image {
            for (acc, c) in pooled.iter_mut().zip(img) {
                acc.tp += c.tp;
                acc.fp += c.fp;
                acc.fn_ += c.fn_;
            }
        }
        if pooled[0].tp + pooled[0].fn_ == 0 {
            info!("class {c} has no ground-truth boundaries; excluded from the mean");
            excluded.push(c);
            continue;
        }
        per_class.insert(
            c,
            summarize(
                &cfg.thresholds,
                pooled.iter().map(Counts::precision).collect(),
                pooled.iter().map(Counts::recall).collect(),
            ),
        );
    }
    let mean_ap = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(SbdEval {
        per_class,
        excluded,
        mean_ap,
    })
}
