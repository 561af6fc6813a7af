//! One-pass evaluation: precision, normalized precision and success curves.
//!
//! The initialisation frame is excluded. Normalized precision divides the
//! centre offset per axis by the ground-truth size; frames with a degenerate
//! ground-truth box are left out of that metric and counted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const PR_THRESHOLDS: usize = 51;
pub const NPR_THRESHOLDS: usize = 51;
pub const SR_THRESHOLDS: usize = 51;

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

pub fn center_error(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Centre offset divided per axis by the ground-truth size; `None` for a degenerate `gt`.
pub fn norm_center_error(pred: &BBox, gt: &BBox) -> Option<f64> {
    if gt.is_degenerate() {
        return None;
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Some(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpeResult {
    pub center_errors: Vec<f64>,
    pub norm_errors: Vec<f64>,
    pub overlaps: Vec<f64>,
    /// Frames left out of normalized precision because the ground truth was degenerate.
    pub excluded_norm: usize,
    /// Fraction of frames with centre error at most `t` pixels, `t = 0..=50`.
    pub pr_curve: Vec<f64>,
    /// Fraction with normalized error at most `t`, `t = 0, 0.01, ..., 0.5`.
    pub npr_curve: Vec<f64>,
    /// Fraction with overlap strictly above `t`, `t = i / 51` for `i = 0..51`.
    /// The grid stops short of 1 so that a perfect overlap passes every threshold.
    pub sr_curve: Vec<f64>,
    pub pr20: f64,
    pub npr: f64,
    /// Mean of the success curve.
    pub sr: f64,
}

fn fraction<F: Fn(f64) -> bool>(values: &[f64], pass: F) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| pass(v)).count() as f64 / values.len() as f64
}

pub fn pr_threshold(i: usize) -> f64 {
    i as f64
}

pub fn npr_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

pub fn sr_threshold(i: usize) -> f64 {
    i as f64 / SR_THRESHOLDS as f64
}

pub fn ope_curves(errors: &[f64], norm_errors: &[Option<f64>], overlaps: &[f64]) -> Result<OpeResult> {
    if errors.is_empty() || overlaps.is_empty() {
        return Err(Error::contract("ope_curves needs at least one evaluated frame"));
    }
    if errors.len() != overlaps.len() || errors.len() != norm_errors.len() {
        return Err(Error::contract(format!(
            "trace lengths differ: {} errors, {} normalized errors, {} overlaps",
            errors.len(),
            norm_errors.len(),
            overlaps.len()
        )));
    }
    let norm: Vec<f64> = norm_errors.iter().flatten().copied().collect();
    let pr_curve: Vec<f64> = (0..PR_THRESHOLDS)
        .map(|i| fraction(errors, |e| e <= pr_threshold(i)))
        .collect();
    let npr_curve: Vec<f64> = (0..NPR_THRESHOLDS)
        .map(|i| fraction(&norm, |e| e <= npr_threshold(i)))
        .collect();
    let sr_curve: Vec<f64> = (0..SR_THRESHOLDS)
        .map(|i| fraction(overlaps, |o| o > sr_threshold(i)))
        .collect();
    let sr = sr_curve.iter().sum::<f64>() / SR_THRESHOLDS as f64;
    Ok(OpeResult {
        center_errors: errors.to_vec(),
        norm_errors: norm,
        overlaps: overlaps.to_vec(),
        excluded_norm: norm_errors.len() - norm_errors.iter().flatten().count(),
        pr20: pr_curve[20],
        npr: npr_curve[20],
        sr,
        pr_curve,
        npr_curve,
        sr_curve,
    })
}

/// Scores predictions against ground truth, skipping the initialisation frame.
pub fn evaluate(pred: &[BBox], gt: &[BBox]) -> Result<OpeResult> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "{} predicted boxes for {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    let pairs = pred.iter().zip(gt).skip(1);
    let errors: Vec<f64> = pairs.clone().map(|(p, g)| center_error(p, g)).collect();
    let norm: Vec<Option<f64>> = pairs.clone().map(|(p, g)| norm_center_error(p, g)).collect();
    let overlaps: Vec<f64> = pairs.map(|(p, g)| iou(p, g)).collect();
    ope_curves(&errors, &norm, &overlaps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceReport {
    pub name: String,
    pub n_frames: usize,
    pub result: OpeResult,
}

/// Unweighted mean of `(PR20, NPR, SR)` over sequences.
pub fn mean_scores(rows: &[SequenceReport]) -> (f64, f64, f64) {
    if rows.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&OpeResult) -> f64| rows.iter().map(|r| f(&r.result)).sum::<f64>() / n;
    (sum(|r| r.pr20), sum(|r| r.npr), sum(|r| r.sr))
}

/// Machine-readable report: a header and one line per sequence.
pub fn report_csv(rows: &[SequenceReport]) -> String {
    let mut s = String::from("seq,n_frames,PR20,NPR,SR\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3}",
            r.name, r.n_frames, r.result.pr20, r.result.npr, r.result.sr
        );
    }
    s
}

/// Human-readable summary.
pub fn report_text(rows: &[SequenceReport]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(
            s,
            "{:<24} frames {:>5}  PR20 {:.3}  NPR {:.3}  SR {:.3}",
            r.name, r.n_frames, r.result.pr20, r.result.npr, r.result.sr
        );
    }
    let (pr, npr, sr) = mean_scores(rows);
    let _ = writeln!(s, "mean over {} sequences: PR20 {pr:.3}  NPR {npr:.3}  SR {sr:.3}", rows.len());
    s
}

/// Threshold and curve value columns for the three curves.
pub fn curves_csv(r: &OpeResult) -> String {
    let mut s = String::from("curve,threshold,value\n");
    for (i, v) in r.pr_curve.iter().enumerate() {
        let _ = writeln!(s, "PR,{},{v:.6}", pr_threshold(i));
    }
    for (i, v) in r.npr_curve.iter().enumerate() {
        let _ = writeln!(s, "NPR,{},{v:.6}", npr_threshold(i));
    }
    for (i, v) in r.sr_curve.iter().enumerate() {
        let _ = writeln!(s, "SR,{},{v:.6}", sr_threshold(i));
    }
    s
}
