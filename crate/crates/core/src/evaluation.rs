//! Obstacle-detection evaluation: water-edge robustness and coverage-based
//! TP/FP/FN counting, overall and inside the danger zone.
//!
//! * A ground-truth box is a true positive when the fraction of its pixels
//!   labeled obstacle reaches `coverage_threshold`, otherwise a false negative.
//! * False positives are 4-connected components of predicted obstacle pixels
//!   that lie on ground-truth water outside every box, with at least
//!   `min_fp_area` pixels. One component is one FP.
//! * Danger-zone counts keep boxes whose center pixel is in the zone and FP
//!   components with at least one pixel in the zone.
//! * Edge robustness: in each column crossed by the ground-truth edge, the
//!   predicted edge is the topmost row where water starts below a non-water
//!   pixel, searched down to the last ground-truth water row. The point is
//!   robust when that row is within `edge_tolerance` of the ground truth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{FrameAnnotation, Label, SegmentationMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DangerZoneSource {
    Annotation,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub coverage_threshold: f64,
    /// Pixels.
    pub edge_tolerance: f64,
    /// Pixels².
    pub min_fp_area: usize,
    pub danger_zone_source: DangerZoneSource,
    /// Pool edge points over the dataset instead of averaging per frame.
    pub pooled_edge_robustness: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            coverage_threshold: 0.5,
            edge_tolerance: 20.0,
            min_fp_area: 25,
            danger_zone_source: DangerZoneSource::Annotation,
            pooled_edge_robustness: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.coverage_threshold > 0.0 && self.coverage_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "coverage threshold must be in (0, 1], got {}",
                self.coverage_threshold
            )));
        }
        if !(self.edge_tolerance > 0.0) || self.min_fp_area == 0 {
            return Err(Error::Config("edge tolerance and min_fp_area must be positive".into()));
        }
        Ok(())
    }
}

/// Robust / total edge points of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub robust: usize,
    pub total: usize,
}

impl EdgeScore {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.robust as f64 / self.total as f64
        }
    }
}

/// One ground-truth edge row per column, from the polyline.
pub fn rasterize_edge(polyline: &[(u32, u32)], width: usize) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    let mut push = |x: i64, y: f64| {
        if x >= 0 && (x as usize) < width && !out.iter().any(|(c, _)| *c == x as usize) {
            out.push((x as usize, y));
        }
    };
    match polyline {
        [] => {}
        [(x, y)] => push(i64::from(*x), f64::from(*y)),
        _ => {
            for seg in polyline.windows(2) {
                let (x0, y0) = (i64::from(seg[0].0), f64::from(seg[0].1));
                let (x1, y1) = (i64::from(seg[1].0), f64::from(seg[1].1));
                let step = if x1 >= x0 { 1 } else { -1 };
                let span = (x1 - x0).abs();
                for i in 0..=span {
                    let x = x0 + step * i;
                    let y = if span == 0 {
                        y0
                    } else {
                        y0 + (y1 - y0) * i as f64 / span as f64
                    };
                    push(x, y.round());
                }
            }
        }
    }
    out
}

/// Predicted water-edge row in column `x`, or `None` when there is none.
pub fn predicted_edge_row(pred: &SegmentationMask, gt: &SegmentationMask, x: usize) -> Option<usize> {
    let h = pred.height();
    let last_water = (0..h).rev().find(|&y| gt.is(y, x, Label::Water))?;
    (0..=last_water).find(|&y| pred.is(y, x, Label::Water) && (y == 0 || !pred.is(y - 1, x, Label::Water)))
}

/// Edge robustness of one frame; `None` when the annotation has no edge.
pub fn water_edge_robustness(pred: &SegmentationMask, gt: &FrameAnnotation, tolerance: f64) -> Option<EdgeScore> {
    if gt.water_edge.is_empty() {
        log::warn!("frame without water edge skipped from edge robustness");
        return None;
    }
    let mut score = EdgeScore { robust: 0, total: 0 };
    for (x, y) in rasterize_edge(&gt.water_edge, pred.width()) {
        if !(0..gt.mask.height()).any(|r| gt.mask.is(r, x, Label::Water)) {
            continue;
        }
        score.total += 1;
        if let Some(row) = predicted_edge_row(pred, &gt.mask, x) {
            if (row as f64 - y).abs() <= tolerance {
                score.robust += 1;
            }
        }
    }
    Some(score)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// One false-positive component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub pixels: Vec<(usize, usize)>,
}

impl Blob {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per ground-truth box: covered enough to count as detected.
    pub detected: Vec<bool>,
    /// Per ground-truth box: covered fraction.
    pub coverage: Vec<f64>,
    pub fp_blobs: Vec<Blob>,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        let tp = self.detected.iter().filter(|d| **d).count();
        Counts {
            tp,
            fp: self.fp_blobs.len(),
            fn_: self.detected.len() - tp,
        }
    }
}

/// 4-connected components of pixels where `inside(y, x)` holds.
pub fn connected_components(height: usize, width: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; height * width];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..height {
        for x0 in 0..width {
            if seen[y0 * width + x0] || !inside(y0, x0) {
                continue;
            }
            seen[y0 * width + x0] = true;
            stack.push((y0, x0));
            let mut comp = Vec::new();
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                let mut visit = |ny: usize, nx: usize| {
                    if !seen[ny * width + nx] && inside(ny, nx) {
                        seen[ny * width + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < height {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < width {
                    visit(y, x + 1);
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
    }
    out
}

pub fn match_obstacles(pred: &SegmentationMask, gt: &FrameAnnotation, cfg: &EvalConfig) -> Result<MatchResult> {
    if pred.dims() != gt.mask.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match ground truth {:?}",
            pred.dims(),
            gt.mask.dims()
        )));
    }
    let (h, w) = pred.dims();
    let mut detected = Vec::with_capacity(gt.obstacle_boxes.len());
    let mut coverage = Vec::with_capacity(gt.obstacle_boxes.len());
    for b in &gt.obstacle_boxes {
        let mut hit = 0u64;
        for y in b.y0 as usize..b.y1 as usize {
            for x in b.x0 as usize..b.x1 as usize {
                if pred.is(y, x, Label::Obstacle) {
                    hit += 1;
                }
            }
        }
        let c = hit as f64 / b.area() as f64;
        coverage.push(c);
        detected.push(c >= cfg.coverage_threshold);
    }
    let candidate = |y: usize, x: usize| {
        pred.is(y, x, Label::Obstacle)
            && gt.mask.is(y, x, Label::Water)
            && !gt.obstacle_boxes.iter().any(|b| b.contains(x, y))
    };
    let fp_blobs = connected_components(h, w, candidate)
        .into_iter()
        .filter(|c| c.len() >= cfg.min_fp_area)
        .map(|pixels| Blob { pixels })
        .collect();
    Ok(MatchResult {
        detected,
        coverage,
        fp_blobs,
    })
}

/// Restricts a match to the danger zone.
pub fn apply_danger_zone(m: &MatchResult, gt: &FrameAnnotation) -> Counts {
    let zone = &gt.danger_zone;
    let mut counts = Counts::default();
    for (b, &hit) in gt.obstacle_boxes.iter().zip(&m.detected) {
        let (cx, cy) = b.center();
        if zone[[cy, cx]] {
            if hit {
                counts.tp += 1;
            } else {
                counts.fn_ += 1;
            }
        }
    }
    counts.fp = m
        .fp_blobs
        .iter()
        .filter(|blob| blob.pixels.iter().any(|&(y, x)| zone[[y, x]]))
        .count();
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub overall: Counts,
    pub danger: Counts,
    pub edge: Option<EdgeScore>,
}

pub fn evaluate_frame(pred: &SegmentationMask, gt: &FrameAnnotation, cfg: &EvalConfig) -> Result<FrameResult> {
    let m = match_obstacles(pred, gt, cfg)?;
    let danger = match cfg.danger_zone_source {
        DangerZoneSource::Annotation => apply_danger_zone(&m, gt),
        DangerZoneSource::None => Counts::default(),
    };
    Ok(FrameResult {
        overall: m.counts(),
        danger,
        edge: water_edge_robustness(pred, gt, cfg.edge_tolerance),
    })
}

/// Harmonic mean of precision and recall (percentages); `0` when both are `0`.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Precision, recall and F1 in percent. An undefined ratio (zero
/// denominator) is reported as `0` with its flag cleared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

impl Rates {
    pub fn from_counts(c: Counts) -> Self {
        let precision_defined = c.tp + c.fp > 0;
        let recall_defined = c.tp + c.fn_ > 0;
        let precision = if precision_defined {
            100.0 * c.tp as f64 / (c.tp + c.fp) as f64
        } else {
            0.0
        };
        let recall = if recall_defined {
            100.0 * c.tp as f64 / (c.tp + c.fn_) as f64
        } else {
            0.0
        };
        Rates {
            precision,
            recall,
            f1: f1_score(precision, recall),
            precision_defined,
            recall_defined,
        }
    }

    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        Rates {
            precision,
            recall,
            f1: f1_score(precision, recall),
            precision_defined: true,
            recall_defined: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub config: EvalConfig,
    pub frames: usize,
    pub frames_with_edge: usize,
    pub overall: Counts,
    pub danger: Counts,
    pub overall_rates: Rates,
    pub danger_rates: Rates,
    /// Edge robustness in percent; `None` if no frame had an edge.
    pub mu_r: Option<f64>,
}

pub fn summarize(frames: &[FrameResult], cfg: &EvalConfig) -> Result<DetectionReport> {
    if frames.is_empty() {
        return Err(Error::Data("cannot summarize zero evaluated frames".into()));
    }
    let mut overall = Counts::default();
    let mut danger = Counts::default();
    for f in frames {
        overall += f.overall;
        danger += f.danger;
    }
    let edges: Vec<EdgeScore> = frames.iter().filter_map(|f| f.edge).filter(|e| e.total > 0).collect();
    let mu_r = if edges.is_empty() {
        None
    } else if cfg.pooled_edge_robustness {
        let robust: usize = edges.iter().map(|e| e.robust).sum();
        let total: usize = edges.iter().map(|e| e.total).sum();
        Some(100.0 * robust as f64 / total as f64)
    } else {
        Some(100.0 * edges.iter().map(EdgeScore::fraction).sum::<f64>() / edges.len() as f64)
    };
    Ok(DetectionReport {
        config: *cfg,
        frames: frames.len(),
        frames_with_edge: edges.len(),
        overall,
        danger,
        overall_rates: Rates::from_counts(overall),
        danger_rates: Rates::from_counts(danger),
        mu_r,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"))
}

fn pair(a: f64, b: f64) -> String {
    format!("{a:.1} ({b:.1})")
}

/// One row of a method-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub mu_r: Option<f64>,
    pub overall: Rates,
    pub danger: Rates,
}

impl ComparisonRow {
    pub fn from_report(label: impl Into<String>, r: &DetectionReport) -> Self {
        ComparisonRow {
            label: label.into(),
            mu_r: r.mu_r,
            overall: r.overall_rates,
            danger: r.danger_rates,
        }
    }
}

/// `method | μR | Pr | Re | F1`, danger-zone values in parentheses.
pub fn format_comparison_table(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(6).max(6);
    let mut out = format!(
        "{:<width$} | {:>5} | {:>12} | {:>12} | {:>12}\n",
        "method", "mu_R", "Pr", "Re", "F1"
    );
    out.push_str(&format!("{}\n", "-".repeat(width + 3 + 5 + 3 * 15)));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>5} | {:>12} | {:>12} | {:>12}",
            r.label,
            fmt_opt(r.mu_r),
            pair(r.overall.precision, r.danger.precision),
            pair(r.overall.recall, r.danger.recall),
            pair(r.overall.f1, r.danger.f1),
        );
    }
    out
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mu_r: Option<f64>,
    pub fp: usize,
    pub fp_danger: usize,
    pub f1: f64,
    pub f1_danger: f64,
}

impl AblationRow {
    pub fn from_report(label: impl Into<String>, r: &DetectionReport) -> Self {
        AblationRow {
            label: label.into(),
            mu_r: r.mu_r,
            fp: r.overall.fp,
            fp_danger: r.danger.fp,
            f1: r.overall_rates.f1,
            f1_danger: r.danger_rates.f1,
        }
    }
}

/// `config | μR | FP | F1`, danger-zone values in parentheses.
pub fn format_ablation_table(header: &str, rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.label.chars().count())
        .chain(std::iter::once(header.chars().count()))
        .max()
        .unwrap_or(6);
    let mut out = format!("{:<width$} | {:>5} | {:>13} | {:>12}\n", header, "mu_R", "FP", "F1");
    out.push_str(&format!("{}\n", "-".repeat(width + 3 + 5 + 3 + 13 + 3 + 12)));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>5} | {:>13} | {:>12}",
            r.label,
            fmt_opt(r.mu_r),
            format!("{} ({})", r.fp, r.fp_danger),
            pair(r.f1, r.f1_danger),
        );
    }
    out
}

/// Header line recording the evaluation thresholds.
pub fn config_header(cfg: &EvalConfig) -> String {
    format!(
        "# coverage_threshold={} edge_tolerance={}px min_fp_area={}px2 danger_zone={:?} edge_pooling={}",
        cfg.coverage_threshold,
        cfg.edge_tolerance,
        cfg.min_fp_area,
        cfg.danger_zone_source,
        if cfg.pooled_edge_robustness { "pooled" } else { "frame" }
    )
}
