//! Per-pixel cross-entropy plus a water/obstacle feature-separation term.
//!
//! The separation term is the squared cosine similarity between the mean
//! water feature vector and the mean obstacle feature vector at the decoder
//! input. Feature cells are weighted by the fraction of ground-truth pixels of
//! each class they cover. It is zero when either class is absent.

use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};

use crate::datamodel::{Label, SegmentationMask};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cross_entropy: f64,
    pub separation: f64,
}

/// Loss value and its gradients with respect to the scores and, when a
/// feature map was supplied, the features.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub dscores: Array3<f64>,
    pub dfeatures: Option<Array3<f64>>,
}

/// Mean per-pixel cross-entropy of softmax(scores) against `gt`.
pub fn cross_entropy(scores: ArrayView3<'_, f64>, gt: &SegmentationMask) -> Result<(f64, Array3<f64>)> {
    let (c, h, w) = scores.dim();
    if c != Label::COUNT || (h, w) != gt.dims() {
        return Err(Error::Shape(format!(
            "scores {:?} do not match a {:?} mask with {} classes",
            (c, h, w),
            gt.dims(),
            Label::COUNT
        )));
    }
    let n = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::<f64>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let label = gt.labels()[[y, x]] as usize;
            let max = (0..c).map(|k| scores[[k, y, x]]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..c).map(|k| (scores[[k, y, x]] - max).exp()).sum();
            let log_z = max + sum.ln();
            loss += log_z - scores[[label, y, x]];
            for k in 0..c {
                let p = (scores[[k, y, x]] - log_z).exp();
                grad[[k, y, x]] = (p - if k == label { 1.0 } else { 0.0 }) / n;
            }
        }
    }
    Ok((loss / n, grad))
}

/// Fraction of each feature cell covered by `label` pixels.
fn cell_weights(gt: &SegmentationMask, label: Label, fh: usize, fw: usize) -> Result<Array2<f64>> {
    let (h, w) = gt.dims();
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
        return Err(Error::Shape(format!("feature grid {fh} x {fw} does not tile a {h} x {w} mask")));
    }
    let (sy, sx) = (h / fh, w / fw);
    let mut out = Array2::<f64>::zeros((fh, fw));
    for y in 0..h {
        for x in 0..w {
            if gt.is(y, x, label) {
                out[[y / sy, x / sx]] += 1.0;
            }
        }
    }
    out /= (sy * sx) as f64;
    Ok(out)
}

fn weighted_mean(features: ArrayView3<'_, f64>, weights: &Array2<f64>) -> Option<(Array1<f64>, f64)> {
    let total = weights.sum();
    if total <= 0.0 {
        return None;
    }
    let mean = features
        .outer_iter()
        .map(|ch| (&ch * weights).sum() / total)
        .collect::<Array1<f64>>();
    Some((mean, total))
}

/// Squared cosine similarity between mean water and mean obstacle features.
pub fn separation(features: ArrayView3<'_, f64>, gt: &SegmentationMask) -> Result<(f64, Array3<f64>)> {
    let (c, fh, fw) = features.dim();
    let ww = cell_weights(gt, Label::Water, fh, fw)?;
    let wo = cell_weights(gt, Label::Obstacle, fh, fw)?;
    let mut grad = Array3::<f64>::zeros((c, fh, fw));
    let (Some((mw, tw)), Some((mo, to))) = (weighted_mean(features, &ww), weighted_mean(features, &wo)) else {
        return Ok((0.0, grad));
    };
    let a = mw.dot(&mo);
    let p = mw.dot(&mw);
    let q = mo.dot(&mo);
    if p < NORM_EPS || q < NORM_EPS {
        return Ok((0.0, grad));
    }
    let value = a * a / (p * q);
    let coef = 2.0 * a / (p * q);
    let dmw = (&mo - &(&mw * (a / p))) * coef;
    let dmo = (&mw - &(&mo * (a / q))) * coef;
    for (k, mut ch) in grad.axis_iter_mut(Axis(0)).enumerate() {
        ch.assign(&(&ww * (dmw[k] / tw) + &wo * (dmo[k] / to)));
    }
    Ok((value, grad))
}

/// `cross_entropy + weight · separation`. The separation term is skipped when
/// `features` is `None` or `weight` is zero.
pub fn segmentation_loss(
    scores: ArrayView3<'_, f64>,
    features: Option<ArrayView3<'_, f64>>,
    gt: &SegmentationMask,
    separation_weight: f64,
) -> Result<LossOutput> {
    let (ce, dscores) = cross_entropy(scores, gt)?;
    let (sep, dfeatures) = match features {
        Some(f) if separation_weight > 0.0 => {
            let (v, g) = separation(f, gt)?;
            (v, Some(g * separation_weight))
        }
        _ => (0.0, None),
    };
    Ok(LossOutput {
        breakdown: LossBreakdown {
            total: ce + separation_weight * sep,
            cross_entropy: ce,
            separation: sep,
        },
        dscores,
        dfeatures,
    })
}
