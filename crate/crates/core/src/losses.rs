//! Training objectives with analytic gradients.

use crate::error::{Error, Result};
use crate::geometry::{Point2, PointCloud};
use crate::mask::{BinaryMask, RasterMask};
use crate::raster::{rasterize_soft, rasterize_soft_backward, Canvas, FaceList};

/// Smoothing constant of the soft-Dice loss, in pixels.
pub const DICE_EPS: f64 = 1.0;

/// Default weight of the mask term in [`total_loss`].
pub const DEFAULT_DELTA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// `∂L/∂vertex`, one entry per point.
    pub grad_points: Vec<Point2>,
}

/// RMSE between corresponding points.
pub fn point_loss(pred: &PointCloud, gt: &PointCloud) -> Result<LossValue> {
    Error::check_len(gt.len(), pred.len())?;
    let t = pred.len() as f64;
    let diffs: Vec<Point2> = pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| *p - *g)
        .collect();
    let value = (diffs.iter().map(|d| d.norm_sq()).sum::<f64>() / t).sqrt();
    let grad_points = if value > 0.0 {
        diffs.iter().map(|d| *d * (1.0 / (t * value))).collect()
    } else {
        vec![Point2::default(); diffs.len()]
    };
    Ok(LossValue { value, grad_points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub value: f64,
    /// `∂L/∂pred[p]`, row-major.
    pub grad_pixels: Vec<f64>,
}

/// `1 - (2 Σ p·g + ε) / (Σ p + Σ g + ε)`.
pub fn mask_loss(pred: &RasterMask, gt: &BinaryMask) -> Result<MaskLoss> {
    gt.same_shape(pred.width(), pred.height())?;
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g = f64::from(g);
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let value = 1.0 - num / den;
    // ∂/∂p_i of -(num/den) = -(2 g_i den - num) / den²
    let den2 = den * den;
    let grad_pixels = gt
        .data()
        .iter()
        .map(|&g| -(2.0 * f64::from(g) * den - num) / den2)
        .collect();
    Ok(MaskLoss { value, grad_pixels })
}

/// Renderer settings for the mask term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterConfig {
    pub canvas: Canvas,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub point: f64,
    pub mask: f64,
    pub grad_points: Vec<Point2>,
}

/// Mask term alone: soft-Dice of the soft render against `gt_mask`, with
/// the gradient pulled back to the vertices.
pub fn rendered_mask_loss(
    pred_points: &PointCloud,
    gt_mask: &BinaryMask,
    faces: &FaceList,
    raster: &RasterConfig,
) -> Result<LossValue> {
    let soft = rasterize_soft(pred_points, faces, raster.canvas, raster.tau)?;
    let ml = mask_loss(&soft, gt_mask)?;
    let grad_points =
        rasterize_soft_backward(pred_points, faces, raster.canvas, raster.tau, &ml.grad_pixels)?;
    Ok(LossValue {
        value: ml.value,
        grad_points,
    })
}

/// `L = L_point + δ L_mask`.
pub fn total_loss(
    pred_points: &PointCloud,
    gt_points: &PointCloud,
    gt_mask: &BinaryMask,
    faces: &FaceList,
    raster: &RasterConfig,
    delta: f64,
) -> Result<TotalLoss> {
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::param("delta", "must be finite and >= 0"));
    }
    let pl = point_loss(pred_points, gt_points)?;
    if delta == 0.0 {
        return Ok(TotalLoss {
            value: pl.value,
            point: pl.value,
            mask: 0.0,
            grad_points: pl.grad_points,
        });
    }
    let ml = rendered_mask_loss(pred_points, gt_mask, faces, raster)?;
    let grad_points = pl
        .grad_points
        .iter()
        .zip(&ml.grad_points)
        .map(|(a, b)| *a + *b * delta)
        .collect();
    Ok(TotalLoss {
        value: pl.value + delta * ml.value,
        point: pl.value,
        mask: ml.value,
        grad_points,
    })
}
