//! Disparity error metrics. Undefined values (no pixels to average over) are
//! `None`, never zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DisparityMap;
use crate::proxy::MaskPair;
use crate::tensor::Tensor;

/// Absolute error above which a pixel may count as a D1 outlier.
pub const D1_ABS_THRESHOLD: f64 = 3.0;
/// Relative error (fraction of ground truth) above which a pixel may count as an outlier.
pub const D1_REL_THRESHOLD: f64 = 0.05;

pub fn is_outlier(pred: f64, gt: f64) -> bool {
    let e = (pred - gt).abs();
    e > D1_ABS_THRESHOLD && e > D1_REL_THRESHOLD * gt
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionMetrics {
    pub epe: Option<f64>,
    pub d1: Option<f64>,
    /// Pixels the metrics were averaged over.
    pub pixels: usize,
}

fn check(pred: &Tensor, gt: &DisparityMap) -> Result<()> {
    if pred.numel() != gt.data.numel() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.data.shape()
        )));
    }
    Ok(())
}

fn region(pred: &Tensor, gt: &DisparityMap, mask: Option<&[bool]>) -> RegionMetrics {
    let (mut sum, mut outliers, mut n) = (0.0, 0usize, 0usize);
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data.data()).enumerate() {
        if !gt.valid[i] || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        sum += (p - g).abs();
        outliers += usize::from(is_outlier(p, g));
        n += 1;
    }
    if n == 0 {
        return RegionMetrics::default();
    }
    RegionMetrics {
        epe: Some(sum / n as f64),
        d1: Some(outliers as f64 / n as f64),
        pixels: n,
    }
}

/// Mean absolute error over ground-truth-valid pixels.
pub fn epe(pred: &Tensor, gt: &DisparityMap) -> Result<Option<f64>> {
    check(pred, gt)?;
    Ok(region(pred, gt, None).epe)
}

/// Fraction of ground-truth-valid pixels that are outliers.
pub fn d1_all(pred: &Tensor, gt: &DisparityMap) -> Result<Option<f64>> {
    check(pred, gt)?;
    Ok(region(pred, gt, None).d1)
}

pub fn global_metrics(pred: &Tensor, gt: &DisparityMap) -> Result<RegionMetrics> {
    check(pred, gt)?;
    Ok(region(pred, gt, None))
}

/// Metrics restricted to the proxy-valid and proxy-invalid regions.
pub fn region_split_metrics(
    pred: &Tensor,
    gt: &DisparityMap,
    masks: &MaskPair,
) -> Result<(RegionMetrics, RegionMetrics)> {
    check(pred, gt)?;
    if masks.valid.len() != pred.numel() {
        return Err(Error::Shape("mask size differs from prediction".into()));
    }
    Ok((
        region(pred, gt, Some(&masks.valid)),
        region(pred, gt, Some(&masks.invalid)),
    ))
}
