//! Training losses: masked smooth-L1 against proxy and teacher labels, their
//! weighted sum, and a photometric reconstruction baseline.
//!
//! Each loss has a graph form used for training and a plain form that
//! evaluates the same graph without gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Var};
use crate::error::{Error, Result};
use crate::model::StereoPair;
use crate::proxy::MaskPair;
use crate::tensor::Tensor;

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the teacher term.
    pub lambda: f64,
    pub smooth_l1_beta: f64,
    /// Replace label supervision with photometric reconstruction.
    pub photometric: bool,
    /// SSIM share of the photometric loss.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            smooth_l1_beta: 1.0,
            photometric: false,
            alpha: 0.85,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "loss.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("loss.smooth_l1_beta must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("loss.alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Values of the loss terms for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub proxy: f64,
    pub teacher: f64,
    pub total: f64,
}

/// Elementwise smooth-L1.
pub fn smooth_l1(x: &Tensor, beta: f64) -> Tensor {
    x.map(|v| autograd::smooth_l1(v, beta))
}

fn check_shapes(a: &Tensor, b: &Tensor, mask: &[bool]) -> Result<()> {
    if a.numel() != b.numel() || a.numel() != mask.len() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?} and mask ({}) disagree",
            a.shape(),
            b.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Mean smooth-L1 between a prediction node and a constant target over `mask`.
pub fn masked_label_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    mask: &[bool],
    beta: f64,
) -> Var {
    let shape = g.value(pred).shape().to_vec();
    let t = g.constant(
        target
            .clone()
            .reshape(&shape)
            .expect("target numel checked"),
    );
    let r = g.sub(t, pred);
    let l = g.smooth_l1(r, beta);
    g.masked_mean(l, mask)
}

fn eval_label_loss(pred: &Tensor, target: &Tensor, mask: &[bool], beta: f64) -> Result<f64> {
    check_shapes(pred, target, mask)?;
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = masked_label_loss(&mut g, p, target, mask, beta);
    Ok(g.value(l).item())
}

/// Proxy term: mean smooth-L1 over valid pixels (0 when none are valid).
pub fn loss_proxy(pred: &Tensor, proxy: &Tensor, valid: &[bool], beta: f64) -> Result<f64> {
    eval_label_loss(pred, proxy, valid, beta)
}

/// Teacher term: mean smooth-L1 over invalid pixels (0 when none are invalid).
pub fn loss_teacher(pred: &Tensor, teacher: &Tensor, invalid: &[bool], beta: f64) -> Result<f64> {
    eval_label_loss(pred, teacher, invalid, beta)
}

/// `proxy + lambda * teacher` as graph nodes `(total, proxy, teacher)`.
/// A missing teacher label contributes nothing.
pub fn total_loss_graph(
    g: &mut Graph,
    pred: Var,
    proxy: &Tensor,
    teacher: Option<&Tensor>,
    masks: &MaskPair,
    cfg: &LossConfig,
) -> (Var, Var, Var) {
    let lp = masked_label_loss(g, pred, proxy, &masks.valid, cfg.smooth_l1_beta);
    let lt = match teacher {
        Some(t) => masked_label_loss(g, pred, t, &masks.invalid, cfg.smooth_l1_beta),
        None => g.constant(Tensor::scalar(0.0)),
    };
    let weighted = g.mul_scalar(lt, cfg.lambda);
    (g.add(lp, weighted), lp, lt)
}

pub fn total_loss(
    pred: &Tensor,
    proxy: &Tensor,
    teacher: &Tensor,
    masks: &MaskPair,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let proxy_l = loss_proxy(pred, proxy, &masks.valid, cfg.smooth_l1_beta)?;
    let teacher_l = loss_teacher(pred, teacher, &masks.invalid, cfg.smooth_l1_beta)?;
    Ok(LossBreakdown {
        proxy: proxy_l,
        teacher: teacher_l,
        total: proxy_l + cfg.lambda * teacher_l,
    })
}

/// Photometric reconstruction of the left view from the right view warped by
/// `pred: [1, H, W]`, averaged over pixels whose source lies inside the image.
pub fn photometric_loss_graph(g: &mut Graph, pair: &StereoPair, pred: Var, alpha: f64) -> Var {
    let (c, h, w) = pair.left.dims3();
    let d = g.value(pred).data();
    let mut mask = vec![false; c * h * w];
    for p in 0..h * w {
        let src = (p % w) as f64 - d[p];
        if (0.0..=(w - 1) as f64).contains(&src) {
            for ch in 0..c {
                mask[ch * h * w + p] = true;
            }
        }
    }
    let left = g.constant(pair.left.clone());
    let right = g.constant(pair.right.clone());
    let recon = g.warp_horizontal(right, pred);

    let diff = g.sub(left, recon);
    let l1 = g.abs(diff);

    let mu_x = g.box_filter3(left);
    let mu_y = g.box_filter3(recon);
    let xx = g.mul(left, left);
    let yy = g.mul(recon, recon);
    let xy = g.mul(left, recon);
    let exx = g.box_filter3(xx);
    let eyy = g.box_filter3(yy);
    let exy = g.box_filter3(xy);
    let mx2 = g.mul(mu_x, mu_x);
    let my2 = g.mul(mu_y, mu_y);
    let mxy = g.mul(mu_x, mu_y);
    let sx = g.sub(exx, mx2);
    let sy = g.sub(eyy, my2);
    let sxy = g.sub(exy, mxy);
    let n1 = g.mul_scalar(mxy, 2.0);
    let n1 = g.add_scalar(n1, SSIM_C1);
    let n2 = g.mul_scalar(sxy, 2.0);
    let n2 = g.add_scalar(n2, SSIM_C2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mx2, my2);
    let d1 = g.add_scalar(d1, SSIM_C1);
    let d2 = g.add(sx, sy);
    let d2 = g.add_scalar(d2, SSIM_C2);
    let den = g.mul(d1, d2);
    let ssim = g.div(num, den);
    // alpha * (1 - ssim) / 2 + (1 - alpha) * l1
    let dssim = g.mul_scalar(ssim, -0.5 * alpha);
    let dssim = g.add_scalar(dssim, 0.5 * alpha);
    let l1 = g.mul_scalar(l1, 1.0 - alpha);
    let per_pixel = g.add(dssim, l1);
    g.masked_mean(per_pixel, &mask)
}

pub fn photometric_loss(pair: &StereoPair, pred: &Tensor, alpha: f64) -> Result<f64> {
    pair.validate()?;
    let (_, h, w) = pair.left.dims3();
    if pred.numel() != h * w {
        return Err(Error::Shape(
            "prediction does not match the image size".into(),
        ));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone().reshape(&[1, h, w])?);
    let l = photometric_loss_graph(&mut g, pair, p, alpha);
    Ok(g.value(l).item())
}
