//! Handcrafted proxy labels: census matching cost, semi-global aggregation,
//! winner-takes-all readout, left-right consistency confidence, and the
//! valid/invalid mask split.
//!
//! All matching-cost arithmetic is integral so aggregation can be compared
//! exactly against brute-force dynamic programming.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisparityMap, StereoPair};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProxyParams {
    /// Number of disparity hypotheses (`0..max_disp`).
    pub max_disp: usize,
    pub p1: u32,
    pub p2: u32,
    /// Census window side (odd).
    pub window: usize,
    pub epsilon: f64,
    /// Number of aggregation paths: 1, 2, 4 or 8.
    pub paths: usize,
    /// Parabola sub-pixel refinement of the WTA disparity.
    pub subpixel: bool,
}

impl Default for ProxyParams {
    fn default() -> Self {
        ProxyParams {
            max_disp: 32,
            p1: 10,
            p2: 120,
            window: 5,
            epsilon: 0.3679,
            paths: 8,
            subpixel: false,
        }
    }
}

impl ProxyParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_disp == 0 {
            return Err(Error::Config("proxy.max_disp must be >= 1".into()));
        }
        if self.window % 2 == 0 || self.window < 3 || self.window > 7 {
            return Err(Error::Config(
                "proxy.window must be odd, between 3 and 7".into(),
            ));
        }
        if !(self.p1 > 0 && self.p2 >= self.p1) {
            return Err(Error::Config("proxy penalties need p2 >= p1 > 0".into()));
        }
        check_epsilon(self.epsilon)?;
        Direction::set(self.paths)?;
        Ok(())
    }
}

/// Matching costs laid out `[H][W][D]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostVolume {
    pub height: usize,
    pub width: usize,
    pub disparities: usize,
    pub data: Vec<u32>,
}

impl CostVolume {
    pub fn new(height: usize, width: usize, disparities: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width * disparities {
            return Err(Error::Shape("cost volume size mismatch".into()));
        }
        Ok(CostVolume {
            height,
            width,
            disparities,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize, d: usize) -> u32 {
        self.data[(y * self.width + x) * self.disparities + d]
    }

    fn costs(&self, y: usize, x: usize) -> &[u32] {
        let i = (y * self.width + x) * self.disparities;
        &self.data[i..i + self.disparities]
    }
}

/// An aggregation path, named by the side it arrives from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    FromLeft,
    FromRight,
    FromTop,
    FromBottom,
    FromTopLeft,
    FromTopRight,
    FromBottomLeft,
    FromBottomRight,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::FromLeft,
        Direction::FromRight,
        Direction::FromTop,
        Direction::FromBottom,
        Direction::FromTopLeft,
        Direction::FromTopRight,
        Direction::FromBottomLeft,
        Direction::FromBottomRight,
    ];

    /// The first `n` paths of the standard ordering (n in {1, 2, 4, 8}).
    pub fn set(n: usize) -> Result<&'static [Direction]> {
        match n {
            1 | 2 | 4 | 8 => Ok(&Self::ALL[..n]),
            _ => Err(Error::Config(format!(
                "proxy.paths must be 1, 2, 4 or 8, got {n}"
            ))),
        }
    }

    /// Step `(dy, dx)` of travel; the predecessor of `p` is `p - step`.
    fn step(self) -> (isize, isize) {
        match self {
            Direction::FromLeft => (0, 1),
            Direction::FromRight => (0, -1),
            Direction::FromTop => (1, 0),
            Direction::FromBottom => (-1, 0),
            Direction::FromTopLeft => (1, 1),
            Direction::FromTopRight => (1, -1),
            Direction::FromBottomLeft => (-1, 1),
            Direction::FromBottomRight => (-1, -1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    /// `[H, W]`, values in `[0, 1]`.
    pub c: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub valid: Vec<bool>,
    pub invalid: Vec<bool>,
    pub epsilon: f64,
}

impl MaskPair {
    /// Builds a pair from the valid mask; `invalid` is its complement.
    pub fn from_valid(valid: Vec<bool>, epsilon: f64) -> Self {
        let invalid = valid.iter().map(|v| !v).collect();
        MaskPair {
            valid,
            invalid,
            epsilon,
        }
    }

    pub fn density(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len().max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyLabel {
    /// WTA disparity of the left view; `valid` mirrors `masks.valid`.
    pub disparity: DisparityMap,
    pub confidence: ConfidenceMap,
    pub masks: MaskPair,
    pub density: f64,
}

fn census(img: &Tensor, window: usize) -> Vec<u64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let r = (window / 2) as isize;
    let d = img.data();
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        d[y * w + x]
    };
    let mut out = vec![0u64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let center = at(y, x);
            let mut bits = 0u64;
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    bits = (bits << 1) | u64::from(at(y + dy, x + dx) < center);
                }
            }
            out[y as usize * w + x as usize] = bits;
        }
    }
    out
}

fn census_cost_gray(
    left: &Tensor,
    right: &Tensor,
    max_disp: usize,
    window: usize,
) -> Result<CostVolume> {
    let (h, w) = (left.shape()[0], left.shape()[1]);
    if window > h || window > w {
        return Err(Error::Input(format!(
            "census window {window} exceeds image {h}x{w}"
        )));
    }
    if max_disp == 0 {
        return Err(Error::Input("max_disp must be >= 1".into()));
    }
    let (cl, cr) = (census(left, window), census(right, window));
    let worst = (window * window - 1) as u32;
    let mut data = vec![worst; h * w * max_disp];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * max_disp;
            for d in 0..max_disp.min(x + 1) {
                data[base + d] = (cl[y * w + x] ^ cr[y * w + x - d]).count_ones();
            }
        }
    }
    CostVolume::new(h, w, max_disp, data)
}

/// Census-transform Hamming cost between the left view at `(y, x)` and the
/// right view at `(y, x - d)`; shifts leaving the image get the maximal cost.
pub fn census_cost(pair: &StereoPair, max_disp: usize, window: usize) -> Result<CostVolume> {
    pair.validate()?;
    if window % 2 == 0 {
        return Err(Error::Input(format!("census window {window} must be odd")));
    }
    let (l, r) = pair.gray();
    census_cost_gray(&l, &r, max_disp, window)
}

/// Semi-global aggregation: per path,
/// `L(p,d) = C(p,d) + min(L(p-r,d), L(p-r,d±1)+P1, min_k L(p-r,k)+P2) - min_k L(p-r,k)`,
/// summed over `paths`.
pub fn sgm_aggregate(cost: &CostVolume, p1: u32, p2: u32, paths: &[Direction]) -> CostVolume {
    let (h, w, dn) = (cost.height, cost.width, cost.disparities);
    let mut total = vec![0u32; h * w * dn];
    let mut lr = vec![0u32; h * w * dn];
    for &dir in paths {
        let (sy, sx) = dir.step();
        let rows: Vec<usize> = if sy >= 0 {
            (0..h).collect()
        } else {
            (0..h).rev().collect()
        };
        let cols: Vec<usize> = if sx >= 0 {
            (0..w).collect()
        } else {
            (0..w).rev().collect()
        };
        for &y in &rows {
            for &x in &cols {
                let py = y as isize - sy;
                let px = x as isize - sx;
                let here = (y * w + x) * dn;
                let c = cost.costs(y, x);
                if py < 0 || py >= h as isize || px < 0 || px >= w as isize {
                    lr[here..here + dn].copy_from_slice(c);
                    continue;
                }
                let prev_i = (py as usize * w + px as usize) * dn;
                let (head, tail) = lr.split_at_mut(here.max(prev_i));
                let (prev, cur) = if prev_i < here {
                    (&head[prev_i..prev_i + dn], &mut tail[..dn])
                } else {
                    (&tail[..dn], &mut head[here..here + dn])
                };
                let m = *prev.iter().min().expect("at least one disparity");
                for d in 0..dn {
                    let mut best = prev[d].min(m + p2);
                    if d > 0 {
                        best = best.min(prev[d - 1] + p1);
                    }
                    if d + 1 < dn {
                        best = best.min(prev[d + 1] + p1);
                    }
                    cur[d] = c[d] + best - m;
                }
            }
        }
        for (t, l) in total.iter_mut().zip(&lr) {
            *t += l;
        }
    }
    CostVolume {
        height: h,
        width: w,
        disparities: dn,
        data: total,
    }
}

/// Winner-takes-all: smallest-index minimum per pixel; every pixel valid.
pub fn wta(aggregated: &CostVolume, subpixel: bool) -> DisparityMap {
    let (h, w, dn) = (aggregated.height, aggregated.width, aggregated.disparities);
    let data = Tensor::from_fn(&[h, w], |p| {
        let c = aggregated.costs(p / w, p % w);
        let mut best = 0;
        for d in 1..dn {
            if c[d] < c[best] {
                best = d;
            }
        }
        let mut disp = best as f64;
        if subpixel && best > 0 && best + 1 < dn {
            let (a, b, e) = (c[best - 1] as f64, c[best] as f64, c[best + 1] as f64);
            let denom = a - 2.0 * b + e;
            if denom > 0.0 {
                disp += (a - e) / (2.0 * denom);
            }
        }
        disp
    });
    DisparityMap::dense(data)
}

/// `c(p) = exp(-|dL(p) - dR(p - round(dL(p)))|)`, zero where the
/// correspondence leaves the right image.
pub fn lr_confidence(left: &DisparityMap, right: &DisparityMap) -> Result<ConfidenceMap> {
    if left.data.shape() != right.data.shape() {
        return Err(Error::Shape(
            "left/right disparity maps differ in shape".into(),
        ));
    }
    let (h, w) = (left.height(), left.width());
    let (dl, dr) = (left.data.data(), right.data.data());
    let c = Tensor::from_fn(&[h, w], |p| {
        let (y, x) = (p / w, p % w);
        let xr = x as f64 - dl[p].round();
        if xr < 0.0 || xr >= w as f64 {
            return 0.0;
        }
        let delta = (dl[p] - dr[y * w + xr as usize]).abs();
        (-delta).exp()
    });
    Ok(ConfidenceMap { c })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    Ok(())
}

/// `valid = c >= epsilon`, `invalid` its complement.
pub fn make_masks(c: &ConfidenceMap, epsilon: f64) -> Result<MaskPair> {
    check_epsilon(epsilon)?;
    let valid = c.c.data().iter().map(|&v| v >= epsilon).collect();
    Ok(MaskPair::from_valid(valid, epsilon))
}

fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    Tensor::from_fn(&[h, w], |p| img.data()[(p / w) * w + (w - 1 - p % w)])
}

/// SGM disparity of the left view for grayscale images.
fn sgm_left(left: &Tensor, right: &Tensor, params: &ProxyParams) -> Result<DisparityMap> {
    let cost = census_cost_gray(left, right, params.max_disp, params.window)?;
    let agg = sgm_aggregate(&cost, params.p1, params.p2, Direction::set(params.paths)?);
    Ok(wta(&agg, params.subpixel))
}

/// Full proxy pipeline: SGM on both views, left-right check, confidence masks.
pub fn proxy_label(pair: &StereoPair, params: &ProxyParams) -> Result<ProxyLabel> {
    pair.validate()?;
    params.validate()?;
    let (l, r) = pair.gray();
    let dl = sgm_left(&l, &r, params)?;
    // The right view's disparities are the left-view disparities of the
    // mirrored, swapped pair.
    let dr_flipped = sgm_left(&flip_horizontal(&r), &flip_horizontal(&l), params)?;
    let dr = DisparityMap::dense(flip_horizontal(&dr_flipped.data));
    let confidence = lr_confidence(&dl, &dr)?;
    let masks = make_masks(&confidence, params.epsilon)?;
    let density = masks.density();
    let disparity = DisparityMap {
        data: dl.data,
        valid: masks.valid.clone(),
    };
    Ok(ProxyLabel {
        disparity,
        confidence,
        masks,
        density,
    })
}
