//! Procedural stereo scenes with exact ground truth, plus weather and
//! lighting corruptions.
//!
//! A scene is a stack of textured planes described in left-image
//! coordinates. Plane `k` has disparity `a + b·x + c·y` at left pixel
//! `(x, y)`; the right view is rendered by inverting that mapping for every
//! plane and keeping the nearest one, so occlusions come out exactly.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DisparityMap, StereoPair};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Clean,
    Night,
    Rain,
    Fog,
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(CorruptionKind::Clean),
            "night" => Ok(CorruptionKind::Night),
            "rain" => Ok(CorruptionKind::Rain),
            "fog" => Ok(CorruptionKind::Fog),
            other => Err(Error::Config(format!("unknown corruption kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub kind: CorruptionKind,
    pub severity: f64,
    pub frames: usize,
}

impl DomainSpec {
    pub fn new(name: &str, kind: CorruptionKind, severity: f64, frames: usize) -> Self {
        DomainSpec {
            name: name.to_string(),
            kind,
            severity,
            frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!(
                "domain `{}` severity {} outside [0, 1]",
                self.name, self.severity
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config(format!(
                "domain `{}` needs at least one frame",
                self.name
            )));
        }
        Ok(())
    }
}

/// Image size and disparity range of generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_disparity: f64,
    pub max_disparity: f64,
    /// Number of foreground objects, sampled uniformly from this range.
    pub min_objects: usize,
    pub max_objects: usize,
    /// Allow planes whose disparity varies across the image.
    pub slanted: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 128,
            min_disparity: 0.0,
            max_disparity: 26.0,
            min_objects: 2,
            max_objects: 5,
            slanted: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scene must be at least 8x8".into()));
        }
        if !(self.min_disparity >= 0.0 && self.max_disparity > self.min_disparity) {
            return Err(Error::Config("scene disparity range is empty".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(
                "scene.min_objects exceeds scene.max_objects".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Everywhere,
    Rect { x0: f64, x1: f64, y0: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Everywhere => true,
            Shape::Rect { x0, x1, y0, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (u, v) = ((x - cx) / rx, (y - cy) / ry);
                u * u + v * v <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Texture {
    seed: u64,
    color: [f64; 3],
    contrast: f64,
    /// `(frequency_x, frequency_y, phase, amplitude)` stripes.
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let color = [
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
            rng.random_range(0.25..0.75),
        ];
        let waves = (0..3)
            .map(|_| {
                let period = rng.random_range(6.0..24.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let f = std::f64::consts::TAU / period;
                (
                    f * angle.cos(),
                    f * angle.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.02..0.06),
                )
            })
            .collect();
        Texture {
            seed: rng.random(),
            color,
            contrast: rng.random_range(0.7..1.0),
            waves,
        }
    }

    /// Intensity of channel `c` at surface point `(u, y)`.
    fn sample(&self, u: f64, y: f64, c: usize) -> f64 {
        let mut v = 0.0;
        for (k, (scale, amp)) in [(3.0, 0.16), (6.0, 0.12), (12.0, 0.08)]
            .into_iter()
            .enumerate()
        {
            v += amp
                * (value_noise(self.seed.wrapping_add(k as u64), u / scale, y / scale) - 0.5)
                * 2.0;
        }
        for &(fx, fy, ph, amp) in &self.waves {
            v += amp * (fx * u + fy * y + ph).sin();
        }
        // mild per-channel variation keeps colour information
        let tint = 0.06 * (value_noise(self.seed ^ (0x9e37 + c as u64), u / 8.0, y / 8.0) - 0.5);
        (self.color[c] + self.contrast * v + tint).clamp(0.0, 1.0)
    }
}

fn hash3(seed: u64, x: i64, y: i64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinearly interpolated lattice noise in `[0, 1]`.
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x.floor(), y.floor());
    let (tx, ty) = (x - xf, y - yf);
    let (xi, yi) = (xf as i64, yf as i64);
    let a = hash3(seed, xi, yi);
    let b = hash3(seed, xi + 1, yi);
    let c = hash3(seed, xi, yi + 1);
    let d = hash3(seed, xi + 1, yi + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

#[derive(Clone, Debug)]
struct Layer {
    shape: Shape,
    /// Disparity `a + b·x + c·y` in left coordinates.
    a: f64,
    b: f64,
    c: f64,
    texture: Texture,
}

impl Layer {
    fn disparity(&self, x: f64, y: f64) -> f64 {
        self.a + self.b * x + self.c * y
    }

    /// Left-image column seen at right-image column `xr` on row `y`.
    fn left_x_from_right(&self, xr: f64, y: f64) -> f64 {
        (xr + self.a + self.c * y) / (1.0 - self.b)
    }
}

#[derive(Clone, Debug)]
struct Scene {
    layers: Vec<Layer>,
}

impl Scene {
    fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let (lo, hi) = (cfg.min_disparity, cfg.max_disparity);
        let span = hi - lo;
        // ground-like background: disparity grows towards the bottom rows
        let top = lo + rng.random_range(0.0..0.15) * span;
        let bottom = lo + rng.random_range(0.35..0.6) * span;
        let tilt = rng.random_range(-0.02..0.02) * span / w;
        let (tilt, c) = if cfg.slanted {
            (tilt, (bottom - top) / h)
        } else {
            (0.0, 0.0)
        };
        let a = top - tilt.min(0.0) * w;
        let mut layers = vec![Layer {
            shape: Shape::Everywhere,
            a,
            b: tilt,
            c,
            texture: Texture::random(rng),
        }];
        let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
        for _ in 0..n {
            let d = lo + rng.random_range(0.3..1.0) * span;
            let cx = rng.random_range(0.0..w);
            let cy = rng.random_range(0.15 * h..0.85 * h);
            let rx = rng.random_range(0.08 * w..0.22 * w);
            let ry = rng.random_range(0.15 * h..0.4 * h);
            let shape = if rng.random_bool(0.5) {
                Shape::Rect {
                    x0: cx - rx,
                    x1: cx + rx,
                    y0: cy - ry,
                    y1: cy + ry,
                }
            } else {
                Shape::Ellipse { cx, cy, rx, ry }
            };
            // some objects are slanted; keep disparity inside the range
            let (b, cc) = if rng.random_bool(0.4) && cfg.slanted {
                (rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04))
            } else {
                (0.0, 0.0)
            };
            let a = d - b * cx - cc * cy;
            layers.push(Layer {
                shape,
                a,
                b,
                c: cc,
                texture: Texture::random(rng),
            });
        }
        Scene { layers }
    }

    /// Index and disparity of the nearest layer covering left pixel `(x, y)`.
    fn visible_left(&self, x: f64, y: f64, cfg: &SceneConfig) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, l) in self.layers.iter().enumerate() {
            if l.shape.contains(x, y) {
                let d = l
                    .disparity(x, y)
                    .clamp(cfg.min_disparity, cfg.max_disparity);
                if d > best.1 {
                    best = (k, d);
                }
            }
        }
        best
    }

    /// Nearest layer seen at right pixel `(xr, y)`: `(layer, left x, disparity)`.
    fn visible_right(&self, xr: f64, y: f64, cfg: &SceneConfig) -> (usize, f64, f64) {
        let mut best = (0, xr, f64::NEG_INFINITY);
        for (k, l) in self.layers.iter().enumerate() {
            let xl = l.left_x_from_right(xr, y);
            if l.shape.contains(xl, y) {
                let d = l.disparity(xl, y);
                if d > best.2 {
                    best = (k, xl, d);
                }
            }
        }
        best.2 = best.2.clamp(cfg.min_disparity, cfg.max_disparity);
        best
    }
}

/// Per-view disparity of the clean rendering; used by depth-aware corruptions.
struct Rendered {
    left: Tensor,
    right: Tensor,
    gt: DisparityMap,
    right_disparity: Tensor,
}

fn render(scene: &Scene, cfg: &SceneConfig) -> Rendered {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    let mut left = Tensor::zeros(&[3, h, w]);
    let mut right = Tensor::zeros(&[3, h, w]);
    let mut gt = Tensor::zeros(&[h, w]);
    let mut right_disparity = Tensor::zeros(&[h, w]);
    let mut valid = vec![true; n];
    for y in 0..h {
        let yf = y as f64;
        for x in 0..w {
            let xf = x as f64;
            let p = y * w + x;
            let (k, d) = scene.visible_left(xf, yf, cfg);
            let tex = &scene.layers[k].texture;
            for c in 0..3 {
                left.data_mut()[c * n + p] = tex.sample(xf, yf, c);
            }
            gt.data_mut()[p] = d;
            let xr = xf - d;
            if xr < 0.0 {
                valid[p] = false;
            } else {
                // occluded if a nearer surface covers the corresponding right point
                let (kr, _, _) = scene.visible_right(xr, yf, cfg);
                if kr != k {
                    valid[p] = false;
                }
            }

            let (kr, xl, dr) = scene.visible_right(xf, yf, cfg);
            let tex = &scene.layers[kr].texture;
            for c in 0..3 {
                right.data_mut()[c * n + p] = tex.sample(xl, yf, c);
            }
            right_disparity.data_mut()[p] = dr;
        }
    }
    Rendered {
        left,
        right,
        gt: DisparityMap { data: gt, valid },
        right_disparity,
    }
}

fn stream_seed(seed: u64, frame_index: u64, salt: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in [seed, frame_index, salt] {
        h = crate::tensor::fnv_step(h, v);
    }
    h
}

fn corruption_salt(kind: CorruptionKind) -> u64 {
    match kind {
        CorruptionKind::Clean => 1,
        CorruptionKind::Night => 2,
        CorruptionKind::Rain => 3,
        CorruptionKind::Fog => 4,
    }
}

fn night(img: &mut Tensor, s: f64, rng: &mut ChaCha8Rng) {
    let gain = 1.0 - 0.7 * s;
    let gamma = 1.0 + 1.2 * s;
    let noise = Normal::new(0.0, 0.05 * s).expect("valid std");
    for v in img.data_mut() {
        *v = (gain * v.powf(gamma) + noise.sample(rng)).clamp(0.0, 1.0);
    }
}

fn rain(img: &mut Tensor, s: f64, rng: &mut ChaCha8Rng) {
    let (c, h, w) = img.dims3();
    let n = h * w;
    // contrast loss towards a grey veil
    let keep = 1.0 - 0.45 * s;
    let veil = 0.55;
    for v in img.data_mut() {
        *v = veil + keep * (*v - veil);
    }
    let streaks = (s * (h * w) as f64 / 24.0).round() as usize;
    for _ in 0..streaks {
        let x0 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(-8.0..h as f64);
        let len: f64 = rng.random_range(5.0..12.0);
        let slope = rng.random_range(0.15..0.35);
        let bright = rng.random_range(0.35..0.7) * s.sqrt();
        let steps = len.ceil() as usize;
        for t in 0..=steps {
            let y = y0 + t as f64;
            let x = x0 + slope * t as f64;
            if y < 0.0 || y >= h as f64 || x < 0.0 || x >= w as f64 {
                continue;
            }
            let p = y as usize * w + x as usize;
            for ch in 0..c {
                let v = &mut img.data_mut()[ch * n + p];
                *v = (*v + bright * (1.0 - *v)).clamp(0.0, 1.0);
            }
        }
    }
}

fn fog(img: &mut Tensor, disparity: &Tensor, s: f64, cfg: &SceneConfig) {
    let (c, h, w) = img.dims3();
    let n = h * w;
    let airlight = 0.8;
    for p in 0..n {
        // far surfaces (small disparity) lose the most contrast
        let depth = 1.0
            - (disparity.data()[p] - cfg.min_disparity) / (cfg.max_disparity - cfg.min_disparity);
        let t = (-3.0 * s * (0.25 + depth)).exp();
        for ch in 0..c {
            let v = &mut img.data_mut()[ch * n + p];
            *v = *v * t + airlight * (1.0 - t);
        }
    }
}

/// Renders frame `frame_index` of the scene stream `seed` under `spec`'s
/// corruption. Scene content depends only on `(frame_index, seed)`;
/// severity 0 reproduces the clean rendering exactly.
pub fn synth_pair(
    spec: &DomainSpec,
    scene_cfg: &SceneConfig,
    frame_index: u64,
    seed: u64,
) -> Result<(StereoPair, DisparityMap)> {
    spec.validate()?;
    scene_cfg.validate()?;
    let mut scene_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, frame_index, 0));
    let scene = Scene::random(scene_cfg, &mut scene_rng);
    let Rendered {
        mut left,
        mut right,
        gt,
        right_disparity,
    } = render(&scene, scene_cfg);
    let s = spec.severity;
    if s > 0.0 {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(seed, frame_index, corruption_salt(spec.kind)));
        match spec.kind {
            CorruptionKind::Clean => {}
            CorruptionKind::Night => {
                night(&mut left, s, &mut rng);
                night(&mut right, s, &mut rng);
            }
            CorruptionKind::Rain => {
                rain(&mut left, s, &mut rng);
                rain(&mut right, s, &mut rng);
            }
            CorruptionKind::Fog => {
                fog(&mut left, &gt.data, s, scene_cfg);
                fog(&mut right, &right_disparity, s, scene_cfg);
            }
        }
    }
    Ok((StereoPair::new(left, right, frame_index)?, gt))
}
