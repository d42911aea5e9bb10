//! Per-sample training augmentations: random resized crop, horizontal flip,
//! RandAugment, random erasing and normalization.
//!
//! Images are `H×W×3` interleaved `f32` in `[0, 1]`. Every op except
//! [`normalize`] keeps values in that range. Randomness always comes from a
//! caller-provided stream, normally [`sample_rng`] so that the draw for a
//! sample depends only on `(seed, sample_id, epoch)`.

pub mod policy;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use policy::{apply_policy, Policy, ALL_POLICIES};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Out-of-bounds fill for geometric ops, `128/255`.
pub const FILL: f32 = 128.0 / 255.0;

const CROP_ATTEMPTS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image buffer of {len} values does not match {h}×{w}×3")]
    Shape { h: usize, w: usize, len: usize },
    #[error("image {h}×{w} is smaller than the 8×8 minimum")]
    TooSmall { h: usize, w: usize },
    #[error("unknown policy {0:?}")]
    UnknownPolicy(String),
    #[error("standard deviation must be positive, got {0:?}")]
    ZeroStd([f32; 3]),
    #[error("invalid augmentation config: {0}")]
    Config(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * 3 {
            return Err(AugmentError::Shape { h, w, len: data.len() });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        Self { h, w, data: (0..h * w).flat_map(|_| rgb).collect() }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { h, w, data }
    }

    /// Decodes 8-bit RGB samples.
    pub fn from_u8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(h, w, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// The 0–255 integer view, `round(p·255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Bilinear sample with half-pixel centers and clamped borders.
    fn sample_clamped(&self, sy: f64, sx: f64, c: usize) -> f32 {
        let sy = sy.clamp(0.0, (self.h - 1) as f64);
        let sx = sx.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
        let top = self.at(y0, x0, c) * (1.0 - fx) + self.at(y0, x1, c) * fx;
        let bot = self.at(y1, x0, c) * (1.0 - fx) + self.at(y1, x1, c) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Bilinear resize of the `h×w` window at `(top, left)` to `out_h×out_w`.
    pub fn resize_region(&self, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
        let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
        let sub = self.crop(top, left, h, w);
        Image::from_fn(out_h, out_w, |y, x, c| {
            sub.sample_clamped((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5, c)
        })
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        if (out_h, out_w) == (self.h, self.w) {
            return self.clone();
        }
        self.resize_region(0, 0, self.h, self.w, out_h, out_w)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| self.at(top + y, left + x, c))
    }

    /// Pads every side by `pad` pixels with mirror reflection (edge not repeated).
    pub fn reflect_pad(&self, pad: usize) -> Image {
        let reflect = |i: isize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n as isize - 1);
            let m = i.rem_euclid(period);
            (if m < n as isize { m } else { period - m }) as usize
        };
        Image::from_fn(self.h + 2 * pad, self.w + 2 * pad, |y, x, c| {
            self.at(reflect(y as isize - pad as isize, self.h), reflect(x as isize - pad as isize, self.w), c)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    /// Master switch; when off, training images are only resized and normalized.
    pub enabled: bool,
    /// Output side of the random resized crop.
    pub crop_size: usize,
    /// Crop area as a fraction of the source area, sampled uniformly then clamped to ≤ 1.
    pub crop_area: [f64; 2],
    /// Crop aspect ratio range (sampled log-uniformly).
    pub crop_aspect: [f64; 2],
    pub flip_prob: f64,
    pub randaug_n: usize,
    pub randaug_level: f64,
    /// RandAugment pool; empty means every policy.
    pub pool: Vec<Policy>,
    pub erase_prob: f64,
    pub erase_area: [f64; 2],
    pub erase_aspect: [f64; 2],
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_size: 64,
            crop_area: [0.4, 1.6],
            crop_aspect: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            randaug_n: 2,
            randaug_level: 9.0,
            pool: Vec::new(),
            erase_prob: 0.25,
            erase_area: [0.01, 0.1],
            erase_aspect: [0.3, 3.3],
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] > 0.0;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let bad = |m: &str| Err(AugmentError::Config(m.into()));
        if self.crop_size < 8 {
            return bad("crop_size must be at least 8");
        }
        if !ordered(self.crop_area) || !ordered(self.crop_aspect) || !ordered(self.erase_area) || !ordered(self.erase_aspect) {
            return bad("ranges must be positive and ordered");
        }
        if !prob(self.flip_prob) || !prob(self.erase_prob) || self.erase_area[1] > 1.0 {
            return bad("probabilities and erase area must lie in [0, 1]");
        }
        if !(0.0..=10.0).contains(&self.randaug_level) {
            return bad("randaug_level must lie in [0, 10]");
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(AugmentError::ZeroStd(self.std));
        }
        Ok(())
    }

    pub fn policies(&self) -> &[Policy] {
        if self.pool.is_empty() {
            &ALL_POLICIES
        } else {
            &self.pool
        }
    }
}

/// The augmentation stream of one sample in one epoch.
pub fn sample_rng(seed: u64, sample_id: &str, epoch: usize) -> Rng {
    rng::stream(seed, &[0x6175_676d, rng::hash_str(sample_id), epoch as u64])
}

/// A crop window in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
    /// True when every attempt failed and the center crop was used.
    pub fallback: bool,
}

fn log_uniform(r: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    r.random_range(range[0].ln()..range[1].ln()).exp()
}

fn uniform(r: &mut Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        return range[0];
    }
    r.random_range(range[0]..range[1])
}

/// Samples a crop window: area fraction uniform in `area` (clamped to ≤ 1),
/// aspect log-uniform in `aspect`; up to 10 attempts, then a centered square.
pub fn sample_crop(h: usize, w: usize, area: [f64; 2], aspect: [f64; 2], r: &mut Rng) -> CropBox {
    let total = (h * w) as f64;
    for _ in 0..CROP_ATTEMPTS {
        let a = uniform(r, area).min(1.0) * total;
        let ar = log_uniform(r, aspect);
        let cw = (a * ar).sqrt().round() as usize;
        let ch = (a / ar).sqrt().round() as usize;
        if (1..=w).contains(&cw) && (1..=h).contains(&ch) {
            let top = r.random_range(0..=h - ch);
            let left = r.random_range(0..=w - cw);
            return CropBox { top, left, h: ch, w: cw, fallback: false };
        }
    }
    let side = h.min(w);
    log::debug!("random resized crop fell back to the center crop after {CROP_ATTEMPTS} attempts");
    CropBox { top: (h - side) / 2, left: (w - side) / 2, h: side, w: side, fallback: true }
}

pub fn random_resized_crop(img: &Image, cfg: &AugConfig, r: &mut Rng) -> Result<Image> {
    if img.h < 8 || img.w < 8 {
        return Err(AugmentError::TooSmall { h: img.h, w: img.w });
    }
    let b = sample_crop(img.h, img.w, cfg.crop_area, cfg.crop_aspect, r);
    Ok(img.resize_region(b.top, b.left, b.h, b.w, cfg.crop_size, cfg.crop_size))
}

pub fn horizontal_flip(img: &Image) -> Image {
    Image::from_fn(img.h, img.w, |y, x, c| img.at(y, img.w - 1 - x, c))
}

/// Draws `cfg.randaug_n` policies uniformly with replacement and applies them in order.
pub fn rand_augment(img: &Image, cfg: &AugConfig, r: &mut Rng) -> Image {
    let pool = cfg.policies();
    let mut out = img.clone();
    for _ in 0..cfg.randaug_n {
        let p = pool[r.random_range(0..pool.len())];
        out = apply_policy(&out, p, cfg.randaug_level, r);
    }
    out
}

/// Fills the `h×w` rectangle at `(top, left)` with i.i.d. uniform values.
pub fn erase_rect(img: &Image, top: usize, left: usize, h: usize, w: usize, r: &mut Rng) -> Image {
    let mut out = img.clone();
    for y in top..top + h {
        for x in left..left + w {
            for c in 0..3 {
                out.data[(y * img.w + x) * 3 + c] = r.random::<f32>();
            }
        }
    }
    out
}

/// Erases one rectangle of the given area fraction and aspect (height / width),
/// placed uniformly. Returns `None` when the rectangle does not fit.
pub fn erase_with(img: &Image, area: f64, aspect: f64, r: &mut Rng) -> Option<Image> {
    let a = area * (img.h * img.w) as f64;
    let eh = (a * aspect).sqrt().round() as usize;
    let ew = (a / aspect).sqrt().round() as usize;
    if eh == 0 || ew == 0 || eh > img.h || ew > img.w {
        return None;
    }
    let top = r.random_range(0..=img.h - eh);
    let left = r.random_range(0..=img.w - ew);
    Some(erase_rect(img, top, left, eh, ew, r))
}

pub fn random_erasing(img: &Image, cfg: &AugConfig, r: &mut Rng) -> Image {
    if cfg.erase_prob <= 0.0 || r.random::<f64>() >= cfg.erase_prob {
        return img.clone();
    }
    for _ in 0..CROP_ATTEMPTS {
        let area = uniform(r, cfg.erase_area);
        let aspect = log_uniform(r, cfg.erase_aspect);
        if let Some(out) = erase_with(img, area, aspect, r) {
            return out;
        }
    }
    img.clone()
}

/// `(p_c − mean_c) / std_c`, as an `H×W×3` tensor.
pub fn normalize(img: &Image, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor<f32>> {
    if std.iter().any(|&s| s <= 0.0) {
        return Err(AugmentError::ZeroStd(std));
    }
    let data = img.data.iter().enumerate().map(|(i, &p)| (p - mean[i % 3]) / std[i % 3]).collect();
    Ok(Tensor::new(vec![img.h, img.w, 3], data).expect("image dims"))
}

/// The per-sample training augmentation: crop, flip, RandAugment, erasing.
/// With augmentation disabled the image is only resized to `crop_size`.
pub fn train_augment(img: &Image, cfg: &AugConfig, r: &mut Rng) -> Result<Image> {
    if !cfg.enabled {
        return Ok(img.resize(cfg.crop_size, cfg.crop_size));
    }
    let mut x = random_resized_crop(img, cfg, r)?;
    if r.random::<f64>() < cfg.flip_prob {
        x = horizontal_flip(&x);
    }
    x = rand_augment(&x, cfg, r);
    Ok(random_erasing(&x, cfg, r))
}

/// [`train_augment`] followed by [`normalize`].
pub fn train_transform(img: &Image, cfg: &AugConfig, r: &mut Rng) -> Result<Tensor<f32>> {
    normalize(&train_augment(img, cfg, r)?, cfg.mean, cfg.std)
}

pub fn eval_transform(img: &Image, cfg: &AugConfig) -> Result<Tensor<f32>> {
    normalize(&img.resize(cfg.crop_size, cfg.crop_size), cfg.mean, cfg.std)
}
