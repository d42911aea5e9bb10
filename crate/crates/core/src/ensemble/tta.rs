use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{horizontal_flip, Image};
use crate::rng::Rng;

use super::EnsembleError;

/// Test-time augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// Resize factors; each view is resized by `s` and mapped back to the model
    /// resolution (center crop for `s > 1`, reflect padding for `s < 1`).
    pub scales: Vec<f64>,
    /// Add the mirrored version of every scale view.
    pub flip: bool,
    /// Number of random crop views appended after the deterministic ones.
    pub crop_views: usize,
    /// Crop area as a fraction of the image; values above 1 zoom out with
    /// reflect padding.
    pub crop_area: [f64; 2],
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self { scales: vec![1.0, 1.125, 1.25], flip: true, crop_views: 2, crop_area: [0.6, 1.4] }
    }
}

impl TtaConfig {
    /// Only the unaugmented view.
    pub fn identity() -> Self {
        Self { scales: vec![1.0], flip: false, crop_views: 0, crop_area: [1.0, 1.0] }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.scales.iter().any(|&s| !(s > 0.0)) || !self.scales.contains(&1.0) {
            return Err(EnsembleError::Config("scales must be positive and include 1.0".into()));
        }
        if !(self.crop_area[0] > 0.0 && self.crop_area[0] <= self.crop_area[1]) {
            return Err(EnsembleError::Config("crop_area must be positive and ordered".into()));
        }
        Ok(())
    }

    pub fn view_count(&self) -> usize {
        self.scales.len() * if self.flip { 2 } else { 1 } + self.crop_views
    }
}

/// Resizes a square-or-not image by `s` and maps it back to `h×w`.
pub fn scale_view(img: &Image, s: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    if s == 1.0 {
        return img.clone();
    }
    let (sh, sw) = (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize);
    let (sh, sw) = (sh.max(1), sw.max(1));
    let scaled = img.resize(sh, sw);
    if sh >= h && sw >= w {
        scaled.crop((sh - h) / 2, (sw - w) / 2, h, w)
    } else {
        let pad = (h.saturating_sub(sh)).max(w.saturating_sub(sw)).div_ceil(2);
        let padded = scaled.reflect_pad(pad);
        let (ph, pw) = (padded.height(), padded.width());
        padded.crop((ph - h) / 2, (pw - w) / 2, h, w)
    }
}

/// A square crop covering `area` of the image (zoom-out with reflect padding
/// when `area > 1`) at a uniform position, resized back to the input size.
pub fn crop_view(img: &Image, area: f64, r: &mut Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let side = h.min(w);
    let win = ((side as f64) * area.sqrt()).round().max(1.0) as usize;
    if win <= side {
        let top = r.random_range(0..=h - win);
        let left = r.random_range(0..=w - win);
        img.resize_region(top, left, win, win, h, w)
    } else {
        let extra = win - side;
        let padded = img.reflect_pad(extra);
        let top = r.random_range(0..=h + 2 * extra - win);
        let left = r.random_range(0..=w + 2 * extra - win);
        padded.resize_region(top, left, win, win, h, w)
    }
}

/// Enumerates the TTA views of an image already at model resolution. The first
/// view is always the image itself; then every scale (× flip), then the random crops.
pub fn tta_variants(img: &Image, cfg: &TtaConfig, r: &mut Rng) -> Vec<Image> {
    let mut out = vec![img.clone()];
    if cfg.flip {
        out.push(horizontal_flip(img));
    }
    for &s in cfg.scales.iter().filter(|&&s| s != 1.0) {
        let v = scale_view(img, s);
        let flipped = cfg.flip.then(|| horizontal_flip(&v));
        out.push(v);
        out.extend(flipped);
    }
    for _ in 0..cfg.crop_views {
        let area = if cfg.crop_area[0] == cfg.crop_area[1] {
            cfg.crop_area[0]
        } else {
            r.random_range(cfg.crop_area[0]..cfg.crop_area[1])
        };
        out.push(crop_view(img, area, r));
    }
    out
}
