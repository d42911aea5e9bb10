//! The RandAugment policy pool.
//!
//! Every policy works on the 0–255 integer view of the image
//! (`round(p·255)`) and maps back by dividing by 255, which makes the
//! histogram and bit operations exact.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{AugmentError, Image};
use crate::rng::Rng;

const FILL_U8: f64 = 128.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Policy {
    AutoContrast,
    Equalize,
    Invert,
    Rotate,
    Posterize,
    Solarize,
    SolarizeAdd,
    ColorTransform,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const ALL_POLICIES: [Policy; 15] = [
    Policy::AutoContrast,
    Policy::Equalize,
    Policy::Invert,
    Policy::Rotate,
    Policy::Posterize,
    Policy::Solarize,
    Policy::SolarizeAdd,
    Policy::ColorTransform,
    Policy::Contrast,
    Policy::Brightness,
    Policy::Sharpness,
    Policy::ShearX,
    Policy::ShearY,
    Policy::TranslateX,
    Policy::TranslateY,
];

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Policy {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_POLICIES
            .iter()
            .copied()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| AugmentError::UnknownPolicy(s.to_string()))
    }
}

/// Rotation in degrees at `level` (before the sign coin).
pub fn rotate_degrees(level: f64) -> f64 {
    30.0 * level / 10.0
}

pub fn shear_factor(level: f64) -> f64 {
    0.3 * level / 10.0
}

/// Translation as a fraction of the image side.
pub fn translate_fraction(level: f64) -> f64 {
    0.45 * level / 10.0
}

pub fn posterize_bits(level: f64) -> u32 {
    8 - (4.0 * level / 10.0).floor() as u32
}

pub fn solarize_threshold(level: f64) -> u8 {
    (255.0 - (255.0 * level / 10.0).floor()).clamp(0.0, 255.0) as u8
}

pub fn solarize_add_amount(level: f64) -> u8 {
    (110.0 * level / 10.0).floor() as u8
}

/// Distance of the blend factor from 1 at `level` (before the sign coin).
pub fn blend_delta(level: f64) -> f64 {
    0.9 * level / 10.0
}

pub fn invert(px: &[u8]) -> Vec<u8> {
    px.iter().map(|&p| 255 - p).collect()
}

pub fn posterize(px: &[u8], bits: u32) -> Vec<u8> {
    let mask = if bits >= 8 { 0xFF } else { !(0xFFu8 >> bits) };
    px.iter().map(|&p| p & mask).collect()
}

pub fn solarize(px: &[u8], threshold: u8) -> Vec<u8> {
    px.iter().map(|&p| if p >= threshold { 255 - p } else { p }).collect()
}

pub fn solarize_add(px: &[u8], add: u8) -> Vec<u8> {
    px.iter().map(|&p| if p < 128 { p.saturating_add(add) } else { p }).collect()
}

/// Per-channel stretch of `[lo, hi]` to `[0, 255]` with rounded integer
/// arithmetic; flat channels are left unchanged. Idempotent.
pub fn auto_contrast(px: &[u8]) -> Vec<u8> {
    let mut out = px.to_vec();
    for c in 0..3 {
        let vals = px.iter().skip(c).step_by(3);
        let lo = u32::from(*vals.clone().min().expect("non-empty"));
        let hi = u32::from(*vals.max().expect("non-empty"));
        if hi == lo {
            continue;
        }
        let span = hi - lo;
        for p in out.iter_mut().skip(c).step_by(3) {
            *p = (((u32::from(*p) - lo) * 255 + span / 2) / span) as u8;
        }
    }
    out
}

/// Per-channel histogram equalization (the classic PIL lookup construction).
pub fn equalize(px: &[u8]) -> Vec<u8> {
    let mut out = px.to_vec();
    for c in 0..3 {
        let mut hist = [0usize; 256];
        for &p in px.iter().skip(c).step_by(3) {
            hist[p as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).expect("non-empty");
        let total: usize = hist.iter().sum();
        let step = (total - hist[last]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, slot) in lut.iter_mut().enumerate() {
            *slot = (n / step).min(255) as u8;
            n += hist[i];
        }
        for p in out.iter_mut().skip(c).step_by(3) {
            *p = lut[*p as usize];
        }
    }
    out
}

fn luma(px: &[u8]) -> Vec<f64> {
    px.chunks(3)
        .map(|p| ((299 * u32::from(p[0]) + 587 * u32::from(p[1]) + 114 * u32::from(p[2])) as f64 / 1000.0).round())
        .collect()
}

fn blend(px: &[u8], degenerate: &[f64], f: f64) -> Vec<u8> {
    px.iter()
        .zip(degenerate)
        .map(|(&p, &d)| (d + f * (f64::from(p) - d)).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn degenerate_sharpness(px: &[u8], h: usize, w: usize) -> Vec<f64> {
    let mut out: Vec<f64> = px.iter().map(|&p| f64::from(p)).collect();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            for c in 0..3 {
                let mut acc = 0u32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5 } else { 1 };
                        acc += wgt * u32::from(px[((y + dy - 1) * w + x + dx - 1) * 3 + c]);
                    }
                }
                out[(y * w + x) * 3 + c] = (f64::from(acc) / 13.0).round();
            }
        }
    }
    out
}

/// Inverse-mapped affine warp about the image center with bilinear sampling;
/// taps outside the image read the fill value. `inv` maps destination offsets
/// to source offsets: `src = inv · (dst − center) + center`.
fn warp(px: &[u8], h: usize, w: usize, inv: [[f64; 3]; 2]) -> Vec<u8> {
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let tap = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            FILL_U8
        } else {
            f64::from(px[(y as usize * w + x as usize) * 3 + c])
        }
    };
    let mut out = vec![0u8; px.len()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let sx = inv[0][0] * dx + inv[0][1] * dy + inv[0][2] + cx - 0.5;
            let sy = inv[1][0] * dx + inv[1][1] * dy + inv[1][2] + cy - 0.5;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for c in 0..3 {
                let top = tap(y0, x0, c) * (1.0 - fx) + tap(y0, x0 + 1, c) * fx;
                let bot = tap(y0 + 1, x0, c) * (1.0 - fx) + tap(y0 + 1, x0 + 1, c) * fx;
                out[(y * w + x) * 3 + c] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn signed(r: &mut Rng, v: f64) -> f64 {
    if r.random::<bool>() {
        -v
    } else {
        v
    }
}

/// Applies one pool policy at magnitude `level ∈ [0, 10]`. Geometric and
/// blend policies draw one sign coin from `r`; the others consume no randomness.
pub fn apply_policy(img: &Image, policy: Policy, level: f64, r: &mut Rng) -> Image {
    let (h, w) = (img.height(), img.width());
    let px = img.to_u8();
    let out = match policy {
        Policy::AutoContrast => auto_contrast(&px),
        Policy::Equalize => equalize(&px),
        Policy::Invert => invert(&px),
        Policy::Posterize => posterize(&px, posterize_bits(level)),
        Policy::Solarize => solarize(&px, solarize_threshold(level)),
        Policy::SolarizeAdd => solarize_add(&px, solarize_add_amount(level)),
        Policy::Brightness => {
            let f = 1.0 + signed(r, blend_delta(level));
            blend(&px, &vec![0.0; px.len()], f)
        }
        Policy::Contrast => {
            let l = luma(&px);
            let mean = (l.iter().sum::<f64>() / l.len() as f64).round();
            let f = 1.0 + signed(r, blend_delta(level));
            blend(&px, &vec![mean; px.len()], f)
        }
        Policy::ColorTransform => {
            let gray: Vec<f64> = luma(&px).into_iter().flat_map(|l| [l; 3]).collect();
            let f = 1.0 + signed(r, blend_delta(level));
            blend(&px, &gray, f)
        }
        Policy::Sharpness => {
            let f = 1.0 + signed(r, blend_delta(level));
            blend(&px, &degenerate_sharpness(&px, h, w), f)
        }
        Policy::Rotate => {
            let t = signed(r, rotate_degrees(level)).to_radians();
            let (s, c) = t.sin_cos();
            warp(&px, h, w, [[c, s, 0.0], [-s, c, 0.0]])
        }
        Policy::ShearX => warp(&px, h, w, [[1.0, signed(r, shear_factor(level)), 0.0], [0.0, 1.0, 0.0]]),
        Policy::ShearY => warp(&px, h, w, [[1.0, 0.0, 0.0], [signed(r, shear_factor(level)), 1.0, 0.0]]),
        Policy::TranslateX => {
            let t = signed(r, translate_fraction(level)) * w as f64;
            warp(&px, h, w, [[1.0, 0.0, -t], [0.0, 1.0, 0.0]])
        }
        Policy::TranslateY => {
            let t = signed(r, translate_fraction(level)) * h as f64;
            warp(&px, h, w, [[1.0, 0.0, 0.0], [0.0, 1.0, -t]])
        }
    };
    Image::from_u8(h, w, &out).expect("policy preserves shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng::stream(seed, &[]);
        Image::from_fn(h, w, |_, _, _| r.random::<f32>())
    }

    #[test]
    fn magnitude_tables() {
        assert_eq!(posterize_bits(0.0), 8);
        assert_eq!(posterize_bits(9.0), 5);
        assert_eq!(posterize_bits(10.0), 4);
        assert_eq!(solarize_threshold(0.0), 255);
        assert_eq!(solarize_threshold(9.0), 26);
        assert_eq!(solarize_threshold(10.0), 0);
        assert_eq!(solarize_add_amount(9.0), 99);
        assert!((rotate_degrees(9.0) - 27.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_examples() {
        let black = Image::filled(2, 2, [0.0; 3]);
        let inv = apply_policy(&black, Policy::Invert, 5.0, &mut rng::stream(0, &[]));
        assert!(inv.data().iter().all(|&p| p == 1.0));
        let img = noise(9, 7, 1);
        let px = img.to_u8();
        assert_eq!(posterize(&px, 8), px);
        assert_eq!(solarize(&px, 0), invert(&px));
        assert_eq!(apply_policy(&img, Policy::Solarize, 10.0, &mut rng::stream(0, &[])).to_u8(), invert(&px));
    }

    #[test]
    fn auto_contrast_stretches_and_is_idempotent() {
        let img = Image::from_fn(4, 4, |y, x, c| (40 + 10 * (y * 4 + x) + c) as f32 / 255.0);
        let once = auto_contrast(&img.to_u8());
        for c in 0..3 {
            let ch: Vec<u8> = once.iter().skip(c).step_by(3).copied().collect();
            assert_eq!(*ch.iter().min().unwrap(), 0);
            assert_eq!(*ch.iter().max().unwrap(), 255);
        }
        assert_eq!(auto_contrast(&once), once);
    }

    #[test]
    fn equalize_spreads_a_two_level_channel() {
        let img = Image::from_fn(32, 32, |y, _, _| if y < 16 { 0.2 } else { 0.6 });
        let eq = equalize(&img.to_u8());
        let vals: std::collections::BTreeSet<u8> = eq.iter().copied().collect();
        assert_eq!(vals.into_iter().collect::<Vec<_>>(), vec![0, 255]);
        // too few pixels below the top level: unchanged
        let small = Image::from_fn(4, 4, |y, _, _| if y < 2 { 0.2 } else { 0.6 }).to_u8();
        assert_eq!(equalize(&small), small);
    }

    #[test]
    fn constant_image_under_geometry_keeps_interior_color() {
        let img = Image::filled(16, 16, [128.0 / 255.0; 3]);
        for p in [Policy::Rotate, Policy::ShearX, Policy::ShearY, Policy::TranslateX, Policy::TranslateY] {
            let out = apply_policy(&img, p, 9.0, &mut rng::stream(4, &[]));
            assert_eq!(out, img, "{p}");
        }
    }

    #[test]
    fn translate_shifts_by_whole_pixels() {
        let img = noise(10, 10, 2);
        // 0.45·(m/10)·10 = 2 pixels
        let m = 40.0 / 9.0;
        let out = apply_policy(&img, Policy::TranslateX, m, &mut rng::stream(11, &[])).to_u8();
        let src = img.to_u8();
        let right = (0..10).all(|y| (2..10).all(|x| (0..3).all(|c| out[(y * 10 + x) * 3 + c] == src[(y * 10 + x - 2) * 3 + c])));
        let left = (0..10).all(|y| (0..8).all(|x| (0..3).all(|c| out[(y * 10 + x) * 3 + c] == src[(y * 10 + x + 2) * 3 + c])));
        assert!(right || left);
    }

    #[test]
    fn level_zero_blends_are_identity() {
        let img = Image::from_u8(6, 6, &noise(6, 6, 3).to_u8()).unwrap();
        for p in [Policy::Brightness, Policy::Contrast, Policy::ColorTransform, Policy::Sharpness, Policy::Rotate] {
            assert_eq!(apply_policy(&img, p, 0.0, &mut rng::stream(5, &[])), img, "{p}");
        }
    }

    #[test]
    fn names_round_trip() {
        for p in ALL_POLICIES {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!(matches!("Blur".parse::<Policy>(), Err(AugmentError::UnknownPolicy(_))));
    }

    proptest! {
        #[test]
        fn policies_preserve_shape_and_range(seed in any::<u64>(), pi in 0usize..15, level in 0.0f64..=10.0, h in 1usize..12, w in 1usize..12) {
            let img = noise(h, w, seed);
            let out = apply_policy(&img, ALL_POLICIES[pi], level, &mut rng::stream(seed, &[2]));
            prop_assert_eq!((out.height(), out.width()), (h, w));
            prop_assert!(out.in_unit_range());
        }

        #[test]
        fn auto_contrast_idempotent(seed in any::<u64>()) {
            let once = auto_contrast(&noise(5, 5, seed).to_u8());
            prop_assert_eq!(auto_contrast(&once), once);
        }
    }
}
