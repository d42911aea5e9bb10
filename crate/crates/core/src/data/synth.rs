//! Seeded synthetic two-subset dataset: class-conditional striped textures,
//! with subset B rendered under a shifted "acquisition" (hue, brightness and
//! contrast offsets) so the subsets look alike but differ in distribution.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::Image;
use crate::model::NUM_CLASSES;
use crate::rng;

use super::manifest::{Manifest, ManifestError, ManifestRow, Split, Subset};
use super::ppm;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Image side in pixels.
    pub side: usize,
    /// Training images per (subset, class).
    pub train_per_class: usize,
    /// Test images per (subset, class).
    pub test_per_class: usize,
    pub seed: u64,
    /// Subset-B shift magnitude; 0 renders both subsets from one distribution.
    pub shift: f64,
    /// Per-pixel Gaussian noise (fraction of full scale).
    pub noise: f64,
    /// Per-image hue jitter in degrees.
    pub hue_jitter: f64,
    /// Per-image stripe-frequency jitter in cycles per image.
    pub freq_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { side: 64, train_per_class: 50, test_per_class: 20, seed: 0, shift: 0.5, noise: 0.12, hue_jitter: 22.0, freq_jitter: 1.0 }
    }
}

/// Hue (degrees) of class `c`: the seven classes are spread evenly.
fn class_hue(c: usize) -> f64 {
    c as f64 * 360.0 / NUM_CLASSES as f64
}

/// Stripe frequency (cycles per image) of class `c`, interleaved so
/// neighbouring hues get distant frequencies.
fn class_freq(c: usize) -> f64 {
    [2.0, 5.0, 8.0, 3.0, 6.0, 9.0, 4.0][c]
}

/// Subset-B offsets at unit shift.
const SHIFT_HUE: f64 = 30.0;
const SHIFT_BRIGHTNESS: f64 = 0.12;
const SHIFT_CONTRAST: f64 = 0.35;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one image; the stream is private to `(subset, class, split, index)`.
pub fn render(cfg: &SynthConfig, subset: Subset, class: usize, split: Split, index: usize) -> Image {
    let mut r = rng::stream(cfg.seed, &[0x7379_6e74, subset as u64, class as u64, split as u64, index as u64]);
    let shift = if subset == Subset::B { cfg.shift } else { 0.0 };
    let hue = class_hue(class) + r.random_range(-1.0..=1.0) * cfg.hue_jitter + shift * SHIFT_HUE;
    let freq = class_freq(class) + r.random_range(-1.0..=1.0) * cfg.freq_jitter;
    let theta = r.random_range(0.0..PI);
    let phase = r.random_range(0.0..2.0 * PI);
    let sat = r.random_range(0.45..0.75);
    let val = r.random_range(0.55..0.8);
    let contrast = 1.0 - shift * SHIFT_CONTRAST;
    let brightness = shift * SHIFT_BRIGHTNESS;
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).unwrap();
    let side = cfg.side as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut pixels = Vec::with_capacity(cfg.side * cfg.side * 3);
    for y in 0..cfg.side {
        for x in 0..cfg.side {
            let u = (x as f64 * ct + y as f64 * st) / side;
            let t = 0.5 + 0.5 * (2.0 * PI * freq * u + phase).sin();
            let rgb = hsv_to_rgb(hue, sat * (0.5 + 0.5 * t), val * (0.45 + 0.55 * t));
            for v in rgb {
                let v = 0.5 + (v - 0.5) * contrast + brightness + noise.sample(&mut r);
                pixels.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image::new(cfg.side, cfg.side, pixels).expect("consistent shape")
}

pub fn sample_id(subset: Subset, class: usize, split: Split, index: usize) -> String {
    format!("{subset}_c{class}_{split}_{index:04}")
}

/// Writes every image as `images/<id>.ppm` under `dir` plus `manifest.csv`.
pub fn generate_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<Manifest, SynthError> {
    if cfg.side < 8 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
        return Err(SynthError::Config("need side ≥ 8 and at least one train and one test image per cell".into()));
    }
    if !(cfg.shift >= 0.0 && cfg.noise >= 0.0 && cfg.hue_jitter >= 0.0 && cfg.freq_jitter >= 0.0) {
        return Err(SynthError::Config("shift, noise and jitters must be non-negative".into()));
    }
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(io(&images))?;
    let mut cells = Vec::new();
    for subset in Subset::ALL {
        for class in 0..NUM_CLASSES {
            for (split, n) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
                cells.extend((0..n).map(|i| (subset, class, split, i)));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(subset, class_id, split, i)| {
            let id = sample_id(subset, class_id, split, i);
            let relpath = format!("images/{id}.ppm");
            let path = dir.join(&relpath);
            ppm::write(&path, &render(cfg, subset, class_id, split, i)).map_err(|e| SynthError::Io {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
            Ok(ManifestRow { sample_id: id, relpath, subset, class_id, split, fold: None })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = Manifest::new(rows, dir)?;
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{extract_features, overlap_score, Encoder, HistogramEncoder, OverlapTag};
    use crate::data::load_samples;

    fn small(shift: f64) -> SynthConfig {
        SynthConfig { side: 32, train_per_class: 12, test_per_class: 6, shift, seed: 7, ..Default::default() }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = SynthConfig { train_per_class: 1, test_per_class: 1, side: 16, ..Default::default() };
        let m = generate_synthetic(&cfg, a.path()).unwrap();
        generate_synthetic(&cfg, b.path()).unwrap();
        assert_eq!(m.len(), 2 * NUM_CLASSES * 2);
        for row in &m.rows {
            let x = std::fs::read(a.path().join(&row.relpath)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(&row.relpath)).unwrap());
        }
        assert_eq!(std::fs::read(a.path().join("manifest.csv")).unwrap(), std::fs::read(b.path().join("manifest.csv")).unwrap());
        let reloaded = Manifest::load(&a.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.rows, m.rows);
    }

    fn features(cfg: &SynthConfig) -> crate::analysis::EmbeddingSet {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_synthetic(cfg, dir.path()).unwrap();
        extract_features(&HistogramEncoder, &load_samples(&m).unwrap()).unwrap()
    }

    #[test]
    fn histogram_nearest_centroid_probe_learns_classes() {
        let set = features(&small(0.5));
        let d = HistogramEncoder.dim();
        let mut centroids = vec![vec![0.0; d]; NUM_CLASSES];
        let mut counts = vec![0.0; NUM_CLASSES];
        for i in (0..set.len()).filter(|&i| set.splits[i] == Split::Train) {
            counts[set.classes[i]] += 1.0;
            centroids[set.classes[i]].iter_mut().zip(&set.features[i]).for_each(|(c, f)| *c += f);
        }
        centroids.iter_mut().zip(&counts).for_each(|(c, n)| c.iter_mut().for_each(|v| *v /= n));
        let test: Vec<usize> = (0..set.len()).filter(|&i| set.splits[i] == Split::Test).collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        let correct = test
            .iter()
            .filter(|&&i| {
                let pred = (0..NUM_CLASSES).min_by(|&a, &b| dist(&centroids[a], &set.features[i]).total_cmp(&dist(&centroids[b], &set.features[i]))).unwrap();
                pred == set.classes[i]
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.6, "probe accuracy {acc}");
    }

    #[test]
    fn subset_shift_controls_overlap() {
        let same = features(&small(0.0));
        let score = overlap_score(&same.features, &same.tags(OverlapTag::Subset)).unwrap();
        assert!(score >= 0.6, "shift 0 overlap {score}");
        let far = features(&small(2.0));
        let score = overlap_score(&far.features, &far.tags(OverlapTag::Subset)).unwrap();
        assert!(score < 0.2, "large shift overlap {score}");
    }

    #[test]
    fn rejects_empty_cells() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic(&SynthConfig { test_per_class: 0, ..Default::default() }, dir.path()).is_err());
    }
}
