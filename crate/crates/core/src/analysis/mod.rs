//! Data-distribution analysis: image encoders, t-SNE embeddings, per-class
//! counts and a k-NN score quantifying how much two tagged groups overlap.

mod tsne;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugConfig, Image};
use crate::data::{Manifest, Sample, Split, Subset, CLASS_NAMES};
use crate::model::{Model, NUM_CLASSES};

pub use tsne::{joint_affinities, tsne, TsneConfig, TsneResult, ENTROPY_TOL, MAX_POINTS, MIN_POINTS};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid analysis config: {0}")]
    Config(String),
    #[error("embeddings contain non-finite values")]
    NonFinite,
    #[error("overlap score needs both tag values present")]
    MissingTag,
    #[error("encoder failed on {id:?}: {detail}")]
    Encoder { id: String, detail: String },
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Any image → fixed-length feature map.
pub trait Encoder: Sync {
    fn dim(&self) -> usize;
    fn encode(&self, img: &Image) -> Result<Vec<f64>, String>;
}

pub const HIST_BINS: usize = 16;
pub const SPECTRUM_BANDS: usize = 8;

/// Needs no trained weights: 16-bin histograms per channel (as fractions)
/// followed by the share of non-DC luma power in 8 radial frequency bands.
#[derive(Clone, Copy, Debug, Default)]
pub struct HistogramEncoder;

impl HistogramEncoder {
    pub const DIM: usize = 3 * HIST_BINS + SPECTRUM_BANDS;
}

fn spectrum_bands(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let mut buf: Vec<Complex<f64>> = img
        .data()
        .chunks(3)
        .map(|p| Complex::new(0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft): (Arc<_>, Arc<_>) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        col.iter_mut().enumerate().for_each(|(y, c)| *c = buf[y * w + x]);
        col_fft.process(&mut col);
        col.iter().enumerate().for_each(|(y, c)| buf[y * w + x] = *c);
    }
    let mut bands = vec![0.0; SPECTRUM_BANDS];
    let signed = |k: usize, n: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for y in 0..h {
        for x in 0..w {
            if y == 0 && x == 0 {
                continue;
            }
            // Radius normalized so the per-axis Nyquist frequency is 1.
            let fy = signed(y, h) / (h as f64 / 2.0).max(1.0);
            let fx = signed(x, w) / (w as f64 / 2.0).max(1.0);
            let r = (fy * fy + fx * fx).sqrt();
            let b = ((r * SPECTRUM_BANDS as f64) as usize).min(SPECTRUM_BANDS - 1);
            bands[b] += buf[y * w + x].norm_sqr();
        }
    }
    let total: f64 = bands.iter().sum();
    if total > 0.0 {
        bands.iter_mut().for_each(|b| *b /= total);
    }
    bands
}

impl Encoder for HistogramEncoder {
    fn dim(&self) -> usize {
        Self::DIM
    }

    fn encode(&self, img: &Image) -> Result<Vec<f64>, String> {
        let mut hist = vec![0.0; 3 * HIST_BINS];
        let n = (img.height() * img.width()) as f64;
        for p in img.data().chunks(3) {
            for (c, &v) in p.iter().enumerate() {
                let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[c * HIST_BINS + b] += 1.0 / n;
            }
        }
        hist.extend(spectrum_bands(img));
        Ok(hist)
    }
}

/// Pooled penultimate features of a trained classifier, on eval-transformed images.
pub struct ModelEncoder<'a> {
    pub model: &'a Model<f32>,
    pub aug: &'a AugConfig,
}

impl Encoder for ModelEncoder<'_> {
    fn dim(&self) -> usize {
        self.model.feature_dim()
    }

    fn encode(&self, img: &Image) -> Result<Vec<f64>, String> {
        let x = augment::eval_transform(img, self.aug).map_err(|e| e.to_string())?;
        let f = self.model.features(&x).map_err(|e| e.to_string())?;
        Ok(f.into_iter().map(f64::from).collect())
    }
}

/// Feature rows with the tags of their samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub subsets: Vec<Subset>,
    pub splits: Vec<Split>,
    pub classes: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Binary tag per row: `true` for subset B / test split.
    pub fn tags(&self, tag: OverlapTag) -> Vec<bool> {
        match tag {
            OverlapTag::Subset => self.subsets.iter().map(|&s| s == Subset::B).collect(),
            OverlapTag::Split => self.splits.iter().map(|&s| s == Split::Test).collect(),
        }
    }
}

pub fn extract_features(encoder: &dyn Encoder, samples: &[Sample]) -> Result<EmbeddingSet> {
    let features = samples
        .par_iter()
        .map(|s| {
            let f = encoder.encode(&s.image).map_err(|detail| AnalysisError::Encoder { id: s.id.clone(), detail })?;
            if f.len() != encoder.dim() {
                return Err(AnalysisError::Encoder { id: s.id.clone(), detail: format!("got {} features, encoder declares {}", f.len(), encoder.dim()) });
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(AnalysisError::NonFinite);
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingSet {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        features,
        subsets: samples.iter().map(|s| s.subset).collect(),
        splits: samples.iter().map(|s| s.split).collect(),
        classes: samples.iter().map(|s| s.class_id).collect(),
    })
}

/// Image counts per subset and class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassHistogram {
    pub counts: [[usize; NUM_CLASSES]; 2],
}

impl ClassHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// `class_id,class_name,A,B`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,class_name,A,B\n");
        for (c, name) in CLASS_NAMES.iter().enumerate() {
            writeln!(s, "{c},{name},{},{}", self.counts[0][c], self.counts[1][c]).unwrap();
        }
        s
    }
}

pub fn class_histogram(m: &Manifest) -> ClassHistogram {
    let mut h = ClassHistogram::default();
    for r in &m.rows {
        h.counts[r.subset as usize][r.class_id] += 1;
    }
    h
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OverlapTag {
    Subset,
    Split,
}

pub const OVERLAP_K: usize = 5;

/// How indistinguishable two tagged groups are: `2·(1 − max(bal, 0.5))`,
/// where `bal` is the leave-one-out balanced accuracy of a 5-NN classifier
/// predicting the tag. 1 = inseparable, 0 = perfectly separable. Neighbour
/// ties go to the smaller index.
pub fn overlap_score(features: &[Vec<f64>], tags: &[bool]) -> Result<f64> {
    let n = features.len();
    let positives = tags.iter().filter(|&&t| t).count();
    if tags.len() != n || positives == 0 || positives == n {
        return Err(AnalysisError::MissingTag);
    }
    if n <= OVERLAP_K {
        return Err(AnalysisError::Config(format!("overlap score needs more than {OVERLAP_K} points")));
    }
    let predicted: Vec<bool> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum(), j))
                .collect();
            d.select_nth_unstable_by(OVERLAP_K - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let votes = d[..OVERLAP_K].iter().filter(|(_, j)| tags[*j]).count();
            2 * votes > OVERLAP_K
        })
        .collect();
    let recall = |t: bool| {
        let (hit, all) = tags.iter().zip(&predicted).filter(|(&g, _)| g == t).fold((0, 0), |(h, a), (_, &p)| (h + usize::from(p == t), a + 1));
        hit as f64 / all as f64
    };
    let bal = (recall(true) + recall(false)) / 2.0;
    Ok(2.0 * (1.0 - bal.max(0.5)))
}

/// `sample_id,x,y,subset,split,class`.
pub fn tsne_csv(set: &EmbeddingSet, coords: &[[f64; 2]]) -> String {
    let mut s = String::from("sample_id,x,y,subset,split,class\n");
    for (i, id) in set.ids.iter().enumerate() {
        writeln!(s, "{id},{:.6},{:.6},{},{},{}", coords[i][0], coords[i][1], set.subsets[i], set.splits[i], set.classes[i]).unwrap();
    }
    s
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

/// Three side-by-side scatter panels colored by subset, split and class.
pub fn tsne_svg(set: &EmbeddingSet, coords: &[[f64; 2]]) -> String {
    const PANEL: f64 = 320.0;
    const MARGIN: f64 = 20.0;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in coords {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = |a: usize| (hi[a] - lo[a]).max(1e-12);
    let inner = PANEL - 2.0 * MARGIN;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">"#, 3.0 * PANEL, PANEL + 20.0).unwrap();
    let panels: [(&str, Box<dyn Fn(usize) -> usize>); 3] = [
        ("subset", Box::new(|i| set.subsets[i] as usize)),
        ("split", Box::new(|i| usize::from(set.splits[i] == Split::Test))),
        ("class", Box::new(|i| set.classes[i])),
    ];
    for (k, (title, color)) in panels.iter().enumerate() {
        let ox = k as f64 * PANEL;
        writeln!(s, r##"<g><rect x="{ox}" y="0" width="{PANEL}" height="{PANEL}" fill="white" stroke="#999"/>"##).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{title}</text>"#, ox + MARGIN, PANEL + 15.0).unwrap();
        for (i, p) in coords.iter().enumerate() {
            let x = ox + MARGIN + (p[0] - lo[0]) / span(0) * inner;
            let y = MARGIN + (hi[1] - p[1]) / span(1) * inner;
            writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#, PALETTE[color(i) % PALETTE.len()]).unwrap();
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

/// Summary of one analysis run.
#[derive(Clone, Debug)]
pub struct AnalysisReport {
    pub overlap_subset: f64,
    pub overlap_split: f64,
    pub tsne: TsneResult,
    pub histogram: ClassHistogram,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| AnalysisError::Io { path: path.display().to_string(), source })
}

/// Encodes all samples, embeds them with t-SNE and writes `tsne.csv`,
/// `tsne.svg`, `class_hist.csv` and `overlap.csv` into `dir`.
pub fn analyze(manifest: &Manifest, samples: &[Sample], encoder: &dyn Encoder, cfg: &TsneConfig, dir: &Path) -> Result<AnalysisReport> {
    std::fs::create_dir_all(dir).map_err(|source| AnalysisError::Io { path: dir.display().to_string(), source })?;
    let set = extract_features(encoder, samples)?;
    let res = tsne(&set.features, cfg)?;
    let histogram = class_histogram(manifest);
    let overlap_subset = overlap_score(&set.features, &set.tags(OverlapTag::Subset))?;
    let overlap_split = overlap_score(&set.features, &set.tags(OverlapTag::Split))?;
    write(&dir.join("tsne.csv"), &tsne_csv(&set, &res.coords))?;
    write(&dir.join("tsne.svg"), &tsne_svg(&set, &res.coords))?;
    write(&dir.join("class_hist.csv"), &histogram.to_csv())?;
    write(
        &dir.join("overlap.csv"),
        &format!("tag,score,initial_kl,final_kl\nsubset,{overlap_subset:.6},{:.6},{:.6}\nsplit,{overlap_split:.6},{:.6},{:.6}\n", res.initial_kl, res.final_kl, res.initial_kl, res.final_kl),
    )?;
    Ok(AnalysisReport { overlap_subset, overlap_split, tsne: res, histogram })
}
