//! Test-time augmentation, probability-space prediction averaging across
//! fold models ("data soups"), and exact accuracy metrics.

mod metrics;
mod tta;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugConfig, AugmentError, Image};
use crate::data::{Sample, Subset};
use crate::model::{Model, ModelError};
use crate::rng;

pub use metrics::{display_percent, evaluate, exact_percent, percent, percent_f64, Metrics, Percent};
pub use tta::{crop_view, scale_view, tta_variants, TtaConfig};

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid TTA config: {0}")]
    Config(String),
    #[error("prediction matrix: {0}")]
    Shape(String),
    #[error("prediction matrices disagree on sample ids")]
    IdMismatch,
    #[error("soup of zero prediction matrices")]
    Empty,
    #[error("no label for sample {0:?}")]
    MissingLabel(String),
    #[error("no predictions for subset {0}")]
    EmptySubset(Subset),
    #[error("score file {path}: {detail}")]
    ScoreFile { path: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

/// Per-sample class probabilities, rows sorted by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMatrix {
    pub ids: Vec<String>,
    pub k: usize,
    /// Row-major `N×K`.
    pub scores: Vec<f64>,
}

impl PredictionMatrix {
    /// Builds a matrix, sorting rows by id.
    pub fn new(ids: Vec<String>, k: usize, scores: Vec<f64>) -> Result<Self> {
        if k == 0 || scores.len() != ids.len() * k {
            return Err(EnsembleError::Shape(format!("{} ids × {k} classes vs {} scores", ids.len(), scores.len())));
        }
        let mut rows: Vec<(String, &[f64])> = ids.into_iter().zip(scores.chunks(k)).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        if rows.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(EnsembleError::Shape("duplicate sample id".into()));
        }
        let scores = rows.iter().flat_map(|(_, r)| r.iter().copied()).collect();
        Ok(Self { ids: rows.into_iter().map(|(id, _)| id).collect(), k, scores })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.scores[i * self.k..(i + 1) * self.k]
    }

    /// Keeps the rows whose id satisfies `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for (i, id) in self.ids.iter().enumerate() {
            if keep(id) {
                ids.push(id.clone());
                scores.extend_from_slice(self.row(i));
            }
        }
        Self { ids, k: self.k, scores }
    }

    /// Concatenates matrices with disjoint ids.
    pub fn merge(parts: &[PredictionMatrix]) -> Result<Self> {
        let k = parts.first().ok_or(EnsembleError::Empty)?.k;
        let ids = parts.iter().flat_map(|p| p.ids.iter().cloned()).collect();
        let scores = parts.iter().flat_map(|p| p.scores.iter().copied()).collect();
        Self::new(ids, k, scores)
    }

    /// CSV `sample_id,p0,…` with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample_id");
        for c in 0..self.k {
            s.push_str(&format!(",p{c}"));
        }
        s.push('\n');
        for (i, id) in self.ids.iter().enumerate() {
            s.push_str(id);
            for v in self.row(i) {
                s.push_str(&format!(",{v:.8e}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| e.to_string())?.clone();
        let k = header.len().saturating_sub(1);
        let expected: Vec<String> = std::iter::once("sample_id".to_string()).chain((0..k).map(|c| format!("p{c}"))).collect();
        if k == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(format!("header must be `{}`", expected.join(",")));
        }
        let mut ids = Vec::new();
        let mut scores = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            ids.push(rec[0].to_string());
            for v in rec.iter().skip(1) {
                scores.push(v.parse::<f64>().map_err(|e| format!("bad probability {v:?}: {e}"))?);
            }
        }
        Self::new(ids, k, scores).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())
            .map_err(|e| EnsembleError::ScoreFile { path: path.display().to_string(), detail: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |detail: String| EnsembleError::ScoreFile { path: path.display().to_string(), detail };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        Self::from_csv(&text).map_err(bad)
    }
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = z.iter().map(|&v| f64::from(v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean of per-view softmax probabilities for one image at model resolution.
pub fn predict_image(model: &Model<f32>, img: &Image, aug: &AugConfig, tta: &TtaConfig, r: &mut rng::Rng) -> Result<Vec<f64>> {
    let views = tta_variants(img, tta, r);
    let k = model.config().num_classes;
    let mut acc = vec![0.0; k];
    for v in &views {
        let x = augment::normalize(v, aug.mean, aug.std)?;
        let logits = model.forward_logits(std::slice::from_ref(&x))?;
        for (a, p) in acc.iter_mut().zip(softmax(logits.data())) {
            *a += p;
        }
    }
    Ok(acc.into_iter().map(|a| a / views.len() as f64).collect())
}

/// TTA predictions for every sample. Each sample's random views come from
/// its own stream, so results do not depend on evaluation order.
pub fn predict_scores(model: &Model<f32>, samples: &[&Sample], aug: &AugConfig, tta: &TtaConfig, seed: u64) -> Result<PredictionMatrix> {
    tta.validate()?;
    let size = model.config().input_size;
    let rows = samples
        .par_iter()
        .map(|s| {
            let img = s.image.resize(size, size);
            let mut r = rng::stream(seed, &[0x7474_61, rng::hash_str(&s.id)]);
            predict_image(model, &img, aug, tta, &mut r)
        })
        .collect::<Result<Vec<_>>>()?;
    PredictionMatrix::new(samples.iter().map(|s| s.id.clone()).collect(), model.config().num_classes, rows.concat())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SoupMode {
    /// Arithmetic mean of probabilities.
    #[default]
    Prob,
    /// Mean of log-probabilities, renormalized (a normalized geometric mean).
    LogProb,
}

/// Averages prediction matrices with identical ids.
pub fn soup(matrices: &[PredictionMatrix], mode: SoupMode) -> Result<PredictionMatrix> {
    let first = matrices.first().ok_or(EnsembleError::Empty)?;
    if matrices.iter().any(|m| m.ids != first.ids || m.k != first.k) {
        return Err(EnsembleError::IdMismatch);
    }
    let n = matrices.len() as f64;
    let k = first.k;
    // Each cell sums its values in sorted order, so the result is bit-identical
    // under any permutation of `matrices`.
    let cell_sum = |i: usize, f: &dyn Fn(f64) -> f64| {
        let mut vals: Vec<f64> = matrices.iter().map(|m| f(m.scores[i])).collect();
        vals.sort_by(f64::total_cmp);
        vals.iter().sum::<f64>()
    };
    let mut scores: Vec<f64>;
    match mode {
        SoupMode::Prob => {
            scores = (0..first.scores.len()).map(|i| cell_sum(i, &|v| v) / n).collect();
        }
        SoupMode::LogProb => {
            scores = (0..first.scores.len()).map(|i| cell_sum(i, &|v| v.max(f64::MIN_POSITIVE).ln())).collect();
            for row in scores.chunks_mut(k) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / n;
                row.iter_mut().for_each(|v| *v = (*v / n - mx).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
    Ok(PredictionMatrix { ids: first.ids.clone(), k, scores })
}

/// Per-subset matrices grouped by subset, for callers keeping subsets apart.
pub type SubsetScores = BTreeMap<Subset, PredictionMatrix>;
