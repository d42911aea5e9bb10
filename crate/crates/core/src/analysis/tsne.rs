//! Exact (O(N²)) t-SNE with per-point perplexity calibration.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng;

use super::AnalysisError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    /// Effective neighbour count; clamped to `(N−1)/3` for small inputs.
    pub perplexity: f64,
    pub iters: usize,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and momentum 0.5.
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iters: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.perplexity >= 2.0) {
            return Err(AnalysisError::Config(format!("perplexity must be at least 2, got {}", self.perplexity)));
        }
        if self.iters < self.exaggeration_iters || self.iters < 250 {
            return Err(AnalysisError::Config(format!("iters must be at least max(250, exaggeration_iters), got {}", self.iters)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(AnalysisError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

pub const MIN_POINTS: usize = 10;
pub const MAX_POINTS: usize = 5000;
/// Entropy tolerance (nats) of the bandwidth search.
pub const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const KL_EVERY: usize = 50;

#[derive(Clone, Debug)]
pub struct TsneResult {
    /// Centered 2-D coordinates, one per input row.
    pub coords: Vec<[f64; 2]>,
    /// Perplexity actually used after clamping.
    pub perplexity: f64,
    /// Per-point entropy (nats) of the calibrated conditional affinities.
    pub entropies: Vec<f64>,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// `(iteration, KL)` every 50 iterations and at the end.
    pub kl_log: Vec<(usize, f64)>,
}

fn sq_distances(x: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    d
}

/// Conditional affinities of one row for precision `beta`; returns entropy.
fn row_affinities(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
        sum += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= sum;
        if *o > 0.0 {
            h -= *o * o.ln();
        }
    }
    h
}

/// Bisects the Gaussian precision of row `i` until its entropy is within
/// [`ENTROPY_TOL`] of `ln(perplexity)`.
fn calibrate_row(d: &[f64], i: usize, perplexity: f64, out: &mut [f64]) -> f64 {
    let target = perplexity.ln();
    let mean = d.iter().sum::<f64>() / (d.len() - 1) as f64;
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut beta = 1.0 / mean.max(f64::MIN_POSITIVE);
    let mut h = row_affinities(d, i, beta, out);
    for _ in 0..MAX_BISECTIONS {
        if (h - target).abs() < ENTROPY_TOL {
            break;
        }
        if h > target {
            lo = beta;
            beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        h = row_affinities(d, i, beta, out);
    }
    h
}

/// Symmetrized joint affinities `(P + Pᵀ)/(2N)` and per-point entropies.
pub fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let d = sq_distances(x);
    let mut cond = vec![0.0; n * n];
    let entropies: Vec<f64> = cond
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| calibrate_row(&d[i * n..(i + 1) * n], i, perplexity, row))
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2 * n) as f64;
        }
    }
    (p, entropies)
}

/// Separates exact duplicate rows by a deterministic 1e-10 jitter so every
/// bandwidth search has a non-degenerate neighbourhood.
fn jitter_duplicates(x: &mut [Vec<f64>], seed: u64) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
    let mut r = rng::stream(seed, &[0x6a69_7474]);
    let normal = Normal::new(0.0, 1e-10).unwrap();
    let mut jittered = 0;
    for w in order.windows(2) {
        if x[w[0]] == x[w[1]] {
            for v in x[w[1]].iter_mut() {
                *v += normal.sample(&mut r);
            }
            jittered += 1;
        }
    }
    if jittered > 0 {
        log::warn!("t-SNE: jittered {jittered} duplicate points by 1e-10");
    }
}

/// Student-t similarities: returns unnormalized `num` (zero diagonal) and its sum.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if i != j {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let sum = num.iter().sum();
    (num, sum)
}

fn kl_divergence(p: &[f64], num: &[f64], sum: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / sum).max(1e-300)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    for a in 0..2 {
        let m = y.iter().map(|p| p[a]).sum::<f64>() / n;
        y.iter_mut().for_each(|p| p[a] -= m);
    }
}

/// Embeds the rows of `x` in two dimensions.
pub fn tsne(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneResult, AnalysisError> {
    cfg.validate()?;
    let n = x.len();
    if !(MIN_POINTS..=MAX_POINTS).contains(&n) {
        return Err(AnalysisError::Config(format!("t-SNE needs {MIN_POINTS}..={MAX_POINTS} points, got {n}")));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0);
    let mut x = x.to_vec();
    jitter_duplicates(&mut x, cfg.seed);
    let (p, entropies) = joint_affinities(&x, perplexity);

    let mut r = rng::stream(cfg.seed, &[0x7473_6e65]);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut r), normal.sample(&mut r)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];

    let (num, sum) = student_t(&y);
    let initial_kl = kl_divergence(&p, &num, sum);
    let mut kl_log = vec![(0, initial_kl)];

    for it in 0..cfg.iters {
        let early = it < cfg.exaggeration_iters;
        let exag = if early { cfg.early_exaggeration } else { 1.0 };
        let momentum = if early { cfg.momentum } else { cfg.final_momentum };
        let (num, sum) = student_t(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let nij = num[i * n + j];
                    let w = (exag * p[i * n + j] - nij / sum) * nij;
                    g[0] += 4.0 * w * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * w * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for a in 0..2 {
                let same_sign = (grad[i][a] > 0.0) == (update[i][a] > 0.0);
                let g: f64 = if same_sign { gains[i][a] * 0.8 } else { gains[i][a] + 0.2 };
                gains[i][a] = g.max(0.01);
                update[i][a] = momentum * update[i][a] - cfg.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += update[i][a];
            }
        }
        center(&mut y);
        if (it + 1) % KL_EVERY == 0 || it + 1 == cfg.iters {
            let (num, sum) = student_t(&y);
            let kl = kl_divergence(&p, &num, sum);
            log::debug!("t-SNE iter {}: KL {kl:.6}", it + 1);
            if kl_log.last().map(|l| l.0) != Some(it + 1) {
                kl_log.push((it + 1, kl));
            }
        }
    }
    center(&mut y);
    let final_kl = kl_log.last().map(|l| l.1).unwrap_or(initial_kl);
    Ok(TsneResult { coords: y, perplexity, entropies, initial_kl, final_kl, kl_log })
}
