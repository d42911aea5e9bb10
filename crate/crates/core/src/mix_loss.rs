//! Batch mixing (CutMix / MixUp) into soft targets, and label-smoothed
//! cross-entropy.
//!
//! Mixing pairs sample `i` with sample `B − 1 − i` (the reversed batch).
//! Targets are smoothed first and then mixed with the same coefficient as
//! the pixels, so every target row stays a probability vector.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::rng::Rng;
use crate::tensor::{Graph, Result as TensorResult, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    /// Master switch for batch mixing (smoothing still applies when off).
    pub enabled: bool,
    pub cutmix_alpha: f64,
    pub mixup_alpha: f64,
    /// Probability of choosing CutMix for a batch (MixUp otherwise).
    pub cutmix_prob: f64,
    pub smoothing: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self { enabled: true, cutmix_alpha: 0.8, mixup_alpha: 1.0, cutmix_prob: 0.5, smoothing: 0.1 }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cutmix_alpha > 0.0 && self.mixup_alpha > 0.0) {
            return Err("mixing alphas must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err("smoothing must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) {
            return Err("cutmix_prob must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixMode {
    None,
    MixUp,
    CutMix,
}

/// Pasted rectangle of a CutMix batch, in pixels, `[top, top + h) × [left, left + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

impl CutBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Clone, Debug)]
pub struct MixOutcome {
    pub images: Vec<Image>,
    pub targets: Vec<Vec<f64>>,
    /// Realized weight of the original sample (after CutMix box clipping).
    pub lambda: f64,
    pub mode: MixMode,
    pub cut: Option<CutBox>,
}

/// `(1 − eps)·onehot + eps/K` per class id.
pub fn smooth_targets(class_ids: &[usize], eps: f64, k: usize) -> Vec<Vec<f64>> {
    class_ids
        .iter()
        .map(|&c| {
            assert!(c < k, "class id {c} out of range for {k} classes");
            (0..k).map(|j| if j == c { 1.0 - eps + eps / k as f64 } else { eps / k as f64 }).collect()
        })
        .collect()
}

fn partner(i: usize, b: usize) -> usize {
    b - 1 - i
}

/// `own·t_i + other·t_partner`; callers pass `other` explicitly so CutMix
/// can use the exact pasted fraction rather than `1 − λ`.
fn mix_targets(targets: &[Vec<f64>], own: f64, other: f64) -> Vec<Vec<f64>> {
    let b = targets.len();
    (0..b)
        .map(|i| {
            let (t, p) = (&targets[i], &targets[partner(i, b)]);
            t.iter().zip(p).map(|(a, c)| own * a + other * c).collect()
        })
        .collect()
}

fn unmixed(batch: &[Image], targets: &[Vec<f64>]) -> MixOutcome {
    MixOutcome { images: batch.to_vec(), targets: targets.to_vec(), lambda: 1.0, mode: MixMode::None, cut: None }
}

fn sample_lambda(alpha: f64, r: &mut Rng) -> f64 {
    Beta::new(alpha, alpha).expect("positive alpha").sample(r)
}

/// MixUp with a fixed coefficient: `x′ = λx + (1 − λ)x_partner`.
pub fn mixup_with(batch: &[Image], targets: &[Vec<f64>], lambda: f64) -> MixOutcome {
    if batch.len() < 2 {
        log::warn!("mixup needs at least two samples; batch left unmixed");
        return unmixed(batch, targets);
    }
    let b = batch.len();
    let lam = lambda as f32;
    let images = (0..b)
        .map(|i| {
            let (x, p) = (batch[i].data(), batch[partner(i, b)].data());
            let data = x.iter().zip(p).map(|(&a, &c)| (lam * a + (1.0 - lam) * c).clamp(0.0, 1.0)).collect();
            Image::new(batch[i].height(), batch[i].width(), data).expect("same shape")
        })
        .collect();
    MixOutcome { images, targets: mix_targets(targets, lambda, 1.0 - lambda), lambda, mode: MixMode::MixUp, cut: None }
}

pub fn mixup(batch: &[Image], targets: &[Vec<f64>], alpha: f64, r: &mut Rng) -> MixOutcome {
    let lambda = sample_lambda(alpha, r);
    mixup_with(batch, targets, lambda)
}

/// Box with sides `⌊W·√(1−λ)⌋ × ⌊H·√(1−λ)⌋` around a uniform center,
/// clipped to the image.
pub fn cutmix_box(h: usize, w: usize, lambda: f64, r: &mut Rng) -> CutBox {
    let ratio = (1.0 - lambda).max(0.0).sqrt();
    let (ch, cw) = ((h as f64 * ratio).floor() as usize, (w as f64 * ratio).floor() as usize);
    let cy = r.random_range(0..h);
    let cx = r.random_range(0..w);
    let (y0, y1) = (cy.saturating_sub(ch / 2), (cy + ch - ch / 2).min(h));
    let (x0, x1) = (cx.saturating_sub(cw / 2), (cx + cw - cw / 2).min(w));
    CutBox { top: y0, left: x0, h: y1 - y0, w: x1 - x0 }
}

/// Pastes `cut` from each partner and mixes targets with
/// `λ = 1 − area / (H·W)`.
pub fn cutmix_with_box(batch: &[Image], targets: &[Vec<f64>], cut: CutBox) -> MixOutcome {
    if batch.len() < 2 {
        log::warn!("cutmix needs at least two samples; batch left unmixed");
        return unmixed(batch, targets);
    }
    let b = batch.len();
    let (h, w) = (batch[0].height(), batch[0].width());
    let pasted = cut.area() as f64 / (h * w) as f64;
    let lambda = 1.0 - pasted;
    let images = (0..b)
        .map(|i| {
            let mut out = batch[i].clone();
            let src = &batch[partner(i, b)];
            for y in cut.top..cut.top + cut.h {
                let row = (y * w + cut.left) * 3..(y * w + cut.left + cut.w) * 3;
                out.data_mut()[row.clone()].copy_from_slice(&src.data()[row]);
            }
            out
        })
        .collect();
    MixOutcome { images, targets: mix_targets(targets, lambda, pasted), lambda, mode: MixMode::CutMix, cut: Some(cut) }
}

pub fn cutmix(batch: &[Image], targets: &[Vec<f64>], alpha: f64, r: &mut Rng) -> MixOutcome {
    let lambda = sample_lambda(alpha, r);
    let (h, w) = batch.first().map_or((1, 1), |x| (x.height(), x.width()));
    let cut = cutmix_box(h, w, lambda, r);
    cutmix_with_box(batch, targets, cut)
}

/// Smooths the labels, then applies CutMix or MixUp (one per batch).
pub fn mix_batch(batch: &[Image], class_ids: &[usize], k: usize, cfg: &MixConfig, r: &mut Rng) -> MixOutcome {
    let targets = smooth_targets(class_ids, cfg.smoothing, k);
    if !cfg.enabled || batch.len() < 2 {
        return unmixed(batch, &targets);
    }
    if r.random::<f64>() < cfg.cutmix_prob {
        cutmix(batch, &targets, cfg.cutmix_alpha, r)
    } else {
        mixup(batch, &targets, cfg.mixup_alpha, r)
    }
}

/// Records `−Σ_k q_k · log softmax(z)_k` for one sample's logits.
pub fn sample_ce<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[f64]) -> TensorResult<Var> {
    let ls = g.log_softmax(logits)?;
    let q = g.input(Tensor::new(vec![target.len()], target.iter().map(|&v| T::c(v)).collect())?);
    let prod = g.mul(ls, q)?;
    let s = g.sum_all(prod)?;
    g.neg(s)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Batch-mean smoothed cross-entropy of `[B, K]` logits.
pub fn smoothed_ce(logits: &Tensor<f64>, targets: &[Vec<f64>]) -> f64 {
    let k = logits.dims()[1];
    let b = targets.len();
    logits
        .data()
        .chunks(k)
        .zip(targets)
        .map(|(z, q)| -log_softmax(z).iter().zip(q).map(|(l, q)| l * q).sum::<f64>())
        .sum::<f64>()
        / b as f64
}

/// Gradient of [`smoothed_ce`] with respect to the logits: `(softmax(z) − q) / B`.
pub fn smoothed_ce_grad(logits: &Tensor<f64>, targets: &[Vec<f64>]) -> Tensor<f64> {
    let k = logits.dims()[1];
    let b = targets.len() as f64;
    let data = logits
        .data()
        .chunks(k)
        .zip(targets)
        .flat_map(|(z, q)| log_softmax(z).into_iter().zip(q).map(move |(l, q)| (l.exp() - q) / b).collect::<Vec<_>>())
        .collect();
    Tensor::new(logits.dims().to_vec(), data).expect("same dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn noise_batch(b: usize, side: usize, seed: u64) -> Vec<Image> {
        let mut r = rng::stream(seed, &[]);
        (0..b).map(|_| Image::from_fn(side, side, |_, _, _| r.random::<f32>())).collect()
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_targets(&[3], 0.0, 7)[0], vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let q = &smooth_targets(&[2], 0.1, 7)[0];
        assert!((q[2] - 0.914_285_714_285_714_3).abs() < 1e-15);
        assert!((q[0] - 0.014_285_714_285_714_285).abs() < 1e-15);
    }

    #[test]
    fn mixup_examples() {
        let batch = noise_batch(2, 4, 1);
        let t = smooth_targets(&[0, 3], 0.0, 7);
        let same = mixup_with(&batch, &t, 1.0);
        assert_eq!(same.images, batch);
        assert_eq!(same.targets, t);
        let half = mixup_with(&batch, &t, 0.5);
        assert_eq!(half.targets[0], vec![0.5, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]);
        let single = mixup_with(&batch[..1], &t[..1], 0.3);
        assert_eq!(single.lambda, 1.0);
    }

    #[test]
    fn cutmix_examples() {
        let batch = noise_batch(3, 6, 2);
        let t = smooth_targets(&[1, 2, 4], 0.1, 7);
        let none = cutmix_with_box(&batch, &t, CutBox { top: 2, left: 2, h: 0, w: 0 });
        assert_eq!(none.images, batch);
        assert_eq!(none.targets, t);
        let full = cutmix_with_box(&batch, &t, CutBox { top: 0, left: 0, h: 6, w: 6 });
        assert_eq!(full.lambda, 0.0);
        let reversed: Vec<Image> = batch.iter().rev().cloned().collect();
        assert_eq!(full.images, reversed);
        let mut r = rng::stream(3, &[]);
        let b = cutmix_box(6, 6, 1.0, &mut r);
        assert_eq!(b.area(), 0);
    }

    #[test]
    fn cutmix_lambda_equals_pasted_fraction() {
        let a = Image::filled(16, 16, [0.0; 3]);
        let b = Image::filled(16, 16, [1.0; 3]);
        let t = smooth_targets(&[0, 1], 0.0, 7);
        let mut r = rng::stream(4, &[]);
        for _ in 0..200 {
            let out = cutmix(&[a.clone(), b.clone()], &t, 0.8, &mut r);
            let pasted = out.images[0].data().chunks(3).filter(|p| p[0] == 1.0).count();
            let f = pasted as f64 / 256.0;
            assert_eq!(out.lambda, 1.0 - f);
            assert_eq!(out.targets[0][0], out.lambda);
            assert_eq!(out.targets[0][1], f);
        }
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor::zeros(vec![2, 7]);
        let q = smooth_targets(&[1, 5], 0.1, 7);
        assert!((smoothed_ce(&z, &q) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_at_matching_softmax_is_entropy() {
        let z = vec![0.3, -1.0, 2.0, 0.0, 0.5, -0.2, 1.1];
        let p: Vec<f64> = log_softmax(&z).iter().map(|l| l.exp()).collect();
        let h: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        let loss = smoothed_ce(&Tensor::new(vec![1, 7], z).unwrap(), &[p]);
        assert!((loss - h).abs() < 1e-12);
    }

    #[test]
    fn tape_gradient_matches_closed_form_and_finite_differences() {
        let mut r = rng::stream(5, &[]);
        let z: Vec<f64> = (0..7).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
        let q = smooth_targets(&[4], 0.1, 7);
        let mut g = Graph::new();
        let zv = g.param("z", Tensor::new(vec![7], z.clone()).unwrap()).unwrap();
        let l = sample_ce(&mut g, zv, &q[0]).unwrap();
        let tape = g.backward(l, &Tensor::scalar(1.0)).unwrap().param("z").unwrap();
        let closed = smoothed_ce_grad(&Tensor::new(vec![1, 7], z.clone()).unwrap(), &q);
        for (a, b) in tape.data().iter().zip(closed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let err = grad_check(&[("z".into(), Tensor::new(vec![7], z).unwrap())], 1e-5, |g, v| sample_ce(g, v[0], &q[0])).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    proptest! {
        #[test]
        fn mixing_keeps_ranges_and_rows(seed in any::<u64>(), b in 2usize..6, eps in 0.0f64..0.5) {
            let batch = noise_batch(b, 8, seed);
            let mut r = rng::stream(seed, &[1]);
            let ids: Vec<usize> = (0..b).map(|_| r.random_range(0..7)).collect();
            let cfg = MixConfig { smoothing: eps, ..Default::default() };
            let out = mix_batch(&batch, &ids, 7, &cfg, &mut r);
            for img in &out.images {
                prop_assert!(img.in_unit_range());
            }
            for row in &out.targets {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            prop_assert!((0.0..=1.0).contains(&out.lambda));
        }

        #[test]
        fn smoothing_commutes_with_mixing(seed in any::<u64>(), lam in 0.0f64..1.0, eps in 0.0f64..0.5) {
            let mut r = rng::stream(seed, &[]);
            let ids: Vec<usize> = (0..4).map(|_| r.random_range(0..7)).collect();
            let batch = noise_batch(4, 4, seed);
            let smoothed_then_mixed = mixup_with(&batch, &smooth_targets(&ids, eps, 7), lam).targets;
            let hard_mixed = mixup_with(&batch, &smooth_targets(&ids, 0.0, 7), lam).targets;
            for (a, h) in smoothed_then_mixed.iter().zip(&hard_mixed) {
                for (x, y) in a.iter().zip(h) {
                    prop_assert!((x - ((1.0 - eps) * y + eps / 7.0)).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn ce_is_at_least_the_target_entropy(seed in any::<u64>()) {
            let mut r = rng::stream(seed, &[]);
            let z: Vec<f64> = (0..7).map(|_| r.random::<f64>() * 6.0 - 3.0).collect();
            let raw: Vec<f64> = (0..7).map(|_| r.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let h: f64 = -q.iter().map(|v| v * v.ln()).sum::<f64>();
            prop_assert!(smoothed_ce(&Tensor::new(vec![1, 7], z).unwrap(), &[q]) >= h - 1e-8);
        }
    }
}
