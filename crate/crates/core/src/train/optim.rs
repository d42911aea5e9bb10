use crate::tensor::{Scalar, Tensor};

use super::{OptimConfig, TrainError};

/// Whether decoupled weight decay applies to a parameter: only matrices
/// (`*.weight`); biases, norm gains/shifts, temperatures and position-bias
/// tables are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// AdamW with decoupled weight decay. Moments are kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(params: &[(String, Tensor<T>)]) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: `p ← p − lr·m̂/(√v̂ + eps) − lr·wd·p` (decay only where [`decays`]).
    pub fn step<T: Scalar>(
        &mut self,
        params: &mut [(String, Tensor<T>)],
        grads: &[Vec<T>],
        lr: f64,
        cfg: &OptimConfig,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Shape(format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len())));
        }
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(TrainError::Shape(format!("{name}: {} values, {} grads", p.len(), g.len())));
            }
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let x = pv.as_f64();
                *pv = T::c(x - lr * mhat / (vhat.sqrt() + cfg.eps) - lr * wd * x);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn one(name: &str, v: f64) -> Vec<(String, Tensor<f64>)> {
        vec![(name.to_string(), Tensor::new(vec![1], vec![v]).unwrap())]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::paper() };
        let mut p = one("w.weight", 0.7);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![0.0]], 1e-3, &cfg).unwrap();
        assert_eq!(p[0].1.data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::paper() };
        let mut p = one("w.weight", 0.5);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![1.0]], 0.01, &cfg).unwrap();
        let expect = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].1.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let cfg = OptimConfig { weight_decay: 0.1, ..OptimConfig::paper() };
        let mut p = one("w.weight", 2.0);
        let mut opt = AdamW::new(&p);
        opt.step(&mut p, &[vec![0.0]], 0.01, &cfg).unwrap();
        assert!((p[0].1.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
        let mut b = one("w.bias", 2.0);
        let mut opt = AdamW::new(&b);
        opt.step(&mut b, &[vec![0.0]], 0.01, &cfg).unwrap();
        assert_eq!(b[0].1.data()[0], 2.0);
    }

    #[test]
    fn matches_reference_adam_when_decay_is_zero() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::paper() };
        let mut r = rng::stream(1, &[]);
        let init: Vec<f64> = (0..5).map(|_| r.random::<f64>() - 0.5).collect();
        let mut p = vec![("x.weight".to_string(), Tensor::new(vec![5], init.clone()).unwrap())];
        let mut opt = AdamW::new(&p);
        let (mut x, mut m, mut v) = (init, [0.0f64; 5], [0.0f64; 5]);
        for t in 1..=10 {
            let g: Vec<f64> = (0..5).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            let lr = 1e-2 / t as f64;
            opt.step(&mut p, std::slice::from_ref(&g), lr, &cfg).unwrap();
            for j in 0..5 {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                x[j] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p[0].1.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_mask() {
        assert!(decays("stages.0.blocks.1.attn.qkv.weight"));
        assert!(!decays("stages.0.blocks.1.attn.qkv.bias"));
        assert!(!decays("stages.0.blocks.1.norm1.gamma"));
        assert!(!decays("stages.0.blocks.1.attn.log_tau"));
        assert!(!decays("stages.0.blocks.1.attn.rel_bias"));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = OptimConfig::paper();
        let mut p = one("w.weight", 1.0);
        let mut opt = AdamW::new(&p);
        assert!(opt.step(&mut p, &[vec![0.0, 1.0]], 0.1, &cfg).is_err());
    }
}
