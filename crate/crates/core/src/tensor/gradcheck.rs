use std::sync::Arc;

use rand::Rng as _;

use super::{Graph, Result, Tensor, TensorError, Var};
use crate::rng;

/// Compares reverse-mode gradients against central finite differences.
///
/// Uses the fourth-order central stencil `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`,
/// so truncation error stays negligible at steps large enough to keep the
/// roundoff floor below the tolerance on small gradient components.
///
/// `build` receives a fresh graph with every tensor of `point` registered as a
/// parameter (in order) and must return a scalar output. Returns the maximum
/// component-wise relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(point: &[(String, Tensor<f64>)], eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::BadStep(eps));
    }
    let eval = |pt: &[(String, Tensor<f64>)]| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let vars = pt.iter().map(|(n, t)| g.param(n.clone(), t.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        let dims = g.value(out).dims().to_vec();
        if g.value(out).len() != 1 {
            return Err(TensorError::NonScalarOutput(dims));
        }
        Ok((g, out))
    };

    let (g, out) = eval(point)?;
    let seed = Tensor::ones(g.value(out).dims().to_vec());
    let grads = g.backward(out, &seed)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (pi, (name, tensor)) in point.iter().enumerate() {
        let analytic = grads.param(name).expect("registered parameter");
        for i in 0..tensor.len() {
            let orig = tensor.data()[i];
            let mut at = |x: f64| -> Result<f64> {
                probe[pi].1.data_mut()[i] = x;
                let (g, o) = eval(&probe)?;
                Ok(g.value(o).data()[0])
            };
            let (f2m, f1m, f1p, f2p) = (at(orig - 2.0 * eps)?, at(orig - eps)?, at(orig + eps)?, at(orig + 2.0 * eps)?);
            probe[pi].1.data_mut()[i] = orig;

            // Differences first: exact (zero) when the output ignores this input.
            let numeric = (8.0 * (f1p - f1m) - (f2p - f2m)) / (12.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Step used by [`primitive_suite`].
pub const SUITE_STEP: f64 = 1e-5;

type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<f64>, &[Var]) -> Result<Var>);

/// Gradient check of every differentiable primitive, each composed with a
/// fixed random weighting so no output gradient is uniform. Inputs are drawn
/// away from kinks and singularities. Returns `(op, max relative error)`.
pub fn primitive_suite() -> Result<Vec<(&'static str, f64)>> {
    let cases: Vec<Case> = vec![
        ("add (broadcast)", vec![vec![3, 4], vec![4]], |g, v| g.add(v[0], v[1])),
        ("sub (broadcast)", vec![vec![2, 3, 4], vec![3, 1]], |g, v| g.sub(v[0], v[1])),
        ("mul (broadcast)", vec![vec![3, 4], vec![3, 1]], |g, v| g.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], |g, v| {
            let d = g.exp(v[1])?;
            g.div(v[0], d)
        }),
        ("scale", vec![vec![5]], |g, v| g.scale(v[0], 2.5)),
        ("neg", vec![vec![5]], |g, v| g.neg(v[0])),
        ("exp", vec![vec![2, 3]], |g, v| g.exp(v[0])),
        ("log", vec![vec![2, 3]], |g, v| {
            let p = g.exp(v[0])?;
            g.log(p)
        }),
        ("sqrt", vec![vec![2, 3]], |g, v| {
            let p = g.exp(v[0])?;
            g.sqrt(p)
        }),
        ("clamp_min", vec![vec![6]], |g, v| g.clamp_min(v[0], 0.05)),
        ("gelu", vec![vec![2, 5]], |g, v| g.gelu(v[0])),
        ("matmul (shared rhs)", vec![vec![2, 3, 4], vec![4, 5]], |g, v| g.matmul(v[0], v[1])),
        ("matmul (batched)", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("sum", vec![vec![2, 3, 4]], |g, v| g.sum(v[0], 1)),
        ("mean", vec![vec![2, 3, 4]], |g, v| g.mean(v[0], 2)),
        ("reshape", vec![vec![2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![3, 4]], |g, v| g.transpose(v[0], 0, 1)),
        ("concat", vec![vec![2, 3], vec![2, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 5]], |g, v| g.slice(v[0], 1, 1, 3)),
        ("gather", vec![vec![4, 3]], |g, v| g.gather(v[0], Arc::from(vec![3, 0, 0, 2]))),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0])),
        ("log_softmax", vec![vec![3, 5]], |g, v| g.log_softmax(v[0])),
        ("layernorm", vec![vec![3, 6]], |g, v| g.layernorm(v[0], 1e-5)),
        ("cosine_normalize", vec![vec![3, 4]], |g, v| g.cosine_normalize(v[0])),
    ];
    let mut r = rng::stream(0x6772_6164, &[]);
    let mut out = Vec::new();
    for (name, shapes, op) in cases {
        let mut point: Vec<(String, Tensor<f64>)> = shapes
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let n: usize = d.iter().product();
                // Magnitudes in [0.2, 1.2] with random sign keep clamp_min's
                // inputs at least 0.15 from its kink.
                let data = (0..n).map(|_| r.random_range(0.2..1.2) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
                Ok((format!("x{i}"), Tensor::new(d.clone(), data)?))
            })
            .collect::<Result<_>>()?;
        if name == "clamp_min" {
            point[0].1.data_mut().iter_mut().for_each(|v| *v += if *v > 0.0 { 0.1 } else { 0.0 });
        }
        let weights: Vec<f64> = (0..256).map(|_| r.random_range(-1.0..1.0)).collect();
        let err = grad_check(&point, SUITE_STEP, |g, v| {
            let y = op(g, v)?;
            let dims = g.value(y).dims().to_vec();
            let n = g.value(y).len();
            let w = g.input(Tensor::new(dims, weights[..n].to_vec())?);
            let p = g.mul(y, w)?;
            g.sum_all(p)
        })?;
        out.push((name, err));
    }
    Ok(out)
}
