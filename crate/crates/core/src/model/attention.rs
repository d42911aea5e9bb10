use crate::tensor::{Graph, Result, Scalar, Var};

use super::TAU_MIN;

/// Scaled cosine attention over `[batch, heads, tokens, head_dim]` operands.
///
/// `attn(i, j) = cos(q_i, k_j) / max(tau, 0.01) + bias(i, j) + mask(i, j)`,
/// softmaxed over `j` and applied to `v`. `tau` is `[heads]`, `bias`
/// `[heads, tokens, tokens]` and `mask` anything broadcastable to the score
/// shape (0 or `-inf` entries).
pub fn cosine_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    tau: Var,
    bias: Option<Var>,
    mask: Option<Var>,
) -> Result<Var> {
    let heads = g.dims(tau)[0];
    let qn = g.cosine_normalize(q)?;
    let kn = g.cosine_normalize(k)?;
    let rank = g.dims(kn).len();
    let kt = g.transpose(kn, rank - 2, rank - 1)?;
    let mut scores = g.matmul(qn, kt)?;
    let tau = g.clamp_min(tau, T::c(TAU_MIN))?;
    let tau = g.reshape(tau, &[heads, 1, 1])?;
    scores = g.div(scores, tau)?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores)?;
    g.matmul(weights, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::window;
    use crate::rng;
    use crate::tensor::{Tensor, TensorError};
    use rand::Rng as _;

    fn t(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data).unwrap()
    }

    fn attention_weights(g: &mut Graph<f64>, q: Var, k: Var, tau: Var) -> Tensor<f64> {
        // identity values expose the weight matrix directly
        let n = g.dims(q)[2];
        let eye = g.input(t(&[1, 1, n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()));
        let out = cosine_attention(g, q, k, eye, tau, None, None).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn two_tokens_match_hand_computed_softmax() {
        let mut g = Graph::new();
        // q0 = (1,0), q1 = (1,1); k0 = (1,0), k1 = (0,2)
        let q = g.input(t(&[1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]));
        let k = g.input(t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 2.0]));
        let tau = g.input(t(&[1], vec![0.5]));
        let w = attention_weights(&mut g, q, k, tau);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let rows = [[1.0, 0.0], [s, s]];
        for (i, cos) in rows.iter().enumerate() {
            let e: Vec<f64> = cos.iter().map(|c| (c / 0.5f64).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..2 {
                assert!((w.data()[i * 2 + j] - e[j] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_temperature_gives_uniform_rows() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin() + 0.1).collect();
        let q = g.input(t(&[1, 1, 4, 3], data.clone()));
        let k = g.input(t(&[1, 1, 4, 3], data));
        let tau = g.input(t(&[1], vec![1e9]));
        let w = attention_weights(&mut g, q, k, tau);
        for v in w.data() {
            assert!((v - 0.25).abs() < 1e-8);
        }
    }

    #[test]
    fn single_token_returns_values() {
        let mut g = Graph::new();
        let q = g.input(t(&[1, 1, 1, 2], vec![0.3, -0.4]));
        let k = g.input(t(&[1, 1, 1, 2], vec![2.0, 1.0]));
        let v = g.input(t(&[1, 1, 1, 2], vec![5.0, -7.0]));
        let tau = g.input(t(&[1], vec![0.1]));
        let out = cosine_attention(&mut g, q, k, v, tau, None, None).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, -7.0]);
    }

    #[test]
    fn temperature_is_clamped() {
        let mut g = Graph::new();
        let q = g.input(t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let k = g.input(t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let tiny = g.input(t(&[1], vec![1e-6]));
        let floor = g.input(t(&[1], vec![TAU_MIN]));
        let a = attention_weights(&mut g, q, k, tiny);
        let b = attention_weights(&mut g, q, k, floor);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_query_is_an_error() {
        let mut g = Graph::new();
        let q = g.input(t(&[1, 1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]));
        let k = g.input(t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let tau = g.input(t(&[1], vec![1.0]));
        let err = cosine_attention(&mut g, q, k, k, tau, None, None).unwrap_err();
        assert!(matches!(err, TensorError::ZeroNorm { .. }));
    }

    #[test]
    fn rows_sum_to_one_with_mask_and_bias() {
        let mut r = rng::stream(3, &[]);
        let mut g = Graph::new();
        let mut rand = |n: usize| -> Vec<f64> { (0..n).map(|_| r.random::<f64>() - 0.5).collect() };
        let q = g.input(t(&[2, 2, 4, 3], rand(48)));
        let k = g.input(t(&[2, 2, 4, 3], rand(48)));
        let tau = g.input(t(&[2], vec![0.2, 0.7]));
        let bias = g.input(t(&[2, 4, 4], rand(32)));
        let mut m = vec![0.0; 32];
        m[1] = f64::NEG_INFINITY;
        m[20] = f64::NEG_INFINITY;
        let mask = g.input(t(&[2, 1, 4, 4], m));
        let n = 4;
        let eye = g.input(t(&[1, 1, n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()));
        let zeros = g.input(Tensor::zeros(vec![2, 2, 4, 4]));
        let eye = g.add(eye, zeros).unwrap();
        let w = cosine_attention(&mut g, q, k, eye, tau, Some(bias), Some(mask)).unwrap();
        for row in g.value(w).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(w).data()[1], 0.0);
    }

    /// Cyclic shift + region mask must equal attention restricted to the
    /// non-cyclic shifted windows, evaluated by brute force over the full grid.
    #[test]
    fn shifted_windows_match_brute_force_neighbourhoods() {
        let (res, w, s, d) = (8usize, 4usize, 2usize, 3usize);
        let n = res * res;
        let tw = w * w;
        let nw = n / tw;
        let mut r = rng::stream(21, &[]);
        let mut rand = |len: usize| -> Vec<f64> { (0..len).map(|_| r.random::<f64>() - 0.5).collect() };
        let (qd, kd, vd) = (rand(n * d), rand(n * d), rand(n * d));
        let table = rand((2 * w - 1) * (2 * w - 1));
        let tau = 0.3;

        let part = window::arc(window::partition_index(res, w, s));
        let unpart = window::arc(window::inverse_index(&part));
        let rel = window::relative_index(w);
        let mut g = Graph::new();
        let windowed = |data: &[f64], g: &mut Graph<f64>| {
            let x = g.input(t(&[n, d], data.to_vec()));
            let x = g.gather(x, part.clone()).unwrap();
            g.reshape(x, &[nw, 1, tw, d]).unwrap()
        };
        let (q, k, v) = (windowed(&qd, &mut g), windowed(&kd, &mut g), windowed(&vd, &mut g));
        let tv = g.input(t(&[1], vec![tau]));
        let bias = g.input(t(&[1, tw, tw], rel.iter().map(|&i| table[i]).collect()));
        let mask = g.input(t(&[nw, 1, tw, tw], window::shift_mask(res, w, s)));
        let out = cosine_attention(&mut g, q, k, v, tv, Some(bias), Some(mask)).unwrap();
        let out = g.reshape(out, &[n, d]).unwrap();
        let out = g.gather(out, unpart).unwrap();
        let got = g.value(out).data().to_vec();

        let group = |p: usize| (p + w - s) / w;
        let unit = |x: &[f64]| {
            let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter().map(|v| v / nrm).collect::<Vec<_>>()
        };
        for i in 0..n {
            let (ri, ci) = (i / res, i % res);
            let qi = unit(&qd[i * d..(i + 1) * d]);
            let mut logits = Vec::new();
            for j in 0..n {
                let (rj, cj) = (j / res, j % res);
                if group(ri) != group(rj) || group(ci) != group(cj) {
                    continue;
                }
                let kj = unit(&kd[j * d..(j + 1) * d]);
                let cos: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                let dr = ri + w - 1 - rj;
                let dc = ci + w - 1 - cj;
                logits.push((j, cos / tau + table[dr * (2 * w - 1) + dc]));
            }
            let mx = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - mx).exp()).sum();
            for c in 0..d {
                let expect: f64 = logits.iter().map(|&(j, l)| (l - mx).exp() / z * vd[j * d + c]).sum();
                assert!((got[i * d + c] - expect).abs() < 1e-12, "token {i} channel {c}");
            }
        }
    }
}
