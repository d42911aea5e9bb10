use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, broadcast_dims, broadcast_strides, broadcast_walk, gemm};
use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    Exp,
    Log,
    Sqrt,
    ClampMin(T),
    MatMul { batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Sum { axis: usize },
    Mean { axis: usize },
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Gather(Arc<[usize]>),
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gelu,
    CosineNormalize,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::ClampMin(_) => "clamp_min",
            Op::MatMul { .. } => "matmul",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather(_) => "gather",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::LayerNorm => "layernorm",
            Op::Gelu => "gelu",
            Op::CosineNormalize => "cosine_normalize",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    /// Per-row statistics saved for backward (inverse std, norms).
    aux: Vec<T>,
}

/// Define-by-run tape. Every op method evaluates eagerly and records itself.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    by_name: HashMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var, Vec<usize>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter; zeros when the output does not depend on it.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, v, dims)| self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(dims.clone())))
    }

    /// All parameter gradients in registration order.
    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(n, v, dims)| {
                let g = self.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(dims.clone()));
                (n.clone(), g)
            })
            .collect()
    }

    /// Consumes the gradients, yielding flat buffers in parameter registration order.
    pub fn into_param_buffers(mut self) -> Vec<Vec<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(_, v, dims)| match self.grads[v.0].take() {
                Some(t) => t.into_data(),
                None => vec![T::zero(); dims.iter().product()],
            })
            .collect()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn split_last(dims: &[usize]) -> (usize, usize) {
    let n = dims.last().copied().unwrap_or(1);
    let total: usize = dims.iter().product();
    (total / n, n)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|n| &n.value)
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.by_name.get(name).copied()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, aux: Vec<T>) -> Result<Var> {
        let id = self.nodes.len();
        // Additive -inf masks are legal operands of add/sub; NaN never is.
        let bad = match op {
            Op::Add | Op::Sub => value.data().iter().any(|x| x.is_nan()),
            _ => !value.all_finite(),
        };
        if bad {
            return Err(TensorError::NonFinite { node: id, op: op.name() });
        }
        let requires_grad = matches!(op, Op::Param) || inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, aux });
        Ok(Var(id))
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Input, inputs: Vec::new(), value, requires_grad: false, aux: Vec::new() });
        Var(id)
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<Var> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op: Op::Param, inputs: Vec::new(), value, requires_grad: true, aux: Vec::new() });
        self.params.push((name.clone(), Var(id)));
        self.by_name.insert(name, Var(id));
        Ok(Var(id))
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let value = if ta.dims() == tb.dims() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.dims().to_vec(), data)?
        } else {
            let out = broadcast_dims(ta.dims(), tb.dims())
                .ok_or_else(|| mismatch(op.name(), format!("{:?} vs {:?}", ta.dims(), tb.dims())))?;
            let sa = broadcast_strides(ta.dims(), &out);
            let sb = broadcast_strides(tb.dims(), &out);
            let mut data = vec![T::zero(); out.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            broadcast_walk(&out, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
            Tensor::new(out, data)?
        };
        self.push(op, vec![a, b], value, Vec::new())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op<T>, x: Var, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.node(x)?.value.map(f);
        self.push(op, vec![x], value, Vec::new())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.unary(Op::Scale(c), x, |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, T::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, x, T::ln)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sqrt, x, T::sqrt)
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Result<Var> {
        self.unary(Op::ClampMin(lo), x, |v| v.max(lo))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
        let half = T::c(0.5);
        self.unary(Op::Gelu, x, |v| half * v * (T::one() + (v * r2).erf()))
    }

    /// Batched matrix product. `a` is `[..., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[..., k, n]` with the same batch prefix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (da, db) = (ta.dims(), tb.dims());
        if da.len() < 2 || db.len() < 2 {
            return Err(mismatch("matmul", format!("operands must be at least 2-D: {da:?} vs {db:?}")));
        }
        let (m, k) = (da[da.len() - 2], da[da.len() - 1]);
        let (kb, n) = (db[db.len() - 2], db[db.len() - 1]);
        let prefix = &da[..da.len() - 2];
        let shared_b = db.len() == 2;
        if kb != k || (!shared_b && &db[..db.len() - 2] != prefix) {
            return Err(mismatch("matmul", format!("{da:?} x {db:?}")));
        }
        let batch: usize = prefix.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bi = if shared_b { tb.data() } else { &tb.data()[i * k * n..(i + 1) * k * n] };
            gemm(false, false, m, k, n, &ta.data()[i * m * k..], bi, T::zero(), &mut out[i * m * n..]);
        }
        let mut dims = prefix.to_vec();
        dims.extend([m, n]);
        let value = Tensor::new(dims, out)?;
        self.push(Op::MatMul { batch, m, k, n, shared_b }, vec![a, b], value, Vec::new())
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let t = &self.node(x)?.value;
        let dims = t.dims();
        if axis >= dims.len() {
            return Err(mismatch("sum", format!("axis {axis} out of range for {dims:?}")));
        }
        let outer: usize = dims[..axis].iter().product();
        let n = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let src = t.data();
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean {
            let inv = T::one() / T::c(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut od = dims.to_vec();
        od.remove(axis);
        let value = Tensor::new(od, out)?;
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        self.push(op, vec![x], value, Vec::new())
    }

    /// Sum over one axis, removing it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean over one axis, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(dims.to_vec())?;
        self.push(Op::Reshape, vec![x], value, Vec::new())
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = &self.node(x)?.value;
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..t.rank()).collect::<Vec<_>>() {
            return Err(mismatch("permute", format!("{perm:?} is not a permutation of rank {}", t.rank())));
        }
        let (dims, data) = kernels::permute(t.data(), t.dims(), perm);
        let value = Tensor::new(dims, data)?;
        self.push(Op::Permute(perm.to_vec()), vec![x], value, Vec::new())
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, a0: usize, a1: usize) -> Result<Var> {
        let rank = self.node(x)?.value.rank();
        if a0 >= rank || a1 >= rank {
            return Err(mismatch("transpose", format!("axes {a0},{a1} for rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a0, a1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.node(*xs.first().ok_or_else(|| mismatch("concat", "no operands".into()))?)?;
        let base = first.value.dims().to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let d = self.node(v)?.value.dims();
            let same = d.len() == base.len() && d.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(mismatch("concat", format!("{d:?} vs {base:?} along axis {axis}")));
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = &self.nodes[v.0].value;
                let w = t.dims()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let value = Tensor::new(dims, data)?;
        self.push(Op::Concat { axis }, xs.to_vec(), value, Vec::new())
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = &self.node(x)?.value;
        let dims = t.dims();
        if axis >= dims.len() || len == 0 || start + len > dims[axis] {
            return Err(mismatch("slice", format!("[{start}, {}) on axis {axis} of {dims:?}", start + len)));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let n = dims[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut od = dims.to_vec();
        od[axis] = len;
        let value = Tensor::new(od, data)?;
        self.push(Op::Slice { axis, start }, vec![x], value, Vec::new())
    }

    /// Selects rows along the leading axis: `out[i] = x[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = &self.node(x)?.value;
        let dims = t.dims();
        if dims.is_empty() || index.is_empty() || index.iter().any(|&i| i >= dims[0]) {
            return Err(mismatch("gather", format!("index out of range for {dims:?}")));
        }
        let row: usize = dims[1..].iter().product();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index.iter() {
            data.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
        }
        let mut od = dims.to_vec();
        od[0] = index.len();
        let value = Tensor::new(od, data)?;
        self.push(Op::Gather(index), vec![x], value, Vec::new())
    }

    /// Softmax over the last axis. Entries of `-inf` get zero mass.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (rows, n) = split_last(t.dims());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(t.dims().to_vec(), out)?;
        self.push(Op::Softmax, vec![x], value, Vec::new())
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (rows, n) = split_last(t.dims());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(t.dims().to_vec(), out)?;
        self.push(Op::LogSoftmax, vec![x], value, Vec::new())
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, x: Var, eps: T) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (rows, n) = split_last(t.dims());
        let nf = T::c(n as f64);
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let value = Tensor::new(t.dims().to_vec(), out)?;
        self.push(Op::LayerNorm, vec![x], value, inv_std)
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn cosine_normalize(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (rows, n) = split_last(t.dims());
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm == T::zero() {
                return Err(TensorError::ZeroNorm { node: self.nodes.len() });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(t.dims().to_vec(), out)?;
        self.push(Op::CosineNormalize, vec![x], value, norms)
    }

    /// Reverse pass from `out`, seeded with `seed` (same dims as `out`).
    pub fn backward(&self, out: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyGraph);
        }
        let root = self.node(out)?;
        if root.value.dims() != seed.dims() {
            return Err(mismatch("backward", format!("seed {:?} for output {:?}", seed.dims(), root.value.dims())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].as_ref() else { continue };
            for (input, contribution) in self.vjp(node, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.dims().to_vec(), d).expect("grad matches value dims")))
            .collect();
        let params = self.params.iter().map(|(n, v)| (n.clone(), *v, self.nodes[v.0].value.dims().to_vec())).collect();
        Ok(Gradients { grads, params })
    }

    /// Vector-Jacobian products of one node for each of its inputs that needs one.
    fn vjp(&self, node: &Node<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let y = &node.value;
        let out_dims = y.dims();
        let mut res = Vec::with_capacity(node.inputs.len());
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add | Op::Sub => {
                let sign = if matches!(node.op, Op::Sub) { -T::one() } else { T::one() };
                if wants(0) {
                    res.push((node.inputs[0], kernels::reduce_to(g, out_dims, val(0).dims())));
                }
                if wants(1) {
                    let mut gb = kernels::reduce_to(g, out_dims, val(1).dims());
                    gb.iter_mut().for_each(|v| *v *= sign);
                    res.push((node.inputs[1], gb));
                }
            }
            Op::Mul | Op::Div => {
                let (a, b) = (val(0), val(1));
                let sa = broadcast_strides(a.dims(), out_dims);
                let sb = broadcast_strides(b.dims(), out_dims);
                let (da, db) = (a.data(), b.data());
                let mut ga = wants(0).then(|| vec![T::zero(); da.len()]);
                let mut gb = wants(1).then(|| vec![T::zero(); db.len()]);
                let div = matches!(node.op, Op::Div);
                broadcast_walk(out_dims, &sa, &sb, |o, i, j| {
                    if div {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] += g[o] / db[j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] -= g[o] * da[i] / (db[j] * db[j]);
                        }
                    } else {
                        if let Some(ga) = ga.as_mut() {
                            ga[i] += g[o] * db[j];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[j] += g[o] * da[i];
                        }
                    }
                });
                if let Some(ga) = ga {
                    res.push((node.inputs[0], ga));
                }
                if let Some(gb) = gb {
                    res.push((node.inputs[1], gb));
                }
            }
            Op::Scale(c) => res.push((node.inputs[0], g.iter().map(|&v| v * *c).collect())),
            Op::Exp => res.push((node.inputs[0], g.iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect())),
            Op::Log => {
                res.push((node.inputs[0], g.iter().zip(val(0).data()).map(|(&gv, &xv)| gv / xv).collect()))
            }
            Op::Sqrt => {
                let half = T::c(0.5);
                res.push((node.inputs[0], g.iter().zip(y.data()).map(|(&gv, &yv)| gv * half / yv).collect()))
            }
            Op::ClampMin(lo) => res.push((
                node.inputs[0],
                g.iter().zip(val(0).data()).map(|(&gv, &xv)| if xv > *lo { gv } else { T::zero() }).collect(),
            )),
            Op::Gelu => {
                let r2 = T::c(std::f64::consts::FRAC_1_SQRT_2);
                let rpi = T::c(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                let half = T::c(0.5);
                let d = g
                    .iter()
                    .zip(val(0).data())
                    .map(|(&gv, &x)| {
                        let cdf = half * (T::one() + (x * r2).erf());
                        let pdf = rpi * (-half * x * x).exp();
                        gv * (cdf + x * pdf)
                    })
                    .collect();
                res.push((node.inputs[0], d));
            }
            &Op::MatMul { batch, m, k, n, shared_b } => {
                let (a, b) = (val(0).data(), val(1).data());
                if wants(0) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let bi = if shared_b { b } else { &b[i * k * n..] };
                        gemm(false, true, m, n, k, &g[i * m * n..], bi, T::zero(), &mut ga[i * m * k..]);
                    }
                    res.push((node.inputs[0], ga));
                }
                if wants(1) {
                    let mut gb = vec![T::zero(); if shared_b { k * n } else { batch * k * n }];
                    for i in 0..batch {
                        if shared_b {
                            gemm(true, false, k, m, n, &a[i * m * k..], &g[i * m * n..], T::one(), &mut gb);
                        } else {
                            gemm(true, false, k, m, n, &a[i * m * k..], &g[i * m * n..], T::zero(), &mut gb[i * k * n..]);
                        }
                    }
                    res.push((node.inputs[1], gb));
                }
            }
            &Op::Sum { axis } | &Op::Mean { axis } => {
                let dims = val(0).dims();
                let outer: usize = dims[..axis].iter().product();
                let n = dims[axis];
                let inner: usize = dims[axis + 1..].iter().product();
                let scale = if matches!(node.op, Op::Mean { .. }) { T::one() / T::c(n as f64) } else { T::one() };
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                res.push((node.inputs[0], gx));
            }
            Op::Reshape => res.push((node.inputs[0], g.to_vec())),
            Op::Permute(perm) => {
                let inv = kernels::inverse_perm(perm);
                let (_, gx) = kernels::permute(g, out_dims, &inv);
                res.push((node.inputs[0], gx));
            }
            &Op::Concat { axis } => {
                let outer: usize = out_dims[..axis].iter().product();
                let inner: usize = out_dims[axis + 1..].iter().product();
                let total = out_dims[axis];
                let mut offset = 0;
                for (idx, &input) in node.inputs.iter().enumerate() {
                    let w = val(idx).dims()[axis];
                    if self.nodes[input.0].requires_grad {
                        let mut gx = Vec::with_capacity(outer * w * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[start..start + w * inner]);
                        }
                        res.push((input, gx));
                    }
                    offset += w;
                }
            }
            &Op::Slice { axis, start } => {
                let dims = val(0).dims();
                let outer: usize = dims[..axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let (n, len) = (dims[axis], out_dims[axis]);
                let mut gx = vec![T::zero(); val(0).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((node.inputs[0], gx));
            }
            Op::Gather(index) => {
                let x = val(0);
                let row: usize = x.dims()[1..].iter().product();
                let mut gx = vec![T::zero(); x.len()];
                for (o, &i) in index.iter().enumerate() {
                    for (d, &s) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[o * row..(o + 1) * row]) {
                        *d += s;
                    }
                }
                res.push((node.inputs[0], gx));
            }
            Op::Softmax => {
                let (rows, n) = split_last(out_dims);
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y.data()[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        gx[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((node.inputs[0], gx));
            }
            Op::LogSoftmax => {
                let (rows, n) = split_last(out_dims);
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y.data()[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..n {
                        gx[r * n + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                res.push((node.inputs[0], gx));
            }
            Op::LayerNorm => {
                let (rows, n) = split_last(out_dims);
                let nf = T::c(n as f64);
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y.data()[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    let is = node.aux[r];
                    for j in 0..n {
                        gx[r * n + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                res.push((node.inputs[0], gx));
            }
            Op::CosineNormalize => {
                let (rows, n) = split_last(out_dims);
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y.data()[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let norm = node.aux[r];
                    for j in 0..n {
                        gx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                res.push((node.inputs[0], gx));
            }
        }
        res
    }
}
