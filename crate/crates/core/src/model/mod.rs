//! "Swinlet": a small hierarchical windowed-attention classifier.
//!
//! Patch embedding, then stages of residual-post-norm blocks that alternate
//! regular and shifted windows, 2×2 patch merging between stages, and a
//! pooled linear head. Attention is scaled cosine attention with a learnable,
//! clamped per-head temperature and a learned relative-position bias table.

mod attention;
pub mod window;

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::checkpoint::Checkpoint;
use crate::rng;
use crate::tensor::{grad_check, Graph, Scalar, Tensor, TensorError, Var};

pub use attention::cosine_attention;

pub const NUM_CLASSES: usize = 7;
pub const TAU_MIN: f64 = 0.01;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("expected {expected}×{expected}×3 input, got {got:?}")]
    InputSize { expected: usize, got: Vec<usize> },
    #[error("checkpoint does not match model: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub patch: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub num_classes: usize,
    pub mlp_ratio: usize,
    pub drop_path_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch: 4,
            window: 4,
            embed_dim: 32,
            depths: vec![2, 2],
            heads: vec![2, 4],
            num_classes: NUM_CLASSES,
            mlp_ratio: 4,
            drop_path_rate: 0.2,
        }
    }
}

/// Resolved geometry of one stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageGeometry {
    pub resolution: usize,
    pub window: usize,
    pub shift: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<Vec<StageGeometry>> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.patch == 0 || self.input_size == 0 || !self.input_size.is_multiple_of(self.patch) {
            return bad(format!("input_size {} not divisible by patch {}", self.input_size, self.patch));
        }
        if self.depths.is_empty() || self.depths.len() != self.heads.len() {
            return bad(format!("depths {:?} and heads {:?} must be non-empty and equally long", self.depths, self.heads));
        }
        if self.window == 0 || self.embed_dim == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("window, embed_dim, num_classes and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        let mut res = self.input_size / self.patch;
        let mut dim = self.embed_dim;
        let mut out = Vec::with_capacity(self.depths.len());
        for (s, (&depth, &heads)) in self.depths.iter().zip(&self.heads).enumerate() {
            if s > 0 {
                if !res.is_multiple_of(2) {
                    return bad(format!("stage {s}: resolution {res} cannot be merged 2×2"));
                }
                res /= 2;
                dim *= 2;
            }
            let window = self.window.min(res);
            if !res.is_multiple_of(window) {
                return bad(format!("stage {s}: token grid {res} not divisible by window {window}"));
            }
            if depth == 0 || heads == 0 || !dim.is_multiple_of(heads) {
                return bad(format!("stage {s}: dim {dim} with {heads} heads and depth {depth}"));
            }
            let shift = if res > window { window / 2 } else { 0 };
            out.push(StageGeometry { resolution: res, window, shift, dim, heads, depth });
        }
        Ok(out)
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct BlockLayout {
    shift: bool,
    qkv_w: usize,
    qkv_b: usize,
    log_tau: usize,
    rel_bias: usize,
    proj_w: usize,
    proj_b: usize,
    norm1: (usize, usize),
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    norm2: (usize, usize),
    keep_prob: f64,
}

#[derive(Clone, Debug)]
struct StageLayout<T> {
    geom: StageGeometry,
    blocks: Vec<BlockLayout>,
    part: Arc<[usize]>,
    unpart: Arc<[usize]>,
    part_shift: Arc<[usize]>,
    unpart_shift: Arc<[usize]>,
    mask_shift: Option<Tensor<T>>,
    rel_index: Arc<[usize]>,
    /// Patch merging into the next stage: (gather order, linear weight, norm).
    merge: Option<(Arc<[usize]>, usize, (usize, usize))>,
}

#[derive(Clone, Debug)]
struct Layout<T> {
    patch_index: Arc<[usize]>,
    patch_w: usize,
    patch_b: usize,
    patch_norm: (usize, usize),
    stages: Vec<StageLayout<T>>,
    head_norm: (usize, usize),
    head_w: usize,
    head_b: usize,
}

/// Outputs of one forward pass on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[num_classes]`
    pub logits: Var,
    /// Pooled penultimate features, `[final_dim]`.
    pub features: Var,
}

/// Drop-path decisions for one sample: `true` keeps the residual branch.
/// Two entries per block (attention branch, MLP branch).
pub type DropMask = Vec<bool>;

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    layout: Layout<T>,
}

struct ParamInit<'a, T> {
    params: Vec<(String, Tensor<T>)>,
    rng: &'a mut rng::Rng,
}

impl<T: Scalar> ParamInit<'_, T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push((name, t));
        self.params.len() - 1
    }

    fn trunc_normal(&mut self, name: String, dims: &[usize], std: f64) -> usize {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(self.rng);
                if z.abs() <= 2.0 {
                    break T::c(z * std);
                }
            })
            .collect();
        self.push(name, Tensor::new(dims.to_vec(), data).expect("dims match"))
    }

    fn zeros(&mut self, name: String, dims: &[usize]) -> usize {
        self.push(name, Tensor::zeros(dims.to_vec()))
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> (usize, usize) {
        let g = self.push(format!("{prefix}.gamma"), Tensor::ones(vec![dim]));
        let b = self.zeros(format!("{prefix}.beta"), &[dim]);
        (g, b)
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a model with freshly initialized weights.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let stages = cfg.validate()?;
        let mut r = rng::stream(seed, &[0x6d6f_6465_6c]);
        let mut init = ParamInit { params: Vec::new(), rng: &mut r };
        let std = 0.02;
        let patch_in = cfg.patch * cfg.patch * 3;
        let patch_w = init.trunc_normal("patch_embed.weight".into(), &[patch_in, cfg.embed_dim], std);
        let patch_b = init.zeros("patch_embed.bias".into(), &[cfg.embed_dim]);
        let patch_norm = init.norm("patch_embed.norm", cfg.embed_dim);

        let total = cfg.total_blocks();
        let mut block_no = 0;
        let mut stage_layouts = Vec::with_capacity(stages.len());
        for (s, geom) in stages.iter().enumerate() {
            let (c, h, w) = (geom.dim, geom.heads, geom.window);
            let hidden = c * cfg.mlp_ratio;
            let mut blocks = Vec::with_capacity(geom.depth);
            for b in 0..geom.depth {
                let p = format!("stages.{s}.blocks.{b}");
                let rate = if total > 1 { cfg.drop_path_rate * block_no as f64 / (total - 1) as f64 } else { 0.0 };
                blocks.push(BlockLayout {
                    shift: b % 2 == 1 && geom.shift > 0,
                    qkv_w: init.trunc_normal(format!("{p}.attn.qkv.weight"), &[c, 3 * c], std),
                    qkv_b: init.zeros(format!("{p}.attn.qkv.bias"), &[3 * c]),
                    log_tau: init.zeros(format!("{p}.attn.log_tau"), &[h]),
                    rel_bias: init.trunc_normal(format!("{p}.attn.rel_bias"), &[(2 * w - 1) * (2 * w - 1), h], std),
                    proj_w: init.trunc_normal(format!("{p}.attn.proj.weight"), &[c, c], std),
                    proj_b: init.zeros(format!("{p}.attn.proj.bias"), &[c]),
                    norm1: init.norm(&format!("{p}.norm1"), c),
                    fc1_w: init.trunc_normal(format!("{p}.mlp.fc1.weight"), &[c, hidden], std),
                    fc1_b: init.zeros(format!("{p}.mlp.fc1.bias"), &[hidden]),
                    fc2_w: init.trunc_normal(format!("{p}.mlp.fc2.weight"), &[hidden, c], std),
                    fc2_b: init.zeros(format!("{p}.mlp.fc2.bias"), &[c]),
                    norm2: init.norm(&format!("{p}.norm2"), c),
                    keep_prob: 1.0 - rate,
                });
                block_no += 1;
            }
            let merge = (s + 1 < stages.len()).then(|| {
                let wgt = init.trunc_normal(format!("stages.{s}.merge.weight"), &[4 * c, 2 * c], std);
                let norm = init.norm(&format!("stages.{s}.merge.norm"), 2 * c);
                (window::arc(window::merge_index(geom.resolution)), wgt, norm)
            });
            let part = window::partition_index(geom.resolution, w, 0);
            let part_shift = window::partition_index(geom.resolution, w, geom.shift);
            let mask_shift = (geom.shift > 0).then(|| {
                let m = window::shift_mask(geom.resolution, w, geom.shift);
                let nw = (geom.resolution / w).pow(2);
                Tensor::new(vec![nw, 1, w * w, w * w], m.into_iter().map(T::c).collect()).expect("mask dims")
            });
            stage_layouts.push(StageLayout {
                geom: geom.clone(),
                blocks,
                unpart: window::arc(window::inverse_index(&part)),
                part: window::arc(part),
                unpart_shift: window::arc(window::inverse_index(&part_shift)),
                part_shift: window::arc(part_shift),
                mask_shift,
                rel_index: window::arc(window::relative_index(w)),
                merge,
            });
        }
        let last_dim = stages.last().expect("validated non-empty").dim;
        let head_norm = init.norm("head.norm", last_dim);
        let head_w = init.trunc_normal("head.weight".into(), &[last_dim, cfg.num_classes], std);
        let head_b = init.zeros("head.bias".into(), &[cfg.num_classes]);
        let layout = Layout {
            patch_index: window::arc(window::patch_index(cfg.input_size, cfg.patch)),
            patch_w,
            patch_b,
            patch_norm,
            stages: stage_layouts,
            head_norm,
            head_w,
            head_b,
        };
        Ok(Self { cfg: cfg.clone(), params: init.params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.stages.last().map(|s| s.geom.dim).unwrap_or(0)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    /// Replaces every parameter from a checkpoint with matching names and dims.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.tensors.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                ck.tensors.len(),
                self.params.len()
            )));
        }
        for (name, t) in self.params.iter_mut() {
            let src = ck.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing {name}")))?;
            if src.dims() != t.dims() {
                return Err(ModelError::Checkpoint(format!("{name}: dims {:?} vs {:?}", src.dims(), t.dims())));
            }
            *t = src.to_tensor();
        }
        Ok(())
    }

    pub fn from_checkpoint(cfg: &ModelConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = Self::build(cfg, 0)?;
        m.load_checkpoint(ck)?;
        Ok(m)
    }

    /// Registers all parameters on a tape, in model order.
    pub fn register(&self, g: &mut Graph<T>) -> Result<Vec<Var>> {
        self.params.iter().map(|(n, t)| g.param(n.clone(), t.clone()).map_err(Into::into)).collect()
    }

    /// Draws per-sample drop-path decisions from the depth schedule.
    pub fn sample_drop_mask(&self, r: &mut rng::Rng) -> DropMask {
        self.layout
            .stages
            .iter()
            .flat_map(|s| s.blocks.iter())
            .flat_map(|b| [b.keep_prob, b.keep_prob])
            .map(|keep| keep >= 1.0 || r.random::<f64>() < keep)
            .collect()
    }

    fn linear(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = g.matmul(x, w)?;
        Ok(match b {
            Some(b) => g.add(y, b)?,
            None => y,
        })
    }

    fn affine_norm(g: &mut Graph<T>, x: Var, norm: (Var, Var)) -> Result<Var> {
        let n = g.layernorm(x, T::c(LN_EPS))?;
        let n = g.mul(n, norm.0)?;
        Ok(g.add(n, norm.1)?)
    }

    /// Applies a residual branch under drop path: dropped branches contribute
    /// nothing, kept ones are rescaled by `1 / keep_prob`.
    fn residual(g: &mut Graph<T>, x: Var, branch: Var, keep: Option<bool>, keep_prob: f64) -> Result<Var> {
        match keep {
            Some(false) => Ok(x),
            Some(true) if keep_prob < 1.0 => {
                let scaled = g.scale(branch, T::c(1.0 / keep_prob))?;
                Ok(g.add(x, scaled)?)
            }
            _ => Ok(g.add(x, branch)?),
        }
    }

    /// Records the forward pass for one normalized `input_size × input_size × 3`
    /// image. `drop` is `None` in eval mode.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        image: &Tensor<T>,
        drop: Option<&[bool]>,
    ) -> Result<ForwardOutput> {
        let side = self.cfg.input_size;
        if image.dims() != [side, side, 3] {
            return Err(ModelError::InputSize { expected: side, got: image.dims().to_vec() });
        }
        let lay = &self.layout;
        let v = |i: usize| vars[i];
        let p = self.cfg.patch;
        let pixels = g.input(image.clone().reshape(vec![side * side, 3])?);
        let patches = g.gather(pixels, lay.patch_index.clone())?;
        let n_tok = (side / p) * (side / p);
        let patches = g.reshape(patches, &[n_tok, p * p * 3])?;
        let x = Self::linear(g, patches, v(lay.patch_w), Some(v(lay.patch_b)))?;
        let mut x = Self::affine_norm(g, x, (v(lay.patch_norm.0), v(lay.patch_norm.1)))?;

        let mut branch = 0;
        for stage in &lay.stages {
            let geo = &stage.geom;
            let mask = stage.mask_shift.as_ref().map(|m| g.input(m.clone()));
            for blk in &stage.blocks {
                let (part, unpart, mask) = if blk.shift {
                    (&stage.part_shift, &stage.unpart_shift, mask)
                } else {
                    (&stage.part, &stage.unpart, None)
                };
                let attn = self.window_attention(g, vars, x, stage, blk, part, unpart, mask)?;
                let attn = Self::affine_norm(g, attn, (v(blk.norm1.0), v(blk.norm1.1)))?;
                x = Self::residual(g, x, attn, drop.map(|d| d[branch]), blk.keep_prob)?;
                let hdn = Self::linear(g, x, v(blk.fc1_w), Some(v(blk.fc1_b)))?;
                let hdn = g.gelu(hdn)?;
                let hdn = Self::linear(g, hdn, v(blk.fc2_w), Some(v(blk.fc2_b)))?;
                let hdn = Self::affine_norm(g, hdn, (v(blk.norm2.0), v(blk.norm2.1)))?;
                x = Self::residual(g, x, hdn, drop.map(|d| d[branch + 1]), blk.keep_prob)?;
                branch += 2;
            }
            if let Some((index, w, norm)) = &stage.merge {
                let r = geo.resolution / 2;
                let merged = g.gather(x, index.clone())?;
                let merged = g.reshape(merged, &[r * r, 4 * geo.dim])?;
                let merged = Self::linear(g, merged, v(*w), None)?;
                x = Self::affine_norm(g, merged, (v(norm.0), v(norm.1)))?;
            }
        }
        let x = Self::affine_norm(g, x, (v(lay.head_norm.0), v(lay.head_norm.1)))?;
        let features = g.mean(x, 0)?;
        let dim = self.feature_dim();
        let row = g.reshape(features, &[1, dim])?;
        let logits = Self::linear(g, row, v(lay.head_w), None)?;
        let logits = g.reshape(logits, &[self.cfg.num_classes])?;
        let logits = g.add(logits, v(lay.head_b))?;
        Ok(ForwardOutput { logits, features })
    }

    #[allow(clippy::too_many_arguments)]
    fn window_attention(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        stage: &StageLayout<T>,
        blk: &BlockLayout,
        part: &Arc<[usize]>,
        unpart: &Arc<[usize]>,
        mask: Option<Var>,
    ) -> Result<Var> {
        let geo = &stage.geom;
        let (c, h, w) = (geo.dim, geo.heads, geo.window);
        let (t, d) = (w * w, c / h);
        let nw = (geo.resolution / w).pow(2);
        let qkv = Self::linear(g, x, vars[blk.qkv_w], Some(vars[blk.qkv_b]))?;
        let qkv = g.gather(qkv, part.clone())?;
        let qkv = g.reshape(qkv, &[nw, t, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut qkv_parts = [x; 3];
        for (i, slot) in qkv_parts.iter_mut().enumerate() {
            let s = g.slice(qkv, 0, i, 1)?;
            *slot = g.reshape(s, &[nw, h, t, d])?;
        }
        let [q, k, vv] = qkv_parts;
        let tau = g.exp(vars[blk.log_tau])?;
        let bias = g.gather(vars[blk.rel_bias], stage.rel_index.clone())?;
        let bias = g.transpose(bias, 0, 1)?;
        let bias = g.reshape(bias, &[h, t, t])?;
        let out = cosine_attention(g, q, k, vv, tau, Some(bias), mask)?;
        let out = g.permute(out, &[0, 2, 1, 3])?;
        let out = g.reshape(out, &[nw * t, c])?;
        let out = g.gather(out, unpart.clone())?;
        Self::linear(g, out, vars[blk.proj_w], Some(vars[blk.proj_b]))
    }

    /// Eval-mode logits for a batch of normalized images, `[B, num_classes]`.
    pub fn forward_logits(&self, batch: &[Tensor<T>]) -> Result<Tensor<T>> {
        let k = self.cfg.num_classes;
        let rows: Vec<Vec<T>> = batch
            .par_iter()
            .map(|img| {
                let mut g = Graph::new();
                let vars = self.register(&mut g)?;
                let out = self.forward_graph(&mut g, &vars, img, None)?;
                Ok(g.value(out.logits).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::new(vec![batch.len(), k], rows.concat())?)
    }

    /// Eval-mode pooled features for one normalized image.
    pub fn features(&self, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let vars = self.register(&mut g)?;
        let out = self.forward_graph(&mut g, &vars, image, None)?;
        Ok(g.value(out.features).data().to_vec())
    }
}

/// Tiny classifier configs used by [`classifier_gradcheck`] and its step:
/// a single window, and two stages with shifted windows and a patch merge.
/// Many components of the second are ~1e-6, so it uses a larger step to keep
/// the roundoff floor below the tolerance.
pub fn gradcheck_configs() -> Vec<(&'static str, ModelConfig, f64)> {
    let tiny = |input, depths: Vec<usize>, heads: Vec<usize>| ModelConfig {
        input_size: input,
        embed_dim: 8,
        depths,
        heads,
        drop_path_rate: 0.0,
        ..Default::default()
    };
    vec![
        ("classifier (single window)", tiny(16, vec![1], vec![1]), 1e-5),
        ("classifier (shifted, two stages)", tiny(32, vec![2, 1], vec![2, 2]), 1e-4),
    ]
}

/// Finite-difference check of the full classifier composed with the
/// label-smoothed cross entropy, over every parameter (f64).
pub fn classifier_gradcheck(cfg: &ModelConfig, eps: f64) -> Result<f64> {
    let m = Model::<f64>::build(cfg, 11)?;
    let mut r = rng::stream(2, &[]);
    let img = Tensor::new(vec![cfg.input_size, cfg.input_size, 3], (0..cfg.input_size * cfg.input_size * 3).map(|_| r.random::<f64>() * 2.0 - 1.0).collect())?;
    let k = cfg.num_classes;
    let q: Vec<f64> = (0..k).map(|c| if c == 3 % k { 0.9 + 0.1 / k as f64 } else { 0.1 / k as f64 }).collect();
    // Perturb the freshly initialized weights so gradients are not degenerate.
    let mut r = rng::stream(77, &[]);
    let point: Vec<(String, Tensor<f64>)> = m.params().iter().map(|(n, t)| (n.clone(), t.map(|v| v + 0.3 * (r.random::<f64>() - 0.5)))).collect();
    let err = grad_check(&point, eps, |g, vars| {
        let out = m.forward_graph(g, vars, &img, None).map_err(|e| match e {
            ModelError::Tensor(t) => t,
            other => TensorError::ShapeMismatch { op: "forward", detail: other.to_string() },
        })?;
        let ls = g.log_softmax(out.logits)?;
        let qv = g.input(Tensor::new(vec![k], q.clone())?);
        let prod = g.mul(ls, qv)?;
        let s = g.sum_all(prod)?;
        g.neg(s)
    })?;
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input: usize, depths: Vec<usize>, heads: Vec<usize>, embed: usize) -> ModelConfig {
        ModelConfig { input_size: input, embed_dim: embed, depths, heads, drop_path_rate: 0.0, ..Default::default() }
    }

    fn image<T: Scalar>(side: usize, seed: u64) -> Tensor<T> {
        let mut r = rng::stream(seed, &[]);
        Tensor::from_fn(vec![side, side, 3], |_| T::c(r.random::<f64>() * 2.0 - 1.0))
    }

    #[test]
    fn param_count_is_seed_independent() {
        let cfg = ModelConfig::default();
        let a = Model::<f32>::build(&cfg, 1).unwrap();
        let b = Model::<f32>::build(&cfg, 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        assert_ne!(a.params()[0].1, b.params()[0].1);
    }

    #[test]
    fn same_seed_gives_identical_checkpoint_bytes() {
        let cfg = ModelConfig::default();
        let a = Model::<f32>::build(&cfg, 9).unwrap().to_checkpoint().to_bytes();
        let b = Model::<f32>::build(&cfg, 9).unwrap().to_checkpoint().to_bytes();
        assert_eq!(a, b);
    }

    #[test]
    fn single_stage_logits_have_seven_entries() {
        let cfg = tiny(64, vec![1], vec![1], 8);
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let out = m.forward_logits(&[image(64, 3)]).unwrap();
        assert_eq!(out.dims(), &[1, 7]);
        assert!(out.all_finite());
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = ModelConfig { window: 3, ..Default::default() };
        assert!(matches!(Model::<f32>::build(&cfg, 0), Err(ModelError::Config(_))));
        cfg = ModelConfig { drop_path_rate: 1.0, ..Default::default() };
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        cfg = ModelConfig { heads: vec![3, 4], ..Default::default() };
        assert!(Model::<f32>::build(&cfg, 0).is_err());
        let m = Model::<f32>::build(&tiny(32, vec![1], vec![1], 8), 0).unwrap();
        assert!(matches!(m.forward_logits(&[image(64, 0)]), Err(ModelError::InputSize { .. })));
    }

    #[test]
    fn eval_is_deterministic_and_train_without_drop_path_matches() {
        let cfg = tiny(32, vec![2, 2], vec![1, 2], 8);
        let m = Model::<f32>::build(&cfg, 5).unwrap();
        let img = image::<f32>(32, 1);
        let a = m.forward_logits(std::slice::from_ref(&img)).unwrap();
        let b = m.forward_logits(std::slice::from_ref(&img)).unwrap();
        assert_eq!(a, b);
        let mut r = rng::stream(0, &[]);
        let drop = m.sample_drop_mask(&mut r);
        assert!(drop.iter().all(|&k| k));
        let mut g = Graph::new();
        let vars = m.register(&mut g).unwrap();
        let out = m.forward_graph(&mut g, &vars, &img, Some(&drop)).unwrap();
        assert_eq!(g.value(out.logits).data(), a.data());
    }

    #[test]
    fn flipping_input_changes_logits() {
        let cfg = tiny(32, vec![2], vec![2], 8);
        let m = Model::<f64>::build(&cfg, 5).unwrap();
        let img = image::<f64>(32, 4);
        let mut flipped = img.clone();
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    flipped.data_mut()[(y * 32 + x) * 3 + c] = img.data()[(y * 32 + 31 - x) * 3 + c];
                }
            }
        }
        let out = m.forward_logits(&[img, flipped]).unwrap();
        let (a, b) = out.data().split_at(7);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn drop_path_survival_decays_linearly() {
        let cfg = ModelConfig { drop_path_rate: 0.2, depths: vec![2, 3], ..Default::default() };
        let m = Model::<f32>::build(&cfg, 0).unwrap();
        let keeps: Vec<f64> = m.layout.stages.iter().flat_map(|s| s.blocks.iter().map(|b| b.keep_prob)).collect();
        let expect = [1.0, 0.95, 0.9, 0.85, 0.8];
        for (k, e) in keeps.iter().zip(expect) {
            assert!((k - e).abs() < 1e-12);
        }
    }

    fn classifier_ce_gradcheck(cfg: &ModelConfig, eps: f64) -> f64 {
        classifier_gradcheck(cfg, eps).unwrap()
    }

    #[test]
    fn single_window_classifier_gradcheck() {
        let err = classifier_ce_gradcheck(&tiny(16, vec![1], vec![1], 8), 1e-5);
        assert!(err < 1e-5, "max rel error {err}");
    }

    #[test]
    fn shifted_two_stage_classifier_gradcheck() {
        // Many gradient components here are ~1e-6; at a 1e-5 step the roundoff
        // floor (~1e-11 absolute) alone approaches the tolerance.
        let err = classifier_ce_gradcheck(&tiny(32, vec![2, 1], vec![2, 2], 8), 1e-4);
        assert!(err < 1e-5, "max rel error {err}");
    }
}
