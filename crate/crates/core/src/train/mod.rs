//! Training: the learning-rate schedule, AdamW, stratified folds, one
//! training stage, and two-stage continuous fine-tuning (a joint stage on
//! both subsets, then a k-fold fine-tune per subset).

mod folds;
mod optim;
mod schedule;

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::augment::{self, AugConfig, AugmentError};
use crate::data::checkpoint::Checkpoint;
use crate::data::{Sample, Subset};
use crate::mix_loss::{self, MixConfig};
use crate::model::{Model, ModelConfig, ModelError};
use crate::rng;
use crate::tensor::{Graph, Tensor};

pub use folds::{kfold_split, FoldSplit};
pub use optim::{decays, AdamW};
pub use schedule::{lr_at, OptimConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("epoch position {t} outside [0, {total}]")]
    Schedule { t: f64, total: f64 },
    #[error("subset {subset} class {class} has {count} samples, fewer than k = {k}")]
    CellTooSmall { subset: Subset, class: usize, count: usize, k: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} has no training samples")]
    EmptyData(StageSpec),
    #[error("non-finite loss in {spec} at epoch {epoch}, step {step}")]
    NonFinite { spec: StageSpec, epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Joint,
    FineTune(Subset),
}

/// Identifies one training run, for logs, seeds and error provenance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageSpec {
    pub stage: Stage,
    pub fold: Option<usize>,
}

impl StageSpec {
    pub fn joint() -> Self {
        Self { stage: Stage::Joint, fold: None }
    }

    pub fn finetune(subset: Subset, fold: usize) -> Self {
        Self { stage: Stage::FineTune(subset), fold: Some(fold) }
    }

    pub fn stage_name(&self) -> &'static str {
        match self.stage {
            Stage::Joint => "joint",
            Stage::FineTune(_) => "finetune",
        }
    }

    pub fn subset_name(&self) -> String {
        match self.stage {
            Stage::Joint => "AB".into(),
            Stage::FineTune(s) => s.to_string(),
        }
    }

    fn seed(&self, seed: u64) -> u64 {
        let (tag, subset) = match self.stage {
            Stage::Joint => (1, 0),
            Stage::FineTune(s) => (2, s as u64 + 1),
        };
        rng::derive(seed, &[0x7374_6167_65, tag, subset, self.fold.map_or(u64::MAX, |f| f as u64)])
    }
}

impl fmt::Display for StageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage (subset {}", self.stage_name(), self.subset_name())?;
        if let Some(k) = self.fold {
            write!(f, ", fold {k}")?;
        }
        write!(f, ")")
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub spec: StageSpec,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,subset,fold,train_loss,val_acc,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{},{:e}",
            self.epoch,
            self.spec.stage_name(),
            self.spec.subset_name(),
            self.spec.fold.map_or(-1, |f| f as i64),
            self.train_loss,
            self.val_acc.map_or(String::new(), |a| format!("{a:.6}")),
            self.lr
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Everything one training stage produces.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub spec: StageSpec,
    /// Weights of the epoch with the best held-out accuracy (ties: later
    /// epoch); the final weights when there is no held-out set.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub final_weights: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Augmentation, mixing and optimizer settings shared by a stage.
#[derive(Clone, Debug, Default)]
pub struct StageConfig {
    pub aug: AugConfig,
    pub mix: MixConfig,
    pub optim: OptimConfig,
}

/// Eval-mode top-1 accuracy (argmax, ties to the lowest class) as a fraction.
pub fn accuracy(model: &Model<f32>, samples: &[&Sample], aug: &AugConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = samples
        .par_iter()
        .map(|s| -> Result<usize> {
            let x = augment::eval_transform(&s.image, aug)?;
            let logits = model.forward_logits(std::slice::from_ref(&x))?;
            Ok(usize::from(argmax(logits.data()) == s.class_id))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / samples.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Loss and flat parameter gradients of one sample, seeded with `weight`.
fn sample_step(
    model: &Model<f32>,
    image: &Tensor<f32>,
    target: &[f64],
    drop: Option<&[bool]>,
    weight: f32,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let vars = model.register(&mut g)?;
    let out = model.forward_graph(&mut g, &vars, image, drop)?;
    let loss = mix_loss::sample_ce(&mut g, out.logits, target).map_err(ModelError::from)?;
    let value = f64::from(g.value(loss).data()[0]);
    let grads = g.backward(loss, &Tensor::scalar(weight)).map_err(ModelError::from)?;
    Ok((value, grads.into_param_buffers()))
}

/// Trains `model` in place for `cfg.optim.total_epochs` epochs.
pub fn train_stage(
    spec: StageSpec,
    model: &mut Model<f32>,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &StageConfig,
    seed: u64,
) -> Result<StageOutcome> {
    cfg.optim.validate()?;
    cfg.aug.validate()?;
    cfg.mix.validate().map_err(TrainError::Config)?;
    if train.is_empty() {
        return Err(TrainError::EmptyData(spec));
    }
    if cfg.aug.crop_size != model.config().input_size {
        return Err(TrainError::Config(format!(
            "augmentation crop size {} differs from model input size {}",
            cfg.aug.crop_size,
            model.config().input_size
        )));
    }
    let seed = spec.seed(seed);
    let k = model.config().num_classes;
    let bs = cfg.optim.batch_size;
    let steps = train.len().div_ceil(bs);
    let mut opt = AdamW::new(model.params());
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;

    for epoch in 0..cfg.optim.total_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng::stream(seed, &[0x6f72_6465_72, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let images = batch
                .par_iter()
                .map(|s| augment::train_augment(&s.image, &cfg.aug, &mut augment::sample_rng(seed, &s.id, epoch)))
                .collect::<Result<Vec<_>, _>>()?;
            let ids: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
            let mut mix_rng = rng::stream(seed, &[0x6d69_78, epoch as u64, step as u64]);
            let mixed = mix_loss::mix_batch(&images, &ids, k, &cfg.mix, &mut mix_rng);
            let weight = 1.0 / batch.len() as f32;
            let results = (0..batch.len())
                .into_par_iter()
                .map(|i| {
                    let x = augment::normalize(&mixed.images[i], cfg.aug.mean, cfg.aug.std)?;
                    let drop = model.sample_drop_mask(&mut rng::stream(
                        seed,
                        &[0x6472_6f70, epoch as u64, rng::hash_str(&batch[i].id)],
                    ));
                    sample_step(model, &x, &mixed.targets[i], Some(&drop), weight)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Option<Vec<Vec<f32>>> = None;
            let mut batch_loss = 0.0;
            for (l, g) in results {
                batch_loss += l;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                }
            }
            let batch_loss = batch_loss / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { spec, epoch, step });
            }
            loss_sum += batch_loss;
            lr = lr_at(epoch as f64 + step as f64 / steps as f64, &cfg.optim)?;
            opt.step(model.params_mut(), &grads.expect("non-empty batch"), lr, &cfg.optim)?;
        }
        let val_acc = if val.is_empty() { None } else { Some(accuracy(model, val, &cfg.aug)?) };
        let row = LogRow { epoch: epoch + 1, spec, train_loss: loss_sum / steps as f64, val_acc, lr };
        log::info!("{spec} epoch {}: loss {:.4} val_acc {:?} lr {:.3e}", row.epoch, row.train_loss, val_acc, lr);
        log.push(row);
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                best = Some((acc, epoch + 1, model.to_checkpoint()));
            }
        }
    }
    let final_weights = model.to_checkpoint();
    let (best, best_epoch) = match best {
        Some((_, e, ck)) => (ck, e),
        None => (final_weights.clone(), cfg.optim.total_epochs),
    };
    Ok(StageOutcome { spec, best, best_epoch, final_weights, log })
}

/// Settings of the two-stage procedure.
#[derive(Clone, Debug, Default)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub joint: StageConfig,
    pub finetune: StageConfig,
    pub k: usize,
}

#[derive(Clone, Debug)]
pub struct FoldRun {
    pub subset: Subset,
    pub fold: usize,
    pub outcome: StageOutcome,
}

#[derive(Clone, Debug)]
pub struct ContinuousOutcome {
    pub joint: StageOutcome,
    /// Subset-major, then fold order: `2k` runs.
    pub runs: Vec<FoldRun>,
}

/// The joint stage: a fresh model trained on every training sample, with no
/// held-out set.
pub fn train_joint(train: &[Sample], cfg: &FinetuneConfig, seed: u64) -> Result<StageOutcome> {
    let all: Vec<&Sample> = train.iter().collect();
    let mut model = Model::<f32>::build(&cfg.model, rng::derive(seed, &[0x696e_6974]))?;
    train_stage(StageSpec::joint(), &mut model, &all, &[], &cfg.joint, seed)
}

/// Leave-one-fold-out partition of `subset`'s training samples:
/// `(fit, val)` with `val` = the members of `fold`.
pub fn fold_partition<'a>(train: &'a [Sample], folds: &FoldSplit, subset: Subset, fold: usize) -> (Vec<&'a Sample>, Vec<&'a Sample>) {
    let members = train.iter().filter(|s| s.subset == subset);
    let (val, fit) = members.partition(|s| folds.fold_of(&s.id) == Some(fold));
    (fit, val)
}

/// One fine-tune: starts from `init`, trains on `subset` minus `fold` and
/// validates on `fold`.
pub fn finetune_fold(
    train: &[Sample],
    folds: &FoldSplit,
    subset: Subset,
    fold: usize,
    init: &Checkpoint,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<StageOutcome> {
    if fold >= folds.k {
        return Err(TrainError::Config(format!("fold {fold} out of range for k = {}", folds.k)));
    }
    let (fit, val) = fold_partition(train, folds, subset, fold);
    let mut model = Model::from_checkpoint(&cfg.model, init)?;
    train_stage(StageSpec::finetune(subset, fold), &mut model, &fit, &val, &cfg.finetune, seed)
}

/// Joint training on every training sample, then for each subset and fold a
/// fine-tune from the joint weights on the subset minus that fold,
/// validated on the fold.
pub fn continuous_finetune(
    train: &[Sample],
    folds: &FoldSplit,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_stage: impl FnMut(&StageOutcome),
) -> Result<ContinuousOutcome> {
    if cfg.k < 2 || folds.k != cfg.k {
        return Err(TrainError::Config(format!("k must be at least 2 and match the split (k = {}, split k = {})", cfg.k, folds.k)));
    }
    let joint = train_joint(train, cfg, seed)?;
    on_stage(&joint);
    let mut runs = Vec::new();
    for subset in Subset::ALL {
        for fold in 0..cfg.k {
            let outcome = finetune_fold(train, folds, subset, fold, &joint.final_weights, cfg, seed)?;
            on_stage(&outcome);
            runs.push(FoldRun { subset, fold, outcome });
        }
    }
    Ok(ContinuousOutcome { joint, runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::Image;
    use crate::data::Split;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            input_size: 16,
            patch: 4,
            window: 4,
            embed_dim: 8,
            depths: vec![1],
            heads: vec![1],
            drop_path_rate: 0.0,
            ..Default::default()
        }
    }

    fn separable(n: usize, subset: Subset) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let class = i % 2;
                let v = if class == 0 { 0.15 } else { 0.85 };
                Sample {
                    id: format!("{subset}{i}"),
                    image: Image::from_fn(16, 16, |y, x, c| (v + 0.02 * ((x + y + c + i) % 3) as f32).min(1.0)),
                    subset,
                    class_id: class,
                    split: Split::Train,
                }
            })
            .collect()
    }

    fn plain(epochs: usize, lr: f64) -> StageConfig {
        StageConfig {
            aug: AugConfig { enabled: false, crop_size: 16, ..Default::default() },
            mix: MixConfig { enabled: false, ..Default::default() },
            optim: OptimConfig { peak_lr: lr, warmup_epochs: 0.0, total_epochs: epochs, batch_size: 4, ..OptimConfig::desk() },
        }
    }

    #[test]
    fn loss_decreases_on_separable_data() {
        let data = separable(8, Subset::A);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut m = Model::build(&tiny_model(), 1).unwrap();
        let out = train_stage(StageSpec::joint(), &mut m, &refs, &refs, &plain(4, 3e-3), 5).unwrap();
        assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let data = separable(8, Subset::A);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut m = Model::build(&tiny_model(), 1).unwrap();
        let before = m.to_checkpoint();
        let out = train_stage(StageSpec::joint(), &mut m, &refs, &[], &plain(3, 0.0), 5).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
        assert_eq!(m.to_checkpoint(), before);
    }

    #[test]
    fn stage_is_deterministic() {
        let data = separable(6, Subset::B);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut cfg = plain(2, 1e-3);
        cfg.aug = AugConfig { crop_size: 16, ..Default::default() };
        cfg.mix = MixConfig::default();
        let run = || {
            let mut m = Model::build(&ModelConfig { drop_path_rate: 0.2, ..tiny_model() }, 3).unwrap();
            train_stage(StageSpec::finetune(Subset::B, 1), &mut m, &refs, &refs[..2], &cfg, 8).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_weights.to_bytes(), b.final_weights.to_bytes());
    }

    #[test]
    fn continuous_finetune_yields_two_k_runs_that_move_weights() {
        let mut data = separable(10, Subset::A);
        data.extend(separable(10, Subset::B));
        let keys: Vec<(String, Subset, usize)> = data.iter().map(|s| (s.id.clone(), s.subset, s.class_id)).collect();
        let folds = kfold_split(&keys, 2, 1).unwrap();
        let cfg = FinetuneConfig { model: tiny_model(), joint: plain(1, 1e-3), finetune: plain(1, 1e-3), k: 2 };
        let mut seen = 0;
        let out = continuous_finetune(&data, &folds, &cfg, 4, |_| seen += 1).unwrap();
        assert_eq!(out.runs.len(), 4);
        assert_eq!(seen, 5);
        for run in &out.runs {
            assert_ne!(run.outcome.final_weights, out.joint.final_weights);
        }
        let bad = FinetuneConfig { k: 1, ..cfg };
        assert!(continuous_finetune(&data, &folds, &bad, 4, |_| {}).is_err());
    }

    #[test]
    fn log_rows_format() {
        let row = LogRow { epoch: 3, spec: StageSpec::finetune(Subset::B, 2), train_loss: 1.5, val_acc: Some(0.75), lr: 1e-4 };
        assert_eq!(row.csv(), "3,finetune,B,2,1.500000,0.750000,1e-4");
        let j = LogRow { val_acc: None, spec: StageSpec::joint(), ..row };
        assert_eq!(j.csv(), "3,joint,AB,-1,1.500000,,1e-4");
    }
}
