//! The end-to-end workflow: analyze → k-fold split → joint training →
//! per-subset k-fold fine-tuning → TTA prediction → soup → evaluation.
//!
//! Output layout under the run directory:
//!
//! ```text
//! analysis/{tsne.csv,tsne.svg,class_hist.csv,overlap.csv}
//! manifest_folds.csv
//! joint/{model.dsup,log.csv,scores_notta.csv,scores.csv}
//! finetune/<subset>/fold<f>/{model.dsup,log.csv,scores.csv}
//! soup/scores.csv
//! report.csv
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::analysis::{self, AnalysisReport, HistogramEncoder, ModelEncoder};
use crate::ensemble::{self, display_percent, evaluate, exact_percent, predict_scores, soup, Metrics, PredictionMatrix, TtaConfig};
use crate::model::Model;
use crate::rng;
use crate::train::{self, kfold_split, FoldSplit, StageOutcome};

use super::checkpoint::Checkpoint;
use super::config::{EncoderKind, RunConfig};
use super::manifest::{Manifest, Split, Subset};
use super::synth::generate_synthetic;
use super::{load_samples, Sample};

/// A failure tagged with the pipeline stage it happened in. Artifacts of the
/// stages that finished stay on disk.
#[derive(Debug, Error)]
#[error("pipeline stage `{stage}` failed: {source}")]
pub struct PipelineError {
    pub stage: String,
    #[source]
    pub source: Box<dyn std::error::Error + Send + Sync>,
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Attaches stage provenance to any error.
pub trait StageContext<T> {
    fn stage(self, stage: impl Into<String>) -> Result<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: impl Into<String>) -> Result<T> {
        self.map_err(|e| PipelineError { stage: stage.into(), source: Box::new(e) })
    }
}

pub const BACKBONE: &str = "swinlet";
pub const REPORT_HEADER: &str = "stage,backbone,augmentation,tta,soups,acc_A,acc_B,mAcc,mAcc_exact";

/// One `report.csv` row, in the shape of an ablation-table row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportRow {
    pub stage: String,
    pub augmentation: String,
    pub tta: bool,
    pub soups: bool,
    pub metrics: Metrics,
}

impl ReportRow {
    pub fn csv(&self) -> String {
        let onoff = |b: bool| if b { "on" } else { "off" };
        format!(
            "{},{BACKBONE},{},{},{},{},{},{},{}",
            self.stage,
            self.augmentation,
            onoff(self.tta),
            onoff(self.soups),
            display_percent(&self.metrics.acc_a),
            display_percent(&self.metrics.acc_b),
            display_percent(&self.metrics.macc),
            exact_percent(&self.metrics.macc)
        )
    }
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Short description of the training augmentation, e.g. `rrc+flip+ra2m9+re+mix`.
pub fn augmentation_profile(cfg: &RunConfig) -> String {
    let a = &cfg.augment;
    let mut parts = Vec::new();
    if a.enabled {
        parts.push("rrc".to_string());
        if a.flip_prob > 0.0 {
            parts.push("flip".into());
        }
        if a.randaug_n > 0 {
            parts.push(format!("ra{}m{}", a.randaug_n, a.randaug_level));
        }
        if a.erase_prob > 0.0 {
            parts.push("re".into());
        }
    }
    if cfg.mix.enabled {
        parts.push("mix".into());
    }
    if cfg.mix.smoothing > 0.0 {
        parts.push("ls".into());
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join("+")
    }
}

pub fn joint_dir(out: &Path) -> PathBuf {
    out.join("joint")
}

pub fn fold_dir(out: &Path, subset: Subset, fold: usize) -> PathBuf {
    out.join("finetune").join(subset.to_string()).join(format!("fold{fold}"))
}

fn create_dir(dir: &Path, stage: &str) -> Result<()> {
    std::fs::create_dir_all(dir).stage(stage)
}

fn write_file(path: &Path, text: &str, stage: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))).stage(stage)
}

/// Loads the manifest, generating the synthetic dataset first when the
/// manifest file does not exist.
pub fn load_or_synthesize(cfg: &RunConfig) -> Result<(Manifest, Vec<Sample>)> {
    let path = &cfg.data.manifest;
    if !path.exists() {
        let dir = path.parent().unwrap_or(Path::new("."));
        log::info!("manifest {} not found; generating the synthetic dataset", path.display());
        generate_synthetic(&cfg.data.synth, dir).stage("synth")?;
        if !path.exists() {
            return Err(std::io::Error::other(format!("synthetic dataset did not create {}", path.display()))).stage("synth");
        }
    }
    let manifest = Manifest::load(path).stage("load manifest")?;
    let samples = load_samples(&manifest).stage("load images")?;
    Ok((manifest, samples))
}

/// The distribution analysis with the configured encoder.
pub fn run_analysis(cfg: &RunConfig, manifest: &Manifest, samples: &[Sample], model: Option<&Model<f32>>, dir: &Path) -> Result<AnalysisReport> {
    let tsne_cfg = analysis::TsneConfig { seed: rng::derive(cfg.run.seed, &[0x616e_61]) ^ cfg.run.tsne.seed, ..cfg.run.tsne.clone() };
    let report = match (cfg.run.encoder, model) {
        (EncoderKind::Model, Some(m)) => analysis::analyze(manifest, samples, &ModelEncoder { model: m, aug: &cfg.augment }, &tsne_cfg, dir),
        (EncoderKind::Model, None) => Err(analysis::AnalysisError::Config("the model encoder needs a trained checkpoint".into())),
        (EncoderKind::Histogram, _) => analysis::analyze(manifest, samples, &HistogramEncoder, &tsne_cfg, dir),
    }
    .stage("analyze")?;
    log::info!("analysis: subset overlap {:.3}, split overlap {:.3}", report.overlap_subset, report.overlap_split);
    Ok(report)
}

/// Stratified folds over the training rows.
pub fn split_folds(cfg: &RunConfig, samples: &[Sample]) -> Result<FoldSplit> {
    let keys: Vec<(String, Subset, usize)> = samples.iter().filter(|s| s.split == Split::Train).map(|s| (s.id.clone(), s.subset, s.class_id)).collect();
    kfold_split(&keys, cfg.run.k, rng::derive(cfg.run.seed, &[0x666f_6c64])).stage("kfold")
}

/// The manifest with its `fold` column filled for training rows. Image paths
/// become absolute so the file can be saved anywhere.
pub fn with_folds(manifest: &Manifest, folds: &FoldSplit) -> Manifest {
    let mut m = manifest.clone();
    let root = std::path::absolute(&manifest.root).unwrap_or_else(|_| manifest.root.clone());
    for r in &mut m.rows {
        r.fold = folds.fold_of(&r.sample_id);
        r.relpath = root.join(&r.relpath).display().to_string();
    }
    m
}

/// Recovers the fold assignment recorded in a manifest's `fold` column.
/// Every training row must carry a fold; `k` is one past the largest.
pub fn folds_from_manifest(manifest: &Manifest) -> Result<FoldSplit> {
    let stage = "read folds";
    let mut assignment = std::collections::BTreeMap::new();
    for r in manifest.rows.iter().filter(|r| r.split == Split::Train) {
        let f = r.fold.ok_or_else(|| std::io::Error::other(format!("training row {:?} has no fold; run `kfold` first", r.sample_id))).stage(stage)?;
        assignment.insert(r.sample_id.clone(), f);
    }
    let k = assignment.values().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(std::io::Error::other("manifest has fewer than two folds")).stage(stage);
    }
    Ok(FoldSplit { k, assignment })
}

/// Writes `model.dsup` (the given weights) and `log.csv` of a stage.
pub fn save_stage(outcome: &StageOutcome, weights: &Checkpoint, dir: &Path, stage: &str) -> Result<()> {
    create_dir(dir, stage)?;
    weights.save(&dir.join("model.dsup")).stage(stage)?;
    write_file(&dir.join("log.csv"), &train::log_csv(&outcome.log), stage)
}

/// Per-model prediction seed: independent of evaluation order.
pub fn predict_seed(seed: u64, subset: Option<Subset>, fold: Option<usize>) -> u64 {
    rng::derive(seed, &[0x7072_6564, subset.map_or(9, |s| s as u64), fold.map_or(u64::MAX, |f| f as u64)])
}

/// Test predictions of `model` on the given samples.
pub fn predict(cfg: &RunConfig, model: &Model<f32>, samples: &[&Sample], tta: &TtaConfig, seed: u64, stage: &str) -> Result<PredictionMatrix> {
    predict_scores(model, samples, &cfg.augment, tta, seed).stage(stage)
}

/// Ground truth of the test samples, in the shape `evaluate` expects.
pub fn labels(samples: &[&Sample]) -> (HashMap<String, usize>, HashMap<String, Subset>) {
    (samples.iter().map(|s| (s.id.clone(), s.class_id)).collect(), samples.iter().map(|s| (s.id.clone(), s.subset)).collect())
}

/// Everything a pipeline run measured.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub analysis: Option<AnalysisReport>,
    pub rows: Vec<ReportRow>,
    pub joint_notta: Metrics,
    pub joint_tta: Metrics,
    /// Fine-tuned fold models, fold order (A fold f paired with B fold f).
    pub folds: Vec<Metrics>,
    pub soup: Option<Metrics>,
}

/// Runs the whole workflow into `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineOutcome> {
    cfg.validate().stage("config")?;
    create_dir(out, "setup")?;
    write_file(&out.join("config.json"), &cfg.to_json(), "setup")?;
    let (manifest, samples) = load_or_synthesize(cfg)?;
    let seed = cfg.run.seed;

    let mut analysis_report = None;
    if cfg.run.analyze && cfg.run.encoder == EncoderKind::Histogram {
        analysis_report = Some(run_analysis(cfg, &manifest, &samples, None, &out.join("analysis"))?);
    }

    let folds = split_folds(cfg, &samples)?;
    with_folds(&manifest, &folds).save(&out.join("manifest_folds.csv")).stage("kfold")?;
    let train_set: Vec<Sample> = samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
    let test: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test).collect();
    let (label_of, subset_of) = labels(&test);
    let eval = |m: &PredictionMatrix, stage: &str| evaluate(m, &label_of, &subset_of).stage(stage.to_string());
    let ft = cfg.finetune_config();
    let profile = augmentation_profile(cfg);
    let row = |stage: &str, tta: bool, soups: bool, metrics: Metrics| ReportRow { stage: stage.into(), augmentation: profile.clone(), tta, soups, metrics };
    let mut rows = Vec::new();

    // Joint stage on both subsets.
    let stage = "joint";
    let joint = train::train_joint(&train_set, &ft, seed).stage(stage)?;
    save_stage(&joint, &joint.final_weights, &joint_dir(out), stage)?;
    let joint_model = Model::from_checkpoint(&cfg.model, &joint.final_weights).stage(stage)?;
    let joint_seed = predict_seed(seed, None, None);
    let plain = predict(cfg, &joint_model, &test, &TtaConfig::identity(), joint_seed, stage)?;
    plain.save(&joint_dir(out).join("scores_notta.csv")).stage(stage)?;
    let joint_notta = eval(&plain, stage)?;
    rows.push(row("joint", false, false, joint_notta));
    let with_tta = predict(cfg, &joint_model, &test, &cfg.tta, joint_seed, stage)?;
    with_tta.save(&joint_dir(out).join("scores.csv")).stage(stage)?;
    let joint_tta = eval(&with_tta, stage)?;
    rows.push(row("joint", true, false, joint_tta));
    log::info!("joint: no TTA {joint_notta}; TTA {joint_tta}");

    if cfg.run.analyze && cfg.run.encoder == EncoderKind::Model {
        analysis_report = Some(run_analysis(cfg, &manifest, &samples, Some(&joint_model), &out.join("analysis"))?);
    }

    // Continuous fine-tuning: one model per subset and fold.
    let fold_count = if cfg.run.soups { cfg.run.k } else { 1 };
    let tta = if cfg.run.tta { cfg.tta.clone() } else { TtaConfig::identity() };
    let mut per_fold: Vec<Vec<PredictionMatrix>> = vec![Vec::new(); fold_count];
    for subset in Subset::ALL {
        let subset_test: Vec<&Sample> = test.iter().copied().filter(|s| s.subset == subset).collect();
        for (fold, preds) in per_fold.iter_mut().enumerate() {
            let stage = format!("finetune {subset} fold {fold}");
            let outcome = train::finetune_fold(&train_set, &folds, subset, fold, &joint.final_weights, &ft, seed).stage(&stage)?;
            let dir = fold_dir(out, subset, fold);
            save_stage(&outcome, &outcome.best, &dir, &stage)?;
            let model = Model::from_checkpoint(&cfg.model, &outcome.best).stage(&stage)?;
            let scores = predict(cfg, &model, &subset_test, &tta, predict_seed(seed, Some(subset), Some(fold)), &stage)?;
            scores.save(&dir.join("scores.csv")).stage(&stage)?;
            log::info!("{stage}: best epoch {}", outcome.best_epoch);
            preds.push(scores);
        }
    }
    let mut fold_metrics = Vec::new();
    for (fold, parts) in per_fold.iter().enumerate() {
        let stage = format!("evaluate fold {fold}");
        let merged = PredictionMatrix::merge(parts).stage(&stage)?;
        let m = eval(&merged, &stage)?;
        log::info!("fold {fold}: {m}");
        rows.push(row(&format!("finetune-fold{fold}"), cfg.run.tta, false, m));
        fold_metrics.push(m);
    }

    let mut soup_metrics = None;
    if cfg.run.soups {
        let stage = "soup";
        let mut parts = Vec::new();
        for s in 0..Subset::ALL.len() {
            let members: Vec<PredictionMatrix> = per_fold.iter().map(|p| p[s].clone()).collect();
            parts.push(soup(&members, cfg.run.soup_mode).stage(stage)?);
        }
        let souped = PredictionMatrix::merge(&parts).stage(stage)?;
        create_dir(&out.join("soup"), stage)?;
        souped.save(&out.join("soup").join("scores.csv")).stage(stage)?;
        let m = eval(&souped, stage)?;
        log::info!("soup: {m}");
        rows.push(row("finetune-soup", cfg.run.tta, true, m));
        soup_metrics = Some(m);
    }

    write_file(&out.join("report.csv"), &report_csv(&rows), "report")?;
    Ok(PipelineOutcome { analysis: analysis_report, rows, joint_notta, joint_tta, folds: fold_metrics, soup: soup_metrics })
}

/// Human-readable summary of a finished run.
pub fn summary(o: &PipelineOutcome) -> String {
    let mut s = String::new();
    for r in &o.rows {
        writeln!(s, "{:<16} tta {:<3} soups {:<3} {}", r.stage, if r.tta { "on" } else { "off" }, if r.soups { "on" } else { "off" }, r.metrics).unwrap();
    }
    s
}

/// Reads the ground truth of a manifest's test split.
pub fn test_labels(manifest: &Manifest) -> (HashMap<String, usize>, HashMap<String, Subset>) {
    let test = manifest.rows.iter().filter(|r| r.split == Split::Test);
    (test.clone().map(|r| (r.sample_id.clone(), r.class_id)).collect(), test.map(|r| (r.sample_id.clone(), r.subset)).collect())
}

/// Evaluates a score file against a manifest.
pub fn evaluate_file(scores: &Path, manifest: &Manifest) -> Result<Metrics> {
    let m = PredictionMatrix::load(scores).stage("eval")?;
    let (l, s) = test_labels(manifest);
    evaluate(&m, &l, &s).stage("eval")
}

pub use ensemble::SoupMode;
