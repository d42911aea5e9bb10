//! The JSON run configuration. One document with sections `data`, `model`,
//! `augment`, `mix`, `optim`, `tta` and `run`; every field is optional and
//! unknown fields are rejected. `config.schema.md` is generated from the
//! defaults and [`FIELD_DOCS`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::TsneConfig;
use crate::augment::AugConfig;
use crate::ensemble::{SoupMode, TtaConfig};
use crate::mix_loss::MixConfig;
use crate::model::ModelConfig;
use crate::train::{FinetuneConfig, OptimConfig, StageConfig};

use super::synth::SynthConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Manifest CSV; relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    /// Used by `synth` (and by `pipeline` when the manifest does not exist yet).
    pub synth: SynthConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { manifest: PathBuf::from("data/manifest.csv"), synth: SynthConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub joint: OptimConfig,
    pub finetune: OptimConfig,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            joint: OptimConfig { peak_lr: 1e-3, warmup_epochs: 2.0, total_epochs: 15, batch_size: 16, ..OptimConfig::desk() },
            finetune: OptimConfig { peak_lr: 3e-4, warmup_epochs: 1.0, total_epochs: 10, batch_size: 16, ..OptimConfig::desk() },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Channel histograms + radial power spectrum; needs no trained model.
    #[default]
    Histogram,
    /// Pooled features of the joint-stage model.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Number of folds per subset.
    pub k: usize,
    /// Average the k fold models' test predictions; off evaluates fold 0 only.
    pub soups: bool,
    pub soup_mode: SoupMode,
    /// Apply test-time augmentation to fine-tuned model predictions.
    pub tta: bool,
    /// Run the distribution analysis first.
    pub analyze: bool,
    pub encoder: EncoderKind,
    pub tsne: TsneConfig,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            k: 5,
            soups: true,
            soup_mode: SoupMode::Prob,
            tta: true,
            analyze: true,
            encoder: EncoderKind::Histogram,
            tsne: TsneConfig::default(),
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub augment: AugConfig,
    pub mix: MixConfig,
    pub optim: OptimSection,
    pub tta: TtaConfig,
    pub run: RunSection,
}

impl RunConfig {
    /// Parses a (partial) config. The document is deep-merged onto the
    /// defaults first, so any missing field takes the documented default of
    /// its own position (e.g. `optim.finetune.peak_lr`).
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let parse = |source| ConfigError::Parse { path: origin.into(), source };
        let user: Value = serde_json::from_str(text).map_err(parse)?;
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative manifest path is resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        if cfg.data.manifest.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.manifest = dir.join(&cfg.data.manifest);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(e);
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.augment.validate().map_err(|e| bad(e.to_string()))?;
        self.mix.validate().map_err(bad)?;
        self.optim.joint.validate().map_err(|e| bad(format!("optim.joint: {e}")))?;
        self.optim.finetune.validate().map_err(|e| bad(format!("optim.finetune: {e}")))?;
        self.tta.validate().map_err(|e| bad(e.to_string()))?;
        self.run.tsne.validate().map_err(|e| bad(e.to_string()))?;
        if self.augment.crop_size != self.model.input_size {
            return Err(bad(format!(
                "augment.crop_size ({}) must equal model.input_size ({})",
                self.augment.crop_size, self.model.input_size
            )));
        }
        if self.run.k < 2 {
            return Err(bad("run.k must be at least 2".into()));
        }
        Ok(())
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let stage = |optim: &OptimConfig| StageConfig { aug: self.augment.clone(), mix: self.mix.clone(), optim: optim.clone() };
        FinetuneConfig { model: self.model.clone(), joint: stage(&self.optim.joint), finetune: stage(&self.optim.finetune), k: self.run.k }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// One line of documentation per config field. Keys are dotted paths; `*`
/// stands for either optimizer stage.
pub const FIELD_DOCS: &[(&str, &str)] = &[
    ("data.manifest", "Manifest CSV (`sample_id,relpath,subset,class_id,split,fold`); relative to the config file."),
    ("data.synth.side", "Synthetic image side in pixels."),
    ("data.synth.train_per_class", "Synthetic training images per (subset, class)."),
    ("data.synth.test_per_class", "Synthetic test images per (subset, class)."),
    ("data.synth.seed", "Generator seed; identical seeds give byte-identical files."),
    ("data.synth.shift", "Subset-B acquisition shift (hue, brightness, contrast); 0 = same distribution."),
    ("data.synth.noise", "Per-pixel Gaussian noise standard deviation."),
    ("data.synth.hue_jitter", "Per-image hue jitter in degrees."),
    ("data.synth.freq_jitter", "Per-image stripe-frequency jitter in cycles per image."),
    ("model.input_size", "Square input resolution; must equal `augment.crop_size`."),
    ("model.patch", "Patch size of the patch embedding."),
    ("model.window", "Attention window side in tokens."),
    ("model.embed_dim", "Channel width of the first stage; doubles at each patch merge."),
    ("model.depths", "Blocks per stage; consecutive blocks alternate plain and shifted windows."),
    ("model.heads", "Attention heads per stage."),
    ("model.num_classes", "Number of output classes."),
    ("model.mlp_ratio", "MLP hidden width as a multiple of the stage width."),
    ("model.drop_path_rate", "Stochastic-depth rate of the last block (linear from 0)."),
    ("augment.enabled", "Apply training augmentation; when off, images are only resized."),
    ("augment.crop_size", "Output side of the random resized crop."),
    ("augment.crop_area", "Crop area range as a fraction of the image (above 1 zooms out)."),
    ("augment.crop_aspect", "Crop aspect-ratio range (log-uniform)."),
    ("augment.flip_prob", "Horizontal flip probability."),
    ("augment.randaug_n", "RandAugment policies applied per image."),
    ("augment.randaug_level", "RandAugment magnitude on the 0–10 scale."),
    ("augment.pool", "RandAugment policy names; empty = all 15."),
    ("augment.erase_prob", "Random erasing probability."),
    ("augment.erase_area", "Erased area range as a fraction of the image."),
    ("augment.erase_aspect", "Erased rectangle aspect-ratio range (log-uniform)."),
    ("augment.mean", "Per-channel normalization mean."),
    ("augment.std", "Per-channel normalization standard deviation."),
    ("mix.enabled", "Apply CutMix/MixUp to training batches."),
    ("mix.cutmix_alpha", "Beta(α, α) parameter of CutMix."),
    ("mix.mixup_alpha", "Beta(α, α) parameter of MixUp."),
    ("mix.cutmix_prob", "Probability a batch uses CutMix rather than MixUp."),
    ("mix.smoothing", "Label smoothing ε applied before mixing."),
    ("optim.*.peak_lr", "Learning rate reached at the end of warmup."),
    ("optim.*.warmup_epochs", "Linear warmup length in epochs."),
    ("optim.*.total_epochs", "Stage length in epochs."),
    ("optim.*.batch_size", "Samples per optimizer step."),
    ("optim.*.weight_decay", "Decoupled weight decay on `.weight` tensors."),
    ("optim.*.betas", "AdamW moment decay rates."),
    ("optim.*.eps", "AdamW denominator epsilon."),
    ("optim.*.eta_min", "Learning rate at the end of the cosine decay."),
    ("tta.scales", "Resize factors of the deterministic views; must include 1."),
    ("tta.flip", "Add the mirrored version of every scale view."),
    ("tta.crop_views", "Random square crop views per image."),
    ("tta.crop_area", "Crop area range of the random views (above 1 zooms out)."),
    ("run.seed", "Master seed; every stream is derived from it."),
    ("run.k", "Folds per subset."),
    ("run.soups", "Average the k fold models' predictions; off evaluates fold 0 only."),
    ("run.soup_mode", "`Prob` (mean probability) or `LogProb` (normalized geometric mean)."),
    ("run.tta", "Use test-time augmentation for fine-tuned model predictions."),
    ("run.analyze", "Run the distribution analysis before training."),
    ("run.encoder", "Analysis encoder: `histogram` or `model` (joint-stage features)."),
    ("run.tsne.perplexity", "t-SNE perplexity, clamped to (N−1)/3."),
    ("run.tsne.iters", "t-SNE gradient iterations."),
    ("run.tsne.early_exaggeration", "Affinity exaggeration during the early phase."),
    ("run.tsne.exaggeration_iters", "Length of the early phase (momentum 0.5)."),
    ("run.tsne.learning_rate", "t-SNE step size."),
    ("run.tsne.momentum", "Momentum during the early phase."),
    ("run.tsne.final_momentum", "Momentum after the early phase."),
    ("run.tsne.seed", "Seed of the t-SNE initialization."),
    ("run.threads", "Worker threads; 0 = all cores. The `--threads` flag overrides it."),
];

fn doc_for(path: &str) -> Option<&'static str> {
    let generic = path.replacen("optim.joint.", "optim.*.", 1).replacen("optim.finetune.", "optim.*.", 1);
    FIELD_DOCS.iter().find(|(k, _)| *k == generic).map(|(_, d)| *d)
}

/// Dotted paths and default values of every leaf field.
pub fn leaf_fields() -> Vec<(String, Value)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => out.push((prefix.to_string(), v.clone())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(RunConfig::default()).expect("config serializes"), &mut out);
    out
}

/// The Markdown reference of every config field and its default.
pub fn schema_markdown() -> String {
    let mut s = String::from(
        "# Run configuration\n\n\
         Generated from the defaults; regenerate with `DSUP_BLESS=1 cargo test -p dsup-core schema`.\n\n\
         A config is one JSON document. Every field is optional and falls back to the default below;\n\
         unknown fields are rejected. Relative `data.manifest` paths resolve against the config file.\n",
    );
    let mut section = String::new();
    for (path, default) in leaf_fields() {
        let top = path.split('.').next().unwrap_or_default().to_string();
        if top != section {
            write!(s, "\n## `{top}`\n\n| field | default | description |\n|---|---|---|\n").unwrap();
            section = top;
        }
        let doc = doc_for(&path).unwrap_or("");
        writeln!(s, "| `{path}` | `{default}` | {doc} |").unwrap();
    }
    s
}
