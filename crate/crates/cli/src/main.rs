//! `dsup`: command-line front end for the training, ensembling and analysis
//! pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dsup::data::checkpoint::Checkpoint;
use dsup::data::config::{EncoderKind, RunConfig};
use dsup::data::pipeline::{self, evaluate_file, fold_dir, folds_from_manifest, joint_dir, predict_seed, save_stage, summary};
use dsup::data::synth::generate_synthetic;
use dsup::data::{load_samples, Manifest, Sample, Split, Subset};
use dsup::ensemble::{self, display_percent, exact_percent, PredictionMatrix, SoupMode, TtaConfig};
use dsup::model::{classifier_gradcheck, gradcheck_configs, Model};
use dsup::tensor::{primitive_suite, SUITE_STEP};
use dsup::train;

#[derive(Parser)]
#[command(name = "dsup", version, about = "Windowed-attention classifier with continuous fine-tuning, TTA and k-fold prediction soups")]
struct Cli {
    /// JSON run configuration; every field is optional (see config.schema.md).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed` (and `data.synth.seed` for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact of the command.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads; overrides `run.threads` (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    A,
    B,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::A => Subset::A,
            SubsetArg::B => Subset::B,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Histogram,
    Model,
}

#[derive(Clone, Copy, ValueEnum)]
enum SoupArg {
    Prob,
    Logprob,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-subset dataset (PPM images + manifest.csv) into --out-dir.
    Synth,
    /// t-SNE, class histogram and overlap scores of a manifest's images.
    Analyze {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        encoder: Option<EncoderArg>,
        /// Weights for the model encoder.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Stratified k-fold split of the training rows; writes manifest_folds.csv.
    Kfold {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Joint stage: train from scratch on both subsets; writes joint/.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fine-tune one (subset, fold) from the joint weights; writes finetune/<subset>/fold<f>/.
    Finetune {
        #[arg(long, value_enum)]
        subset: SubsetArg,
        #[arg(long)]
        fold: usize,
        /// Manifest with a fold column (default: <out-dir>/manifest_folds.csv).
        #[arg(long)]
        folds: Option<PathBuf>,
        /// Starting weights (default: <out-dir>/joint/model.dsup).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Class probabilities of the test split; writes a score CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Only this subset's test images.
        #[arg(long, value_enum)]
        subset: Option<SubsetArg>,
        /// Evaluate the plain image only.
        #[arg(long)]
        no_tta: bool,
        /// Output file (default: <out-dir>/scores.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Average score files with identical sample ids.
    Soup {
        #[arg(required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "prob")]
        mode: SoupArg,
        /// Output file (default: <out-dir>/soup.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Per-subset accuracy and mAcc of a score file; writes metrics.csv.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Run everything: analyze, folds, joint, fine-tunes, TTA, soup, report.csv.
    Pipeline,
    /// Finite-difference check of every primitive op and the tiny classifier.
    Gradcheck,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    Ok(cfg)
}

fn load_manifest(cfg: &RunConfig, override_path: &Option<PathBuf>) -> Result<(Manifest, Vec<Sample>)> {
    let path = override_path.as_ref().unwrap_or(&cfg.data.manifest);
    let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
    let samples = load_samples(&m)?;
    Ok((m, samples))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if cfg.run.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global().context("configuring the thread pool")?;
    }
    let out = &cli.out_dir;
    match &cli.command {
        Command::Synth => {
            if let Some(s) = cli.seed {
                cfg.data.synth.seed = s;
            }
            let m = generate_synthetic(&cfg.data.synth, out)?;
            println!("wrote {} images and {}", m.len(), out.join("manifest.csv").display());
        }
        Command::Analyze { manifest, encoder, checkpoint } => {
            let (m, samples) = load_manifest(&cfg, manifest)?;
            if let Some(e) = encoder {
                cfg.run.encoder = match e {
                    EncoderArg::Histogram => EncoderKind::Histogram,
                    EncoderArg::Model => EncoderKind::Model,
                };
            }
            let model = match checkpoint {
                Some(p) => Some(Model::from_checkpoint(&cfg.model, &Checkpoint::load(p)?)?),
                None => None,
            };
            let dir = out.join("analysis");
            let r = pipeline::run_analysis(&cfg, &m, &samples, model.as_ref(), &dir)?;
            println!(
                "overlap(subset) {:.3} overlap(split) {:.3} t-SNE KL {:.4} -> {:.4}; wrote {}",
                r.overlap_subset,
                r.overlap_split,
                r.tsne.initial_kl,
                r.tsne.final_kl,
                dir.display()
            );
        }
        Command::Kfold { manifest } => {
            let (m, samples) = load_manifest(&cfg, manifest)?;
            let folds = pipeline::split_folds(&cfg, &samples)?;
            std::fs::create_dir_all(out)?;
            let path = out.join("manifest_folds.csv");
            pipeline::with_folds(&m, &folds).save(&path)?;
            let sizes: Vec<usize> = (0..folds.k).map(|f| folds.members(f).count()).collect();
            println!("{}-fold split, fold sizes {sizes:?}; wrote {}", folds.k, path.display());
        }
        Command::Train { manifest } => {
            let (_, samples) = load_manifest(&cfg, manifest)?;
            let train_set: Vec<Sample> = samples.into_iter().filter(|s| s.split == Split::Train).collect();
            let outcome = train::train_joint(&train_set, &cfg.finetune_config(), cfg.run.seed)?;
            save_stage(&outcome, &outcome.final_weights, &joint_dir(out), "joint")?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.train_loss);
            println!("joint stage done (final train loss {last:.4}); wrote {}", joint_dir(out).display());
        }
        Command::Finetune { subset, fold, folds, init } => {
            let folds_path = folds.clone().unwrap_or_else(|| out.join("manifest_folds.csv"));
            let (m, samples) = load_manifest(&cfg, &Some(folds_path))?;
            let split = folds_from_manifest(&m)?;
            let init = init.clone().unwrap_or_else(|| joint_dir(out).join("model.dsup"));
            let start = Checkpoint::load(&init).with_context(|| format!("loading {}", init.display()))?;
            let train_set: Vec<Sample> = samples.into_iter().filter(|s| s.split == Split::Train).collect();
            let mut ft = cfg.finetune_config();
            ft.k = split.k;
            let subset = Subset::from(*subset);
            let outcome = train::finetune_fold(&train_set, &split, subset, *fold, &start, &ft, cfg.run.seed)?;
            let dir = fold_dir(out, subset, *fold);
            save_stage(&outcome, &outcome.best, &dir, "finetune")?;
            println!("fine-tune {subset} fold {fold}: best epoch {}; wrote {}", outcome.best_epoch, dir.display());
        }
        Command::Predict { checkpoint, manifest, subset, no_tta, output } => {
            let (_, samples) = load_manifest(&cfg, manifest)?;
            let subset = subset.map(Subset::from);
            let test: Vec<&Sample> = samples.iter().filter(|s| s.split == Split::Test && subset.is_none_or(|x| s.subset == x)).collect();
            if test.is_empty() {
                bail!("no test images to predict");
            }
            let model = Model::from_checkpoint(&cfg.model, &Checkpoint::load(checkpoint)?)?;
            let tta = if *no_tta { TtaConfig::identity() } else { cfg.tta.clone() };
            let scores = ensemble::predict_scores(&model, &test, &cfg.augment, &tta, predict_seed(cfg.run.seed, subset, None))?;
            let path = output.clone().unwrap_or_else(|| out.join("scores.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            scores.save(&path)?;
            println!("{} test images x {} views; wrote {}", scores.len(), tta.view_count(), path.display());
        }
        Command::Soup { scores, mode, output } => {
            let matrices = scores.iter().map(|p| PredictionMatrix::load(p)).collect::<Result<Vec<_>, _>>()?;
            let mode = match mode {
                SoupArg::Prob => SoupMode::Prob,
                SoupArg::Logprob => SoupMode::LogProb,
            };
            let souped = ensemble::soup(&matrices, mode)?;
            let path = output.clone().unwrap_or_else(|| out.join("soup.csv"));
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            souped.save(&path)?;
            println!("averaged {} score files; wrote {}", matrices.len(), path.display());
        }
        Command::Eval { scores, manifest } => {
            let path = manifest.as_ref().unwrap_or(&cfg.data.manifest);
            let m = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
            let metrics = evaluate_file(scores, &m)?;
            println!("{metrics}");
            std::fs::create_dir_all(out)?;
            let csv = format!(
                "acc_A,acc_B,mAcc,mAcc_exact\n{},{},{},{}\n",
                display_percent(&metrics.acc_a),
                display_percent(&metrics.acc_b),
                display_percent(&metrics.macc),
                exact_percent(&metrics.macc)
            );
            std::fs::write(out.join("metrics.csv"), csv)?;
        }
        Command::Pipeline => {
            let outcome = pipeline::run_pipeline(&cfg, out)?;
            print!("{}", summary(&outcome));
            println!("wrote {}", out.join("report.csv").display());
        }
        Command::Gradcheck => {
            let mut failed = 0;
            let mut report = |name: &str, eps: f64, err: f64| {
                let ok = err < 1e-5;
                failed += usize::from(!ok);
                println!("{:<34} step {eps:.0e}  max rel err {err:.3e}  {}", name, if ok { "PASS" } else { "FAIL" });
            };
            for (name, err) in primitive_suite()? {
                report(name, SUITE_STEP, err);
            }
            for (name, model_cfg, eps) in gradcheck_configs() {
                report(name, eps, classifier_gradcheck(&model_cfg, eps)?);
            }
            if failed > 0 {
                bail!("{failed} gradient checks exceeded 1e-5");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
