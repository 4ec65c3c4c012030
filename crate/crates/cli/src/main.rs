use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ksam::{
    export_prompts, load_coarse, load_split, lock_path, pin_checkpoint, prepare_manifest,
    run_eval, synthesize, SourceSpec,
};
use ksam_core::clustering::Clusterer;
use ksam_core::dataset::{preprocess, DatasetId, Split};
use ksam_core::harness::{
    compare_clusterers, render_markdown, CoarseModelConfig, ExperimentConfig, MetricReport,
    ReportFormat, SegmenterConfig,
};
use ksam_core::prelim::{EncoderName, EncoderSpec, Target, TrainConfig};
use ksam_core::prompting::PromptConfig;
use ksam_core::segmenter::BackboneId;
use ksam_models::{train_model, TrainOptions};

#[derive(Parser)]
#[command(name = "ksam", version, about = "Automatic point prompts for lung-field segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset manifests.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a coarse lung or heart U-Net.
    Train(TrainArgs),
    /// Export point prompts for a split.
    Prompts(PromptArgs),
    /// Segmenter checkpoints.
    #[command(subcommand)]
    Sam(SamCommand),
    /// Run the full pipeline on a split and score it.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired comparison of two runs on the same split.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Also write the comparison as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a finished run's report.
    Report {
        /// Run directory; repeat to put several runs in one markdown table.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Split annotated images 70/10/20 per dataset and write a manifest.
    Prepare {
        /// Dataset directory holding `images/` and `lung_masks/`; repeatable.
        #[arg(long = "root", required = true)]
        roots: Vec<PathBuf>,
        /// Heart mask directory for the root in the same position; repeatable.
        #[arg(long = "heart-masks")]
        heart_masks: Vec<PathBuf>,
        /// Dataset name for the root in the same position (default: from the directory name).
        #[arg(long = "dataset")]
        datasets: Vec<DatasetId>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset with lung and heart masks plus its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    target: Target,
    #[arg(long, default_value = "vgg19")]
    encoder: EncoderName,
    #[arg(long)]
    manifest: PathBuf,
    /// Parent directory; the model goes to `<out>/<target>_<encoder>`.
    #[arg(long)]
    out: PathBuf,
    /// ImageNet encoder weights (safetensors). Without them the encoder starts from scratch.
    #[arg(long)]
    pretrained_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 3)]
    patience: usize,
    #[arg(long, default_value_t = 0.001)]
    min_delta: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Divide every channel width by this (1 = standard network).
    #[arg(long, default_value_t = 1)]
    width_divisor: usize,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Trained lung model directory.
    #[arg(long)]
    lung_model: PathBuf,
    /// Trained heart model directory.
    #[arg(long)]
    heart_model: PathBuf,
    #[arg(long, default_value = "kmedoids")]
    clusterer: Clusterer,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum SamCommand {
    /// Hash a checkpoint and pin it in the lock file.
    Lock {
        #[arg(long)]
        backbone: BackboneId,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `checkpoints.lock` next to the checkpoint.
        #[arg(long)]
        lock: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Data(cmd) => data(cmd),
        Command::Train(args) => train(args),
        Command::Prompts(args) => prompts(args),
        Command::Sam(SamCommand::Lock {
            backbone,
            checkpoint,
            lock,
        }) => {
            let cfg = SegmenterConfig {
                backend: Default::default(),
                backbone,
                checkpoint: Some(checkpoint.clone()),
                lock,
            };
            let lock_file = lock_path(&cfg).expect("checkpoint given");
            let sha = pin_checkpoint(&lock_file, backbone, &checkpoint)?;
            println!("pinned {backbone} {sha} in {}", lock_file.display());
            Ok(())
        }
        Command::Eval { config } => {
            let config = ExperimentConfig::load(&config)?;
            let report = run_eval(&config)?;
            print!("{}", report.to_markdown());
            println!("wrote {}", config.output_dir.display());
            Ok(())
        }
        Command::Compare { a, b, out } => {
            let ra = MetricReport::load_run(&a)?;
            let rb = MetricReport::load_run(&b)?;
            let cmp = compare_clusterers(&ra, &rb)?;
            print!("{}", cmp.to_markdown());
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&cmp)? + "\n")
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            Ok(())
        }
        Command::Report { runs, format } => {
            let reports = runs
                .iter()
                .map(|r| MetricReport::load_run(r))
                .collect::<ksam_core::Result<Vec<_>>>()?;
            match format {
                ReportFormat::Md => print!("{}", render_markdown(&reports)),
                _ if reports.len() > 1 => bail!("only the md format combines several runs"),
                _ => print!("{}", reports[0].render(format)?),
            }
            Ok(())
        }
    }
}

fn data(cmd: DataCommand) -> Result<()> {
    match cmd {
        DataCommand::Prepare {
            roots,
            heart_masks,
            datasets,
            seed,
            out,
        } => {
            if heart_masks.len() > roots.len() || datasets.len() > roots.len() {
                bail!("--heart-masks and --dataset may not outnumber --root");
            }
            let sources: Vec<SourceSpec> = roots
                .into_iter()
                .enumerate()
                .map(|(i, root)| SourceSpec {
                    root,
                    heart_masks: heart_masks.get(i).cloned(),
                    dataset: datasets.get(i).copied(),
                })
                .collect();
            let split = prepare_manifest(&sources, seed)?;
            split.save(&out)?;
            println!(
                "wrote {}: {} train, {} val, {} test",
                out.display(),
                split.train.len(),
                split.val.len(),
                split.test.len()
            );
            Ok(())
        }
        DataCommand::Synth { out, count, seed } => {
            let manifest = synthesize(&out, count, seed)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let load = |split| -> Result<Vec<_>> {
        load_split(&args.manifest, split)?
            .iter()
            .map(|r| Ok(preprocess(&r.load()?)))
            .collect()
    };
    let train = load(Split::Train)?;
    let val = load(Split::Val)?;
    let config = TrainConfig {
        max_epochs: args.epochs,
        patience: args.patience,
        min_delta: args.min_delta,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        target: args.target,
        seed: args.seed,
    };
    let encoder = EncoderSpec {
        name: args.encoder,
        pretrained: args.pretrained_weights.is_some(),
    };
    if !encoder.pretrained {
        tracing::warn!("no --pretrained-weights; training the encoder from scratch");
    }
    let options = TrainOptions {
        width_divisor: args.width_divisor,
        pretrained_weights: args.pretrained_weights.clone(),
    };
    let model = train_model(&train, &val, encoder, &config, &options)?;
    let dir = args.out.join(format!("{}_{}", args.target, args.encoder));
    model.save(&dir)?;
    let meta = model.meta();
    let best = meta
        .best_epoch
        .and_then(|e| meta.history.get(e - 1))
        .map_or(f64::NAN, |r| r.val_dice);
    println!(
        "wrote {} (best epoch {:?}, val dice {best:.4})",
        dir.display(),
        meta.best_epoch
    );
    Ok(())
}

fn prompts(args: PromptArgs) -> Result<()> {
    let (lung, _) = load_coarse(&CoarseModelConfig::Unet {
        path: args.lung_model,
    })?;
    let (heart, _) = load_coarse(&CoarseModelConfig::Unet {
        path: args.heart_model,
    })?;
    let prompt = PromptConfig {
        clusterer: args.clusterer,
        seed: args.seed,
        ..PromptConfig::default()
    };
    let export = export_prompts(
        &args.manifest,
        args.split,
        lung.as_ref(),
        heart.as_ref(),
        prompt,
        &args.out,
    )?;
    println!("wrote {} prompt files to {}", export.written, args.out.display());
    for (id, err) in &export.failed {
        eprintln!("{id}: {err}");
    }
    Ok(())
}
