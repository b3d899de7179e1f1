use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use bsfa::backbone::Model;
use bsfa::data::synthetic::{write_dataset, SyntheticConfig};
use bsfa::data::{load_dataset, resolve_split, DatasetPools, SplitPreset};
use bsfa::harness::config::parse_assignment;
use bsfa::harness::visualize::visualize_files;
use bsfa::harness::{evaluate_model, run_ablation, train, Config, TrainProgress, Variant};

#[derive(Parser)]
#[command(name = "bsfa", version, about = "Two-stage few-shot fine-grained recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Episodic training on the base split, then evaluation on the novel split.
    Train(RunArgs),
    /// Evaluates a checkpoint on the novel split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Trains and evaluates every requested ablation variant and writes the table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated variants; defaults to B0–B3 and C0–C4.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Writes the six suppression panels for each image.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "visualizations")]
        out_dir: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Renders the procedural species dataset.
    MakeSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 60)]
        images_per_class: usize,
        #[arg(long, default_value_t = 84)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: PathBuf,
    #[arg(long)]
    split_preset: Option<SplitPreset>,
    #[arg(long)]
    n_way: Option<usize>,
    #[arg(long)]
    k_shot: Option<usize>,
    /// Evaluation episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    use_gt_box: bool,
    #[arg(long, default_value = "runs/latest")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn config(&self, base: Option<&Path>) -> anyhow::Result<Config> {
        let mut cfg = match (&self.config, base) {
            (Some(p), _) => Config::from_file(p)?,
            (None, Some(p)) if p.is_file() => Config::from_file(p)?,
            _ => Config::default(),
        };
        let mut set = |k: &str, v: String| cfg.set(k, &v);
        if let Some(v) = self.n_way {
            set("episode.n_way", v.to_string())?;
        }
        if let Some(v) = self.k_shot {
            set("episode.k_shot", v.to_string())?;
        }
        if let Some(v) = self.episodes {
            set("eval.episodes", v.to_string())?;
        }
        if let Some(v) = self.seed {
            set("seed", v.to_string())?;
        }
        if let Some(v) = self.variant {
            set("variant", v.to_string())?;
        }
        if self.use_gt_box {
            set("data.use_gt_box", "true".into())?;
        }
        for o in &self.overrides {
            let (k, v) = parse_assignment(o)?;
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn pools(&self) -> anyhow::Result<DatasetPools> {
        let split = resolve_split(&self.dataset_root, self.split_preset)?;
        Ok(load_dataset(&self.dataset_root, &split)?)
    }
}

fn report_progress(p: TrainProgress<'_>) {
    if let TrainProgress::Epoch {
        epoch,
        mean_loss,
        mean_accuracy,
        val_accuracy,
    } = p
    {
        let val = val_accuracy.map_or(String::new(), |v| format!(" val_acc={v:.4}"));
        eprintln!("epoch {epoch}: loss={mean_loss:.4} train_acc={mean_accuracy:.4}{val}");
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config(None)?;
            let pools = args.pools()?;
            let (model, artifacts) = train(&cfg, &pools, &args.out_dir, &mut report_progress)?;
            let report = evaluate_model(&model, &cfg, &pools.novel, &pools.split.base, Some(&args.out_dir))?;
            println!(
                "{}-way {}-shot: {:.4} ± {:.4} over {} episodes (run dir {})",
                report.n_way,
                report.k_shot,
                report.mean_accuracy,
                report.ci95_halfwidth,
                report.n_episodes,
                artifacts.run_dir.display()
            );
        }
        Command::Eval { run, checkpoint } => {
            let snapshot = checkpoint.parent().map(|d| d.join("config.txt"));
            let cfg = run.config(snapshot.as_deref())?;
            let (model, meta) = Model::load(&checkpoint, cfg.train.dtype)?;
            if meta.backbone != cfg.backbone {
                bail!("checkpoint backbone {:?} differs from the configured {:?}", meta.backbone, cfg.backbone);
            }
            let pools = run.pools()?;
            std::fs::create_dir_all(&run.out_dir).with_context(|| run.out_dir.display().to_string())?;
            std::fs::write(run.out_dir.join("config.txt"), cfg.to_text())?;
            let report = evaluate_model(&model, &cfg, &pools.novel, &meta.base_classes, Some(&run.out_dir))?;
            println!(
                "{}-way {}-shot: {:.4} ± {:.4} over {} episodes",
                report.n_way, report.k_shot, report.mean_accuracy, report.ci95_halfwidth, report.n_episodes
            );
        }
        Command::Ablate { run, variants } => {
            let cfg = run.config(None)?;
            let variants = if variants.is_empty() {
                Variant::TABLE.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<Variant>, _>>()?
            };
            let pools = run.pools()?;
            let rows = run_ablation(&cfg, &pools, &variants, &run.out_dir, &mut report_progress)?;
            print!("{}", bsfa::harness::ablation::format_table(&rows));
        }
        Command::Visualize {
            checkpoint,
            out_dir,
            images,
        } => {
            let (model, meta) = Model::load(&checkpoint, candle_core::DType::F32)?;
            let files = visualize_files(&model, &images, meta.backbone.input_size, &out_dir)?;
            println!("wrote {} files to {}", files.len(), out_dir.display());
        }
        Command::MakeSynthetic {
            out_dir,
            classes,
            images_per_class,
            image_size,
            seed,
        } => {
            let cfg = SyntheticConfig {
                classes,
                images_per_class,
                image_size,
                seed,
            };
            let split = write_dataset(&out_dir, &cfg)?;
            let (b, v, n) = split.counts();
            println!("wrote {classes} classes to {} (splits {b}/{v}/{n})", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
