//! `mnpair`: synthetic data, training, embedding, t-SNE, DBSCAN, Grad-CAM
//! explanations and reports from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mnpair_core::report::{
    explain_files, run_pipeline, run_stage, Evaluation, Manifest, PipelineConfig, Stage, EVALUATION_FILE,
    MANIFEST_FILE,
};
use mnpair_core::trainer::{generate_synthetic_dataset, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "mnpair", version, about = "MN-pair contrastive embeddings, clustering and explanations")]
struct Cli {
    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural texture dataset under --dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 160)]
        size: usize,
    },
    /// Train the embedding network.
    Train(Common),
    /// Embed every dataset image with the trained network.
    Embed(Common),
    /// Reduce the embeddings to 2-D with t-SNE.
    Reduce(Common),
    /// Cluster the 2-D points with DBSCAN.
    Cluster(Common),
    /// Write Grad-CAM heatmaps for the given images.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Scatter plots, cluster tiles, heatmap grids, retrieval and evaluation.
    Report(Common),
    /// Run train, embed, reduce, cluster and report, resuming finished stages.
    Pipeline(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// `key = value` file; flags given on the command line take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root: `<root>/<class>/<image>` or `<root>/{train,test}/<class>/<image>`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "MNPAIR_OUT")]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Similarity temperature.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Positive weight; negatives get 1 - v.
    #[arg(long, allow_negative_numbers = true)]
    v: Option<f64>,
    /// Anchor plus positives per set (default: number of classes).
    #[arg(long)]
    m: Option<usize>,
    /// Anchor plus negatives per set (default: number of classes).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// DBSCAN radius in t-SNE units.
    #[arg(long, allow_negative_numbers = true)]
    eps: Option<f64>,
    /// DBSCAN core threshold, the point itself included.
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    perplexity: Option<f64>,
    /// Seeds training, the train/test split, synthesis and t-SNE.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = PipelineConfig::default();
        if let Some(path) = &self.config {
            config
                .apply_file(path)
                .with_context(|| format!("reading config {}", path.display()))?;
        }
        let overrides: [(&str, Option<String>); 14] = [
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string())),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("v", self.v.map(|v| v.to_string())),
            ("m", self.m.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("embed_dim", self.embed_dim.map(|v| v.to_string())),
            ("eps", self.eps.map(|v| v.to_string())),
            ("min_pts", self.min_pts.map(|v| v.to_string())),
            ("perplexity", self.perplexity.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                config.set(key, &value).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        Ok(config)
    }
}

fn print_manifest(config: &PipelineConfig, manifest: &Manifest) -> Result<()> {
    for r in &manifest.stages {
        println!("{:<8} {:?}", r.stage.name(), r.status);
        for (file, sha) in &r.outputs {
            println!("         {file}  {}", &sha[..12]);
        }
    }
    let eval_path = config.out.join(EVALUATION_FILE);
    if eval_path.exists() {
        let eval: Evaluation = mnpair_core::io::read_json(&eval_path)?;
        println!("{}", serde_json::to_string_pretty(&eval)?);
    }
    println!("manifest: {}", config.out.join(MANIFEST_FILE).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let stage = |common: &Common, stage: Stage| -> Result<()> {
        let config = common.resolve()?;
        let manifest = run_stage(&config, stage).with_context(|| format!("stage {stage} failed"))?;
        print_manifest(&config, &manifest)
    };
    match &cli.command {
        Command::Synth {
            common,
            classes,
            per_class,
            size,
        } => {
            let config = common.resolve()?;
            let spec = SynthSpec {
                classes: *classes,
                per_class: *per_class,
                size: *size,
                seed: config.train.seed,
            };
            let dirs = generate_synthetic_dataset(&spec, &config.dataset)?;
            println!(
                "wrote {} images in {} classes to {}",
                classes * per_class,
                dirs.len(),
                config.dataset.display()
            );
            Ok(())
        }
        Command::Train(c) => stage(c, Stage::Train),
        Command::Embed(c) => stage(c, Stage::Embed),
        Command::Reduce(c) => stage(c, Stage::Reduce),
        Command::Cluster(c) => stage(c, Stage::Cluster),
        Command::Report(c) => stage(c, Stage::Report),
        Command::Explain { common, images } => {
            let config = common.resolve()?;
            for path in explain_files(&config, images)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Pipeline(c) => {
            let config = c.resolve()?;
            let manifest = run_pipeline(&config).context("pipeline failed")?;
            print_manifest(&config, &manifest)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
