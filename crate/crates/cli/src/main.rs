//! `fspc`: data generation, pretraining, episodic training, evaluation,
//! gradient checks and visualization export.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use fewshot_pc::data::{generate_dataset, ClassSplit, Dataset, SceneConfig};
use fewshot_pc::pipeline::gradcheck::grad_check;
use fewshot_pc::pipeline::rundir::{claim_dir, ENCODER_CKPT};
use fewshot_pc::pipeline::{
    chance_baseline, evaluate, export_episode, load_model, nearest_prototype_baseline, run_fewshot_train, run_pretrain,
    Component, RunConfig, RunDir,
};

#[derive(Debug, Parser)]
#[command(name = "fspc", version, about = "Few-shot point cloud semantic segmentation")]
struct Cli {
    /// Worker threads for parallel evaluation and data generation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic primitive-scene benchmark.
    GenData(GenData),
    /// Contrastive pretraining of the encoder on train-split scenes.
    Pretrain(Pretrain),
    /// Episodic few-shot training.
    Train(Train),
    /// Evaluate a trained run on test-split episodes.
    Eval(Eval),
    /// Compare analytic gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Export one evaluation episode's predictions as PLY.
    ExportViz(ExportViz),
}

#[derive(Debug, Args)]
struct Common {
    /// Base configuration file (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite an existing output.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Scene generator settings (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    points_per_object: Option<usize>,
    #[arg(long)]
    background_points: Option<usize>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    freeze_augmentor: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Encoder checkpoint from `pretrain`; omit to train from scratch.
    #[arg(long)]
    encoder_ckpt: Option<PathBuf>,
    #[arg(long)]
    no_mra: bool,
    #[arg(long)]
    no_center: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Eval {
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also report the chance and nearest-prototype baselines.
    #[arg(long)]
    baselines: bool,
    /// Overwrite an existing report.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Component name or `all`.
    #[arg(long, default_value = "all", value_parser = component_names())]
    component: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ExportViz {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    /// Output file; defaults to `predictions/episode_<n>.ply` inside the run.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn component_names() -> clap::builder::PossibleValuesParser {
    let mut names = vec!["all"];
    names.extend(Component::ALL.iter().map(|c| c.name()));
    clap::builder::PossibleValuesParser::new(names)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check_cmd(a),
        Command::ExportViz(a) => export_viz(a),
    }
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::desk(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn load_dataset(dir: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn gen_data(a: GenData) -> anyhow::Result<()> {
    let mut scene = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SceneConfig::default(),
    };
    if let Some(n) = a.points_per_object {
        scene.points_per_object = n;
    }
    if let Some(n) = a.background_points {
        scene.background_points = n;
    }
    claim_dir(&a.out, a.force)?;
    let dataset = generate_dataset(a.scenes, a.seed, &ClassSplit::standard(), &scene)?;
    dataset.save(&a.out)?;
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> anyhow::Result<()> {
    let mut config = base_config(&a.common)?;
    config.data = a.data.display().to_string();
    if a.freeze_augmentor {
        config.pretrain.freeze_augmentor = true;
    }
    if let Some(e) = a.epochs {
        config.pretrain.epochs = e;
    }
    config.validate()?;
    let dataset = load_dataset(&a.data)?;
    let run = RunDir::create(&a.out, a.common.force)?;
    let outcome = run_pretrain::<f32>(&config, &dataset, &run)?;
    if let (Some(first), Some(last)) = (outcome.losses.first(), outcome.losses.last()) {
        println!("contrastive loss {first:.5} -> {last:.5} over {} iterations", outcome.losses.len());
    }
    println!("encoder checkpoint: {}", run.checkpoint(ENCODER_CKPT).display());
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut config = base_config(&a.common)?;
    config.data = a.data.display().to_string();
    config.encoder_checkpoint = a.encoder_ckpt.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    if a.no_mra {
        config.fewshot.use_mra = false;
    }
    if a.no_center {
        config.fewshot.use_center = false;
    }
    if let Some(l) = a.lambda {
        config.fewshot.lambda = l;
    }
    if let Some(g) = a.gamma {
        config.fewshot.gamma = g;
    }
    if let Some(e) = a.episodes {
        config.fewshot.episodes = e;
    }
    config.validate()?;
    let dataset = load_dataset(&a.data)?;
    let run = RunDir::create(&a.out, a.common.force)?;
    let outcome = run_fewshot_train::<f32>(&config, &dataset, &run, a.encoder_ckpt.as_deref())?;
    println!(
        "trained {} episodes ({} skipped); model in {}",
        outcome.losses.len(),
        outcome.skipped(),
        run.root().display()
    );
    Ok(())
}

fn eval(a: Eval) -> anyhow::Result<()> {
    let run = RunDir::open(&a.run)?;
    if run.report().exists() && !a.force {
        bail!("refusing to overwrite existing {} (use --force)", run.report().display());
    }
    let (config, model) = load_model::<f32>(&run)?;
    let mut ev = config.eval.clone();
    if let Some(n) = a.episodes {
        ev.episodes = n;
    }
    if let Some(n) = a.ways {
        ev.ways = n;
    }
    if let Some(n) = a.shots {
        ev.shots = n;
    }
    if let Some(s) = a.seed {
        ev.seed = s;
    }
    let data = a.data.unwrap_or_else(|| PathBuf::from(&config.data));
    let dataset = load_dataset(&data)?;
    let report = evaluate(&model, &dataset, &config.fewshot, &ev)?;
    report.save(&run.report())?;
    println!(
        "foreground mIoU {:.4}, background IoU {:.4} over {} episodes ({} skipped)",
        report.foreground_miou, report.background_iou, report.episodes, report.skipped
    );
    for (class, iou) in &report.per_class {
        println!("  {class}: {iou:.4}");
    }
    if a.baselines {
        let chance = chance_baseline(&dataset, &ev)?;
        let nearest = nearest_prototype_baseline(&model.encoder, &dataset, &ev)?;
        println!("chance baseline mIoU {:.4}", chance.foreground_miou);
        println!("nearest-prototype baseline mIoU {:.4}", nearest.foreground_miou);
    }
    Ok(())
}

fn grad_check_cmd(a: GradCheckArgs) -> anyhow::Result<()> {
    let components: Vec<Component> = if a.component == "all" {
        Component::ALL.to_vec()
    } else {
        vec![a.component.parse()?]
    };
    let mut failed = Vec::new();
    for c in components {
        let r = grad_check(c, a.seed)?;
        println!(
            "{:<16} params {:>5}  max rel error {:.3e}  tolerance {:.0e}  {}",
            c.name(),
            r.parameters,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(c.name());
        }
    }
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

fn export_viz(a: ExportViz) -> anyhow::Result<()> {
    let run = RunDir::open(&a.run)?;
    let out = a
        .out
        .unwrap_or_else(|| run.predictions().join(format!("episode_{}.ply", a.episode)));
    if out.exists() && !a.force {
        bail!("refusing to overwrite existing {} (use --force)", out.display());
    }
    let (config, model) = load_model::<f32>(&run)?;
    let data = a.data.unwrap_or_else(|| PathBuf::from(&config.data));
    let dataset = load_dataset(&data)?;
    let labels = export_episode(&model, &dataset, &config.fewshot, &config.eval, a.episode, &out)?;
    println!("wrote {} labeled points to {}", labels.len(), out.display());
    Ok(())
}
