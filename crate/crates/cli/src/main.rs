use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use occluvis::checkpoint::Checkpoint;
use occluvis::classifier::Stage2Config;
use occluvis::dataset::{
    generate_dataset, load_dataset, DatasetConfig, Sample, SceneConfig, Split, INSTRUCTIONS,
};
use occluvis::eval::{render_table, write_reports};
use occluvis::lm::BeamConfig;
use occluvis::pipeline::{train_stage1, ModelConfig, Pipeline, Stage1Settings, STAGE_SDF1, STAGE_SDF2};
use occluvis::reconstruction::RasterImage;
use occluvis::train::{Hyperparams, LossCurve};
use occluvis::vision::FusionConfig;
use occluvis::{Error, Execution};

const ALPHA_SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Parser, Debug)]
#[command(name = "occluvis", version, about = "Occlusion-aware vision-language pipeline")]
struct Cli {
    /// JSON file with default values for any flag; flags given on the
    /// command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for data generation, training batches and evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic occluded-object dataset.
    GenData(GenDataArgs),
    /// Train one stage and write a checkpoint plus its loss curve.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Answer a question about one image.
    Describe(DescribeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    occlusion_target: Option<f64>,
    /// Side of the rendered images on disk.
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Stage {
    Sdf1,
    Sdf2,
    Lm,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: Stage,
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint of the previous stage; required for sdf2 and lm.
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Side images are resized to before encoding (sdf1 fixes it for later stages).
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps of each reconstruction phase (sdf1).
    #[arg(long)]
    steps: Option<usize>,
    /// Grid resolution of the reconstruction branch.
    #[arg(long)]
    grid_resolution: Option<usize>,
    /// Keep the pretrained encoder fixed during sdf2.
    #[arg(long)]
    freeze_pretrained: bool,
    /// Loss-curve CSV; defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    /// Evaluate every alpha in 0, 0.25, 0.5, 0.75, 1.
    #[arg(long)]
    alpha_sweep: bool,
    #[arg(long)]
    beam: Option<usize>,
    /// JSON report path; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    report: PathBuf,
    /// Only score test records at least this occluded.
    #[arg(long)]
    min_occlusion: Option<f64>,
}

#[derive(Args, Debug)]
struct DescribeArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    /// Instruction number 1-5 or free question text.
    #[arg(long, default_value = "1")]
    question: String,
    #[arg(long)]
    verbose: bool,
}

/// Defaults read from `--config`. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    threads: Option<usize>,
    count: Option<usize>,
    seed: Option<u64>,
    occlusion_target: Option<f64>,
    image_size: Option<usize>,
    alpha: Option<f64>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    epochs: Option<usize>,
    steps: Option<usize>,
    grid_resolution: Option<usize>,
    freeze_pretrained: Option<bool>,
    beam: Option<usize>,
    max_new: Option<usize>,
    min_occlusion: Option<f64>,
}

/// Settings after merging flags over the config file over defaults. This
/// is what gets echoed into checkpoints and reports.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    subcommand: &'static str,
    paths: serde_json::Value,
    seed: u64,
    alpha: f64,
    image_size: usize,
    hyperparams: Option<Hyperparams>,
    beam_width: usize,
    report: Option<PathBuf>,
}

/// Configuration problems exit with status 2, everything else with 1.
fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let exec = setup_threads(cli.threads.or(file.threads))?;
    match cli.command {
        Command::GenData(a) => gen_data(a, &file, exec),
        Command::Train(a) => train(a, &file, exec),
        Command::Eval(a) => eval(a, &file, exec),
        Command::Describe(a) => describe(a, &file, exec),
    }
}

#[cfg(feature = "parallel")]
fn setup_threads(threads: Option<usize>) -> anyhow::Result<Execution> {
    match threads {
        Some(0) => Err(config_error("--threads must be positive")),
        Some(1) => Ok(Execution::Sequential),
        Some(n) => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("starting the worker pool")?;
            Ok(Execution::Parallel)
        }
        None => Ok(Execution::Parallel),
    }
}

#[cfg(not(feature = "parallel"))]
fn setup_threads(threads: Option<usize>) -> anyhow::Result<Execution> {
    if threads == Some(0) {
        return Err(config_error("--threads must be positive"));
    }
    Ok(Execution::Sequential)
}

fn check_alpha(alpha: f64) -> anyhow::Result<f64> {
    FusionConfig::new(alpha)?;
    Ok(alpha)
}

fn gen_data(a: GenDataArgs, file: &FileConfig, exec: Execution) -> anyhow::Result<()> {
    let defaults = DatasetConfig::default();
    let cfg = DatasetConfig {
        count: a.count.or(file.count).unwrap_or(defaults.count),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        scene: SceneConfig {
            occlusion_target: a
                .occlusion_target
                .or(file.occlusion_target)
                .unwrap_or(defaults.scene.occlusion_target),
            image_side: a.image_size.or(file.image_size).unwrap_or(defaults.scene.image_side),
        },
    };
    let records = generate_dataset(&cfg, &a.out, exec)?;
    let mean = if records.is_empty() {
        0.0
    } else {
        records.iter().map(|r| r.occlusion_ratio).sum::<f64>() / records.len() as f64
    };
    println!("wrote {} records to {}", records.len(), a.out.display());
    println!("mean occlusion ratio {mean:.4}");
    Ok(())
}

fn samples_of(all: &[Sample], split: Split) -> Vec<&Sample> {
    all.iter().filter(|s| s.split() == split).collect()
}

fn load_pipeline(path: &Path) -> anyhow::Result<Pipeline> {
    let ck = Checkpoint::load(path)?;
    Ok(Pipeline::from_checkpoint(&ck)?)
}

fn curve_path(a: &TrainArgs, phase: Option<&str>) -> PathBuf {
    let base = a.curve.clone().unwrap_or_else(|| {
        let mut s = a.ckpt_out.clone().into_os_string();
        s.push(".loss.csv");
        PathBuf::from(s)
    });
    match phase {
        None => base,
        Some(p) => {
            let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            base.with_file_name(format!("{p}.{name}"))
        }
    }
}

fn write_curve(curve: &LossCurve, path: &Path) -> anyhow::Result<()> {
    curve.write_csv(path)?;
    println!("loss curve {} ({} steps, last {:.5})", path.display(), curve.points.len(), curve.last().unwrap_or(f64::NAN));
    Ok(())
}

fn train(a: TrainArgs, file: &FileConfig, exec: Execution) -> anyhow::Result<()> {
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let alpha = check_alpha(a.alpha.or(file.alpha).unwrap_or(FusionConfig::default().alpha))?;
    let batch_size = a.batch_size.or(file.batch_size);
    let lr = a.lr.or(file.lr);
    let weight_decay = a.weight_decay.or(file.weight_decay);
    let epochs = a.epochs.or(file.epochs);
    let overlay = |mut hp: Hyperparams| {
        hp.seed = seed;
        hp.batch_size = batch_size.unwrap_or(hp.batch_size);
        hp.learning_rate = lr.unwrap_or(hp.learning_rate);
        hp.weight_decay = weight_decay.unwrap_or(hp.weight_decay);
        hp.epochs = epochs.unwrap_or(hp.epochs);
        hp.validate().map(|_| hp)
    };

    // Later stages inherit the model shape from their input checkpoint.
    let previous = match (a.stage, &a.ckpt_in) {
        (Stage::Sdf1, _) => None,
        (stage, None) => {
            return Err(config_error(format!(
                "stage {} needs --ckpt-in from the previous stage",
                stage_name(stage)
            )))
        }
        (stage, Some(p)) => {
            let pipe = load_pipeline(p)?;
            let needed = if stage == Stage::Sdf2 { STAGE_SDF1 } else { STAGE_SDF2 };
            if !pipe.stages().contains(&needed) {
                return Err(config_error(format!(
                    "{} has no {needed} weights, which stage {} builds on",
                    p.display(),
                    stage_name(stage)
                )));
            }
            Some(pipe)
        }
    };
    let image_size = match &previous {
        Some(p) => p.models.encoder.image_side,
        None => a.image_size.or(file.image_size).unwrap_or(ModelConfig::default().encoder.image_side),
    };
    if let (Some(p), Some(s)) = (&previous, a.image_size.or(file.image_size)) {
        if s != p.models.encoder.image_side {
            return Err(config_error(format!(
                "image size {s} differs from the checkpoint's {}",
                p.models.encoder.image_side
            )));
        }
    }

    let all = load_dataset(&a.data, Some(image_size), exec)?;
    let samples = samples_of(&all, Split::Train);
    if samples.is_empty() {
        bail!("{} has no training records", a.data.display());
    }

    let (mut pipe, hyperparams) = match a.stage {
        Stage::Sdf1 => {
            let mut models = ModelConfig::default();
            models.encoder.image_side = image_size;
            models.validate()?;
            let mut settings = match a.steps.or(file.steps) {
                Some(n) => Stage1Settings::default().with_steps(n),
                None => Stage1Settings::default(),
            };
            settings.object.hp = overlay(settings.object.hp.clone())?;
            settings.subject.hp = overlay(settings.subject.hp.clone())?;
            settings.image.hp = overlay(settings.image.hp.clone())?;
            let (mut pipe, curves) = train_stage1(&samples, &models, &settings, seed, exec)?;
            if let Some(r) = a.grid_resolution.or(file.grid_resolution) {
                pipe.recon.grid_resolution = r;
            }
            write_curve(&curves.object, &curve_path(&a, Some("object")))?;
            write_curve(&curves.subject, &curve_path(&a, Some("subject")))?;
            write_curve(&curves.regressor, &curve_path(&a, None))?;
            (pipe, settings.image.hp)
        }
        Stage::Sdf2 => {
            let mut pipe = previous.expect("checked above");
            if let Some(r) = a.grid_resolution.or(file.grid_resolution) {
                pipe.recon.grid_resolution = r;
            }
            let defaults = Stage2Config::default();
            let cfg = Stage2Config {
                hp: overlay(defaults.hp.clone())?,
                fusion: FusionConfig::new(alpha)?,
                freeze_pretrained: a.freeze_pretrained || file.freeze_pretrained.unwrap_or(false),
                ..defaults
            };
            let examples = pipe.examples(&samples, exec)?;
            let curve = pipe.train_stage2(&examples, &cfg, exec)?;
            write_curve(&curve, &curve_path(&a, None))?;
            (pipe, cfg.hp)
        }
        Stage::Lm => {
            let mut pipe = previous.expect("checked above");
            let hp = overlay(Hyperparams::default())?;
            let examples = pipe.examples(&samples, exec)?;
            let curve = pipe.train_lm_stage(&samples, &examples, alpha, &hp, exec)?;
            write_curve(&curve, &curve_path(&a, None))?;
            (pipe, hp)
        }
    };
    let run = RunConfig {
        subcommand: "train",
        paths: serde_json::json!({
            "data": a.data,
            "ckpt_in": a.ckpt_in,
            "ckpt_out": a.ckpt_out,
        }),
        seed,
        alpha,
        image_size,
        hyperparams: Some(hyperparams),
        beam_width: 1,
        report: None,
    };
    let mut echo = match std::mem::take(&mut pipe.echo) {
        serde_json::Value::Object(m) => m,
        _ => serde_json::Map::new(),
    };
    echo.insert(stage_name(a.stage).into(), serde_json::to_value(&run)?);
    pipe.echo = serde_json::Value::Object(echo);
    pipe.to_checkpoint().save(&a.ckpt_out)?;
    println!("stages {:?} written to {}", pipe.stages(), a.ckpt_out.display());
    Ok(())
}

fn stage_name(stage: Stage) -> &'static str {
    match stage {
        Stage::Sdf1 => "sdf1",
        Stage::Sdf2 => "sdf2",
        Stage::Lm => "lm",
    }
}

fn beam_config(width: Option<usize>, file: &FileConfig) -> anyhow::Result<BeamConfig> {
    let width = width.or(file.beam).unwrap_or(1);
    if width == 0 {
        return Err(config_error("--beam must be at least 1"));
    }
    Ok(BeamConfig {
        width,
        max_new: file.max_new.unwrap_or(48),
        ..BeamConfig::default()
    })
}

fn eval(a: EvalArgs, file: &FileConfig, exec: Execution) -> anyhow::Result<()> {
    let pipe = load_pipeline(&a.ckpt)?;
    if pipe.classifier.is_none() && pipe.lm.is_none() {
        return Err(config_error(format!(
            "{} has neither a classifier nor a language model to evaluate",
            a.ckpt.display()
        )));
    }
    let beam = beam_config(a.beam, file)?;
    let alphas: Vec<f64> = if a.alpha_sweep {
        ALPHA_SWEEP.to_vec()
    } else {
        vec![check_alpha(a.alpha.or(file.alpha).unwrap_or(FusionConfig::default().alpha))?]
    };
    let min_occ = a.min_occlusion.or(file.min_occlusion).unwrap_or(0.0);
    let all = load_dataset(&a.data, Some(pipe.models.encoder.image_side), exec)?;
    let test: Vec<&Sample> = samples_of(&all, Split::Test)
        .into_iter()
        .filter(|s| s.record.occlusion_ratio >= min_occ)
        .collect();
    if test.is_empty() {
        return Err(config_error(format!(
            "{} has no test records with occlusion >= {min_occ}",
            a.data.display()
        )));
    }
    let examples = pipe.examples(&test, exec)?;
    let mut reports = Vec::new();
    for &alpha in &alphas {
        for mut r in pipe.evaluate(&test, &examples, alpha, &beam, exec)? {
            let run = RunConfig {
                subcommand: "eval",
                paths: serde_json::json!({"data": a.data, "ckpt": a.ckpt}),
                seed: 0,
                alpha,
                image_size: pipe.models.encoder.image_side,
                hyperparams: None,
                beam_width: beam.width,
                report: Some(a.report.clone()),
            };
            r.config["run"] = serde_json::to_value(&run)?;
            r.config["min_occlusion"] = min_occ.into();
            r.validate()?;
            reports.push(r);
        }
    }
    write_reports(&reports, &a.report)?;
    print!("{}", render_table(&reports));
    Ok(())
}

fn describe(a: DescribeArgs, file: &FileConfig, exec: Execution) -> anyhow::Result<()> {
    let alpha = check_alpha(a.alpha.or(file.alpha).unwrap_or(FusionConfig::default().alpha))?;
    let beam = beam_config(a.beam, file)?;
    let question = match a.question.trim().parse::<usize>() {
        Ok(n) if (1..=INSTRUCTIONS.len()).contains(&n) => INSTRUCTIONS[n - 1].to_string(),
        Ok(n) => return Err(config_error(format!("question number {n} outside 1-{}", INSTRUCTIONS.len()))),
        Err(_) => a.question.clone(),
    };
    let pipe = load_pipeline(&a.ckpt)?;
    let image = RasterImage::read_ppm(&a.image)?;
    let d = pipe.describe(&image, &question, alpha, &beam, exec)?;
    println!("{}", d.answer);
    if a.verbose {
        println!("question: {question}");
        println!("mesh vertices: {}", d.vertices);
        println!("mesh triangles: {}", d.triangles);
        println!("estimated occlusion ratio: {:.4}", d.occlusion_estimate);
    }
    Ok(())
}
