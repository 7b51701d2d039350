use std::fs;
use std::path::{Path, PathBuf};

use askpaint_core::checkpoint::Checkpoint;
use askpaint_core::dataset::{export_synthetic, load_dataset_dir, read_png, write_png};
use askpaint_core::eval::{evaluate_with_dump, EvalOptions};
use askpaint_core::render::episode_montage;
use askpaint_core::synth::held_out_set;
use askpaint_core::train::{train_loop, BatchSource, ExperimentConfig, FixedSource, SyntheticSource};
use askpaint_core::{rollout, ColorizerModel, OracleConfig};
use askpaint_service::config::ServiceConfig;
use askpaint_service::registry::Registry;
use askpaint_service::AppState;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_CHECKPOINT_DIR: &str = "ASKPAINT_CHECKPOINT_DIR";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<askpaint_core::Error> for CliError {
    fn from(e: askpaint_core::Error) -> Self {
        use askpaint_core::Error as E;
        match e {
            E::Validation(_) | E::Config(_) | E::State(_) | E::Image(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<askpaint_service::error::ServiceError> for CliError {
    fn from(e: askpaint_service::error::ServiceError) -> Self {
        use askpaint_service::error::ServiceError as S;
        match e {
            S::Config { .. } => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "askpaint", version, about = "Colorization by asking questions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoints and a CSV loss log.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes a JSON report.
    Eval(EvalArgs),
    /// Roll out one image and write the answers / predictions / questions montage.
    Rollout(RolloutArgs),
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Run the steering HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with the command's settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lambda_seg: Option<f64>,
    /// Training answer noise; 0 disables it.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Train on a PNG directory instead of synthetic scenes.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// PNG directory; defaults to held-out synthetic scenes.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Number of synthetic scenes when no dataset is given.
    #[arg(long)]
    pub count: Option<usize>,
    /// Write montages for the first N images.
    #[arg(long)]
    pub dump: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Color PNG; the model sees its lightness, the oracle answers from its colors.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub answers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub count: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Checkpoint file or directory of `*.ckpt` files.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Invalid(format!("--config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("--config {}: {e}", p.display())))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_snapshot<T: Serialize>(dir: &Path, command: &str, settings: &T) -> Result<()> {
    create_dir(dir)?;
    let mut value = serde_json::to_value(settings).expect("serializable settings");
    value
        .as_object_mut()
        .expect("settings are a JSON object")
        .insert("command".into(), command.into());
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(&value).expect("json"))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn require<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Invalid(format!("{key} is required (flag or config key)")))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn train(a: TrainArgs) -> Result<()> {
    let mut s: TrainSettings = load_json(a.common.config.as_deref())?;
    let exp = &mut s.experiment;
    if let Some(seed) = a.common.seed {
        exp.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        exp.train.steps = steps;
    }
    if let Some(l) = a.lambda_seg {
        exp.train.lambda_seg = l;
    }
    if let Some(sigma) = a.noise_sigma {
        exp.train.noise.sigma = sigma;
        exp.train.noise.enabled = sigma > 0.0;
    }
    if a.dataset.is_some() {
        s.dataset = a.dataset;
    }
    if a.common.out.is_some() {
        s.out = a.common.out;
    }
    let out = match s.out.clone() {
        Some(o) => o,
        None => std::env::var_os(ENV_CHECKPOINT_DIR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/train")),
    };
    s.out = Some(out.clone());
    let exp = &s.experiment;
    exp.validate()?;
    let source: Box<dyn BatchSource> = match &s.dataset {
        Some(dir) => Box::new(FixedSource {
            samples: load_dataset_dir(dir, exp.color_space, exp.model.height, exp.model.width)?,
            seed: exp.train.seed,
        }),
        None => Box::new(SyntheticSource {
            spec: exp.scene.clone(),
            color_space: exp.color_space,
            seed: exp.train.seed,
        }),
    };
    write_snapshot(&out, "train", &s)?;
    let model = ColorizerModel::new(exp.model.clone())?;
    let every = (exp.train.steps / 20).max(1);
    let outcome = train_loop(exp, model, source, Some(&out), &mut |r| {
        if r.step % every == 0 {
            eprintln!("step {:>7}  loss {:.5}  reg {:.5}  seg {:.4}", r.step, r.total, r.reg_loss, r.seg_loss);
        }
    })?;
    if let Some(path) = outcome.final_checkpoint {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub max_steps: usize,
    pub num_questions: usize,
    pub count: usize,
    pub seed: u64,
    pub dump: usize,
    pub out: PathBuf,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            max_steps: 3,
            num_questions: 3,
            count: 500,
            seed: 1,
            dump: 0,
            out: PathBuf::from("runs/eval"),
        }
    }
}

fn experiment_of(ckpt: &Checkpoint) -> ExperimentConfig {
    serde_json::from_value(ckpt.train_config.clone()).unwrap_or_else(|_| ExperimentConfig {
        model: ckpt.model_config.clone(),
        ..Default::default()
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut s: EvalSettings = load_json(a.common.config.as_deref())?;
    s.checkpoint = a.checkpoint.or(s.checkpoint);
    s.dataset = a.dataset.or(s.dataset);
    s.max_steps = a.max_steps.unwrap_or(s.max_steps);
    s.num_questions = s.num_questions.min(s.max_steps + 1);
    s.count = a.count.unwrap_or(s.count);
    s.seed = a.common.seed.unwrap_or(s.seed);
    s.dump = a.dump.unwrap_or(s.dump);
    s.out = a.common.out.unwrap_or(s.out);
    let ckpt = Checkpoint::load(&require(s.checkpoint.clone(), "checkpoint")?)?;
    let model = ckpt.to_model()?;
    let exp = experiment_of(&ckpt);
    let cs = exp.color_space;
    let (h, w) = (model.config().height, model.config().width);
    let data = match &s.dataset {
        Some(dir) => load_dataset_dir(dir, cs, h, w)?,
        None => {
            let scene = askpaint_core::SyntheticSceneSpec { height: h, width: w, ..exp.scene };
            held_out_set(&scene, cs, s.count, s.seed)?
        }
    };
    write_snapshot(&s.out, "eval", &s)?;
    let opts = EvalOptions {
        max_steps: s.max_steps,
        num_questions: s.num_questions,
        color_space: cs,
        ..Default::default()
    };
    let dump_dir = s.out.join("images");
    let report = evaluate_with_dump(&model, &data, &opts, (s.dump > 0).then_some((dump_dir.as_path(), s.dump)))?;
    let path = s.out.join("report.json");
    report.write_json(&path)?;
    for (n, p) in &report.psnr_by_steps {
        eprintln!("answers {n}: PSNR {:.3} ± {:.3} dB", p.mean, p.std_err);
    }
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSettings {
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub answers: usize,
    pub out: PathBuf,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        Self {
            checkpoint: None,
            image: None,
            answers: 3,
            out: PathBuf::from("runs/rollout"),
        }
    }
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let mut s: RolloutSettings = load_json(a.common.config.as_deref())?;
    s.checkpoint = a.checkpoint.or(s.checkpoint);
    s.image = a.image.or(s.image);
    s.answers = a.answers.unwrap_or(s.answers);
    s.out = a.common.out.unwrap_or(s.out);
    let ckpt = Checkpoint::load(&require(s.checkpoint.clone(), "checkpoint")?)?;
    let model = ckpt.to_model()?;
    let cs = experiment_of(&ckpt).color_space;
    let image = read_png(&require(s.image.clone(), "image")?)?;
    let (h, w) = (model.config().height, model.config().width);
    if (image.height, image.width) != (h, w) {
        return Err(CliError::Invalid(format!(
            "image: {}x{} does not match the checkpoint's {h}x{w}",
            image.width, image.height
        )));
    }
    let ms = cs.to_model_space(&image);
    write_snapshot(&s.out, "rollout", &s)?;
    let (_, state) = rollout(&model, &ms.input, Some(&ms.target), cs, s.answers, s.answers, &OracleConfig::default())?;
    let path = s.out.join("montage.png");
    write_png(&path, &episode_montage(&state, cs)?)?;
    println!("{}", path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub scene: askpaint_core::SyntheticSceneSpec,
    pub color_space: askpaint_core::ColorSpaceSpec,
    pub count: usize,
    pub out: PathBuf,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            scene: Default::default(),
            color_space: Default::default(),
            count: 100,
            out: PathBuf::from("runs/synth"),
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut s: SynthSettings = load_json(a.common.config.as_deref())?;
    s.count = a.count.unwrap_or(s.count);
    if let Some(seed) = a.common.seed {
        s.scene.seed = seed;
    }
    s.out = a.common.out.unwrap_or(s.out);
    s.scene.validate()?;
    write_snapshot(&s.out, "synth", &s)?;
    export_synthetic(&s.out, &s.scene, s.color_space, s.count)?;
    println!("{}", s.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => ServiceConfig::from_json_file(p)?,
        None => ServiceConfig::default(),
    };
    config.apply_env(|k| std::env::var(k).ok())?;
    if let Some(port) = a.port {
        config.port = port;
    }
    let state = match &a.checkpoint {
        Some(path) if path.is_file() => {
            let ckpt = Checkpoint::load(path)?;
            let mut registry = Registry::default();
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            registry.insert_checkpoint(&id, &ckpt)?;
            AppState::new(config, registry)
        }
        Some(dir) => {
            config.checkpoint_dir = dir.clone();
            AppState::from_config(config)?
        }
        None => AppState::from_config(config)?,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", state.config().host, state.config().port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        if let Ok(local) = listener.local_addr() {
            eprintln!("listening on {local}");
        }
        askpaint_service::serve_on(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(CliError::from)
    })?;
    Ok(())
}
