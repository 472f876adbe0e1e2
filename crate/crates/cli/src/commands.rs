use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use modsel::env::Environment;
use modsel::eval::{evaluate_agent_both, evaluate_baselines, EvalReport};
use modsel::experiment::{run_experiment, ExperimentConfig};
use modsel::phantom::{generate_dataset, load_dataset, save_dataset, Dataset, Split, WorldSpec};
use modsel::policy::PolicyParams;
use modsel::segmenter::{train_seg, SegParams, SegTrainConfig, Segmenter};
use modsel::session::SessionStore;
use modsel::trainers::{random_policy, train_grpo, train_reinforce, GrpoConfig, ReinforceConfig};
use modsel::volume::PortionScheme;

#[derive(Debug, Parser)]
#[command(
    name = "modsel",
    version,
    about = "Modality and portion selection agents for lesion segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with seg/rl/holdout splits.
    GenData(GenDataArgs),
    /// Train the per-voxel segmenter on the seg split.
    TrainSeg(TrainSegArgs),
    /// Train a selection policy on the rl split.
    TrainRl(TrainRlArgs),
    /// Evaluate baselines and policies on the holdout split.
    Eval(EvalArgs),
    /// Run the full pipeline from a TOML config.
    RunExperiment(RunExperimentArgs),
    /// Serve interactive sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    FullScale,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub seg: usize,
    #[arg(long, default_value_t = 100)]
    pub rl: usize,
    #[arg(long, default_value_t = 50)]
    pub holdout: usize,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Algo {
    Reinforce,
    Grpo,
}

/// Segmenter source shared by commands that build an environment.
#[derive(Debug, Args)]
pub struct SegmenterArgs {
    /// Segmenter checkpoint.
    #[arg(long, required_unless_present = "oracle")]
    pub segmenter: Option<PathBuf>,
    /// Use the lesion-metadata oracle instead of a trained segmenter.
    #[arg(long, conflicts_with = "segmenter")]
    pub oracle: bool,
}

#[derive(Debug, Args)]
pub struct TrainRlArgs {
    #[arg(long, value_enum)]
    pub algo: Algo,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub seg: SegmenterArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Frozen reference policy (GRPO only).
    #[arg(long, required_if_eq("algo", "grpo"))]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 60)]
    pub horizon: usize,
    #[arg(long, default_value_t = 8)]
    pub group_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub clip_epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    pub init_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub seg: SegmenterArgs,
    /// `name=path` policy checkpoints; repeatable.
    #[arg(long = "policy", value_parser = parse_named_path)]
    pub policies: Vec<(String, PathBuf)>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    #[arg(long, conflicts_with = "smoke")]
    pub config: Option<PathBuf>,
    /// Built-in smoke configuration (8/4/4 cases, 5 epochs).
    #[arg(long)]
    pub smoke: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub seg: SegmenterArgs,
    /// Policy checkpoint; a uniform policy when absent.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

fn parse_named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected name=path, got `{s}`")),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    PolicyParams::from_checkpoint(&read(path)?).with_context(|| format!("loading {}", path.display()))
}

fn load_segmenter(args: &SegmenterArgs) -> Result<Segmenter> {
    match (&args.segmenter, args.oracle) {
        (_, true) => Ok(Segmenter::Oracle),
        (Some(path), false) => Ok(Segmenter::Trained(
            SegParams::from_checkpoint(&read(path)?).with_context(|| format!("loading {}", path.display()))?,
        )),
        (None, false) => bail!("either --segmenter or --oracle is required"),
    }
}

fn environment(spec: &WorldSpec, segmenter: Segmenter) -> Result<Environment> {
    let scheme = PortionScheme::new(spec.dims.depth, spec.portions)?;
    Ok(Environment::new(scheme, spec.channels, segmenter)?)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let spec = match args.preset {
        Preset::Desk => WorldSpec::desk(args.seed),
        Preset::FullScale => WorldSpec::full_scale(args.seed),
    };
    let ds = generate_dataset(&spec, (args.seg, args.rl, args.holdout))?;
    save_dataset(&ds, &args.out)?;
    Ok(())
}

pub fn train_seg_cmd(args: &TrainSegArgs) -> Result<()> {
    let ds = load_data(&args.data)?;
    let cfg = SegTrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        seed: args.seed,
        ..Default::default()
    };
    let out = train_seg(&ds.split(Split::Seg), &cfg)?;
    if let Some(last) = out.epoch_losses.last() {
        tracing::info!(epochs = args.epochs, final_loss = last, "segmenter trained");
    }
    write(&args.out, &out.params.to_checkpoint())
}

pub fn train_rl_cmd(args: &TrainRlArgs) -> Result<()> {
    let ds = load_data(&args.data)?;
    let spec = &ds.manifest.spec;
    let env = environment(spec, load_segmenter(&args.seg)?)?;
    let cases = ds.split(Split::Rl);
    let (params, log) = match args.algo {
        Algo::Reinforce => {
            let cfg = ReinforceConfig {
                gamma: args.gamma,
                learning_rate: args.lr.unwrap_or(ReinforceConfig::default().learning_rate),
                epochs: args.epochs,
                horizon: args.horizon,
                seed: args.seed,
            };
            let init = random_policy(
                spec.portions,
                spec.num_views(),
                spec.channels,
                args.init_scale,
                args.seed,
            );
            train_reinforce(&cases, &env, &cfg, init)?
        }
        Algo::Grpo => {
            let Some(reference) = &args.reference else {
                bail!("--reference is required for grpo");
            };
            let cfg = GrpoConfig {
                beta: args.beta,
                group_size: args.group_size,
                clip_epsilon: args.clip_epsilon,
                learning_rate: args.lr.unwrap_or(GrpoConfig::default().learning_rate),
                epochs: args.epochs,
                horizon: args.horizon,
                seed: args.seed,
                ..Default::default()
            };
            train_grpo(&cases, &env, &cfg, &load_policy(reference)?)?
        }
    };
    write(&args.out, &params.to_checkpoint())?;
    if let Some(path) = &args.log {
        write(path, &log.to_csv())?;
    }
    Ok(())
}

pub fn eval_cmd(args: &EvalArgs) -> Result<String> {
    let ds = load_data(&args.data)?;
    let spec = &ds.manifest.spec;
    let env = environment(spec, load_segmenter(&args.seg)?)?;
    let holdout = ds.split(Split::Holdout);
    let mut report = EvalReport {
        rows: evaluate_baselines(&env, &holdout, &spec.channel_names)?,
    };
    for (name, path) in &args.policies {
        let policy = load_policy(path)?;
        report.rows.extend(evaluate_agent_both(
            &env, &policy, &holdout, args.steps, args.seed, name,
        )?);
    }
    let csv = report.to_csv();
    if let Some(out) = &args.out {
        write(out, &csv)?;
    }
    Ok(csv)
}

pub fn run_experiment_cmd(args: &RunExperimentArgs) -> Result<EvalReport> {
    let mut cfg = match (&args.config, args.smoke) {
        (Some(path), _) => {
            ExperimentConfig::from_toml_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, true) => ExperimentConfig::smoke(0),
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(run_experiment(&cfg, &args.out)?.report)
}

/// Session store over the holdout split.
pub fn session_store(args: &ServeArgs) -> Result<SessionStore<PolicyParams>> {
    let ds = load_data(&args.data)?;
    let spec = ds.manifest.spec.clone();
    let env = environment(&spec, load_segmenter(&args.seg)?)?;
    let policy = match &args.policy {
        Some(path) => load_policy(path)?,
        None => PolicyParams::zeros(spec.portions, spec.num_views(), spec.channels),
    };
    if policy.portions() != spec.portions || policy.views() != spec.num_views() {
        bail!(
            "policy is for {}x{} actions, dataset has {} portions and {} views",
            policy.portions(),
            policy.views(),
            spec.portions,
            spec.num_views()
        );
    }
    Ok(SessionStore::new(
        Arc::new(env),
        Arc::new(policy),
        ds.split(Split::Holdout),
        spec.channel_names,
    ))
}
