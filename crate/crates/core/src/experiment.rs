//! End-to-end experiment: data, segmenter, REINFORCE grid over γ, GRPO grid
//! over β, holdout evaluation. Configured by a TOML document.
//!
//! Output layout under the artifacts directory:
//!
//! ```text
//! config.toml               resolved configuration
//! data/                     dataset manifest and raw volumes
//! segmenter.ckpt
//! policies/reinforce-gamma-<γ>.ckpt, policies/grpo-beta-<β>.ckpt
//! logs/segmenter.csv, logs/reinforce-gamma-<γ>.csv, logs/grpo-beta-<β>.csv
//! eval.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::{evaluate_agent_both, evaluate_baselines, EvalReport};
use crate::phantom::{generate_dataset, save_dataset, Dataset, Split, WorldSpec};
use crate::policy::PolicyParams;
use crate::segmenter::{train_seg, SegTrainConfig, Segmenter};
use crate::trainers::{random_policy, train_grpo, train_reinforce, GrpoConfig, ReinforceConfig, TrainLog};
use crate::volume::{Dims, PortionScheme};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldPreset {
    Desk,
    FullScale,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub preset: WorldPreset,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub portions: Option<usize>,
    pub noise_sd: Option<f64>,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            preset: WorldPreset::Desk,
            height: None,
            width: None,
            depth: None,
            portions: None,
            noise_sd: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub seg: usize,
    pub rl: usize,
    pub holdout: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            seg: 200,
            rl: 100,
            holdout: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSection {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        let d = SegTrainConfig::default();
        SegmenterSection {
            epochs: d.epochs,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReinforceSection {
    pub gammas: Vec<f64>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub horizon: usize,
    /// Standard deviation of the initial policy weights.
    pub init_scale: f64,
}

impl Default for ReinforceSection {
    fn default() -> Self {
        let d = ReinforceConfig::default();
        ReinforceSection {
            gammas: vec![0.3, 0.5, 0.8],
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            horizon: d.horizon,
            init_scale: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoSection {
    pub betas: Vec<f64>,
    /// γ of the REINFORCE run used as the frozen reference.
    pub reference_gamma: f64,
    pub group_size: usize,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub horizon: usize,
    pub inner_steps: usize,
}

impl Default for GrpoSection {
    fn default() -> Self {
        let d = GrpoConfig::default();
        GrpoSection {
            betas: vec![0.1, 0.5, 1.0],
            reference_gamma: 0.5,
            group_size: d.group_size,
            clip_epsilon: d.clip_epsilon,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            horizon: d.horizon,
            inner_steps: d.inner_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub steps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { steps: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub data: DataSection,
    pub segmenter: SegmenterSection,
    pub reinforce: ReinforceSection,
    pub grpo: GrpoSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// 8/4/4 cases on the 32x32x8 desk world, 5 epochs everywhere.
    pub fn smoke(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            data: DataSection {
                seg: 8,
                rl: 4,
                holdout: 4,
            },
            segmenter: SegmenterSection {
                epochs: 5,
                ..Default::default()
            },
            reinforce: ReinforceSection {
                epochs: 5,
                ..Default::default()
            },
            grpo: GrpoSection {
                epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn world_spec(&self) -> Result<WorldSpec> {
        let w = &self.world;
        let mut spec = match w.preset {
            WorldPreset::Desk => WorldSpec::desk(self.seed),
            WorldPreset::FullScale => WorldSpec::full_scale(self.seed),
        };
        spec.dims = Dims {
            height: w.height.unwrap_or(spec.dims.height),
            width: w.width.unwrap_or(spec.dims.width),
            depth: w.depth.unwrap_or(spec.dims.depth),
        };
        spec.portions = w.portions.unwrap_or(spec.portions);
        spec.noise_sd = w.noise_sd.unwrap_or(spec.noise_sd);
        spec.validate()?;
        Ok(spec)
    }

    pub fn seg_config(&self) -> SegTrainConfig {
        SegTrainConfig {
            epochs: self.segmenter.epochs,
            learning_rate: self.segmenter.learning_rate,
            seed: self.seed,
            ..Default::default()
        }
    }

    pub fn reinforce_config(&self, gamma: f64) -> ReinforceConfig {
        ReinforceConfig {
            gamma,
            learning_rate: self.reinforce.learning_rate,
            epochs: self.reinforce.epochs,
            horizon: self.reinforce.horizon,
            seed: self.seed,
        }
    }

    pub fn grpo_config(&self, beta: f64) -> GrpoConfig {
        let g = &self.grpo;
        GrpoConfig {
            beta,
            group_size: g.group_size,
            clip_epsilon: g.clip_epsilon,
            learning_rate: g.learning_rate,
            epochs: g.epochs,
            horizon: g.horizon,
            inner_steps: g.inner_steps,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world_spec()?;
        let d = &self.data;
        if d.seg == 0 || d.rl == 0 || d.holdout == 0 {
            return Err(Error::Config("every split needs at least one case".into()));
        }
        if !(self.segmenter.learning_rate >= 0.0 && self.segmenter.learning_rate.is_finite()) {
            return Err(Error::Config("segmenter learning_rate must be finite and ≥ 0".into()));
        }
        if !(self.reinforce.init_scale >= 0.0 && self.reinforce.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and ≥ 0".into()));
        }
        for &g in &self.reinforce.gammas {
            self.reinforce_config(g).validate()?;
        }
        self.reinforce_config(self.grpo.reference_gamma).validate()?;
        for &b in &self.grpo.betas {
            self.grpo_config(b).validate()?;
        }
        if self.eval.steps == 0 {
            return Err(Error::Config("eval steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// File stem for a REINFORCE run, e.g. `reinforce-gamma-0.5`.
pub fn reinforce_name(gamma: f64) -> String {
    format!("reinforce-gamma-{gamma}")
}

pub fn grpo_name(beta: f64) -> String {
    format!("grpo-beta-{beta}")
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub name: String,
    pub params: PolicyParams,
    pub log: TrainLog,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub policies: Vec<TrainedPolicy>,
    pub out_dir: PathBuf,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn seg_log_csv(losses: &[f64]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "mean_loss"]).expect("in-memory csv write");
    for (epoch, loss) in losses.iter().enumerate() {
        w.write_record([epoch.to_string(), loss.to_string()])
            .expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
}

fn save_policy(out: &Path, policy: &TrainedPolicy) -> Result<()> {
    write(
        &out.join("policies").join(format!("{}.ckpt", policy.name)),
        &policy.params.to_checkpoint(),
    )?;
    write(
        &out.join("logs").join(format!("{}.csv", policy.name)),
        &policy.log.to_csv(),
    )
}

/// Runs every stage and writes artifacts under `out`. Failures carry the
/// stage name.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let spec = cfg.world_spec().map_err(|e| e.in_stage("config"))?;
    create_dir(&out.join("policies")).map_err(|e| e.in_stage("setup"))?;
    create_dir(&out.join("logs")).map_err(|e| e.in_stage("setup"))?;
    write(&out.join("config.toml"), &cfg.to_toml_string()).map_err(|e| e.in_stage("setup"))?;

    let d = &cfg.data;
    let dataset: Dataset = generate_dataset(&spec, (d.seg, d.rl, d.holdout))
        .and_then(|ds| save_dataset(&ds, &out.join("data")).map(|_| ds))
        .map_err(|e| e.in_stage("data"))?;

    let seg = train_seg(&dataset.split(Split::Seg), &cfg.seg_config()).map_err(|e| e.in_stage("segmenter"))?;
    write(&out.join("segmenter.ckpt"), &seg.params.to_checkpoint()).map_err(|e| e.in_stage("segmenter"))?;
    write(&out.join("logs").join("segmenter.csv"), &seg_log_csv(&seg.epoch_losses))
        .map_err(|e| e.in_stage("segmenter"))?;

    let env = PortionScheme::new(spec.dims.depth, spec.portions)
        .and_then(|scheme| Environment::new(scheme, spec.channels, Segmenter::Trained(seg.params)))
        .map_err(|e| e.in_stage("environment"))?;
    let rl_cases = dataset.split(Split::Rl);
    let init = random_policy(
        spec.portions,
        spec.num_views(),
        spec.channels,
        cfg.reinforce.init_scale,
        cfg.seed,
    );

    let mut gammas = cfg.reinforce.gammas.clone();
    if !gammas.contains(&cfg.grpo.reference_gamma) {
        gammas.push(cfg.grpo.reference_gamma);
    }
    let mut policies = Vec::new();
    let mut reference = None;
    for &gamma in &gammas {
        let (params, log) = train_reinforce(&rl_cases, &env, &cfg.reinforce_config(gamma), init.clone())
            .map_err(|e| e.in_stage("reinforce"))?;
        if gamma == cfg.grpo.reference_gamma {
            reference = Some(params.clone());
        }
        let policy = TrainedPolicy {
            name: reinforce_name(gamma),
            params,
            log,
        };
        save_policy(out, &policy).map_err(|e| e.in_stage("reinforce"))?;
        policies.push(policy);
    }
    let reference = reference.expect("reference gamma is always trained");
    for &beta in &cfg.grpo.betas {
        let (params, log) =
            train_grpo(&rl_cases, &env, &cfg.grpo_config(beta), &reference).map_err(|e| e.in_stage("grpo"))?;
        let policy = TrainedPolicy {
            name: grpo_name(beta),
            params,
            log,
        };
        save_policy(out, &policy).map_err(|e| e.in_stage("grpo"))?;
        policies.push(policy);
    }

    let holdout = dataset.split(Split::Holdout);
    let mut report = EvalReport {
        rows: evaluate_baselines(&env, &holdout, &spec.channel_names).map_err(|e| e.in_stage("eval"))?,
    };
    for policy in &policies {
        let rows = evaluate_agent_both(&env, &policy.params, &holdout, cfg.eval.steps, cfg.seed, &policy.name)
            .map_err(|e| e.in_stage("eval"))?;
        report.rows.extend(rows);
    }
    write(&out.join("eval.csv"), &report.to_csv()).map_err(|e| e.in_stage("eval"))?;
    Ok(ExperimentOutcome {
        report,
        policies,
        out_dir: out.to_path_buf(),
    })
}
