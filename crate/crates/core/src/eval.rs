//! Holdout evaluation: single-pass baselines per view and agent rollouts.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Environment, EpisodeConfig, Policy, Selection};
use crate::error::{Error, Result};
use crate::phantom::Case;
use crate::trainers::stream_rng;
use crate::volume::{dice, ViewConfig, DEFAULT_DICE_EPSILON};

pub const REPORT_HEADER: &str = "method,mean_dice,std_dice,mean_steps";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub mean_dice: f64,
    pub std_dice: f64,
    /// Blank for single-pass baselines.
    pub mean_steps: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, method: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(REPORT_HEADER.split(',')).expect("in-memory csv write");
        }
        for row in &self.rows {
            w.serialize(row).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::Parse(format!("report: {e}")))?;
        if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
            return Err(Error::Parse(format!("report header must be `{REPORT_HEADER}`")));
        }
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<EvalRow>, _>>()
            .map_err(|e| Error::Parse(format!("report: {e}")))?;
        Ok(EvalReport { rows })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Short label for a view: the channel name, or `all`.
pub fn view_label(view: ViewConfig, channel_names: &[String]) -> String {
    match view {
        ViewConfig::Single(c) => channel_names.get(c).cloned().unwrap_or_else(|| format!("ch{c}")),
        ViewConfig::All => "all".to_string(),
    }
}

fn require_cases(cases: &[Arc<Case>]) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    Ok(())
}

/// Per-case Dice of the single-pass prediction under `view`.
pub fn baseline_dices(env: &Environment, cases: &[Arc<Case>], view: ViewConfig) -> Result<Vec<f64>> {
    cases
        .par_iter()
        .map(|case| {
            let y = env.segmenter().segment_volume(case, env.scheme(), view)?;
            dice(&y, &case.truth, DEFAULT_DICE_EPSILON)
        })
        .collect()
}

/// One row per view, `seg:<label>`, in view order.
pub fn evaluate_baselines(env: &Environment, cases: &[Arc<Case>], channel_names: &[String]) -> Result<Vec<EvalRow>> {
    require_cases(cases)?;
    ViewConfig::all_views(env.channels())
        .into_iter()
        .map(|view| {
            let (mean_dice, std_dice) = mean_std(&baseline_dices(env, cases, view)?);
            Ok(EvalRow {
                method: format!("seg:{}", view_label(view, channel_names)),
                mean_dice,
                std_dice,
                mean_steps: None,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentOutcome {
    pub dice: f64,
    pub steps: usize,
}

/// One seeded rollout per case; case `i` draws from stream `i` of `seed`.
pub fn agent_outcomes<P: Policy + Sync + ?Sized>(
    env: &Environment,
    policy: &P,
    cases: &[Arc<Case>],
    cfg: EpisodeConfig,
    seed: u64,
) -> Result<Vec<AgentOutcome>> {
    if cfg.horizon == 0 {
        return Err(Error::Config("evaluation horizon must be at least 1".into()));
    }
    cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let prepared = env.prepare(case.clone())?;
            let mut rng = stream_rng(seed, i as u64);
            let trace = rollout(env, &prepared, policy, cfg, &mut rng)?;
            Ok(AgentOutcome {
                dice: trace.final_dice(),
                steps: trace.effective_steps(),
            })
        })
        .collect()
}

pub fn evaluate_agent<P: Policy + Sync + ?Sized>(
    env: &Environment,
    policy: &P,
    cases: &[Arc<Case>],
    cfg: EpisodeConfig,
    seed: u64,
    method: &str,
) -> Result<EvalRow> {
    require_cases(cases)?;
    let outcomes = agent_outcomes(env, policy, cases, cfg, seed)?;
    let dices: Vec<f64> = outcomes.iter().map(|o| o.dice).collect();
    let (mean_dice, std_dice) = mean_std(&dices);
    let mean_steps = outcomes.iter().map(|o| o.steps as f64).sum::<f64>() / outcomes.len() as f64;
    Ok(EvalRow {
        method: method.to_string(),
        mean_dice,
        std_dice,
        mean_steps: Some(mean_steps),
    })
}

/// Sampled and greedy rows for one policy, suffixed `:sampled` / `:greedy`.
pub fn evaluate_agent_both<P: Policy + Sync + ?Sized>(
    env: &Environment,
    policy: &P,
    cases: &[Arc<Case>],
    steps: usize,
    seed: u64,
    method: &str,
) -> Result<Vec<EvalRow>> {
    [Selection::Sampled, Selection::Greedy]
        .into_iter()
        .map(|selection| {
            let suffix = match selection {
                Selection::Sampled => "sampled",
                Selection::Greedy => "greedy",
            };
            evaluate_agent(
                env,
                policy,
                cases,
                EpisodeConfig {
                    horizon: steps,
                    selection,
                },
                seed,
                &format!("{method}:{suffix}"),
            )
        })
        .collect()
}
