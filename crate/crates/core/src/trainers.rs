//! Policy optimization: Monte-Carlo REINFORCE and GRPO.
//!
//! Both trainers ascend expected return. REINFORCE weights each step's score
//! function by the discounted reward-to-go and averages over the episode.
//! GRPO rolls out a group of episodes per case, normalizes their returns
//! within the group, and maximizes a clipped-ratio surrogate minus a KL
//! penalty towards a frozen reference policy.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, Environment, EpisodeConfig, EpisodeTrace, PreparedCase};
use crate::error::{Error, Result};
use crate::phantom::Case;
use crate::policy::{accumulate_log_prob_gradient, action_distribution, PolicyParams, StateFeatures};

/// Independent ChaCha stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `u_t = R_t + γ u_{t+1}`, truncated at the end of the episode.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut next = 0.0;
    for (t, &r) in rewards.iter().enumerate().rev() {
        next = r + gamma * next;
        out[t] = next;
    }
    out
}

/// Small Gaussian weights, seeded.
pub fn random_policy(portions: usize, views: usize, channels: usize, scale: f64, seed: u64) -> PolicyParams {
    let mut params = PolicyParams::zeros(portions, views, channels);
    if scale > 0.0 {
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in params.weights_mut() {
            *w = normal.sample(&mut rng);
        }
    }
    params
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReinforceConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for ReinforceConfig {
    fn default() -> Self {
        ReinforceConfig {
            gamma: 0.5,
            learning_rate: 0.05,
            epochs: 30,
            horizon: EpisodeConfig::TRAIN_HORIZON,
            seed: 0,
        }
    }
}

impl ReinforceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub beta: f64,
    pub group_size: usize,
    pub clip_epsilon: f64,
    /// Plain SGD. The KL term has curvature about `β·λ` with `λ` the largest
    /// Fisher eigenvalue (a few units on the desk world), so large `β` needs
    /// `learning_rate·β·λ < 2` to stay stable.
    pub learning_rate: f64,
    pub epochs: usize,
    pub horizon: usize,
    /// Gradient steps per group; the ratio is exactly 1 on the first.
    pub inner_steps: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            beta: 0.5,
            group_size: 8,
            clip_epsilon: 0.2,
            learning_rate: 0.05,
            epochs: 30,
            horizon: EpisodeConfig::TRAIN_HORIZON,
            inner_steps: 1,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size {} < 2 leaves group statistics undefined",
                self.group_size
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta {} invalid", self.beta)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon.is_finite()) {
            return Err(Error::Config(format!("clip epsilon {} invalid", self.clip_epsilon)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.horizon == 0 || self.inner_steps == 0 {
            return Err(Error::Config("horizon and inner steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_return: f64,
    pub mean_final_dice: f64,
    pub entropy: f64,
    pub kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,mean_return,mean_final_dice,entropy,kl`; `kl` is blank without a reference.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.epochs {
            w.serialize(row).expect("in-memory csv write");
        }
        if self.epochs.is_empty() {
            w.write_record(["epoch", "mean_return", "mean_final_dice", "entropy", "kl"])
                .expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
    }
}

fn check_traces(traces: &[EpisodeTrace], horizon: usize) -> Result<()> {
    if traces.is_empty() {
        return Err(Error::Config("no episodes to learn from".into()));
    }
    if let Some(t) = traces.iter().find(|t| t.len() != horizon) {
        return Err(Error::Config(format!(
            "episode of length {} in a batch with horizon {horizon}",
            t.len()
        )));
    }
    Ok(())
}

/// Batch mean of `(1/T) Σ_t u_t ∇ ln π(a_t | s_t)`.
pub fn reinforce_gradient(params: &PolicyParams, traces: &[EpisodeTrace], gamma: f64) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.weights().len()];
    for trace in traces {
        let returns = discounted_returns(&trace.rewards(), gamma);
        let scale = 1.0 / (trace.len() as f64 * traces.len() as f64);
        for (rec, u) in trace.records.iter().zip(returns) {
            if u == 0.0 {
                continue;
            }
            let dist = action_distribution(params, &rec.features)?;
            accumulate_log_prob_gradient(&mut grad, &dist, &rec.features, rec.action, scale * u);
        }
    }
    Ok(grad)
}

/// One ascent step `φ ← φ + lr · reinforce_gradient`.
pub fn reinforce_update(params: &PolicyParams, traces: &[EpisodeTrace], cfg: &ReinforceConfig) -> Result<PolicyParams> {
    cfg.validate()?;
    check_traces(traces, cfg.horizon)?;
    let grad = reinforce_gradient(params, traces, cfg.gamma)?;
    let mut next = params.clone();
    next.add_scaled(&grad, cfg.learning_rate);
    Ok(next)
}

fn check_policy_fits(params: &PolicyParams, env: &Environment) -> Result<()> {
    let space = env.action_space();
    if params.portions() != space.portions || params.views() != space.views || params.channels() != env.channels() {
        return Err(Error::Shape(format!(
            "policy shaped for P={} M={} C={}, environment has P={} M={} C={}",
            params.portions(),
            params.views(),
            params.channels(),
            space.portions,
            space.views,
            env.channels()
        )));
    }
    Ok(())
}

fn prepare_all(env: &Environment, cases: &[Arc<Case>]) -> Result<Vec<PreparedCase>> {
    cases.par_iter().map(|c| env.prepare(c.clone())).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean_entropy(params: &PolicyParams, traces: &[EpisodeTrace]) -> Result<f64> {
    let mut values = Vec::new();
    for t in traces {
        for r in &t.records {
            values.push(action_distribution(params, &r.features)?.entropy());
        }
    }
    Ok(mean(values))
}

/// Algorithm: for each epoch, visit the cases in a seeded shuffled order,
/// roll out one on-policy episode and update immediately.
pub fn train_reinforce(
    cases: &[Arc<Case>],
    env: &Environment,
    cfg: &ReinforceConfig,
    init: PolicyParams,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Config("policy training set is empty".into()));
    }
    check_policy_fits(&init, env)?;
    let prepared = prepare_all(env, cases)?;
    let mut params = init;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, 0);
    let mut episode_rng = stream_rng(cfg.seed, 1);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut returns, mut dices, mut entropies) = (Vec::new(), Vec::new(), Vec::new());
        for &i in &order {
            let trace = rollout(
                env,
                &prepared[i],
                &params,
                EpisodeConfig::sampled(cfg.horizon),
                &mut episode_rng,
            )?;
            returns.push(trace.total_reward());
            dices.push(trace.final_dice());
            entropies.push(mean_entropy(&params, std::slice::from_ref(&trace))?);
            params = reinforce_update(&params, std::slice::from_ref(&trace), cfg)?;
        }
        log.epochs.push(EpochStats {
            epoch,
            mean_return: mean(returns),
            mean_final_dice: mean(dices),
            entropy: mean(entropies),
            kl: None,
        });
    }
    Ok((params, log))
}

/// `(r_i − mean) / (std + 1e-8)` with the population standard deviation.
pub fn grpo_advantages(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.len() < 2 {
        return Err(Error::Config(format!(
            "group of {} returns; need at least 2",
            returns.len()
        )));
    }
    let n = returns.len() as f64;
    let m = returns.iter().sum::<f64>() / n;
    let sd = (returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n).sqrt();
    Ok(returns.iter().map(|r| (r - m) / (sd + 1e-8)).collect())
}

/// `Σ_a π_a ln(π_a / π'_a)` over the whole action set.
pub fn exact_kl(params: &PolicyParams, other: &PolicyParams, feats: &StateFeatures) -> Result<f64> {
    if !params.same_shape(other) {
        return Err(Error::Shape("KL between policies of different shape".into()));
    }
    let p = action_distribution(params, feats)?;
    let q = action_distribution(other, feats)?;
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .filter(|(&pa, _)| pa > 0.0)
        .map(|(&pa, &qa)| pa * (pa / qa).ln())
        .sum::<f64>()
        .max(0.0))
}

/// Mean [`exact_kl`] over the states visited by `traces`.
pub fn mean_exact_kl(params: &PolicyParams, other: &PolicyParams, traces: &[EpisodeTrace]) -> Result<f64> {
    let mut values = Vec::new();
    for t in traces {
        for r in &t.records {
            values.push(exact_kl(params, other, &r.features)?);
        }
    }
    Ok(mean(values))
}

/// Gradient of the GRPO objective
/// `(1/G) Σ_i (1/T) Σ_t [min(ρ A_i, clip(ρ, 1−ε, 1+ε) A_i) − β k3]`
/// where `ρ = π_φ / π_old` at the taken action, `π_old` is the rollout-time
/// policy recorded in the trace, and `k3 = r − ln r − 1` with `r = π_ref / π_φ`.
pub fn grpo_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &[EpisodeTrace],
    advantages: &[f64],
    cfg: &GrpoConfig,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.weights().len()];
    let eps = cfg.clip_epsilon;
    for (trace, &adv) in group.iter().zip(advantages) {
        let scale = 1.0 / (trace.len() as f64 * group.len() as f64);
        for rec in &trace.records {
            let dist = action_distribution(params, &rec.features)?;
            let log_pi = dist.log_prob(rec.action);
            let ratio = (log_pi - rec.log_prob).exp();
            // the min picks the clipped branch, whose gradient is zero
            let clipped = (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps);
            let surrogate = if clipped { 0.0 } else { adv * ratio };
            let kl = if cfg.beta > 0.0 {
                let log_ref = action_distribution(reference, &rec.features)?.log_prob(rec.action);
                cfg.beta * ((log_ref - log_pi).exp() - 1.0)
            } else {
                0.0
            };
            let coef = surrogate + kl;
            if coef != 0.0 {
                accumulate_log_prob_gradient(&mut grad, &dist, &rec.features, rec.action, scale * coef);
            }
        }
    }
    Ok(grad)
}

/// Updates on one case's group of `G` episodes.
pub fn grpo_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &[EpisodeTrace],
    cfg: &GrpoConfig,
) -> Result<PolicyParams> {
    cfg.validate()?;
    if group.len() != cfg.group_size {
        return Err(Error::Config(format!(
            "group holds {} episodes, expected {}",
            group.len(),
            cfg.group_size
        )));
    }
    check_traces(group, cfg.horizon)?;
    if !params.same_shape(reference) {
        return Err(Error::Shape("reference policy shape differs".into()));
    }
    let returns: Vec<f64> = group.iter().map(EpisodeTrace::total_reward).collect();
    let advantages = grpo_advantages(&returns)?;
    let mut next = params.clone();
    for _ in 0..cfg.inner_steps {
        let grad = grpo_gradient(&next, reference, group, &advantages, cfg)?;
        next.add_scaled(&grad, cfg.learning_rate);
    }
    Ok(next)
}

/// GRPO starting from the reference policy. Each case's group is rolled out
/// in parallel from a snapshot, one ChaCha stream per episode.
pub fn train_grpo(
    cases: &[Arc<Case>],
    env: &Environment,
    cfg: &GrpoConfig,
    reference: &PolicyParams,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if cases.is_empty() {
        return Err(Error::Config("policy training set is empty".into()));
    }
    check_policy_fits(reference, env)?;
    let prepared = prepare_all(env, cases)?;
    let mut params = reference.clone();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = stream_rng(cfg.seed, 0);
    let mut episode_counter: u64 = 1;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut returns, mut dices, mut entropies, mut kls) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &i in &order {
            let snapshot = &params;
            let first_stream = episode_counter;
            let group = (0..cfg.group_size as u64)
                .into_par_iter()
                .map(|g| {
                    let mut rng = stream_rng(cfg.seed, first_stream + g);
                    rollout(
                        env,
                        &prepared[i],
                        snapshot,
                        EpisodeConfig::sampled(cfg.horizon),
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            episode_counter += cfg.group_size as u64;
            returns.extend(group.iter().map(EpisodeTrace::total_reward));
            dices.extend(group.iter().map(EpisodeTrace::final_dice));
            entropies.push(mean_entropy(&params, &group)?);
            kls.push(mean_exact_kl(&params, reference, &group)?);
            params = grpo_update(&params, reference, &group, cfg)?;
        }
        log.epochs.push(EpochStats {
            epoch,
            mean_return: mean(returns),
            mean_final_dice: mean(dices),
            entropy: mean(entropies),
            kl: Some(mean(kls)),
        });
    }
    Ok((params, log))
}
