//! The annotation MDP.
//!
//! A state is a case plus the running segmentation `y_t`. An action picks a
//! depth portion and a view; the transition overwrites that portion of `y_t`
//! with the segmenter's reading and the reward is the drop in Dice loss.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Case;
use crate::policy::{featurize_with, ActionDistribution, PortionStats, StateFeatures};
use crate::segmenter::Segmenter;
use crate::volume::{replace_portion, seg_loss, PortionScheme, SoftMask, ViewConfig};

/// Flat action space of `portions * views` entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    pub portions: usize,
    pub views: usize,
}

impl ActionSpace {
    pub fn new(portions: usize, views: usize) -> Self {
        ActionSpace { portions, views }
    }

    pub fn size(&self) -> usize {
        self.portions * self.views
    }

    pub fn action(&self, flat: usize) -> Result<Action> {
        if flat >= self.size() {
            return Err(Error::Index(format!(
                "action {flat} out of range for {} actions",
                self.size()
            )));
        }
        Ok(Action {
            portion: flat / self.views,
            view: flat % self.views,
        })
    }

    pub fn flat(&self, action: Action) -> Result<usize> {
        self.check(action)?;
        Ok(action.portion * self.views + action.view)
    }

    pub fn check(&self, action: Action) -> Result<()> {
        if action.portion >= self.portions || action.view >= self.views {
            return Err(Error::Index(format!(
                "action (portion {}, view {}) outside {}x{}",
                action.portion, action.view, self.portions, self.views
            )));
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = Action> + '_ {
        (0..self.size()).map(|i| Action {
            portion: i / self.views,
            view: i % self.views,
        })
    }
}

/// Zero-based portion and view indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub portion: usize,
    pub view: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct State {
    case: Arc<Case>,
    segmentation: SoftMask,
    step: usize,
    visited: Vec<bool>,
    loss: f64,
}

impl State {
    pub fn case(&self) -> &Arc<Case> {
        &self.case
    }

    pub fn segmentation(&self) -> &SoftMask {
        &self.segmentation
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Portions selected at least once so far.
    pub fn visited(&self) -> &[bool] {
        &self.visited
    }

    /// Dice loss of the current segmentation against the label.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn dice(&self) -> f64 {
        1.0 - self.loss
    }
}

/// Portion predictions and intensity summaries of one case, computed once.
#[derive(Clone, Debug)]
pub struct PreparedCase {
    case: Arc<Case>,
    predictions: Vec<SoftMask>,
    stats: PortionStats,
}

impl PreparedCase {
    pub fn case(&self) -> &Arc<Case> {
        &self.case
    }

    pub fn stats(&self) -> &PortionStats {
        &self.stats
    }

    pub fn prediction(&self, space: &ActionSpace, action: Action) -> Result<&SoftMask> {
        Ok(&self.predictions[space.flat(action)?])
    }
}

#[derive(Clone, Debug)]
pub struct Environment {
    scheme: PortionScheme,
    channels: usize,
    segmenter: Segmenter,
}

impl Environment {
    pub fn new(scheme: PortionScheme, channels: usize, segmenter: Segmenter) -> Result<Self> {
        if let Segmenter::Trained(params) = &segmenter {
            if params.channels() != channels {
                return Err(Error::Shape(format!(
                    "segmenter built for {} channels, environment has {channels}",
                    params.channels()
                )));
            }
        }
        Ok(Environment {
            scheme,
            channels,
            segmenter,
        })
    }

    pub fn scheme(&self) -> &PortionScheme {
        &self.scheme
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.scheme.num_portions(), ViewConfig::count(self.channels))
    }

    pub fn view(&self, action: Action) -> Result<ViewConfig> {
        ViewConfig::from_index(action.view, self.channels)
    }

    fn check_case(&self, case: &Case) -> Result<()> {
        let dims = case.image.dims();
        if case.image.channels() != self.channels || dims.depth != self.scheme.depth() {
            return Err(Error::Shape(format!(
                "case {} is {}x{} but the environment expects {} channels and depth {}",
                case.id,
                dims,
                case.image.channels(),
                self.channels,
                self.scheme.depth()
            )));
        }
        if case.truth.dims() != dims {
            return Err(Error::Shape(format!("case {} label shape differs", case.id)));
        }
        Ok(())
    }

    /// `s_0`: an all-zero segmentation at step 0.
    pub fn reset(&self, case: Arc<Case>) -> Result<State> {
        self.check_case(&case)?;
        let segmentation = SoftMask::zeros(case.image.dims());
        let loss = seg_loss(&segmentation, &case.truth)?;
        Ok(State {
            visited: vec![false; self.scheme.num_portions()],
            case,
            segmentation,
            step: 0,
            loss,
        })
    }

    /// Runs the segmenter for every action of `case` up front.
    pub fn prepare(&self, case: Arc<Case>) -> Result<PreparedCase> {
        self.check_case(&case)?;
        let space = self.action_space();
        let predictions = space
            .iter()
            .map(|a| {
                let view = self.view(a)?;
                self.segmenter.segment_portion(&case, &self.scheme, a.portion, view)
            })
            .collect::<Result<_>>()?;
        let stats = PortionStats::compute(&case, &self.scheme);
        Ok(PreparedCase {
            case,
            predictions,
            stats,
        })
    }

    /// One transition, reading the portion with the segmenter.
    pub fn step(&self, state: &State, action: Action) -> Result<(State, f64)> {
        self.action_space().check(action)?;
        let part = self
            .segmenter
            .segment_portion(&state.case, &self.scheme, action.portion, self.view(action)?)?;
        self.transition(state, action, &part)
    }

    /// Same transition as [`Environment::step`] using cached predictions.
    pub fn step_prepared(&self, prepared: &PreparedCase, state: &State, action: Action) -> Result<(State, f64)> {
        if !Arc::ptr_eq(&prepared.case, &state.case) && prepared.case.id != state.case.id {
            return Err(Error::State(format!(
                "prepared case {} used with state of case {}",
                prepared.case.id, state.case.id
            )));
        }
        let part = prepared.prediction(&self.action_space(), action)?;
        self.transition(state, action, part)
    }

    fn transition(&self, state: &State, action: Action, part: &SoftMask) -> Result<(State, f64)> {
        let segmentation = replace_portion(&state.segmentation, &self.scheme, action.portion, part)?;
        let loss = seg_loss(&segmentation, &state.case.truth)?;
        let reward = state.loss - loss;
        let mut visited = state.visited.clone();
        visited[action.portion] = true;
        Ok((
            State {
                case: state.case.clone(),
                segmentation,
                step: state.step + 1,
                visited,
                loss,
            },
            reward,
        ))
    }
}

/// Anything that yields an action distribution for a state.
pub trait Policy {
    fn distribution(&self, features: &StateFeatures, state: &State) -> Result<ActionDistribution>;
}

/// Plays a fixed action list, one per step; repeats the last action afterwards.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    space: ActionSpace,
    actions: Vec<Action>,
}

impl ScriptedPolicy {
    pub fn new(space: ActionSpace, actions: Vec<Action>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::Config("scripted policy needs at least one action".into()));
        }
        for &a in &actions {
            space.check(a)?;
        }
        Ok(ScriptedPolicy { space, actions })
    }

    /// Every portion once, all with the same view.
    pub fn sweep(space: ActionSpace, view: usize) -> Result<Self> {
        ScriptedPolicy::new(
            space,
            (0..space.portions).map(|portion| Action { portion, view }).collect(),
        )
    }
}

impl Policy for ScriptedPolicy {
    fn distribution(&self, _: &StateFeatures, state: &State) -> Result<ActionDistribution> {
        let a = self.actions[state.step().min(self.actions.len() - 1)];
        ActionDistribution::one_hot(self.space.size(), self.space.flat(a)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Sampled,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub horizon: usize,
    pub selection: Selection,
}

impl EpisodeConfig {
    pub const TRAIN_HORIZON: usize = 60;
    pub const EVAL_HORIZON: usize = 10;

    pub fn sampled(horizon: usize) -> Self {
        EpisodeConfig {
            horizon,
            selection: Selection::Sampled,
        }
    }

    pub fn greedy(horizon: usize) -> Self {
        EpisodeConfig {
            horizon,
            selection: Selection::Greedy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Policy input at `s_t`.
    pub features: StateFeatures,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub dice_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub case_id: String,
    pub initial_dice: f64,
    pub records: Vec<StepRecord>,
}

impl EpisodeTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn final_dice(&self) -> f64 {
        self.records.last().map_or(self.initial_dice, |r| r.dice_after)
    }

    /// Dice before any step followed by the Dice after each step.
    pub fn dice_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_dice)
            .chain(self.records.iter().map(|r| r.dice_after))
            .collect()
    }

    /// Earliest step at which the final Dice was first reached.
    pub fn effective_steps(&self) -> usize {
        effective_steps(&self.dice_curve())
    }

    pub fn to_log_lines(&self) -> Vec<TraceLine> {
        self.records
            .iter()
            .enumerate()
            .map(|(step, r)| TraceLine {
                step,
                action: r.action,
                reward: r.reward,
                log_prob: r.log_prob,
                dice_after: r.dice_after,
            })
            .collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for line in self.to_log_lines() {
            out.push_str(&serde_json::to_string(&line).expect("trace line serializes"));
            out.push('\n');
        }
        out
    }
}

/// Smallest `t` with `curve[t] == curve.last()`.
pub fn effective_steps(curve: &[f64]) -> usize {
    match curve.last() {
        Some(&last) => curve.iter().position(|&d| d == last).unwrap_or(0),
        None => 0,
    }
}

/// A persisted step of an episode log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceLine {
    pub step: usize,
    pub action: usize,
    pub reward: f64,
    pub log_prob: f64,
    pub dice_after: f64,
}

/// Parses and validates a line-delimited episode log.
pub fn parse_trace_log(text: &str) -> Result<Vec<TraceLine>> {
    let mut lines = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: TraceLine =
            serde_json::from_str(raw).map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 1)))?;
        if line.step != lines.len() {
            return Err(Error::Parse(format!(
                "trace line {} has step {}, expected {}",
                n + 1,
                line.step,
                lines.len()
            )));
        }
        if !(line.reward.is_finite() && line.reward.abs() <= 1.0) {
            return Err(Error::Parse(format!("trace line {}: reward out of range", n + 1)));
        }
        if line.log_prob.is_nan() || line.log_prob > 0.0 || !(0.0..=1.0).contains(&line.dice_after) {
            return Err(Error::Parse(format!("trace line {}: invalid values", n + 1)));
        }
        lines.push(line);
    }
    Ok(lines)
}

/// Plays one episode of `cfg.horizon` steps.
pub fn rollout<P: Policy + ?Sized>(
    env: &Environment,
    prepared: &PreparedCase,
    policy: &P,
    cfg: EpisodeConfig,
    rng: &mut impl Rng,
) -> Result<EpisodeTrace> {
    if cfg.horizon == 0 {
        return Err(Error::Config("episode horizon must be at least 1".into()));
    }
    let space = env.action_space();
    let mut state = env.reset(prepared.case.clone())?;
    let initial_dice = state.dice();
    let mut records = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let features = featurize_with(&state, &prepared.stats, &env.scheme, space.views, cfg.horizon);
        let dist = policy.distribution(&features, &state)?;
        let flat = match cfg.selection {
            Selection::Sampled => dist.sample(rng),
            Selection::Greedy => dist.greedy(),
        };
        let log_prob = dist.log_prob(flat);
        let (next, reward) = env.step_prepared(prepared, &state, space.action(flat)?)?;
        records.push(StepRecord {
            features,
            action: flat,
            reward,
            log_prob,
            dice_after: next.dice(),
        });
        state = next;
    }
    Ok(EpisodeTrace {
        case_id: prepared.case.id.clone(),
        initial_dice,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, Lesion, WorldSpec};
    use crate::policy::PolicyParams;
    use crate::segmenter::SegParams;
    use crate::volume::Dims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> WorldSpec {
        WorldSpec {
            dims: Dims {
                height: 8,
                width: 8,
                depth: 4,
            },
            portions: 2,
            lesion_radius_range: (1.0, 1.5),
            noise_sd: 0.5,
            ..WorldSpec::desk(11)
        }
    }

    fn portion_one_case() -> Arc<Case> {
        let lesion = Lesion {
            center: [0.5, 3.5, 3.5],
            radii: [0.9, 2.0, 2.0],
            visible_in: vec![0],
        };
        Arc::new(Case::from_lesions(&spec(), "p1", vec![lesion], &mut ChaCha8Rng::seed_from_u64(1)).unwrap())
    }

    fn oracle_env() -> Environment {
        Environment::new(PortionScheme::new(4, 2).unwrap(), 2, Segmenter::Oracle).unwrap()
    }

    #[test]
    fn action_encoding() {
        let space = ActionSpace::new(4, 3);
        for flat in 0..12 {
            let a = space.action(flat).unwrap();
            assert_eq!(space.flat(a).unwrap(), flat);
        }
        assert_eq!(space.action(5).unwrap(), Action { portion: 1, view: 2 });
        assert!(space.action(12).is_err());
        assert!(space.flat(Action { portion: 4, view: 0 }).is_err());
    }

    #[test]
    fn reset_is_empty_and_repeatable() {
        let env = oracle_env();
        let case = portion_one_case();
        let s0 = env.reset(case.clone()).unwrap();
        assert_eq!(s0.segmentation().sum(), 0.0);
        assert_eq!(s0.step(), 0);
        assert!(s0.dice() < 1e-6);
        assert_eq!(env.reset(case).unwrap(), s0);
    }

    #[test]
    fn exact_read_of_the_only_lesion_portion() {
        let env = oracle_env();
        let case = portion_one_case();
        let s0 = env.reset(case.clone()).unwrap();
        let all = Action { portion: 0, view: 2 };
        let (s1, r) = env.step(&s0, all).unwrap();
        let expected = seg_loss(&SoftMask::zeros(case.truth.dims()), &case.truth).unwrap();
        assert!((r - expected).abs() < 1e-15);
        assert!(r > 0.0);
        assert_eq!(s1.segmentation(), &case.truth);
        assert_eq!(s1.step(), 1);

        let (s2, r2) = env.step(&s1, all).unwrap();
        assert_eq!(r2, 0.0);
        assert_eq!(s2.segmentation(), s1.segmentation());

        // portion 2 holds nothing and the oracle reads nothing there
        let (_, r3) = env.step(&s1, Action { portion: 1, view: 0 }).unwrap();
        assert_eq!(r3, 0.0);
    }

    #[test]
    fn invalid_action_is_rejected() {
        let env = oracle_env();
        let s0 = env.reset(portion_one_case()).unwrap();
        assert!(matches!(
            env.step(&s0, Action { portion: 2, view: 0 }),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cached_and_direct_steps_agree() {
        let params = SegParams::from_weights(2, vec![0.8, 0.5, 1.0, 0.7, -0.2, -0.3, -1.5]).unwrap();
        let env = Environment::new(PortionScheme::new(4, 2).unwrap(), 2, Segmenter::Trained(params)).unwrap();
        let case = Arc::new(generate_case(&spec(), 4).unwrap());
        let prepared = env.prepare(case.clone()).unwrap();
        let mut a = env.reset(case).unwrap();
        let mut b = a.clone();
        for flat in [0, 5, 3, 1] {
            let act = env.action_space().action(flat).unwrap();
            let (na, ra) = env.step(&a, act).unwrap();
            let (nb, rb) = env.step_prepared(&prepared, &b, act).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(na, nb);
            a = na;
            b = nb;
        }
    }

    #[test]
    fn markov_replay_from_two_histories() {
        let params = SegParams::from_weights(2, vec![0.8, 0.5, 1.0, 0.7, -0.2, -0.3, -1.5]).unwrap();
        let env = Environment::new(PortionScheme::new(4, 2).unwrap(), 2, Segmenter::Trained(params)).unwrap();
        let case = Arc::new(generate_case(&spec(), 6).unwrap());
        let space = env.action_space();
        let s0 = env.reset(case).unwrap();
        // (0,all) then (1,t2) vs (1,dw) then (0,all) then (1,t2): same y, different paths
        let run = |flats: &[usize]| {
            flats
                .iter()
                .fold(s0.clone(), |s, &f| env.step(&s, space.action(f).unwrap()).unwrap().0)
        };
        let a = run(&[2, 3]);
        let b = run(&[4, 2, 3]);
        assert_eq!(a.segmentation(), b.segmentation());
        let next = space.action(5).unwrap();
        let (na, ra) = env.step(&a, next).unwrap();
        let (nb, rb) = env.step(&b, next).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(na.segmentation(), nb.segmentation());
    }

    #[test]
    fn rollout_lengths_and_telescoping() {
        let env = oracle_env();
        let case = Arc::new(generate_case(&spec(), 2).unwrap());
        let prepared = env.prepare(case.clone()).unwrap();
        let policy = PolicyParams::zeros(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = rollout(&env, &prepared, &policy, EpisodeConfig::sampled(1), &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        let t = rollout(&env, &prepared, &policy, EpisodeConfig::sampled(7), &mut rng).unwrap();
        let lhs = t.total_reward();
        let rhs = (1.0 - t.initial_dice) - (1.0 - t.final_dice());
        assert!((lhs - rhs).abs() <= 1e-12);
        assert!(t.records.iter().all(|r| r.reward.abs() < 1.0));
        assert!(rollout(&env, &prepared, &policy, EpisodeConfig::sampled(0), &mut rng).is_err());
    }

    #[test]
    fn sweep_with_all_view_recovers_truth() {
        let env = oracle_env();
        let case = Arc::new(generate_case(&spec(), 9).unwrap());
        let prepared = env.prepare(case).unwrap();
        let sweep = ScriptedPolicy::sweep(env.action_space(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = rollout(&env, &prepared, &sweep, EpisodeConfig::sampled(2), &mut rng).unwrap();
        assert!((t.final_dice() - 1.0).abs() < 1e-12);
        assert!(t.records.iter().all(|r| r.log_prob == 0.0));
    }

    #[test]
    fn rollout_is_deterministic() {
        let env = oracle_env();
        let case = Arc::new(generate_case(&spec(), 2).unwrap());
        let prepared = env.prepare(case).unwrap();
        let policy = PolicyParams::zeros(2, 3, 2);
        let a = rollout(
            &env,
            &prepared,
            &policy,
            EpisodeConfig::sampled(10),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        let b = rollout(
            &env,
            &prepared,
            &policy,
            EpisodeConfig::sampled(10),
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn effective_step_rule() {
        assert_eq!(effective_steps(&[0.0, 0.5, 0.5, 0.7, 0.7]), 3);
        assert_eq!(effective_steps(&[0.2, 0.2]), 0);
        assert_eq!(effective_steps(&[0.0, 0.5, 0.3, 0.5]), 1);
    }

    #[test]
    fn trace_log_round_trip_and_validation() {
        let env = oracle_env();
        let case = Arc::new(generate_case(&spec(), 2).unwrap());
        let prepared = env.prepare(case).unwrap();
        let policy = PolicyParams::zeros(2, 3, 2);
        let t = rollout(
            &env,
            &prepared,
            &policy,
            EpisodeConfig::sampled(4),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let parsed = parse_trace_log(&t.to_jsonl()).unwrap();
        assert_eq!(parsed, t.to_log_lines());
        assert!(parse_trace_log("{\"step\":1,\"action\":0,\"reward\":0,\"log_prob\":0,\"dice_after\":0}").is_err());
        assert!(parse_trace_log("not json").is_err());
        assert!(parse_trace_log("").unwrap().is_empty());
    }
}
