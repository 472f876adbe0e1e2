//! Interactive annotation sessions: an agent or a human steps one case
//! through the environment while the policy ranks the next action.
//!
//! All MDP state lives in [`Session`]; the trace alone reproduces it via
//! [`replay`].

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Environment, EpisodeConfig, Policy, PreparedCase, State};
use crate::error::{Error, Result};
use crate::eval::view_label;
use crate::phantom::Case;
use crate::policy::featurize_with;
use crate::volume::{MultiModalVolume, SoftMask, ViewConfig};

/// Snapshots kept for undo; older steps are rebuilt by replay.
pub const DEFAULT_UNDO_CAPACITY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Only the agent may act.
    AgentAuto,
    HumanInLoop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Agent,
    Human,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub case_id: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_mode() -> Mode {
    Mode::HumanInLoop
}

/// Either a flat index or a `{portion, view}` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionRef {
    Flat(usize),
    Pair { portion: usize, view: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplyRequest {
    pub source: Source,
    /// Optional for the agent, which then takes its top-ranked action.
    #[serde(default)]
    pub action: Option<ActionRef>,
}

impl ApplyRequest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let req: ApplyRequest =
            serde_json::from_slice(bytes).map_err(|e| Error::Validation(format!("apply request: {e}")))?;
        if req.source == Source::Human && req.action.is_none() {
            return Err(Error::Validation("human steps must name an action".into()));
        }
        Ok(req)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub action: usize,
    pub portion: usize,
    pub view: usize,
    pub source: Source,
    pub reward: f64,
    pub dice_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub action: usize,
    pub portion: usize,
    pub view: usize,
    pub label: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub step: usize,
    pub ranked: Vec<RankedAction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSlices {
    pub name: String,
    /// One base64 string per depth slice, `height * width` bytes each.
    pub slices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub case_id: String,
    pub mode: Mode,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub portions: usize,
    pub views: Vec<String>,
    pub step: usize,
    pub dice: f64,
    pub channels: Vec<ChannelSlices>,
    /// Segmentation as 8-bit slices, `round(255 y)`.
    pub overlay: Vec<String>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplyResponse {
    pub reward: f64,
    pub state: StateView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePayload {
    pub session_id: String,
    pub case_id: String,
    pub initial_dice: f64,
    pub dice_trace: Vec<f64>,
    pub history: Vec<HistoryEntry>,
}

/// Min-max scales each channel of the whole case to bytes, slice by slice.
pub fn channel_slices(image: &MultiModalVolume, names: &[String]) -> Vec<ChannelSlices> {
    let dims = image.dims();
    let s = dims.slice_len();
    (0..image.channels())
        .map(|c| {
            let data = image.channel(c);
            let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            let bytes: Vec<u8> = data
                .iter()
                .map(|&v| {
                    if span > 0.0 {
                        (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                })
                .collect();
            ChannelSlices {
                name: names.get(c).cloned().unwrap_or_else(|| format!("ch{c}")),
                slices: bytes.chunks(s).map(|slice| STANDARD.encode(slice)).collect(),
            }
        })
        .collect()
}

pub fn overlay_slices(mask: &SoftMask) -> Vec<String> {
    let s = mask.dims().slice_len();
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&p| (255.0 * p).round().clamp(0.0, 255.0) as u8)
        .collect();
    bytes.chunks(s).map(|slice| STANDARD.encode(slice)).collect()
}

/// Rebuilds the state reached by applying `history` from a fresh reset.
pub fn replay(env: &Environment, prepared: &PreparedCase, history: &[HistoryEntry]) -> Result<State> {
    let space = env.action_space();
    let mut state = env.reset(prepared.case().clone())?;
    for entry in history {
        state = env.step_prepared(prepared, &state, space.action(entry.action)?)?.0;
    }
    Ok(state)
}

pub struct Session {
    id: String,
    mode: Mode,
    prepared: PreparedCase,
    state: State,
    initial_dice: f64,
    history: Vec<HistoryEntry>,
    /// `snapshots[i]` is the state before the i-th most recent remaining step.
    snapshots: VecDeque<State>,
    images: Arc<Vec<ChannelSlices>>,
}

impl Session {
    pub fn state(&self) -> &State {
        &self.state
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }
}

/// Shared registry of sessions over one environment and policy.
pub struct SessionStore<P> {
    env: Arc<Environment>,
    policy: Arc<P>,
    cases: HashMap<String, Arc<Case>>,
    channel_names: Vec<String>,
    horizon: usize,
    undo_capacity: usize,
    next_id: AtomicU64,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
}

impl<P: Policy> SessionStore<P> {
    pub fn new(
        env: Arc<Environment>,
        policy: Arc<P>,
        cases: impl IntoIterator<Item = Arc<Case>>,
        channel_names: Vec<String>,
    ) -> Self {
        SessionStore {
            env,
            policy,
            cases: cases.into_iter().map(|c| (c.id.clone(), c)).collect(),
            channel_names,
            horizon: EpisodeConfig::EVAL_HORIZON,
            undo_capacity: DEFAULT_UNDO_CAPACITY,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_undo_capacity(mut self, capacity: usize) -> Self {
        self.undo_capacity = capacity;
        self
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn case_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.cases.keys().cloned().collect();
        ids.sort();
        ids
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("session {id}")))
    }

    /// Runs `f` on the session, or reports busy if another request holds it.
    pub fn with_session<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let handle = self.handle(id)?;
        let mut guard = match handle.try_lock() {
            Ok(g) => g,
            Err(std::sync::TryLockError::WouldBlock) => {
                return Err(Error::Busy(format!("session {id} has a request in flight")))
            }
            Err(std::sync::TryLockError::Poisoned(_)) => return Err(Error::State(format!("session {id} is poisoned"))),
        };
        f(&mut guard)
    }

    pub fn create(&self, req: &CreateRequest) -> Result<StateView> {
        let case = self
            .cases
            .get(&req.case_id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("case {}", req.case_id)))?;
        let prepared = self.env.prepare(case.clone())?;
        let state = self.env.reset(case.clone())?;
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            id: id.clone(),
            mode: req.mode,
            initial_dice: state.dice(),
            prepared,
            state,
            history: Vec::new(),
            snapshots: VecDeque::new(),
            images: Arc::new(channel_slices(&case.image, &self.channel_names)),
        };
        let view = self.view(&session);
        self.sessions
            .lock()
            .expect("session registry poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    fn view(&self, s: &Session) -> StateView {
        let dims = s.state.case().image.dims();
        StateView {
            session_id: s.id.clone(),
            case_id: s.state.case().id.clone(),
            mode: s.mode,
            height: dims.height,
            width: dims.width,
            depth: dims.depth,
            portions: self.env.scheme().num_portions(),
            views: ViewConfig::all_views(self.env.channels())
                .into_iter()
                .map(|v| view_label(v, &self.channel_names))
                .collect(),
            step: s.state.step(),
            dice: s.state.dice(),
            channels: s.images.as_ref().clone(),
            overlay: overlay_slices(s.state.segmentation()),
            history: s.history.clone(),
        }
    }

    pub fn get_state(&self, id: &str) -> Result<StateView> {
        self.with_session(id, |s| Ok(self.view(s)))
    }

    fn ranked(&self, s: &Session) -> Result<Recommendation> {
        let space = self.env.action_space();
        let feats = featurize_with(
            &s.state,
            s.prepared.stats(),
            self.env.scheme(),
            space.views,
            self.horizon,
        );
        let dist = self.policy.distribution(&feats, &s.state)?;
        let ranked = dist
            .ranked()
            .into_iter()
            .map(|flat| {
                let a = space.action(flat)?;
                let view = self.env.view(a)?;
                Ok(RankedAction {
                    action: flat,
                    portion: a.portion,
                    view: a.view,
                    label: format!("portion {} / {}", a.portion, view_label(view, &self.channel_names)),
                    probability: dist.probs()[flat],
                })
            })
            .collect::<Result<_>>()?;
        Ok(Recommendation {
            step: s.state.step(),
            ranked,
        })
    }

    pub fn recommend(&self, id: &str) -> Result<Recommendation> {
        self.with_session(id, |s| self.ranked(s))
    }

    pub fn apply(&self, id: &str, req: &ApplyRequest) -> Result<ApplyResponse> {
        self.with_session(id, |s| {
            if s.mode == Mode::AgentAuto && req.source == Source::Human {
                return Err(Error::Validation("session is in agent-auto mode".into()));
            }
            let space = self.env.action_space();
            let action = match req.action {
                Some(ActionRef::Flat(flat)) => space.action(flat),
                Some(ActionRef::Pair { portion, view }) => {
                    let a = Action { portion, view };
                    space.check(a).map(|_| a)
                }
                None if req.source == Source::Agent => space.action(self.ranked(s)?.ranked[0].action),
                None => Err(Error::Validation("human steps must name an action".into())),
            }
            .map_err(|e| match e {
                Error::Index(msg) => Error::Validation(format!("illegal action: {msg}")),
                other => other,
            })?;
            let (next, reward) = self.env.step_prepared(&s.prepared, &s.state, action)?;
            let previous = std::mem::replace(&mut s.state, next);
            if self.undo_capacity > 0 {
                if s.snapshots.len() == self.undo_capacity {
                    s.snapshots.pop_front();
                }
                s.snapshots.push_back(previous);
            }
            s.history.push(HistoryEntry {
                step: s.history.len(),
                action: space.flat(action)?,
                portion: action.portion,
                view: action.view,
                source: req.source,
                reward,
                dice_after: s.state.dice(),
            });
            Ok(ApplyResponse {
                reward,
                state: self.view(s),
            })
        })
    }

    pub fn undo(&self, id: &str) -> Result<StateView> {
        self.with_session(id, |s| {
            if s.history.is_empty() {
                return Err(Error::State("nothing to undo at step 0".into()));
            }
            s.history.pop();
            s.state = match s.snapshots.pop_back() {
                Some(state) => state,
                None => replay(&self.env, &s.prepared, &s.history)?,
            };
            Ok(self.view(s))
        })
    }

    pub fn trace(&self, id: &str) -> Result<TracePayload> {
        self.with_session(id, |s| {
            Ok(TracePayload {
                session_id: s.id.clone(),
                case_id: s.state.case().id.clone(),
                initial_dice: s.initial_dice,
                dice_trace: std::iter::once(s.initial_dice)
                    .chain(s.history.iter().map(|h| h.dice_after))
                    .collect(),
                history: s.history.clone(),
            })
        })
    }

    /// Test hook: the session mutex, to simulate an in-flight request.
    #[doc(hidden)]
    pub fn session_handle(&self, id: &str) -> Result<Arc<Mutex<Session>>> {
        self.handle(id)
    }
}
