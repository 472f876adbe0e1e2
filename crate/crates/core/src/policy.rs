//! Linear softmax policy over the flat portion-by-view action space.
//!
//! State features are laid out per action slot `(p, m)` followed by one bias:
//! `C` channel means and `C` channel standard deviations inside portion `p`
//! (zero for channels view `m` hides), the mean of the current segmentation
//! inside `p`, whether `p` has been selected before, and the step fraction
//! `t / T`. That gives `F = P·M·(2C + 3) + 1` inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Policy, State};
use crate::error::{Error, Result};
use crate::phantom::Case;
use crate::segmenter::parse_field;
use crate::volume::{PortionScheme, ViewConfig};

const CHECKPOINT_MAGIC: &str = "modsel-policy";
const CHECKPOINT_VERSION: u32 = 1;

pub fn feature_len(portions: usize, views: usize, channels: usize) -> usize {
    portions * views * (2 * channels + 3) + 1
}

/// Per-portion, per-channel intensity mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct PortionStats {
    channels: usize,
    means: Vec<f64>,
    sds: Vec<f64>,
}

impl PortionStats {
    pub fn compute(case: &Case, scheme: &PortionScheme) -> Self {
        let channels = case.image.channels();
        let s = case.image.dims().slice_len();
        let mut means = Vec::with_capacity(scheme.num_portions() * channels);
        let mut sds = Vec::with_capacity(means.capacity());
        for range in scheme.bounds() {
            for c in 0..channels {
                let vals = &case.image.channel(c)[range.start * s..range.end * s];
                let n = vals.len() as f64;
                let mean = vals.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                means.push(mean);
                sds.push(var.sqrt());
            }
        }
        PortionStats { channels, means, sds }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateFeatures(Vec<f64>);

impl StateFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        StateFeatures(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn featurize(state: &State, scheme: &PortionScheme, views: usize, horizon: usize) -> StateFeatures {
    let stats = PortionStats::compute(state.case(), scheme);
    featurize_with(state, &stats, scheme, views, horizon)
}

pub fn featurize_with(
    state: &State,
    stats: &PortionStats,
    scheme: &PortionScheme,
    views: usize,
    horizon: usize,
) -> StateFeatures {
    let channels = stats.channels;
    let y = state.segmentation();
    let s = y.dims().slice_len();
    let step_fraction = if horizon == 0 {
        1.0
    } else {
        (state.step() as f64 / horizon as f64).min(1.0)
    };
    let mut out = Vec::with_capacity(feature_len(scheme.num_portions(), views, channels));
    for (p, range) in scheme.bounds().iter().enumerate() {
        let seg = &y.data()[range.start * s..range.end * s];
        let seg_mean = seg.iter().sum::<f64>() / seg.len() as f64;
        let visited = if state.visited()[p] { 1.0 } else { 0.0 };
        for m in 0..views {
            let view = ViewConfig::from_index(m, channels).unwrap_or(ViewConfig::All);
            for c in 0..channels {
                out.push(if view.shows(c) {
                    stats.means[p * channels + c]
                } else {
                    0.0
                });
            }
            for c in 0..channels {
                out.push(if view.shows(c) {
                    stats.sds[p * channels + c]
                } else {
                    0.0
                });
            }
            out.push(seg_mean);
            out.push(visited);
            out.push(step_fraction);
        }
    }
    out.push(1.0);
    StateFeatures(out)
}

/// A probability vector over flat actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    probs: Vec<f64>,
}

impl ActionDistribution {
    /// Softmax with max subtraction.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        ActionDistribution {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|p| p.is_nan() || *p < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation("not a probability vector".into()));
        }
        Ok(ActionDistribution { probs })
    }

    pub fn one_hot(size: usize, index: usize) -> Result<Self> {
        if index >= size {
            return Err(Error::Index(format!("one-hot index {index} >= {size}")));
        }
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Ok(ActionDistribution { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob(&self, index: usize) -> f64 {
        self.probs[index].ln()
    }

    /// Inverse-CDF draw.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding gap above the last partial sum
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Argmax; ties go to the lowest index.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Indices sorted by decreasing probability, ties by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx
    }
}

/// Weight matrix of shape `(P·M) x F`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    portions: usize,
    views: usize,
    channels: usize,
    features: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(portions: usize, views: usize, channels: usize) -> Self {
        let features = feature_len(portions, views, channels);
        PolicyParams {
            portions,
            views,
            channels,
            features,
            weights: vec![0.0; portions * views * features],
        }
    }

    pub fn from_weights(portions: usize, views: usize, channels: usize, weights: Vec<f64>) -> Result<Self> {
        let mut p = PolicyParams::zeros(portions, views, channels);
        if weights.len() != p.weights.len() {
            return Err(Error::Shape(format!(
                "policy needs {} weights, got {}",
                p.weights.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("policy weights must be finite".into()));
        }
        p.weights = weights;
        Ok(p)
    }

    pub fn num_actions(&self) -> usize {
        self.portions * self.views
    }

    pub fn num_features(&self) -> usize {
        self.features
    }

    pub fn portions(&self) -> usize {
        self.portions
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        (self.portions, self.views, self.channels) == (other.portions, other.views, other.channels)
    }

    /// `self += scale * delta`.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        debug_assert_eq!(delta.len(), self.weights.len());
        for (w, d) in self.weights.iter_mut().zip(delta) {
            *w += scale * d;
        }
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn check_features(&self, feats: &StateFeatures) -> Result<()> {
        if feats.len() != self.features {
            return Err(Error::Shape(format!(
                "policy expects {} features, got {}",
                self.features,
                feats.len()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, feats: &StateFeatures) -> Result<Vec<f64>> {
        self.check_features(feats)?;
        Ok(self
            .weights
            .chunks(self.features)
            .map(|row| row.iter().zip(feats.as_slice()).map(|(w, f)| w * f).sum())
            .collect())
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nportions {}\nviews {}\nchannels {}\nfeatures {}\n",
            self.portions, self.views, self.channels, self.features
        );
        for row in self.weights.chunks(self.features) {
            let line: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("policy checkpoint: missing `{key}`")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::Parse(format!(
                    "policy checkpoint: expected `{key}`, found {line:?}"
                ))),
            }
        };
        if header(CHECKPOINT_MAGIC)? != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Parse("unsupported policy checkpoint version".into()));
        }
        let portions: usize = parse_field(&header("portions")?, "portions")?;
        let views: usize = parse_field(&header("views")?, "views")?;
        let channels: usize = parse_field(&header("channels")?, "channels")?;
        let features: usize = parse_field(&header("features")?, "features")?;
        if portions == 0 || channels == 0 || views != channels + 1 {
            return Err(Error::Parse(format!(
                "policy checkpoint shape P={portions} M={views} C={channels} invalid"
            )));
        }
        // caps the allocation a hostile header can request
        if portions > 4096 || channels > 64 {
            return Err(Error::Parse("policy checkpoint shape too large".into()));
        }
        if features != feature_len(portions, views, channels) {
            return Err(Error::Parse(format!(
                "policy checkpoint declares F={features}, layout needs {}",
                feature_len(portions, views, channels)
            )));
        }
        let mut weights = Vec::with_capacity(portions * views * features);
        let mut rows = 0;
        for line in lines {
            let row = line
                .split_whitespace()
                .map(|t| parse_field::<f64>(t, "weight"))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != features {
                return Err(Error::Parse(format!(
                    "policy checkpoint row {rows} has {} entries, expected {features}",
                    row.len()
                )));
            }
            weights.extend(row);
            rows += 1;
        }
        if rows != portions * views {
            return Err(Error::Parse(format!(
                "policy checkpoint has {rows} rows, expected {}",
                portions * views
            )));
        }
        PolicyParams::from_weights(portions, views, channels, weights).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// `π_φ(· | s)` as a softmax of the linear logits.
pub fn action_distribution(params: &PolicyParams, feats: &StateFeatures) -> Result<ActionDistribution> {
    Ok(ActionDistribution::from_logits(&params.logits(feats)?))
}

/// `∇_φ ln π(a | s)`: row `a` gets `(1 − π_a)·x`, every other row `b` gets `−π_b·x`.
pub fn log_prob_gradient(params: &PolicyParams, feats: &StateFeatures, action: usize) -> Result<Vec<f64>> {
    let dist = action_distribution(params, feats)?;
    if action >= params.num_actions() {
        return Err(Error::Index(format!(
            "action {action} out of range for {} actions",
            params.num_actions()
        )));
    }
    let mut grad = vec![0.0; params.weights.len()];
    accumulate_log_prob_gradient(&mut grad, &dist, feats, action, 1.0);
    Ok(grad)
}

/// `grad += scale · ∇ ln π(action | s)` given the distribution at `s`.
pub(crate) fn accumulate_log_prob_gradient(
    grad: &mut [f64],
    dist: &ActionDistribution,
    feats: &StateFeatures,
    action: usize,
    scale: f64,
) {
    let x = feats.as_slice();
    let f = x.len();
    for (b, &pb) in dist.probs().iter().enumerate() {
        let coef = scale * (if b == action { 1.0 } else { 0.0 } - pb);
        if coef == 0.0 {
            continue;
        }
        for (g, xi) in grad[b * f..(b + 1) * f].iter_mut().zip(x) {
            *g += coef * xi;
        }
    }
}

impl Policy for PolicyParams {
    fn distribution(&self, features: &StateFeatures, _: &State) -> Result<ActionDistribution> {
        action_distribution(self, features)
    }
}
