//! The simulated reader: a per-voxel logistic segmenter trained with soft
//! Dice loss under random view masking, plus an exact lesion-metadata oracle.
//!
//! Voxel features, for `C` channels, in order:
//!
//! | slots        | meaning                                              |
//! |--------------|------------------------------------------------------|
//! | `0..C`       | raw intensity after masking                          |
//! | `C..2C`      | 3x3x3 local mean, edge-replicated, after masking     |
//! | `2C..3C`     | 1 if the channel is shown by the view, else 0        |
//! | `3C`         | bias                                                 |

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::phantom::{rasterize, Case};
use crate::volume::{
    extract_portion, replace_portion, Dims, MultiModalVolume, PortionScheme, SoftMask, ViewConfig, DEFAULT_DICE_EPSILON,
};

pub const FEATURE_LAYOUT: &str = "voxel-logistic-v1";
const CHECKPOINT_MAGIC: &str = "modsel-segmenter";
const CHECKPOINT_VERSION: u32 = 1;
/// Logits are clamped here so predictions stay strictly inside (0, 1).
const LOGIT_LIMIT: f64 = 30.0;

pub fn feature_len(channels: usize) -> usize {
    3 * channels + 1
}

/// Row-major `voxels x (3C + 1)` feature matrix.
#[derive(Clone, Debug)]
pub struct VoxelFeatures {
    dims: Dims,
    width: usize,
    data: Vec<f64>,
}

impl VoxelFeatures {
    /// Features of `vol` as seen through `view`.
    pub fn compute(vol: &MultiModalVolume, view: ViewConfig) -> Result<Self> {
        let masked = vol.masked(view)?;
        let channels = vol.channels();
        let dims = vol.dims();
        let width = feature_len(channels);
        let n = dims.voxels();
        let mut data = vec![0.0; n * width];
        for c in 0..channels {
            let raw: Vec<f64> = masked.channel(c).iter().map(|&v| v as f64).collect();
            let local = box_mean_3(&raw, dims);
            let shown = if view.shows(c) { 1.0 } else { 0.0 };
            for i in 0..n {
                let row = &mut data[i * width..(i + 1) * width];
                row[c] = raw[i];
                row[channels + c] = local[i];
                row[2 * channels + c] = shown;
            }
        }
        for i in 0..n {
            data[i * width + width - 1] = 1.0;
        }
        Ok(VoxelFeatures { dims, width, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.width..(voxel + 1) * self.width]
    }

    pub fn voxels(&self) -> usize {
        self.dims.voxels()
    }
}

/// Mean over the 27-neighborhood with indices clamped to the grid.
fn box_mean_3(values: &[f64], dims: Dims) -> Vec<f64> {
    let (h, w, d) = (dims.height, dims.width, dims.depth);
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut a = vec![0.0; values.len()];
    let mut b = vec![0.0; values.len()];
    // x
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let l = x.saturating_sub(1);
                let r = (x + 1).min(w - 1);
                a[idx(z, y, x)] = (values[idx(z, y, l)] + values[idx(z, y, x)] + values[idx(z, y, r)]) / 3.0;
            }
        }
    }
    // y
    for z in 0..d {
        for y in 0..h {
            let u = y.saturating_sub(1);
            let dn = (y + 1).min(h - 1);
            for x in 0..w {
                b[idx(z, y, x)] = (a[idx(z, u, x)] + a[idx(z, y, x)] + a[idx(z, dn, x)]) / 3.0;
            }
        }
    }
    // z
    for z in 0..d {
        let lo = z.saturating_sub(1);
        let hi = (z + 1).min(d - 1);
        for y in 0..h {
            for x in 0..w {
                a[idx(z, y, x)] = (b[idx(lo, y, x)] + b[idx(z, y, x)] + b[idx(hi, y, x)]) / 3.0;
            }
        }
    }
    a
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegParams {
    channels: usize,
    weights: Vec<f64>,
}

impl SegParams {
    pub fn zeros(channels: usize) -> Self {
        SegParams {
            channels,
            weights: vec![0.0; feature_len(channels)],
        }
    }

    pub fn from_weights(channels: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != feature_len(channels) {
            return Err(Error::Shape(format!(
                "{channels} channels need {} weights, got {}",
                feature_len(channels),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("segmenter weights must be finite".into()));
        }
        Ok(SegParams { channels, weights })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check_volume(&self, vol: &MultiModalVolume) -> Result<()> {
        if vol.channels() != self.channels {
            return Err(Error::Shape(format!(
                "segmenter built for {} channels, volume has {}",
                self.channels,
                vol.channels()
            )));
        }
        Ok(())
    }

    fn logit(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.weights).map(|(f, w)| f * w).sum()
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nlayout {FEATURE_LAYOUT}\nchannels {}\nweights {}\n",
            self.channels,
            self.weights.len()
        );
        for w in &self.weights {
            out.push_str(&format!("{w}\n"));
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("segmenter checkpoint: missing `{key}`")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(Error::Parse(format!(
                    "segmenter checkpoint: expected `{key}`, found {line:?}"
                ))),
            }
        };
        let version = header(CHECKPOINT_MAGIC)?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Parse(format!(
                "segmenter checkpoint version {version} unsupported"
            )));
        }
        let layout = header("layout")?;
        if layout != FEATURE_LAYOUT {
            return Err(Error::Parse(format!(
                "segmenter checkpoint uses feature layout {layout:?}, expected {FEATURE_LAYOUT:?}"
            )));
        }
        let channels: usize = parse_field(&header("channels")?, "channels")?;
        let count: usize = parse_field(&header("weights")?, "weights")?;
        if channels == 0 || count != feature_len(channels) {
            return Err(Error::Parse(format!(
                "segmenter checkpoint declares {count} weights for {channels} channels"
            )));
        }
        let weights = lines
            .map(|l| parse_field::<f64>(l, "weight"))
            .collect::<Result<Vec<_>>>()?;
        if weights.len() != count {
            return Err(Error::Parse(format!(
                "segmenter checkpoint holds {} weights, header says {count}",
                weights.len()
            )));
        }
        SegParams::from_weights(channels, weights).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what} value {s:?}")))
}

#[inline]
fn sigmoid_clamped(z: f64) -> (f64, bool) {
    let saturated = z.abs() > LOGIT_LIMIT;
    let z = z.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    (1.0 / (1.0 + (-z).exp()), saturated)
}

fn predict_features(params: &SegParams, feats: &VoxelFeatures) -> SoftMask {
    let data = (0..feats.voxels())
        .map(|i| sigmoid_clamped(params.logit(feats.row(i))).0)
        .collect();
    SoftMask::new(feats.dims(), data).expect("sigmoid output lies in (0, 1)")
}

/// Per-voxel `sigmoid(w · features)` of `vol` seen through `view`.
pub fn predict(params: &SegParams, vol: &MultiModalVolume, view: ViewConfig) -> Result<SoftMask> {
    params.check_volume(vol)?;
    let feats = VoxelFeatures::compute(vol, view)?;
    Ok(predict_features(params, &feats))
}

/// Soft Dice loss and its exact gradient with respect to the weights.
pub fn loss_and_gradient(
    params: &SegParams,
    vol: &MultiModalVolume,
    view: ViewConfig,
    truth: &SoftMask,
) -> Result<(f64, Vec<f64>)> {
    params.check_volume(vol)?;
    if truth.dims() != vol.dims() {
        return Err(Error::Shape(format!(
            "truth {} does not match volume {}",
            truth.dims(),
            vol.dims()
        )));
    }
    let feats = VoxelFeatures::compute(vol, view)?;
    let n = feats.voxels();
    let mut probs = Vec::with_capacity(n);
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (p, saturated) = sigmoid_clamped(params.logit(feats.row(i)));
        let t = truth.data()[i];
        inter += p * t;
        sum_p += p;
        sum_t += t;
        probs.push((p, saturated));
    }
    let eps = DEFAULT_DICE_EPSILON;
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_t + eps;
    let loss = 1.0 - num / den;

    // dL/dp_i = -(2 t_i den - num) / den^2
    let mut grad = vec![0.0; params.weights.len()];
    let den2 = den * den;
    for (i, &(p, saturated)) in probs.iter().enumerate() {
        if saturated {
            continue;
        }
        let t = truth.data()[i];
        let dl_dp = -(2.0 * t * den - num) / den2;
        let coef = dl_dp * p * (1.0 - p);
        for (g, f) in grad.iter_mut().zip(feats.row(i)) {
            *g += coef * f;
        }
    }
    Ok((loss, grad))
}

pub fn dice_loss_gradient(
    params: &SegParams,
    vol: &MultiModalVolume,
    view: ViewConfig,
    truth: &SoftMask,
) -> Result<Vec<f64>> {
    loss_and_gradient(params, vol, view, truth).map(|(_, g)| g)
}

/// Union of the lesions visible in at least one channel `view` shows.
pub fn oracle_predict(case: &Case, view: ViewConfig) -> SoftMask {
    rasterize(
        case.image.dims(),
        case.lesions.iter().filter(|l| l.visible_under(|c| view.shows(c))),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 50,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegTraining {
    pub params: SegParams,
    /// Mean pre-update loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Fits the segmenter with Adam, drawing a uniformly random view for every
/// case in every epoch.
pub fn train_seg(cases: &[Arc<Case>], cfg: &SegTrainConfig) -> Result<SegTraining> {
    let first = cases
        .first()
        .ok_or_else(|| Error::Config("segmenter training set is empty".into()))?;
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning rate {} invalid", cfg.learning_rate)));
    }
    let channels = first.image.channels();
    let views = ViewConfig::all_views(channels);
    let mut params = SegParams::zeros(channels);
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
        },
        params.weights.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let view = views[rng.random_range(0..views.len())];
            let case = &cases[i];
            let (loss, grad) = loss_and_gradient(&params, &case.image, view, &case.truth)?;
            total += loss;
            if cfg.learning_rate > 0.0 {
                adam.descend(&mut params.weights, &grad);
            }
        }
        epoch_losses.push(total / cases.len() as f64);
    }
    Ok(SegTraining { params, epoch_losses })
}

/// What the environment calls to read a portion of a case.
#[derive(Clone, Debug, PartialEq)]
pub enum Segmenter {
    Trained(SegParams),
    /// Exact lesion-metadata reader, for brute-force tests.
    Oracle,
}

impl Segmenter {
    /// Prediction for portion `p` of `case` under `view`.
    ///
    /// The trained model sees only the portion, so its neighborhood features
    /// clamp at the portion borders.
    pub fn segment_portion(&self, case: &Case, scheme: &PortionScheme, p: usize, view: ViewConfig) -> Result<SoftMask> {
        match self {
            Segmenter::Trained(params) => {
                let part = extract_portion(&case.image, scheme, p, view)?;
                predict(params, &part, view)
            }
            Segmenter::Oracle => {
                view.validate(case.image.channels())?;
                oracle_predict(case, view).portion(scheme, p)
            }
        }
    }

    /// Single-pass whole-volume prediction, assembled from every portion.
    pub fn segment_volume(&self, case: &Case, scheme: &PortionScheme, view: ViewConfig) -> Result<SoftMask> {
        let mut y = SoftMask::zeros(case.image.dims());
        for p in 0..scheme.num_portions() {
            let part = self.segment_portion(case, scheme, p, view)?;
            y = replace_portion(&y, scheme, p, &part)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_case, Lesion, WorldSpec};
    use crate::volume::dice;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_volume(dims: Dims, channels: usize, seed: u64) -> MultiModalVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * dims.voxels())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        MultiModalVolume::new(dims, channels, data).unwrap()
    }

    #[test]
    fn zero_weights_predict_half() {
        let vol = random_volume(Dims::new(4, 4, 2).unwrap(), 2, 1);
        let y = predict(&SegParams::zeros(2), &vol, ViewConfig::All).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bias_saturates() {
        let vol = random_volume(Dims::new(4, 4, 2).unwrap(), 2, 1);
        let mut w = vec![0.0; 7];
        w[6] = 10.0;
        let y = predict(&SegParams::from_weights(2, w).unwrap(), &vol, ViewConfig::All).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.9999 && v < 1.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let vol = random_volume(Dims::new(2, 2, 2).unwrap(), 3, 1);
        assert!(matches!(
            predict(&SegParams::zeros(2), &vol, ViewConfig::All),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn box_mean_of_constant_is_constant() {
        let dims = Dims::new(3, 4, 5).unwrap();
        let out = box_mean_3(&vec![2.5; dims.voxels()], dims);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let dims = Dims::new(3, 4, 5).unwrap();
        let vals: Vec<f64> = (0..dims.voxels()).map(|i| ((i * 37) % 11) as f64).collect();
        let fast = box_mean_3(&vals, dims);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for z in 0..5 {
            for y in 0..3 {
                for x in 0..4 {
                    let mut acc = 0.0;
                    for dz in -1..=1isize {
                        for dy in -1..=1isize {
                            for dx in -1..=1isize {
                                let (zz, yy, xx) = (
                                    clamp(z as isize + dz, 5),
                                    clamp(y as isize + dy, 3),
                                    clamp(x as isize + dx, 4),
                                );
                                acc += vals[(zz * 3 + yy) * 4 + xx];
                            }
                        }
                    }
                    let got = fast[(z * 3 + y) * 4 + x];
                    assert!((got - acc / 27.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn masked_features_are_zero() {
        let vol = random_volume(Dims::new(3, 3, 3).unwrap(), 2, 4);
        let f = VoxelFeatures::compute(&vol, ViewConfig::Single(0)).unwrap();
        for i in 0..f.voxels() {
            let row = f.row(i);
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
            assert_eq!(&row[4..7], &[1.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn gradient_is_finite_on_empty_masks() {
        let dims = Dims::new(3, 3, 2).unwrap();
        let vol = MultiModalVolume::zeros(dims, 2);
        let mut w = vec![0.0; 7];
        w[6] = -25.0;
        let params = SegParams::from_weights(2, w).unwrap();
        let g = dice_loss_gradient(&params, &vol, ViewConfig::All, &SoftMask::zeros(dims)).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn hidden_channel_weights_get_zero_gradient() {
        let dims = Dims::new(4, 4, 3).unwrap();
        let vol = random_volume(dims, 2, 9);
        let truth = SoftMask::new(dims, (0..dims.voxels()).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let params = SegParams::from_weights(2, vec![0.3, -0.2, 0.5, 0.1, 0.2, -0.4, -0.1]).unwrap();
        let g = dice_loss_gradient(&params, &vol, ViewConfig::Single(0), &truth).unwrap();
        // raw, local-mean and indicator slots of channel 1
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[5], 0.0);
        assert!(g[0] != 0.0);
    }

    #[test]
    fn oracle_views() {
        let spec = WorldSpec::desk(0);
        let lesions = vec![
            Lesion {
                center: [1.5, 8.0, 8.0],
                radii: [1.5, 3.0, 3.0],
                visible_in: vec![0],
            },
            Lesion {
                center: [5.5, 20.0, 20.0],
                radii: [1.5, 3.0, 3.0],
                visible_in: vec![1],
            },
        ];
        let case = Case::from_lesions(&spec, "t", lesions, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(oracle_predict(&case, ViewConfig::All), case.truth);
        let only_first = oracle_predict(&case, ViewConfig::Single(0));
        assert!(only_first.sum() > 0.0 && only_first.sum() < case.truth.sum());
        assert_eq!(only_first.get(5, 20, 20), 0.0);

        let empty = Case::from_lesions(&spec, "e", vec![], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for v in ViewConfig::all_views(2) {
            assert_eq!(oracle_predict(&empty, v).sum(), 0.0);
        }
    }

    #[test]
    fn oracle_all_view_is_truth_for_generated_cases() {
        let spec = WorldSpec::desk(17);
        for i in 0..20 {
            let case = generate_case(&spec, i).unwrap();
            assert_eq!(oracle_predict(&case, ViewConfig::All), case.truth);
        }
    }

    fn separable_case() -> Arc<Case> {
        let spec = WorldSpec {
            contrast: vec![6.0, 6.0],
            noise_sd: 0.3,
            lesion_count_range: (2, 2),
            visibility_weights: vec![0.0, 0.0, 1.0],
            ..WorldSpec::desk(3)
        };
        Arc::new(generate_case(&spec, 0).unwrap())
    }

    #[test]
    fn trains_on_separable_case() {
        let case = separable_case();
        let out = train_seg(
            std::slice::from_ref(&case),
            &SegTrainConfig {
                epochs: 300,
                learning_rate: 5e-2,
                ..SegTrainConfig::default()
            },
        )
        .unwrap();
        let y = predict(&out.params, &case.image, ViewConfig::All).unwrap();
        let d = dice(&y, &case.truth, DEFAULT_DICE_EPSILON).unwrap();
        assert!(d > 0.8, "dice {d}");
    }

    #[test]
    fn zero_learning_rate_keeps_initial_params() {
        let out = train_seg(
            &[separable_case()],
            &SegTrainConfig {
                epochs: 3,
                learning_rate: 0.0,
                ..SegTrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.params, SegParams::zeros(2));
    }

    #[test]
    fn training_is_deterministic() {
        let spec = WorldSpec::desk(4);
        let cases: Vec<Arc<Case>> = (0..4).map(|i| Arc::new(generate_case(&spec, i).unwrap())).collect();
        let cfg = SegTrainConfig {
            epochs: 4,
            seed: 99,
            ..SegTrainConfig::default()
        };
        let a = train_seg(&cases, &cfg).unwrap();
        let b = train_seg(&cases, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(train_seg(&[], &cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_layout_check() {
        let params = SegParams::from_weights(2, vec![0.1, -1e-9, 3.5, 0.0, -2.25, 7.0, 1.0 / 3.0]).unwrap();
        let text = params.to_checkpoint();
        assert_eq!(SegParams::from_checkpoint(&text).unwrap(), params);
        let other = text.replace(FEATURE_LAYOUT, "voxel-logistic-v0");
        assert!(SegParams::from_checkpoint(&other).is_err());
        assert!(SegParams::from_checkpoint("").is_err());
        assert!(SegParams::from_checkpoint(&text.replace("weights 7", "weights 8")).is_err());
    }

    proptest! {
        #[test]
        fn prediction_ignores_hidden_channel(seed in 0u64..10_000, w in prop::collection::vec(-2.0f64..2.0, 7)) {
            let dims = Dims::new(3, 4, 3).unwrap();
            let a = random_volume(dims, 2, seed);
            let b_other = random_volume(dims, 2, seed + 1);
            let mut data = a.channel(0).to_vec();
            data.extend_from_slice(b_other.channel(1));
            let b = MultiModalVolume::new(dims, 2, data).unwrap();
            let params = SegParams::from_weights(2, w).unwrap();
            let ya = predict(&params, &a, ViewConfig::Single(0)).unwrap();
            let yb = predict(&params, &b, ViewConfig::Single(0)).unwrap();
            prop_assert_eq!(ya, yb);
        }
    }
}
