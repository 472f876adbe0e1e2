//! Synthetic multi-modal phantoms with per-channel lesion visibility, and the
//! on-disk dataset format.
//!
//! A case is a set of axis-aligned ellipsoidal lesions rendered into `C`
//! channels. Each lesion carries a visibility set: it raises the intensity of
//! exactly the channels in that set, while the label marks every lesion.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, MultiModalVolume, SoftMask};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

const INTENSITY_LIMIT: f64 = 1e4;
const PLACEMENT_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub dims: Dims,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// Depth portions the agent chooses between.
    pub portions: usize,
    /// Inclusive `(min, max)` number of lesions per case.
    pub lesion_count_range: (usize, usize),
    /// Inclusive `(min, max)` semi-axis length in voxels, drawn per axis.
    pub lesion_radius_range: (f64, f64),
    /// One weight per channel for "visible only there", then one for "visible everywhere".
    pub visibility_weights: Vec<f64>,
    /// Additive lesion intensity per channel, before normalization.
    pub contrast: Vec<f64>,
    pub noise_sd: f64,
    pub base_seed: u64,
}

impl WorldSpec {
    /// 32x32x8 two-channel world split into 4 portions of 2 slices.
    pub fn desk(base_seed: u64) -> Self {
        WorldSpec {
            dims: Dims {
                height: 32,
                width: 32,
                depth: 8,
            },
            channels: 2,
            channel_names: vec!["t2".into(), "dw".into()],
            portions: 4,
            lesion_count_range: (1, 3),
            lesion_radius_range: (1.5, 3.5),
            visibility_weights: vec![0.3, 0.3, 0.4],
            contrast: vec![1.5, 1.5],
            noise_sd: 1.0,
            base_seed,
        }
    }

    /// 128x128x32 with 8 portions of 4 slices.
    pub fn full_scale(base_seed: u64) -> Self {
        WorldSpec {
            dims: Dims {
                height: 128,
                width: 128,
                depth: 32,
            },
            portions: 8,
            lesion_radius_range: (3.0, 10.0),
            ..WorldSpec::desk(base_seed)
        }
    }

    pub fn num_views(&self) -> usize {
        self.channels + 1
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        if d.height == 0 || d.width == 0 || d.depth == 0 {
            return Err(Error::Spec(format!("zero-volume dims {d}")));
        }
        if self.channels == 0 {
            return Err(Error::Spec("need at least one channel".into()));
        }
        if self.channel_names.len() != self.channels {
            return Err(Error::Spec(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels
            )));
        }
        if self.portions == 0 || self.portions > d.depth {
            return Err(Error::Spec(format!(
                "{} portions do not fit depth {}",
                self.portions, d.depth
            )));
        }
        let (lo, hi) = self.lesion_count_range;
        if lo > hi {
            return Err(Error::Spec(format!("lesion count range ({lo}, {hi}) inverted")));
        }
        let (rmin, rmax) = self.lesion_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::Spec(format!(
                "lesion radius range ({rmin}, {rmax}) must be positive and ordered"
            )));
        }
        if 2.0 * rmax + 1.0 > d.smallest() as f64 {
            return Err(Error::Spec(format!("lesion radius {rmax} does not fit inside {d}")));
        }
        if self.visibility_weights.len() != self.channels + 1 {
            return Err(Error::Spec(format!(
                "need {} visibility weights, got {}",
                self.channels + 1,
                self.visibility_weights.len()
            )));
        }
        if self.visibility_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Spec("visibility weights must be non-negative".into()));
        }
        let total: f64 = self.visibility_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!("visibility weights sum to {total}, expected 1")));
        }
        if self.contrast.len() != self.channels || self.contrast.iter().any(|c| !c.is_finite()) {
            return Err(Error::Spec(format!("need {} finite contrast values", self.channels)));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Spec(format!("noise_sd {} invalid", self.noise_sd)));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in voxel coordinates `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Channels in which the lesion shows contrast. Never empty.
    pub visible_in: Vec<usize>,
}

impl Lesion {
    #[inline]
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let q = [z as f64, y as f64, x as f64];
        let acc: f64 = q
            .iter()
            .zip(&self.center)
            .zip(&self.radii)
            .map(|((q, c), r)| ((q - c) / r).powi(2))
            .sum();
        acc <= 1.0
    }

    pub fn visible_under(&self, shown: impl Fn(usize) -> bool) -> bool {
        self.visible_in.iter().any(|&c| shown(c))
    }

    fn bounding_box(&self) -> [(f64, f64); 3] {
        std::array::from_fn(|a| (self.center[a] - self.radii[a], self.center[a] + self.radii[a]))
    }

    fn overlaps(&self, other: &Lesion) -> bool {
        let (a, b) = (self.bounding_box(), other.bounding_box());
        (0..3).all(|k| a[k].0 <= b[k].1 && b[k].0 <= a[k].1)
    }
}

/// Binary mask of the union of `lesions`.
pub fn rasterize<'a>(dims: Dims, lesions: impl IntoIterator<Item = &'a Lesion>) -> SoftMask {
    let mut data = vec![0.0; dims.voxels()];
    for lesion in lesions {
        for_each_voxel_in(dims, lesion, |i| data[i] = 1.0);
    }
    SoftMask::new(dims, data).expect("binary mask")
}

fn for_each_voxel_in(dims: Dims, lesion: &Lesion, mut f: impl FnMut(usize)) {
    let extent = [dims.depth, dims.height, dims.width];
    let span: [(usize, usize); 3] = std::array::from_fn(|a| {
        let lo = (lesion.center[a] - lesion.radii[a]).floor().max(0.0) as usize;
        let hi = ((lesion.center[a] + lesion.radii[a]).ceil() as usize).min(extent[a] - 1);
        (lo, hi)
    });
    for z in span[0].0..=span[0].1 {
        for y in span[1].0..=span[1].1 {
            for x in span[2].0..=span[2].1 {
                if lesion.contains(z, y, x) {
                    f((z * dims.height + y) * dims.width + x);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub image: MultiModalVolume,
    pub truth: SoftMask,
    pub lesions: Vec<Lesion>,
}

impl Case {
    /// Renders a case from explicit lesions with the spec's contrast and noise.
    pub fn from_lesions(
        spec: &WorldSpec,
        id: impl Into<String>,
        lesions: Vec<Lesion>,
        rng: &mut impl Rng,
    ) -> Result<Case> {
        spec.validate()?;
        for l in &lesions {
            if l.visible_in.is_empty() || l.visible_in.iter().any(|&c| c >= spec.channels) {
                return Err(Error::Spec(format!(
                    "lesion visibility {:?} invalid for {} channels",
                    l.visible_in, spec.channels
                )));
            }
        }
        let dims = spec.dims;
        let n = dims.voxels();
        let mut raw = vec![0.0f64; spec.channels * n];
        for lesion in &lesions {
            for &c in &lesion.visible_in {
                let channel = &mut raw[c * n..(c + 1) * n];
                for_each_voxel_in(dims, lesion, |i| channel[i] = spec.contrast[c]);
            }
        }
        if spec.noise_sd > 0.0 {
            let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Spec(format!("noise distribution: {e}")))?;
            for v in raw.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        let mut data = Vec::with_capacity(raw.len());
        for channel in raw.chunks(n) {
            data.extend(normalize_channel(channel).into_iter().map(|v| v as f32));
        }
        let truth = rasterize(dims, &lesions);
        Ok(Case {
            id: id.into(),
            image: MultiModalVolume::new(dims, spec.channels, data)?,
            truth,
            lesions,
        })
    }
}

/// Clamps to a finite range, then z-scores with the population standard deviation.
fn normalize_channel(values: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = values
        .iter()
        .map(|v| v.clamp(-INTENSITY_LIMIT, INTENSITY_LIMIT))
        .collect();
    let n = clamped.len() as f64;
    let mean = clamped.iter().sum::<f64>() / n;
    let var = clamped.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    clamped.iter().map(|v| (v - mean) / sd).collect()
}

pub fn case_id(index: u64) -> String {
    format!("case-{index:05}")
}

/// Deterministic in `(spec, index)`: each index reads its own ChaCha stream.
pub fn generate_case(spec: &WorldSpec, index: u64) -> Result<Case> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.base_seed);
    rng.set_stream(index);

    let (lo, hi) = spec.lesion_count_range;
    let count = rng.random_range(lo..=hi);
    let visibility =
        WeightedIndex::new(&spec.visibility_weights).map_err(|e| Error::Spec(format!("visibility weights: {e}")))?;
    let (rmin, rmax) = spec.lesion_radius_range;
    let extent = [spec.dims.depth, spec.dims.height, spec.dims.width];

    let mut lesions: Vec<Lesion> = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = visibility.sample(&mut rng);
        let visible_in = if kind < spec.channels {
            vec![kind]
        } else {
            (0..spec.channels).collect()
        };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(rmin..=rmax));
            let center: [f64; 3] = std::array::from_fn(|a| {
                let hi = extent[a] as f64 - 1.0 - radii[a];
                rng.random_range(radii[a]..=hi.max(radii[a]))
            });
            let candidate = Lesion {
                center,
                radii,
                visible_in: visible_in.clone(),
            };
            if lesions.iter().all(|l| !l.overlaps(&candidate)) {
                lesions.push(candidate);
                break;
            }
        }
    }
    Case::from_lesions(spec, case_id(index), lesions, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seg,
    Rl,
    Holdout,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub seg: Vec<String>,
    pub rl: Vec<String>,
    pub holdout: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Seg => &self.seg,
            Split::Rl => &self.rl,
            Split::Holdout => &self.holdout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub index: u64,
    pub dims: Dims,
    pub channels: usize,
    pub image_file: String,
    pub truth_file: String,
    pub lesions: Vec<Lesion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: WorldSpec,
    pub splits: Splits,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    /// Parses and validates a manifest document.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Parse(format!("unsupported manifest version {}", self.version)));
        }
        self.spec.validate()?;
        let mut known = HashSet::new();
        for entry in &self.cases {
            if !known.insert(entry.id.as_str()) {
                return Err(Error::Parse(format!("duplicate case id {}", entry.id)));
            }
            if entry.dims != self.spec.dims || entry.channels != self.spec.channels {
                return Err(Error::Parse(format!(
                    "case {} has shape {}x{} but the world is {}x{}",
                    entry.id, entry.dims, entry.channels, self.spec.dims, self.spec.channels
                )));
            }
            for file in [&entry.image_file, &entry.truth_file] {
                if file.is_empty() || file.contains(['/', '\\']) || file.starts_with('.') {
                    return Err(Error::Parse(format!(
                        "case {} references unsafe file name {file:?}",
                        entry.id
                    )));
                }
            }
            for l in &entry.lesions {
                let ok = l.visible_in.iter().all(|&c| c < self.spec.channels)
                    && !l.visible_in.is_empty()
                    && l.radii.iter().all(|r| r.is_finite() && *r > 0.0)
                    && l.center.iter().all(|c| c.is_finite());
                if !ok {
                    return Err(Error::Parse(format!("case {} has a malformed lesion", entry.id)));
                }
            }
        }
        let mut assigned = HashSet::new();
        for split in [Split::Seg, Split::Rl, Split::Holdout] {
            for id in self.splits.get(split) {
                if !known.contains(id.as_str()) {
                    return Err(Error::Parse(format!("dangling case reference {id}")));
                }
                if !assigned.insert(id.as_str()) {
                    return Err(Error::Parse(format!("case {id} assigned to two splits")));
                }
            }
        }
        if assigned.len() != known.len() {
            return Err(Error::Parse("some cases belong to no split".into()));
        }
        Ok(())
    }
}

/// A manifest together with its materialized cases, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cases: Vec<Arc<Case>>,
}

impl Dataset {
    pub fn case(&self, id: &str) -> Option<&Arc<Case>> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<Arc<Case>> {
        self.manifest
            .splits
            .get(split)
            .iter()
            .filter_map(|id| self.case(id).cloned())
            .collect()
    }
}

/// Generates `n_seg + n_rl + n_holdout` cases with consecutive indices and
/// assigns them to the splits in that order.
pub fn generate_dataset(spec: &WorldSpec, counts: (usize, usize, usize)) -> Result<Dataset> {
    spec.validate()?;
    let (n_seg, n_rl, n_holdout) = counts;
    let total = (n_seg + n_rl + n_holdout) as u64;
    let cases: Vec<Case> = (0..total)
        .into_par_iter()
        .map(|i| generate_case(spec, i))
        .collect::<Result<_>>()?;

    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let splits = Splits {
        seg: ids[..n_seg].to_vec(),
        rl: ids[n_seg..n_seg + n_rl].to_vec(),
        holdout: ids[n_seg + n_rl..].to_vec(),
    };
    let entries = cases
        .iter()
        .enumerate()
        .map(|(i, c)| CaseEntry {
            id: c.id.clone(),
            index: i as u64,
            dims: spec.dims,
            channels: spec.channels,
            image_file: format!("{}.image.f32", c.id),
            truth_file: format!("{}.truth.f32", c.id),
            lesions: c.lesions.clone(),
        })
        .collect();
    Ok(Dataset {
        manifest: DatasetManifest {
            version: MANIFEST_VERSION,
            spec: spec.clone(),
            splits,
            cases: entries,
        },
        cases: cases.into_iter().map(Arc::new).collect(),
    })
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, case) in dataset.manifest.cases.iter().zip(&dataset.cases) {
        let image = dir.join(&entry.image_file);
        fs::write(&image, case.image.to_le_bytes()).map_err(|e| Error::case_io(&image, &entry.id, e))?;
        let truth = dir.join(&entry.truth_file);
        fs::write(&truth, case.truth.to_le_bytes()).map_err(|e| Error::case_io(&truth, &entry.id, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, dataset.manifest.to_json()).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::from_json(&bytes)?;
    let cases = manifest
        .cases
        .iter()
        .map(|entry| {
            let corrupt = |what: &str, e: Error| Error::Parse(format!("case {}: corrupt {what} file: {e}", entry.id));
            let image_path = dir.join(&entry.image_file);
            let raw = fs::read(&image_path).map_err(|e| Error::case_io(&image_path, &entry.id, e))?;
            let image =
                MultiModalVolume::from_le_bytes(entry.dims, entry.channels, &raw).map_err(|e| corrupt("image", e))?;
            let truth_path = dir.join(&entry.truth_file);
            let raw = fs::read(&truth_path).map_err(|e| Error::case_io(&truth_path, &entry.id, e))?;
            let truth = SoftMask::from_le_bytes(entry.dims, &raw).map_err(|e| corrupt("truth", e))?;
            Ok(Arc::new(Case {
                id: entry.id.clone(),
                image,
                truth,
                lesions: entry.lesions.clone(),
            }))
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, cases })
}
