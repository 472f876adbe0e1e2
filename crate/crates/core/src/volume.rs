//! Volumetric grids, Dice scoring, depth portions and channel masking.
//!
//! Image voxels are stored channel-major, then depth, row and column:
//! `((c * D + z) * H + y) * W + x`. Masks use the same layout without the
//! channel axis. Every operation returns a fresh grid; nothing is mutated in
//! place once constructed.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing term used by [`seg_loss`].
pub const DEFAULT_DICE_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, depth: usize) -> Result<Self> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(Error::Shape(format!(
                "dimensions must be positive, got {height}x{width}x{depth}"
            )));
        }
        Ok(Dims { height, width, depth })
    }

    pub fn voxels(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn with_depth(&self, depth: usize) -> Dims {
        Dims { depth, ..*self }
    }

    pub fn smallest(&self) -> usize {
        self.height.min(self.width).min(self.depth)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.depth)
    }
}

/// A stack of co-registered single-modality volumes sharing one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: Dims,
    channels: usize,
    data: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(dims: Dims, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("volume needs at least one channel".into()));
        }
        let expected = channels * dims.voxels();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "expected {expected} values for {channels} channels of {dims}, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite intensity at flat index {i}")));
        }
        Ok(MultiModalVolume { dims, channels, data })
    }

    pub fn zeros(dims: Dims, channels: usize) -> Self {
        MultiModalVolume {
            dims,
            channels,
            data: vec![0.0; channels * dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.dims.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f32 {
        let d = self.dims;
        self.data[((c * d.depth + z) * d.height + y) * d.width + x]
    }

    /// Zero-fills every channel hidden by `view`.
    pub fn masked(&self, view: ViewConfig) -> Result<Self> {
        view.validate(self.channels)?;
        let n = self.dims.voxels();
        let mut data = self.data.clone();
        for c in 0..self.channels {
            if !view.shows(c) {
                data[c * n..(c + 1) * n].fill(0.0);
            }
        }
        Ok(MultiModalVolume {
            dims: self.dims,
            channels: self.channels,
            data,
        })
    }

    /// Little-endian f32 payload in storage order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        f32s_to_le_bytes(&self.data)
    }

    pub fn from_le_bytes(dims: Dims, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = f32s_from_le_bytes(bytes, channels * dims.voxels())?;
        MultiModalVolume::new(dims, channels, data)
    }
}

/// Per-voxel probabilities in `[0, 1]`; ground truth masks hold only 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    dims: Dims,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.voxels() {
            return Err(Error::Shape(format!(
                "mask of {dims} needs {} values, got {}",
                dims.voxels(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Shape(format!(
                "mask value {} at flat index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(SoftMask { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        SoftMask {
            dims,
            data: vec![0.0; dims.voxels()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        let d = self.dims;
        self.data[(z * d.height + y) * d.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies out the slab of slices belonging to portion `p`.
    pub fn portion(&self, scheme: &PortionScheme, p: usize) -> Result<SoftMask> {
        scheme.check_depth(self.dims.depth)?;
        let range = scheme.range(p)?;
        let s = self.dims.slice_len();
        Ok(SoftMask {
            dims: self.dims.with_depth(range.len()),
            data: self.data[range.start * s..range.end * s].to_vec(),
        })
    }

    /// Stored as little-endian f32, the on-disk representation of labels.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let narrowed: Vec<f32> = self.data.iter().map(|&v| v as f32).collect();
        f32s_to_le_bytes(&narrowed)
    }

    pub fn from_le_bytes(dims: Dims, bytes: &[u8]) -> Result<Self> {
        let data = f32s_from_le_bytes(bytes, dims.voxels())?;
        SoftMask::new(dims, data.into_iter().map(f64::from).collect())
    }
}

fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn f32s_from_le_bytes(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::Parse(format!(
            "raw payload holds {} bytes, expected {} ({} f32 values)",
            bytes.len(),
            expected * 4,
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Splits the depth axis into `P` contiguous half-open slabs.
///
/// Slabs have length `D / P`; when `D` is not divisible by `P` the last slab
/// takes the remainder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortionScheme {
    depth: usize,
    bounds: Vec<Range<usize>>,
}

impl PortionScheme {
    pub fn new(depth: usize, num_portions: usize) -> Result<Self> {
        if num_portions == 0 {
            return Err(Error::Config("need at least one portion".into()));
        }
        if num_portions > depth {
            return Err(Error::Config(format!(
                "cannot split depth {depth} into {num_portions} non-empty portions"
            )));
        }
        let base = depth / num_portions;
        let bounds = (0..num_portions)
            .map(|p| {
                let start = p * base;
                let end = if p + 1 == num_portions { depth } else { start + base };
                start..end
            })
            .collect();
        Ok(PortionScheme { depth, bounds })
    }

    pub fn num_portions(&self) -> usize {
        self.bounds.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn bounds(&self) -> &[Range<usize>] {
        &self.bounds
    }

    /// Slice range of portion `p` (zero-based).
    pub fn range(&self, p: usize) -> Result<Range<usize>> {
        self.bounds
            .get(p)
            .cloned()
            .ok_or_else(|| Error::Index(format!("portion {p} out of range for {} portions", self.bounds.len())))
    }

    /// Which portion owns slice `z`.
    pub fn portion_of(&self, z: usize) -> Option<usize> {
        self.bounds.iter().position(|r| r.contains(&z))
    }

    fn check_depth(&self, depth: usize) -> Result<()> {
        if depth != self.depth {
            return Err(Error::Shape(format!(
                "portion scheme covers depth {}, grid has depth {depth}",
                self.depth
            )));
        }
        Ok(())
    }
}

/// Which channels the reader gets to see. `Single` indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewConfig {
    Single(usize),
    All,
}

impl ViewConfig {
    /// Number of views for `channels` channels: one per channel plus all-channels.
    pub fn count(channels: usize) -> usize {
        channels + 1
    }

    /// Views in index order: `Single(0) .. Single(C-1), All`.
    pub fn all_views(channels: usize) -> Vec<ViewConfig> {
        (0..channels)
            .map(ViewConfig::Single)
            .chain(std::iter::once(ViewConfig::All))
            .collect()
    }

    pub fn index(self, channels: usize) -> usize {
        match self {
            ViewConfig::Single(c) => c,
            ViewConfig::All => channels,
        }
    }

    pub fn from_index(m: usize, channels: usize) -> Result<Self> {
        match m {
            m if m < channels => Ok(ViewConfig::Single(m)),
            m if m == channels => Ok(ViewConfig::All),
            _ => Err(Error::Index(format!(
                "view {m} out of range for {} views",
                channels + 1
            ))),
        }
    }

    pub fn shows(self, c: usize) -> bool {
        match self {
            ViewConfig::Single(only) => only == c,
            ViewConfig::All => true,
        }
    }

    pub fn validate(self, channels: usize) -> Result<()> {
        match self {
            ViewConfig::Single(c) if c >= channels => Err(Error::Index(format!(
                "channel {c} out of range for {channels} channels"
            ))),
            _ => Ok(()),
        }
    }
}

fn check_same_dims(a: &SoftMask, b: &SoftMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Shape(format!("mask dims differ: {} vs {}", a.dims, b.dims)));
    }
    Ok(())
}

/// Soft Dice `(2 Σ p·t + ε) / (Σ p + Σ t + ε)`.
///
/// Two empty masks score 1, including at `ε = 0`.
pub fn dice(pred: &SoftMask, truth: &SoftMask, epsilon: f64) -> Result<f64> {
    check_same_dims(pred, truth)?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!(
            "dice smoothing must be finite and non-negative, got {epsilon}"
        )));
    }
    let (mut inter, mut sum_p, mut sum_t) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    let denom = sum_p + sum_t + epsilon;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter + epsilon) / denom)
}

/// `1 - dice(pred, truth, DEFAULT_DICE_EPSILON)`.
pub fn seg_loss(pred: &SoftMask, truth: &SoftMask) -> Result<f64> {
    Ok(1.0 - dice(pred, truth, DEFAULT_DICE_EPSILON)?)
}

/// Slices portion `p` out of `vol` and zero-fills the channels `view` hides.
pub fn extract_portion(
    vol: &MultiModalVolume,
    scheme: &PortionScheme,
    p: usize,
    view: ViewConfig,
) -> Result<MultiModalVolume> {
    scheme.check_depth(vol.dims.depth)?;
    view.validate(vol.channels)?;
    let range = scheme.range(p)?;
    let s = vol.dims.slice_len();
    let per_channel = vol.dims.voxels();
    let out_dims = vol.dims.with_depth(range.len());
    let mut data = Vec::with_capacity(vol.channels * out_dims.voxels());
    for c in 0..vol.channels {
        if view.shows(c) {
            let base = c * per_channel;
            data.extend_from_slice(&vol.data[base + range.start * s..base + range.end * s]);
        } else {
            data.resize(data.len() + out_dims.voxels(), 0.0);
        }
    }
    Ok(MultiModalVolume {
        dims: out_dims,
        channels: vol.channels,
        data,
    })
}

/// Returns a copy of `whole` with portion `p` overwritten by `part`.
pub fn replace_portion(whole: &SoftMask, scheme: &PortionScheme, p: usize, part: &SoftMask) -> Result<SoftMask> {
    scheme.check_depth(whole.dims.depth)?;
    let range = scheme.range(p)?;
    let expected = whole.dims.with_depth(range.len());
    if part.dims != expected {
        return Err(Error::Shape(format!(
            "portion {p} needs a {expected} part, got {}",
            part.dims
        )));
    }
    let s = whole.dims.slice_len();
    let mut data = whole.data.clone();
    data[range.start * s..range.end * s].copy_from_slice(&part.data);
    Ok(SoftMask { dims: whole.dims, data })
}
