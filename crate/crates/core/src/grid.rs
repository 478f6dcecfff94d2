//! Dense-grid value types.
//!
//! Every multi-channel grid in this crate is stored row-major with the
//! channels of a pixel interleaved (`HWC`): the value of channel `m` at row
//! `y`, column `x` lives at index `(y * width + x) * channels + m`. Pixel
//! index `p = y * width + x` is used wherever a flat pixel position is
//! needed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the per-pixel simplex check of a [`SoftmaxField`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Height, width and channel count of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Number of scalar values (`pixels * channels`).
    pub const fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn with_channels(&self, channels: usize) -> Self {
        Self::new(self.height, self.width, channels)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidGrid(format!(
                "{what} must have height, width and channels >= 1, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

fn check_len(shape: Shape, len: usize, what: &str) -> Result<()> {
    if shape.len() != len {
        return Err(Error::InvalidGrid(format!(
            "{what} of shape {shape} needs {} values, got {len}",
            shape.len()
        )));
    }
    Ok(())
}

fn check_plane(h: usize, w: usize, len: usize, what: &str) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidGrid(format!(
            "{what} must be at least 1x1, got {h}x{w}"
        )));
    }
    if h * w != len {
        return Err(Error::InvalidGrid(format!(
            "{what} of size {h}x{w} needs {} values, got {len}",
            h * w
        )));
    }
    Ok(())
}

/// A raw multi-channel image with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    shape: Shape,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        shape.validate("image")?;
        check_len(shape, values.len(), "image")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "image value at index {i} is not finite"
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.shape.channels;
        &self.values[p * c..(p + 1) * c]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

/// Per-pixel probability vectors over `M` channels.
///
/// Constructed values lie in `[0, 1]` and sum to one per pixel within
/// [`SIMPLEX_TOLERANCE`]. [`SoftmaxField::from_values_unchecked`] skips that
/// check so losses can be probed off the simplex by finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxField {
    shape: Shape,
    values: Vec<f64>,
}

impl SoftmaxField {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        shape.validate("softmax field")?;
        check_len(shape, values.len(), "softmax field")?;
        for (p, px) in values.chunks_exact(shape.channels).enumerate() {
            if let Some(v) = px.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidGrid(format!(
                    "probability {v} at pixel {p} outside [0, 1]"
                )));
            }
            let sum: f64 = px.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::InvalidGrid(format!(
                    "probabilities at pixel {p} sum to {sum}"
                )));
            }
        }
        Ok(Self { shape, values })
    }

    /// Wraps values without the simplex check. Panics on a length mismatch.
    pub fn from_values_unchecked(shape: Shape, values: Vec<f64>) -> Self {
        assert_eq!(shape.len(), values.len(), "softmax field length mismatch");
        Self { shape, values }
    }

    /// Every pixel equal to `1/M`.
    pub fn uniform(height: usize, width: usize, channels: usize) -> Self {
        let shape = Shape::new(height, width, channels);
        Self {
            shape,
            values: vec![1.0 / channels as f64; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        let c = self.shape.channels;
        &self.values[p * c..(p + 1) * c]
    }

    /// Copies one channel out as a single-channel map.
    pub fn channel(&self, m: usize) -> Vec<f64> {
        assert!(m < self.shape.channels, "channel {m} out of range");
        self.values
            .iter()
            .skip(m)
            .step_by(self.shape.channels)
            .copied()
            .collect()
    }

    /// Index of the largest probability at every pixel (lowest index on ties).
    pub fn argmax(&self) -> Vec<u32> {
        self.values
            .chunks_exact(self.shape.channels)
            .map(|px| {
                let mut best = 0;
                for (m, &v) in px.iter().enumerate() {
                    if v > px[best] {
                        best = m;
                    }
                }
                best as u32
            })
            .collect()
    }
}

/// Per-pixel, per-channel loss gradient with respect to a [`SoftmaxField`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradField {
    shape: Shape,
    values: Vec<f64>,
}

impl GradField {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        shape.validate("gradient field")?;
        check_len(shape, values.len(), "gradient field")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }
}

/// A partition of the pixel grid into regions `0..region_count`.
///
/// Ids are contiguous and every id owns at least one pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    region_count: usize,
}

impl RegionMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        check_plane(height, width, ids.len(), "region map")
            .map_err(|e| Error::InvalidRegionMap(e.to_string()))?;
        let n = ids.iter().copied().max().unwrap_or(0) as usize + 1;
        let mut seen = vec![false; n];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidRegionMap(format!(
                "region id {missing} has no pixels (ids must be contiguous 0..{n})"
            )));
        }
        Ok(Self {
            height,
            width,
            ids,
            region_count: n,
        })
    }

    /// Remaps arbitrary labels onto contiguous ids, preserving label order.
    pub fn from_labels<T: Ord + Copy>(height: usize, width: usize, labels: &[T]) -> Result<Self> {
        check_plane(height, width, labels.len(), "region map")
            .map_err(|e| Error::InvalidRegionMap(e.to_string()))?;
        let mut distinct: Vec<T> = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let ids = labels
            .iter()
            .map(|l| distinct.binary_search(l).expect("label present") as u32)
            .collect();
        Self::new(height, width, ids)
    }

    /// The whole grid as one region.
    pub fn single(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            ids: vec![0; height * width],
            region_count: 1,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.region_count];
        for &id in &self.ids {
            sizes[id as usize] += 1;
        }
        sizes
    }

    /// Region ids ordered by the raster position of their first pixel.
    ///
    /// This order depends only on the partition, not on the id values, so
    /// reductions that follow it are bit-identical under id relabelling.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut seen = vec![false; self.region_count];
        let mut order = Vec::with_capacity(self.region_count);
        for &id in &self.ids {
            let id = id as usize;
            if !seen[id] {
                seen[id] = true;
                order.push(id);
                if order.len() == self.region_count {
                    break;
                }
            }
        }
        order
    }

    pub(crate) fn check_plane_matches(&self, shape: Shape) -> Result<()> {
        if shape.height != self.height || shape.width != self.width {
            return Err(Error::DimensionMismatch(format!(
                "grid is {}x{} but region map is {}x{}",
                shape.height, shape.width, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Per-pixel class labels for the cross-entropy baselines.
///
/// Unlike a [`RegionMap`] the labels need not be contiguous; an image that is
/// entirely foreground is labelled all ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        check_plane(height, width, labels.len(), "class map")
            .map_err(|e| Error::InvalidLabels(e.to_string()))?;
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    /// Paints each region with its class label.
    pub fn from_regions(regions: &RegionMap, class_of_region: &[u32]) -> Result<Self> {
        if class_of_region.len() != regions.region_count() {
            return Err(Error::InvalidLabels(format!(
                "{} class labels for {} regions",
                class_of_region.len(),
                regions.region_count()
            )));
        }
        let labels = regions
            .ids()
            .iter()
            .map(|&id| class_of_region[id as usize])
            .collect();
        Ok(Self {
            height: regions.height(),
            width: regions.width(),
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    /// `1 - label` for every pixel; fails on non-binary labels.
    pub fn flipped(&self) -> Result<Self> {
        if !self.is_binary() {
            return Err(Error::InvalidLabels("flip needs binary labels".into()));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| 1 - l).collect(),
        })
    }

    pub(crate) fn check_plane_matches(&self, shape: Shape) -> Result<()> {
        if shape.height != self.height || shape.width != self.width {
            return Err(Error::DimensionMismatch(format!(
                "grid is {}x{} but label map is {}x{}",
                shape.height, shape.width, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A strictly binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        check_plane(height, width, values.len(), "binary map")?;
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Accepts only `0` and `1`.
    pub fn from_u8(height: usize, width: usize, values: &[u8]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidLabels(format!("binary map value {v}")));
        }
        Self::new(height, width, values.iter().map(|&v| v == 1).collect())
    }

    pub fn from_class_map(labels: &ClassMap) -> Result<Self> {
        if !labels.is_binary() {
            return Err(Error::InvalidLabels(
                "binary map needs labels in {0, 1}".into(),
            ));
        }
        Self::new(
            labels.height(),
            labels.width(),
            labels.labels().iter().map(|&l| l == 1).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_dims(&self, other: &BinaryMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}
