//! Class-agnostic segmentation loss.
//!
//! For a descriptor field `s` and a partition into regions `r_1..r_N` with
//! mean descriptors `ŝ(r_i)`:
//!
//! ```text
//! CAS = Σ_i (α/|r_i|) Σ_{x∈r_i} ‖s(x) − ŝ(r_i)‖²  −  (1−α) Σ_{i≠j} ‖ŝ(r_i) − ŝ(r_j)‖²
//! ```
//!
//! The first sum (the uniformer) pulls each region's descriptors towards
//! their mean; the second (the discriminator) pushes region means apart. The
//! discriminator sums over ordered pairs, so every unordered pair is counted
//! twice.
//!
//! Reductions over regions follow [`RegionMap::canonical_order`], which makes
//! value and gradient bit-identical under any relabelling of the regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GradField, RegionMap, SoftmaxField};
use crate::region::{compute_region_stats, RegionStats};

/// Weight of the uniformer term; the discriminator gets `1 - alpha`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasConfig {
    alpha: f64,
}

impl CasConfig {
    pub const DEFAULT_ALPHA: f64 = 0.1;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for CasConfig {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

/// Closed interval guaranteed to contain the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBounds {
    pub lower: f64,
    pub upper: f64,
}

impl LossBounds {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// The two halves of the loss, already weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CasTerms {
    /// `Σ_i (α/|r_i|) Σ_x ‖s(x) − ŝ(r_i)‖²`
    pub uniformer: f64,
    /// `(1−α) Σ_{i≠j} ‖ŝ(r_i) − ŝ(r_j)‖²`, subtracted from the loss.
    pub discriminator: f64,
}

impl CasTerms {
    pub fn value(&self) -> f64 {
        self.uniformer - self.discriminator
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Both weighted terms of the loss.
pub fn cas_terms(s: &SoftmaxField, r: &RegionMap, cfg: CasConfig) -> Result<CasTerms> {
    let stats = compute_region_stats(s, r)?;
    Ok(terms_from_stats(s, r, &stats, cfg))
}

fn terms_from_stats(s: &SoftmaxField, r: &RegionMap, stats: &RegionStats, cfg: CasConfig) -> CasTerms {
    let m = s.channels();
    let mut spread = vec![0.0; stats.region_count()];
    for (px, &id) in s.values().chunks_exact(m).zip(r.ids()) {
        let id = id as usize;
        spread[id] += squared_distance(px, stats.mean(id));
    }

    let order = r.canonical_order();
    let alpha = cfg.alpha();
    let mut uniformer = 0.0;
    for &i in &order {
        uniformer += alpha / stats.sizes()[i] as f64 * spread[i];
    }
    let mut pairs = 0.0;
    for &i in &order {
        for &j in &order {
            if i != j {
                pairs += squared_distance(stats.mean(i), stats.mean(j));
            }
        }
    }
    CasTerms {
        uniformer,
        discriminator: (1.0 - alpha) * pairs,
    }
}

/// Loss value for one image.
pub fn cas_forward(s: &SoftmaxField, r: &RegionMap, cfg: CasConfig) -> Result<f64> {
    cas_terms(s, r, cfg).map(|t| t.value())
}

/// Gradient of the loss with respect to every entry of `s`.
///
/// For a pixel `y` in region `k`:
///
/// ```text
/// ∂CAS/∂s^m(y) = (2α/|r_k|)(s^m(y) − ŝ^m(r_k)) − (4(1−α)/|r_k|) Σ_{j≠k} (ŝ^m(r_k) − ŝ^m(r_j))
/// ```
///
/// The uniformer's indirect dependence through `ŝ(r_k)` vanishes because the
/// deviations inside a region sum to zero.
pub fn cas_backward(s: &SoftmaxField, r: &RegionMap, cfg: CasConfig) -> Result<GradField> {
    let stats = compute_region_stats(s, r)?;
    Ok(grad_from_stats(s, r, &stats, cfg))
}

/// Value and gradient sharing one region-statistics pass.
pub fn cas_value_and_grad(
    s: &SoftmaxField,
    r: &RegionMap,
    cfg: CasConfig,
) -> Result<(f64, GradField)> {
    let stats = compute_region_stats(s, r)?;
    let value = terms_from_stats(s, r, &stats, cfg).value();
    Ok((value, grad_from_stats(s, r, &stats, cfg)))
}

fn grad_from_stats(s: &SoftmaxField, r: &RegionMap, stats: &RegionStats, cfg: CasConfig) -> GradField {
    let m = s.channels();
    let n = stats.region_count();
    let alpha = cfg.alpha();
    let order = r.canonical_order();

    // push[k] = Σ_{j≠k} (ŝ(r_k) − ŝ(r_j)), pre-scaled by 4(1−α)/|r_k|
    let mut push = vec![0.0; n * m];
    for &k in &order {
        let mk = stats.mean(k);
        let row = &mut push[k * m..(k + 1) * m];
        for &j in &order {
            if j != k {
                for ((acc, a), b) in row.iter_mut().zip(mk).zip(stats.mean(j)) {
                    *acc += a - b;
                }
            }
        }
        let scale = 4.0 * (1.0 - alpha) / stats.sizes()[k] as f64;
        row.iter_mut().for_each(|v| *v *= scale);
    }

    let mut grad = GradField::zeros(s.shape());
    for ((g, px), &id) in grad
        .values_mut()
        .chunks_exact_mut(m)
        .zip(s.values().chunks_exact(m))
        .zip(r.ids())
    {
        let k = id as usize;
        let pull = 2.0 * alpha / stats.sizes()[k] as f64;
        let mean = stats.mean(k);
        let push = &push[k * m..(k + 1) * m];
        for c in 0..m {
            g[c] = pull * (px[c] - mean[c]) - push[c];
        }
    }
    grad
}

/// Interval containing the loss of any valid field with `region_count`
/// regions and `channels` channels.
///
/// The upper end is `α·N·(1 − 1/M)`: the variance of a simplex-valued
/// descriptor over a region is at most `1 − ‖ŝ‖² ≤ 1 − 1/M`. The lower end
/// is `−2·(1−α)·N·(N−1)`: `N(N−1)` ordered pairs, each at most the squared
/// simplex diameter `2`.
pub fn cas_bounds(region_count: usize, cfg: CasConfig, channels: usize) -> LossBounds {
    let n = region_count as f64;
    let alpha = cfg.alpha();
    LossBounds {
        lower: -2.0 * (1.0 - alpha) * n * (n - 1.0),
        upper: alpha * n * (1.0 - 1.0 / channels as f64),
    }
}
