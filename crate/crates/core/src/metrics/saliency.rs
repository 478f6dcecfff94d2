use crate::error::{Error, Result};
use crate::grid::{BinaryMap, SoftmaxField};

/// The highest usable threshold; keeps an all-ones map from binarizing to
/// all zeros.
pub const MAX_THRESHOLD: f64 = 1.0 - 1e-12;

/// β² used throughout salient-object evaluation.
pub const DEFAULT_BETA_SQ: f64 = 0.3;

/// A single-channel map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || height * width != values.len() {
            return Err(Error::InvalidGrid(format!(
                "saliency map of size {height}x{width} with {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidGrid(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_channel(s: &SoftmaxField, channel: usize) -> Result<Self> {
        if channel >= s.channels() {
            return Err(Error::InvalidArgument(format!(
                "channel {channel} of a {}-channel field",
                s.channels()
            )));
        }
        let shape = s.shape();
        Self::new(shape.height, shape.width, s.channel(channel))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn same_dims(&self, g: &BinaryMap) -> Result<()> {
        if self.height != g.height() || self.width != g.width() {
            return Err(Error::DimensionMismatch(format!(
                "saliency map {}x{} vs ground truth {}x{}",
                self.height,
                self.width,
                g.height(),
                g.width()
            )));
        }
        Ok(())
    }
}

/// `min(2 · mean(S), MAX_THRESHOLD)`.
pub fn adaptive_threshold(s: &SaliencyMap) -> f64 {
    let mean = s.values.iter().sum::<f64>() / s.values.len() as f64;
    (2.0 * mean).min(MAX_THRESHOLD)
}

/// `B = [S > T]` with the adaptive threshold.
pub fn binarize(s: &SaliencyMap) -> BinaryMap {
    let t = adaptive_threshold(s);
    BinaryMap::new(s.height, s.width, s.values.iter().map(|&v| v > t).collect()).expect("same dims")
}

/// Pixel-count precision and recall of `b` against `g`; each is 0 when its
/// denominator is empty.
pub fn precision_recall(b: &BinaryMap, g: &BinaryMap) -> Result<(f64, f64)> {
    b.same_dims(g)?;
    let tp = b.values().iter().zip(g.values()).filter(|(x, y)| **x && **y).count() as f64;
    let predicted = b.count_ones() as f64;
    let actual = g.count_ones() as f64;
    let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
    let recall = if actual > 0.0 { tp / actual } else { 0.0 };
    Ok((precision, recall))
}

/// `(1 + β²) P R / (β² P + R)`, or 0 when the denominator vanishes.
pub fn f_beta(b: &BinaryMap, g: &BinaryMap, beta_sq: f64) -> Result<f64> {
    let (p, r) = precision_recall(b, g)?;
    Ok(f_from_pr(p, r, beta_sq))
}

pub(crate) fn f_from_pr(p: f64, r: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * p + r;
    if denom > 0.0 {
        (1.0 + beta_sq) * p * r / denom
    } else {
        0.0
    }
}

/// Mean absolute difference between the map and the mask.
pub fn mae(s: &SaliencyMap, g: &BinaryMap) -> Result<f64> {
    s.same_dims(g)?;
    let total: f64 = s
        .values
        .iter()
        .zip(g.values())
        .map(|(&v, &t)| (v - if t { 1.0 } else { 0.0 }).abs())
        .sum();
    Ok(total / s.values.len() as f64)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Picks the output channel whose values correlate best (Pearson, pooled
/// over every validation pixel) with the ground-truth masks. Channels with
/// zero variance score −∞; ties go to the lower index.
pub fn select_salient_channel(outputs: &[SoftmaxField], gts: &[BinaryMap]) -> Result<usize> {
    if outputs.is_empty() || outputs.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs for {} ground truths",
            outputs.len(),
            gts.len()
        )));
    }
    let m = outputs[0].channels();
    if m < 2 || outputs.iter().any(|s| s.channels() != m) {
        return Err(Error::InvalidArgument(
            "channel selection needs >= 2 channels, equal across outputs".into(),
        ));
    }
    for (s, g) in outputs.iter().zip(gts) {
        let shape = s.shape();
        if shape.height != g.height() || shape.width != g.width() {
            return Err(Error::DimensionMismatch("output and ground truth sizes differ".into()));
        }
    }
    let truth: Vec<f64> = gts.iter().flat_map(BinaryMap::to_f64).collect();
    let ones = truth.iter().filter(|&&t| t == 1.0).count();
    if ones == 0 || ones == truth.len() {
        return Err(Error::InvalidArgument(
            "ground truths are constant; correlation undefined".into(),
        ));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for c in 0..m {
        let values: Vec<f64> = outputs.iter().flat_map(|s| s.channel(c)).collect();
        let score = pearson(&values, &truth).unwrap_or(f64::NEG_INFINITY);
        if score > best_score {
            best = c;
            best_score = score;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Shape;
    use crate::synth::rng_from_seed;
    use rand::Rng;

    fn constant(v: f64) -> SaliencyMap {
        SaliencyMap::new(3, 3, vec![v; 9]).unwrap()
    }

    #[test]
    fn binarize_degenerate_maps() {
        assert_eq!(binarize(&constant(0.3)).count_ones(), 0);
        assert_eq!(binarize(&constant(1.0)).count_ones(), 9);
        assert!(SaliencyMap::new(0, 0, vec![]).is_err());
        assert!(SaliencyMap::new(1, 1, vec![1.2]).is_err());
    }

    #[test]
    fn binarize_matches_loop() {
        let mut rng = rng_from_seed(1);
        let values: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let s = SaliencyMap::new(8, 8, values.clone()).unwrap();
        let b = binarize(&s);
        let t = 2.0 * values.iter().sum::<f64>() / 64.0;
        for (i, &v) in values.iter().enumerate() {
            assert_eq!(b.values()[i], v > t);
        }
    }

    #[test]
    fn f_beta_examples() {
        let g = BinaryMap::from_u8(2, 2, &[1, 0, 1, 0]).unwrap();
        assert_eq!(f_beta(&g, &g, DEFAULT_BETA_SQ).unwrap(), 1.0);
        let none = BinaryMap::from_u8(2, 2, &[0; 4]).unwrap();
        assert_eq!(f_beta(&none, &g, DEFAULT_BETA_SQ).unwrap(), 0.0);
        let other = BinaryMap::from_u8(1, 4, &[1, 0, 1, 0]).unwrap();
        assert!(f_beta(&other, &g, DEFAULT_BETA_SQ).is_err());
    }

    #[test]
    fn f1_is_symmetric() {
        let a = BinaryMap::from_u8(2, 3, &[1, 1, 0, 0, 1, 0]).unwrap();
        let b = BinaryMap::from_u8(2, 3, &[1, 0, 0, 1, 1, 1]).unwrap();
        assert_eq!(f_beta(&a, &b, 1.0).unwrap(), f_beta(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn mae_examples() {
        let g = BinaryMap::from_u8(3, 3, &[1; 9]).unwrap();
        assert_eq!(mae(&constant(0.0), &g).unwrap(), 1.0);
        assert_eq!(mae(&constant(1.0), &g).unwrap(), 0.0);
    }

    fn field_from_channel1(values: &[f64]) -> SoftmaxField {
        let v = values.iter().flat_map(|&x| [1.0 - x, x]).collect();
        SoftmaxField::new(Shape::new(1, values.len(), 2), v).unwrap()
    }

    #[test]
    fn channel_selection_prefers_positive_correlation() {
        let gt = BinaryMap::from_u8(1, 4, &[0, 1, 1, 0]).unwrap();
        let out = field_from_channel1(&[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(select_salient_channel(&[out], std::slice::from_ref(&gt)).unwrap(), 1);
        let flipped = field_from_channel1(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(select_salient_channel(&[flipped], &[gt]).unwrap(), 0);
    }

    #[test]
    fn channel_selection_edge_cases() {
        let gt = BinaryMap::from_u8(1, 4, &[0, 1, 1, 0]).unwrap();
        // Constant output: both channels undefined, lowest index wins.
        let flat = field_from_channel1(&[0.5; 4]);
        assert_eq!(select_salient_channel(std::slice::from_ref(&flat), &[gt]).unwrap(), 0);
        let constant_gt = BinaryMap::from_u8(1, 4, &[1; 4]).unwrap();
        assert!(select_salient_channel(std::slice::from_ref(&flat), &[constant_gt]).is_err());
        assert!(select_salient_channel(&[flat], &[]).is_err());
    }
}
