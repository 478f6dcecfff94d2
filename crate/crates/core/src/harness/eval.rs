use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{BinaryMap, SoftmaxField};
use crate::harness::config::LossKind;
use crate::harness::train::{predict, EvalItem};
use crate::metrics::{select_salient_channel, MetricsReport};
use crate::nnet::{ModelParams, NetSpec};
use crate::region::compute_region_stats;

/// The channel read as the saliency map. Cross-entropy ties channel 1 to
/// class 1; class-agnostic losses pick the channel by correlation with the
/// held-out ground truth.
pub fn salient_channel(loss: LossKind, params: &ModelParams, spec: &NetSpec, validation: &[EvalItem]) -> Result<usize> {
    if !loss.is_class_agnostic() {
        return Ok(1);
    }
    let outputs = predict(params, spec, validation.iter().map(|v| &v.input))?;
    let masks: Vec<BinaryMap> = validation.iter().map(|v| v.mask.clone()).collect();
    select_salient_channel(&outputs, &masks)
}

/// Output statistics that describe how concentrated and separated the
/// predictions are, independent of any ground-truth classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputStats {
    /// Fraction of pixels whose largest channel probability reaches the
    /// confidence threshold.
    pub confident_fraction: f64,
    /// Mean over images of the squared distance between the two most
    /// separated region means.
    pub region_mean_distance: f64,
    /// Mean over images and regions of the per-pixel squared distance to
    /// the region mean.
    pub within_region_variance: f64,
}

pub fn output_stats(outputs: &[SoftmaxField], items: &[EvalItem], confidence: f64) -> Result<OutputStats> {
    let mut confident = 0usize;
    let mut pixels = 0usize;
    let mut distance = 0.0;
    let mut variance = 0.0;
    for (s, item) in outputs.iter().zip(items) {
        let m = s.channels();
        for p in 0..s.shape().pixels() {
            let max = s.pixel(p).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            confident += usize::from(max >= confidence);
        }
        pixels += s.shape().pixels();

        let stats = compute_region_stats(s, &item.regions)?;
        let n = stats.region_count();
        let mut widest = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let d: f64 = stats
                    .mean(i)
                    .iter()
                    .zip(stats.mean(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                widest = widest.max(d);
            }
        }
        distance += widest;

        let mut spread = vec![0.0; n];
        for (p, &id) in item.regions.ids().iter().enumerate() {
            let mean = stats.mean(id as usize);
            spread[id as usize] += s.pixel(p).iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        debug_assert_eq!(m, stats.channels());
        variance += spread
            .iter()
            .zip(stats.sizes())
            .map(|(v, &size)| v / size as f64)
            .sum::<f64>()
            / n as f64;
    }
    let images = outputs.len().max(1) as f64;
    Ok(OutputStats {
        confident_fraction: confident as f64 / pixels.max(1) as f64,
        region_mean_distance: distance / images,
        within_region_variance: variance / images,
    })
}

/// Per-image metrics averaged over `items`.
pub fn evaluate(params: &ModelParams, spec: &NetSpec, channel: usize, items: &[EvalItem]) -> Result<MetricsReport> {
    let outputs = predict(params, spec, items.iter().map(|v| &v.input))?;
    let reports = outputs
        .iter()
        .zip(items)
        .map(|(s, item)| MetricsReport::evaluate(s, channel, &item.regions, &item.mask))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}
