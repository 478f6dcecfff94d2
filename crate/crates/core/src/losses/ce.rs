//! Cross-entropy baselines.

use crate::error::{Error, Result};
use crate::grid::{ClassMap, GradField, SoftmaxField};

/// Probabilities are clamped from below before taking the log. Below the
/// floor the loss is flat, so the gradient there is zero.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_labels(s: &SoftmaxField, labels: &ClassMap) -> Result<()> {
    labels.check_plane_matches(s.shape())?;
    let m = s.channels();
    if let Some(l) = labels.labels().iter().find(|&&l| l as usize >= m) {
        return Err(Error::InvalidLabels(format!(
            "label {l} out of range for {m} channels"
        )));
    }
    Ok(())
}

/// Mean pixelwise negative log-likelihood of the labelled channel.
pub fn ce_forward(s: &SoftmaxField, labels: &ClassMap) -> Result<f64> {
    check_labels(s, labels)?;
    let m = s.channels();
    let total: f64 = s
        .values()
        .chunks_exact(m)
        .zip(labels.labels())
        .map(|(px, &l)| -px[l as usize].max(LOG_FLOOR).ln())
        .sum();
    Ok(total / labels.labels().len() as f64)
}

/// `∂/∂s^m(x) = −[m = label(x)] / (P · s^m(x))`, zero where clamped.
pub fn ce_backward(s: &SoftmaxField, labels: &ClassMap) -> Result<GradField> {
    check_labels(s, labels)?;
    let m = s.channels();
    let pixels = labels.labels().len() as f64;
    let mut grad = GradField::zeros(s.shape());
    for ((g, px), &l) in grad
        .values_mut()
        .chunks_exact_mut(m)
        .zip(s.values().chunks_exact(m))
        .zip(labels.labels())
    {
        let p = px[l as usize];
        if p >= LOG_FLOOR {
            g[l as usize] = -1.0 / (pixels * p);
        }
    }
    Ok(grad)
}

/// Result of the class-agnostic cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CaceOutcome {
    pub value: f64,
    /// `true` when the inverted assignment `1 − labels` gave the smaller loss.
    pub flipped: bool,
}

fn check_binary(s: &SoftmaxField, labels: &ClassMap) -> Result<()> {
    if s.channels() != 2 {
        return Err(Error::InvalidArgument(format!(
            "class-agnostic cross-entropy needs 2 channels, got {}",
            s.channels()
        )));
    }
    if !labels.is_binary() {
        return Err(Error::InvalidLabels(
            "class-agnostic cross-entropy needs binary labels".into(),
        ));
    }
    Ok(())
}

/// `min(ce(s, labels), ce(s, 1 − labels))` for binary segmentation. Ties keep
/// the given assignment.
pub fn cace_forward(s: &SoftmaxField, labels: &ClassMap) -> Result<CaceOutcome> {
    check_binary(s, labels)?;
    let direct = ce_forward(s, labels)?;
    let inverted = ce_forward(s, &labels.flipped()?)?;
    Ok(if inverted < direct {
        CaceOutcome {
            value: inverted,
            flipped: true,
        }
    } else {
        CaceOutcome {
            value: direct,
            flipped: false,
        }
    })
}

/// Gradient of the winning branch of [`cace_forward`].
pub fn cace_backward(s: &SoftmaxField, labels: &ClassMap) -> Result<(CaceOutcome, GradField)> {
    let outcome = cace_forward(s, labels)?;
    let grad = if outcome.flipped {
        ce_backward(s, &labels.flipped()?)?
    } else {
        ce_backward(s, labels)?
    };
    Ok((outcome, grad))
}
